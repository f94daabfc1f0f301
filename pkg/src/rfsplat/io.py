"""File formats: spectrum tensors, dataset manifests, state files, previews.

The spectrum tensor format ("RFSP") preserves full dynamic range: magic
"RFSP", version u16, width/height/channels u32 (little-endian), then
row-major float32 planes per channel, then a length-prefixed UTF-8 JSON
metadata block. Every writer has a reader and write -> read -> write is
byte-identical. Dataset manifests record a sha256 per tensor file, verified
on load. State files are zip archives of .npy entries written with fixed
timestamps so identical runs produce identical bytes (np.load reads them).
"""

from __future__ import annotations

import hashlib
import io as _io
import json
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib import format as npfmt
from PIL import Image

from .csi import SpatialSpectrum
from .geometry import Pose, ProjectionModel, ScanGrid

RFSP_MAGIC = b"RFSP"
RFSP_VERSION = 1


class atomic_path:
    """Write to <path>.tmp and rename into place on success."""

    def __init__(self, path):
        self.path = Path(path)
        self.tmp = self.path.with_name(self.path.name + ".tmp")

    def __enter__(self):
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.tmp.replace(self.path)
        elif self.tmp.exists():
            self.tmp.unlink()
        return False


def _meta_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_rfsp(path, planes: np.ndarray, meta: dict) -> None:
    """planes (C, H, W) float; meta must be JSON-serializable."""
    planes = np.asarray(planes)
    if planes.ndim != 3:
        raise ValueError("planes must be (channels, height, width)")
    c, h, w = planes.shape
    blob = _meta_json(meta)
    with open(path, "wb") as fh:
        fh.write(RFSP_MAGIC)
        fh.write(struct.pack("<HIII", RFSP_VERSION, w, h, c))
        fh.write(planes.astype("<f4").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_rfsp(path):
    """Returns (planes (C, H, W) float64, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RFSP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, w, h, c = struct.unpack("<HIII", fh.read(14))
        if version != RFSP_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        planes = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4").reshape(c, h, w)
        (blob_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(blob_len).decode("utf-8"))
    return planes.astype(np.float64), meta


def spectrum_to_rfsp(path, spec: SpatialSpectrum) -> None:
    meta = dict(spec.meta)
    meta["channel_names"] = list(spec.channel_names)
    meta["projection"] = spec.grid.proj.to_dict()
    write_rfsp(path, spec.planes, meta)


def spectrum_from_rfsp(path) -> SpatialSpectrum:
    planes, meta = read_rfsp(path)
    proj = ProjectionModel.from_dict(meta.pop("projection"))
    names = tuple(meta.pop("channel_names"))
    grid = ScanGrid(proj, planes.shape[2], planes.shape[1])
    return SpatialSpectrum(grid=grid, planes=planes, channel_names=names, meta=meta)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- deterministic array archives -------------------------------------------


def save_arrays(path, arrays: dict) -> None:
    """Zip of .npy entries with frozen timestamps; np.load-compatible."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = _io.BytesIO()
            npfmt.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


# --- train-state persistence --------------------------------------------------


def save_train_state(path, state) -> None:
    arrays = {
        "iteration": np.array(state.iteration, dtype=np.int64),
        "adam_t": np.array(state.adam_t, dtype=np.int64),
        "grad_accum": state.grad_accum,
        "grad_denom": state.grad_denom,
        "max_radii": state.max_radii,
        "rng_state": np.frombuffer(
            json.dumps(state.rng.bit_generator.state, sort_keys=True).encode(), dtype=np.uint8
        ),
    }
    for name in state.adam_m:
        arrays[f"adam_m__{name}"] = state.adam_m[name]
        arrays[f"adam_v__{name}"] = state.adam_v[name]
    save_arrays(path, arrays)


def load_train_state(path):
    from .train import TrainState

    arrays = load_arrays(path)
    state = TrainState()
    state.iteration = int(arrays["iteration"])
    state.adam_t = int(arrays["adam_t"])
    state.grad_accum = arrays["grad_accum"].astype(np.float64)
    state.grad_denom = arrays["grad_denom"].astype(np.float64)
    state.max_radii = arrays["max_radii"].astype(np.float64)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(arrays["rng_state"].tobytes().decode())
    state.rng = rng
    for key, arr in arrays.items():
        if key.startswith("adam_m__"):
            state.adam_m[key[len("adam_m__"):]] = arr.astype(np.float64)
        elif key.startswith("adam_v__"):
            state.adam_v[key[len("adam_v__"):]] = arr.astype(np.float64)
    return state


# --- PNG previews ---------------------------------------------------------------

# polynomial fit of the "turbo" rainbow colormap
_TURBO_R = (34.61, 1172.33, -10793.56, 33300.12, -38394.49, 14825.05)
_TURBO_G = (23.31, 557.33, 1225.33, -3574.96, 1073.77, 707.56)
_TURBO_B = (27.2, 3211.1, -15327.97, 27814.0, -22569.18, 6838.66)


def _poly(v, coeffs):
    out = np.zeros_like(v)
    for c in reversed(coeffs):
        out = out * v + c
    return out


def colormap_turbo(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to (H, W, 3) uint8 with a fixed rainbow LUT."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([_poly(v, _TURBO_R), _poly(v, _TURBO_G), _poly(v, _TURBO_B)], axis=-1)
    return np.clip(rgb, 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray, colormap: bool = False) -> None:
    """(H, W) with colormap, or (H, W, 3) in [0, 1] as plain RGB."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        arr = colormap_turbo(img) if colormap else np.clip(img * 255, 0, 255).astype(np.uint8)
    else:
        arr = np.clip(img * 255, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def spectrum_previews(spec: SpatialSpectrum, stem: Path) -> list:
    paths = []
    for i, name in enumerate(spec.channel_names):
        p = Path(f"{stem}_{name}.png")
        save_png(p, spec.planes[i], colormap=True)
        paths.append(p)
    return paths


# --- dataset on disk -------------------------------------------------------------


@dataclass
class DatasetEntry:
    id: int
    pose: Pose
    visual: str
    spectrum: str


class Dataset:
    """A simulated pose set with visual and RF targets plus the split."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(manifest_path)
        self.manifest = json.loads(manifest_path.read_text())
        m = self.manifest
        self.proj = ProjectionModel.from_dict(m["grid"]["projection"])
        self.width = int(m["grid"]["width"])
        self.height = int(m["grid"]["height"])
        self.grid = ScanGrid(self.proj, self.width, self.height)
        self.meta = m["meta"]
        self.train_ids = list(m["split"]["train"])
        self.test_ids = list(m["split"]["test"])
        self.entries = {
            int(k): DatasetEntry(
                id=int(k),
                pose=Pose.from_dict(v["pose"]),
                visual=v["visual"],
                spectrum=v["spectrum"],
            )
            for k, v in m["entries"].items()
        }
        self._hashes = {
            int(k): (v["visual_sha256"], v["spectrum_sha256"])
            for k, v in m["entries"].items()
        }

    def _checked(self, pose_id: int, which: int) -> Path:
        e = self.entries[pose_id]
        rel = (e.visual, e.spectrum)[which]
        path = self.root / rel
        expect = self._hashes[pose_id][which]
        actual = sha256_file(path)
        if actual != expect:
            raise ValueError(
                f"{path} content hash {actual[:12]}... does not match manifest"
            )
        return path

    def load_visual(self, pose_id: int) -> np.ndarray:
        planes, _ = read_rfsp(self._checked(pose_id, 0))
        return np.transpose(planes, (1, 2, 0))  # (H, W, 3)

    def load_spectrum(self, pose_id: int) -> SpatialSpectrum:
        return spectrum_from_rfsp(self._checked(pose_id, 1))

    def pose(self, pose_id: int) -> Pose:
        return self.entries[pose_id].pose


def write_manifest(root: Path, manifest: dict) -> None:
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
