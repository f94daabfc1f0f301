"""Gaussian primitive storage and the PLY checkpoint format.

The cloud keeps structure-of-arrays storage (float64) for speed; the
Gaussian dataclass is the single-splat view used for construction and tests.
Learnable fields follow the usual splatting parametrization: position, unit
quaternion, log scales, opacity logit, and per-channel SH coefficients.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .sh import N_COEFFS


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance3d(q, s) -> np.ndarray:
    """3x3 covariance R diag(s^2) R^T of one splat (unit q, positive s)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    q = q / np.linalg.norm(q)
    s = np.asarray(s, dtype=np.float64).reshape(3)
    r = quats_to_matrices(q[None])[0]
    return (r * s**2) @ r.T


def covariance3d_batch(quats, scales) -> np.ndarray:
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    r = quats_to_matrices(quats / norm)
    return np.einsum("nij,nj,nkj->nik", r, scales**2, r)


@dataclass
class Gaussian:
    """One splat; scales are exp(log_scale), opacity sigmoid(opacity_logit)."""

    mean: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (C, K) per-channel coefficients

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self):
        return covariance3d(self.rotation, self.scale)


@dataclass
class GaussianCloud:
    """Structure-of-arrays splat collection for one scene."""

    means: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4), kept unit-norm
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, C, K)
    channel_names: tuple = ("r", "g", "b")
    scene_extent: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.quaternions = np.atleast_2d(np.asarray(self.quaternions, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3:
            raise ValueError("sh must be (N, channels, coeffs)")
        if self.sh.shape[2] > N_COEFFS:
            raise ValueError(f"at most {N_COEFFS} SH coefficients supported")
        if len(self.channel_names) != self.sh.shape[1]:
            raise ValueError("channel_names length must match sh channel axis")

    @property
    def n(self) -> int:
        return self.means.shape[0]

    @property
    def n_channels(self) -> int:
        return self.sh.shape[1]

    @property
    def n_coeffs(self) -> int:
        return self.sh.shape[2]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalize_rotations(self) -> None:
        self.quaternions /= np.linalg.norm(self.quaternions, axis=1, keepdims=True)

    def covariances(self) -> np.ndarray:
        return covariance3d_batch(self.quaternions, self.scales)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            rotation=self.quaternions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians, channel_names=None, scene_extent=1.0):
        sh = np.stack([np.asarray(g.sh, dtype=np.float64) for g in gaussians])
        if channel_names is None:
            channel_names = tuple(f"ch{i}" for i in range(sh.shape[1]))
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            quaternions=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=sh,
            channel_names=tuple(channel_names),
            scene_extent=scene_extent,
        )

    def select(self, mask_or_idx) -> "GaussianCloud":
        return GaussianCloud(
            means=self.means[mask_or_idx].copy(),
            quaternions=self.quaternions[mask_or_idx].copy(),
            log_scales=self.log_scales[mask_or_idx].copy(),
            opacity_logits=self.opacity_logits[mask_or_idx].copy(),
            sh=self.sh[mask_or_idx].copy(),
            channel_names=self.channel_names,
            scene_extent=self.scene_extent,
            meta=dict(self.meta),
        )

    def copy(self) -> "GaussianCloud":
        return self.select(slice(None))

    def geometry_bytes(self) -> bytes:
        """Serialized geometry fields only (positions, rotations, scales)."""
        buf = io.BytesIO()
        buf.write(self.means.tobytes())
        buf.write(self.quaternions.tobytes())
        buf.write(self.log_scales.tobytes())
        return buf.getvalue()


def random_cloud(
    rng: np.random.Generator,
    n: int,
    bounds_min,
    bounds_max,
    channel_names=("r", "g", "b"),
    n_coeffs: int = N_COEFFS,
    scale_frac: float = 0.01,
    init_opacity: float = 0.1,
) -> GaussianCloud:
    """Uniform random initialization inside the scene bounds.

    Isotropic splats at scene_extent * scale_frac, DC-only coefficients drawn
    so initial channel values are uniform in [0, 1].
    """
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    extent = 0.5 * float(np.linalg.norm(bounds_max - bounds_min))
    means = rng.uniform(bounds_min, bounds_max, size=(n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    log_scales = np.full((n, 3), np.log(max(extent * scale_frac, 1e-6)))
    c = len(channel_names)
    sh = np.zeros((n, c, n_coeffs))
    from .sh import C0

    sh[:, :, 0] = rng.uniform(0.0, 1.0, size=(n, c)) / C0
    return GaussianCloud(
        means=means,
        quaternions=quats,
        log_scales=log_scales,
        opacity_logits=np.full(n, float(logit(init_opacity))),
        sh=sh,
        channel_names=tuple(channel_names),
        scene_extent=extent,
    )


# --- PLY checkpoint format ------------------------------------------------
#
# binary_little_endian float32 vertex properties, names following the common
# splatting layout so external viewers can read the geometry:
#   x, y, z, opacity, scale_0..2, rot_0..3, f_dc_0..{C-1}, f_rest_*
# f_rest is channel-major: channel c, coefficient k>=1 lands at
# f_rest_{c*(K-1) + (k-1)}. Channel names and scene metadata travel in
# comment lines.


def save_ply(cloud: GaussianCloud, path) -> None:
    n, c, k = cloud.n, cloud.n_channels, cloud.n_coeffs
    props = ["x", "y", "z", "opacity"]
    props += [f"scale_{i}" for i in range(3)]
    props += [f"rot_{i}" for i in range(4)]
    props += [f"f_dc_{i}" for i in range(c)]
    props += [f"f_rest_{i}" for i in range(c * (k - 1))]

    header = ["ply", "format binary_little_endian 1.0"]
    header.append("comment rfsplat_channels " + ",".join(cloud.channel_names))
    header.append(
        "comment rfsplat_meta "
        + json.dumps(
            {"scene_extent": cloud.scene_extent, "n_coeffs": k, **cloud.meta},
            sort_keys=True,
        )
    )
    header.append(f"element vertex {n}")
    header += [f"property float {p}" for p in props]
    header.append("end_header")

    dc = cloud.sh[:, :, 0]  # (N, C)
    rest = cloud.sh[:, :, 1:].reshape(n, c * (k - 1))  # channel-major
    data = np.concatenate(
        [
            cloud.means,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.quaternions,
            dc,
            rest,
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_ply(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n") :]

    n = 0
    props = []
    channel_names = None
    meta = {}
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
        elif line.startswith("property"):
            raise ValueError("only float properties are supported")
        elif line.startswith("comment rfsplat_channels "):
            channel_names = tuple(line.split(" ", 2)[2].split(","))
        elif line.startswith("comment rfsplat_meta "):
            meta = json.loads(line.split(" ", 2)[2])

    data = np.frombuffer(body, dtype="<f4", count=n * len(props)).reshape(n, len(props))
    col = {p: i for i, p in enumerate(props)}
    c = sum(1 for p in props if p.startswith("f_dc_"))
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    k = meta.get("n_coeffs", n_rest // c + 1 if c else 1)
    if channel_names is None:
        channel_names = tuple(f"ch{i}" for i in range(c))

    sh = np.zeros((n, c, k))
    for ci in range(c):
        sh[:, ci, 0] = data[:, col[f"f_dc_{ci}"]]
        for kk in range(1, k):
            sh[:, ci, kk] = data[:, col[f"f_rest_{ci * (k - 1) + kk - 1}"]]
    scene_extent = float(meta.pop("scene_extent", 1.0))
    meta.pop("n_coeffs", None)
    return GaussianCloud(
        means=data[:, [col["x"], col["y"], col["z"]]].astype(np.float64),
        quaternions=data[:, [col[f"rot_{i}"] for i in range(4)]].astype(np.float64),
        log_scales=data[:, [col[f"scale_{i}"] for i in range(3)]].astype(np.float64),
        opacity_logits=data[:, col["opacity"]].astype(np.float64),
        sh=sh,
        channel_names=channel_names,
        scene_extent=scene_extent,
        meta=meta,
    )
