"""Static environment description and the raycast renderer for visual targets.

A scene is a set of planar quad facets with reflection/albedo materials, a
fixed transmitter pose, and an axis-aligned bounding box. Facets double as
radio reflectors (see :mod:`rfsplat.channel`) and as visible geometry for the
stage-1 visual training images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, ProjectionModel

COPLANAR_TOL = 1e-9

# fixed directional light for the Lambertian shading (unit vector, world frame)
LIGHT_DIR = np.array([0.3563483225498992, 0.2672612419124244, 0.8956086519811581])
AMBIENT = 0.25


@dataclass(frozen=True)
class Facet:
    """Planar quad reflector: 4 ordered coplanar corners plus materials."""

    corners: np.ndarray  # (4, 3) meters
    reflection_coeff: float  # amplitude reflection factor in [0, 1]
    albedo: np.ndarray  # (3,) visual RGB in [0, 1]

    def __post_init__(self):
        corners = np.asarray(self.corners, dtype=np.float64).reshape(4, 3)
        object.__setattr__(self, "corners", corners)
        object.__setattr__(
            self, "albedo", np.asarray(self.albedo, dtype=np.float64).reshape(3)
        )
        e1 = corners[1] - corners[0]
        e2 = corners[2] - corners[0]
        n = np.cross(e1, e2)
        area2 = np.linalg.norm(n)
        if area2 <= 0.0:
            raise ValueError("degenerate facet: zero area")
        n = n / area2
        off_plane = abs(np.dot(corners[3] - corners[0], n))
        if off_plane > COPLANAR_TOL:
            raise ValueError(
                f"facet corners not coplanar: corner 3 is {off_plane:.3e} m off plane"
            )
        if not (0.0 <= self.reflection_coeff <= 1.0):
            raise ValueError("reflection_coeff must lie in [0, 1]")
        if np.any(self.albedo < 0.0) or np.any(self.albedo > 1.0):
            raise ValueError("albedo components must lie in [0, 1]")
        object.__setattr__(self, "_normal", n)

    @property
    def normal(self) -> np.ndarray:
        return self._normal

    @property
    def triangles(self) -> np.ndarray:
        """(2, 3, 3) triangle split of the quad (0,1,2) and (0,2,3)."""
        c = self.corners
        return np.stack([c[[0, 1, 2]], c[[0, 2, 3]]])

    def to_dict(self):
        return {
            "corners": self.corners.tolist(),
            "reflection_coeff": self.reflection_coeff,
            "albedo": self.albedo.tolist(),
        }


@dataclass(frozen=True)
class SceneDescription:
    facets: tuple
    tx: Pose
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    carrier_frequency: float  # Hz

    def __post_init__(self):
        object.__setattr__(
            self, "bounds_min", np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self, "bounds_max", np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        )
        if self.carrier_frequency <= 0:
            raise ValueError("carrier_frequency must be positive")
        if np.any(self.bounds_max <= self.bounds_min):
            raise ValueError("bounds box must have positive extent")
        for i, f in enumerate(self.facets):
            lo = f.corners.min(axis=0)
            hi = f.corners.max(axis=0)
            if np.any(lo < self.bounds_min - 1e-9) or np.any(hi > self.bounds_max + 1e-9):
                raise ValueError(f"facet {i} lies outside the scene bounds")

    @property
    def wavelength(self) -> float:
        from .channel import SPEED_OF_LIGHT

        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def extent(self) -> float:
        """Half-diagonal of the bounding box; the scene scale used by training."""
        return 0.5 * float(np.linalg.norm(self.bounds_max - self.bounds_min))

    def contains(self, point, margin=0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(
            np.all(p >= self.bounds_min + margin) and np.all(p <= self.bounds_max - margin)
        )

    def to_dict(self):
        return {
            "carrier_frequency_hz": self.carrier_frequency,
            "bounds": {"min": self.bounds_min.tolist(), "max": self.bounds_max.tolist()},
            "tx": self.tx.to_dict(),
            "facets": [f.to_dict() for f in self.facets],
        }


def scene_from_dict(d) -> SceneDescription:
    try:
        facets = tuple(
            Facet(
                np.array(f["corners"]),
                float(f["reflection_coeff"]),
                np.array(f.get("albedo", [0.5, 0.5, 0.5])),
            )
            for f in d["facets"]
        )
        tx = Pose.from_dict(d["tx"])
        bounds = d["bounds"]
        return SceneDescription(
            facets=facets,
            tx=tx,
            bounds_min=np.array(bounds["min"]),
            bounds_max=np.array(bounds["max"]),
            carrier_frequency=float(d["carrier_frequency_hz"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"scene file missing or malformed field: {exc}") from exc


def load_scene(path) -> SceneDescription:
    """Load and validate a JSON scene file (see README for the schema)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"scene file {path} is not valid JSON: {exc}") from exc
    return scene_from_dict(d)


def save_scene(scene: SceneDescription, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True))


def lobby_lite() -> SceneDescription:
    """The bundled 5-facet example scene (14 x 15 x 4 m lobby shell)."""
    from importlib.resources import files

    d = json.loads(files("rfsplat.data").joinpath("lobby_lite.json").read_text())
    return scene_from_dict(d)


def _ray_quad_hits(origins, dirs, facet: Facet):
    """Vectorized ray/quad intersection via the two-triangle split.

    Returns hit distance t per ray (inf where missed). Hits behind the origin
    (t <= 0) are discarded.
    """
    t_best = np.full(origins.shape[0], np.inf)
    for tri in facet.triangles:
        v0, v1, v2 = tri
        e1 = v1 - v0
        e2 = v2 - v0
        p = np.cross(dirs, e2)
        det = p @ e1
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origins - v0
        u = np.einsum("ij,ij->i", s, p) * inv_det
        q = np.cross(s, e1)
        v = np.einsum("ij,ij->i", dirs, q) * inv_det
        t = (q @ e2) * inv_det
        hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12) & (t > 1e-12)
        t_best = np.where(hit & (t < t_best), t, t_best)
    return t_best


def render_visual(
    scene: SceneDescription, pose: Pose, proj: ProjectionModel, width: int, height: int
) -> np.ndarray:
    """Lambertian raycast of the scene facets; returns (H, W, 3) in [0, 1].

    Nearest facet wins per pixel; background is zero. Shading uses one fixed
    directional light plus an ambient floor so every visible facet reads with
    consistent geometry cues regardless of orientation.
    """
    if not scene.contains(pose.position):
        raise ValueError("camera pose lies outside the scene bounds")
    dirs_local = proj.pixel_directions(width, height).reshape(-1, 3)
    dirs = dirs_local @ pose.rotation.T
    origins = np.broadcast_to(pose.position, dirs.shape).copy()

    depth = np.full(dirs.shape[0], np.inf)
    color = np.zeros((dirs.shape[0], 3))
    for facet in scene.facets:
        t = _ray_quad_hits(origins, dirs, facet)
        closer = t < depth
        if not np.any(closer):
            continue
        shade = AMBIENT + (1.0 - AMBIENT) * abs(float(facet.normal @ LIGHT_DIR))
        color[closer] = facet.albedo * shade
        depth[closer] = t[closer]
    return color.reshape(height, width, 3)


def render_depth(
    scene: SceneDescription, pose: Pose, proj: ProjectionModel, width: int, height: int
) -> np.ndarray:
    """Per-pixel hit distance in meters (inf where no facet is hit)."""
    if not scene.contains(pose.position):
        raise ValueError("camera pose lies outside the scene bounds")
    dirs_local = proj.pixel_directions(width, height).reshape(-1, 3)
    dirs = dirs_local @ pose.rotation.T
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    depth = np.full(dirs.shape[0], np.inf)
    for facet in scene.facets:
        t = _ray_quad_hits(origins, dirs, facet)
        depth = np.minimum(depth, t)
    return depth.reshape(height, width)
