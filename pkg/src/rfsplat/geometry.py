"""Shared geometry primitives: quaternions, poses, projection models, scan grids.

Conventions used across the package:
  * world frame is right-handed, z up; all lengths in meters, angles in radians
  * a Pose quaternion (w, x, y, z) rotates local/array/camera frame into world
  * camera/array local frame: x right, y down, z = boresight (view direction)
  * directions are unit vectors; (zenith, azimuth) with zenith in [0, pi]
    measured from local +z and azimuth in [0, 2*pi) from +x toward +y
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_is_unit(q, tol=QUAT_NORM_TOL):
    return abs(np.linalg.norm(np.asarray(q, dtype=np.float64)) - 1.0) <= tol


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (w, x, y, z), local -> world."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def angles_to_direction(zenith, azimuth):
    """Unit vector(s) for (zenith, azimuth); supports broadcasting."""
    zenith = np.asarray(zenith, dtype=np.float64)
    azimuth = np.asarray(azimuth, dtype=np.float64)
    st = np.sin(zenith)
    return np.stack(
        [st * np.cos(azimuth), st * np.sin(azimuth), np.cos(zenith)], axis=-1
    )


def direction_to_angles(v):
    """(zenith, azimuth) of unit vector(s) v, azimuth wrapped to [0, 2*pi)."""
    v = np.asarray(v, dtype=np.float64)
    zenith = np.arccos(np.clip(v[..., 2], -1.0, 1.0))
    azimuth = np.mod(np.arctan2(v[..., 1], v[..., 0]), 2.0 * np.pi)
    return zenith, azimuth


def great_circle_angle(zen_a, az_a, zen_b, az_b):
    """Angle between two directions given as (zenith, azimuth) pairs."""
    ua = angles_to_direction(zen_a, az_a)
    ub = angles_to_direction(zen_b, az_b)
    return np.arccos(np.clip(np.sum(ua * ub, axis=-1), -1.0, 1.0))


@dataclass(frozen=True)
class Pose:
    """Rigid placement: position in meters plus a unit orientation quaternion."""

    position: np.ndarray
    quaternion: np.ndarray  # (w, x, y, z), local -> world

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float64).reshape(3)
        )
        q = np.asarray(self.quaternion, dtype=np.float64).reshape(4)
        if not quat_is_unit(q):
            raise ValueError(
                f"pose quaternion norm {np.linalg.norm(q):.12f} not unit within {QUAT_NORM_TOL}"
            )
        object.__setattr__(self, "quaternion", q)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def to_dict(self):
        return {"position": self.position.tolist(), "quaternion": self.quaternion.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["position"]), np.array(d["quaternion"]))


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose whose local +z points from position toward target, y down-ish."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("look_at target coincides with position")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:  # looking straight up/down: pick an arbitrary right
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)  # columns = local axes in world
    return Pose(position, quat_from_matrix(rot))


def quat_from_matrix(m):
    """Unit quaternion (w, x, y, z) for a proper rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


@dataclass(frozen=True)
class ProjectionModel:
    """Direction <-> pixel mapping shared by visual and RF imagery.

    kind "pinhole" uses fov_x/fov_y (radians, each in (0, pi)); kind
    "equirectangular" maps the full sphere (azimuth across, zenith down).
    """

    kind: str = "pinhole"
    fov_x: float = np.deg2rad(90.0)
    fov_y: float = np.deg2rad(73.0)

    def __post_init__(self):
        if self.kind not in ("pinhole", "equirectangular"):
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.kind == "pinhole" and not (
            0.0 < self.fov_x < np.pi and 0.0 < self.fov_y < np.pi
        ):
            raise ValueError("pinhole fov must lie in (0, pi)")

    def intrinsics(self, width, height):
        """(fx, fy, cx, cy) for a pinhole image of the given size."""
        if self.kind != "pinhole":
            raise ValueError("intrinsics only defined for pinhole projection")
        fx = (width / 2.0) / np.tan(self.fov_x / 2.0)
        fy = (height / 2.0) / np.tan(self.fov_y / 2.0)
        return fx, fy, width / 2.0, height / 2.0

    def pixel_directions(self, width, height):
        """(H, W, 3) unit direction per pixel center, in the local frame."""
        if self.kind == "pinhole":
            fx, fy, cx, cy = self.intrinsics(width, height)
            u = (np.arange(width) + 0.5 - cx) / fx
            v = (np.arange(height) + 0.5 - cy) / fy
            uu, vv = np.meshgrid(u, v)
            d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
            return d / np.linalg.norm(d, axis=-1, keepdims=True)
        az = 2.0 * np.pi * (np.arange(width) + 0.5) / width
        ze = np.pi * (np.arange(height) + 0.5) / height
        azz, zee = np.meshgrid(az, ze)
        return angles_to_direction(zee, azz)

    def to_dict(self):
        return {"kind": self.kind, "fov_x": self.fov_x, "fov_y": self.fov_y}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("fov_x", np.deg2rad(90.0))),
                   float(d.get("fov_y", np.deg2rad(73.0))))


@dataclass
class ScanGrid:
    """Pixel grid of scanning directions in the array/camera local frame."""

    proj: ProjectionModel
    width: int
    height: int
    directions: np.ndarray = field(init=False, repr=False)  # (H, W, 3)
    zenith: np.ndarray = field(init=False, repr=False)  # (H, W)
    azimuth: np.ndarray = field(init=False, repr=False)  # (H, W)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have at least one pixel")
        self.directions = self.proj.pixel_directions(self.width, self.height)
        self.zenith, self.azimuth = direction_to_angles(self.directions)

    @property
    def shape(self):
        return (self.height, self.width)

    def angular_pitch(self) -> float:
        """Nominal angle between adjacent pixel centers (radians)."""
        if self.proj.kind == "pinhole":
            return min(self.proj.fov_x / self.width, self.proj.fov_y / self.height)
        return min(2.0 * np.pi / self.width, np.pi / self.height)

    def pixel_direction(self, row, col):
        return self.directions[row, col]
