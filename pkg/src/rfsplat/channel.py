"""Multipath generation between Tx and Rx poses via the image-source method.

Specular-only, deterministic, and exact for planar quad facets: every path is
a facet sequence whose mirror images of the Tx produce an unobstructed
polyline with all reflection points inside their facets. Per-path gain is
free-space Friis times the product of facet amplitude reflection
coefficients. An optional grid-of-points diffuse term can be enabled to
emulate rough-surface scatter.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, direction_to_angles, quat_is_unit, quat_to_matrix
from .scene import Facet, SceneDescription

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact

_SEG_EPS = 1e-9


@dataclass(frozen=True)
class Mpc:
    """One multipath component with its per-path channel state.

    amplitude is linear voltage gain, phase in [0, 2*pi); aoa is
    (zenith, azimuth) in the Rx array frame, aod in the global frame; delay in
    seconds; bounce_count 0 for line of sight.
    """

    amplitude: float
    phase: float
    aoa: tuple  # (zenith, azimuth)
    aod: tuple  # (zenith, azimuth)
    delay: float
    bounce_count: int

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")


@dataclass(frozen=True)
class ChannelRealization:
    mpcs: tuple
    rx_pose: Pose
    tx_pose: Pose

    def __len__(self):
        return len(self.mpcs)

    @property
    def first_delay(self) -> float:
        return min(m.delay for m in self.mpcs)

    def amplitudes(self):
        return np.array([m.amplitude for m in self.mpcs])

    def aoa_array(self):
        return np.array([m.aoa for m in self.mpcs])

    def aod_array(self):
        return np.array([m.aod for m in self.mpcs])

    def delays(self):
        return np.array([m.delay for m in self.mpcs])

    def phases(self):
        return np.array([m.phase for m in self.mpcs])


def friis_gain(d: float, lam: float, g_t: float = 1.0, g_r: float = 1.0) -> float:
    """Free-space power ratio P_r/P_t = g_t*g_r*lambda^2/(4*pi*d)^2."""
    if d <= 0:
        raise ValueError("distance must be positive")
    if lam <= 0:
        raise ValueError("wavelength must be positive")
    return g_t * g_r * lam**2 / (4.0 * np.pi * d) ** 2


def mirror_point(point, facet: Facet):
    """Mirror image of a point across the facet plane."""
    n = facet.normal
    return point - 2.0 * np.dot(point - facet.corners[0], n) * n


def _point_in_quad(point, facet: Facet, tol=1e-9) -> bool:
    """Point (assumed on the facet plane) inside the quad, edge-inclusive."""
    for tri in facet.triangles:
        v0, v1, v2 = tri
        # barycentric coordinates in the triangle plane
        e1, e2 = v1 - v0, v2 - v0
        p = point - v0
        d11 = e1 @ e1
        d12 = e1 @ e2
        d22 = e2 @ e2
        dp1 = p @ e1
        dp2 = p @ e2
        det = d11 * d22 - d12 * d12
        if det <= 0:
            continue
        u = (d22 * dp1 - d12 * dp2) / det
        v = (d11 * dp2 - d12 * dp1) / det
        if u >= -tol and v >= -tol and u + v <= 1.0 + tol:
            return True
    return False


def _segment_blocked(a, b, facets, skip=()) -> bool:
    """True when the open segment a->b crosses any facet not listed in skip.

    Endpoints are excluded with a relative tolerance so a reflection point on
    its own facet does not occlude itself.
    """
    d = b - a
    seg_len = np.linalg.norm(d)
    if seg_len == 0.0:
        return False
    for idx, facet in enumerate(facets):
        if idx in skip:
            continue
        n = facet.normal
        denom = d @ n
        if abs(denom) < 1e-14 * seg_len:
            continue  # parallel to the plane
        t = ((facet.corners[0] - a) @ n) / denom
        if t <= _SEG_EPS or t >= 1.0 - _SEG_EPS:
            continue
        if _point_in_quad(a + t * d, facet):
            return True
    return False


def _path_mpc(points, scene, rx_pose, bounce_count, reflection_product):
    """Assemble an Mpc from the Tx->...->Rx polyline vertices."""
    lengths = [np.linalg.norm(points[i + 1] - points[i]) for i in range(len(points) - 1)]
    total = float(sum(lengths))
    lam = scene.wavelength
    amplitude = float(np.sqrt(friis_gain(total, lam)) * reflection_product)
    phase = float(np.mod(2.0 * np.pi * total / lam, 2.0 * np.pi))
    # first segment seen from the Rx end; last segment seen from the Tx end
    arr_dir = points[-2] - points[-1]
    arr_dir = arr_dir / np.linalg.norm(arr_dir)
    aoa = rotate_to_array_frame(arr_dir, rx_pose.quaternion)
    dep_dir = points[1] - points[0]
    dep_dir = dep_dir / np.linalg.norm(dep_dir)
    aod = tuple(float(x) for x in direction_to_angles(dep_dir))
    return Mpc(
        amplitude=amplitude,
        phase=phase,
        aoa=aoa,
        aod=aod,
        delay=total / SPEED_OF_LIGHT,
        bounce_count=bounce_count,
    )


def trace_sequence(scene: SceneDescription, rx: np.ndarray, seq) -> list | None:
    """Reflection points for a facet-index sequence, or None when invalid.

    Builds the chain of Tx mirror images, then walks back from the Rx through
    each facet, requiring every specular point to land inside its quad and the
    crossing to be a genuine plane crossing.
    """
    facets = scene.facets
    tx = scene.tx.position
    images = [tx]
    for idx in seq:
        images.append(mirror_point(images[-1], facets[idx]))
    points = [rx]
    target = rx
    for depth in range(len(seq) - 1, -1, -1):
        facet = facets[seq[depth]]
        image = images[depth + 1]
        d = image - target
        n = facet.normal
        denom = d @ n
        if abs(denom) < 1e-14:
            return None
        t = ((facet.corners[0] - target) @ n) / denom
        if t <= _SEG_EPS or t >= 1.0 - _SEG_EPS:
            return None  # no true crossing between target and image
        spec = target + t * d
        if not _point_in_quad(spec, facet):
            return None
        points.append(spec)
        target = spec
    points.append(tx)
    points.reverse()  # tx, p_1, ..., p_k, rx
    return points


def _occlusion_ok(points, facets, seq) -> bool:
    """Every segment of the polyline must be clear of all facets.

    The reflecting facet at each endpoint is skipped for the two segments that
    touch it (the specular point itself is not an obstruction).
    """
    k = len(seq)
    for i in range(k + 1):
        a, b = points[i], points[i + 1]
        skip = set()
        if 1 <= i <= k:
            skip.add(seq[i - 1])  # facet at segment start
        if i + 1 <= k:
            skip.add(seq[i])  # facet at segment end
        if _segment_blocked(a, b, facets, skip):
            return False
    return True


def image_source_mpcs(
    scene: SceneDescription,
    rx: Pose,
    max_order: int = 2,
    diffuse_grid: int = 0,
    scatter_coeff: float = 0.1,
) -> ChannelRealization:
    """Enumerate specular multipath up to max_order bounces.

    Sequences never repeat a facet twice in a row (a double mirror across the
    same plane is the identity). Results are sorted by delay. Setting
    diffuse_grid > 0 adds one scattered path per unobstructed facet sample
    point on an n x n grid, amplitude sqrt(friis(tx->p) * friis(p->rx)) *
    scatter_coeff.
    """
    if max_order > 3:
        raise ValueError("max_order is limited to 3")
    if not scene.contains(rx.position):
        raise ValueError("rx pose lies outside the scene bounds")
    if np.allclose(rx.position, scene.tx.position):
        raise ValueError("rx coincides with tx: zero-length path")

    facets = scene.facets
    mpcs = []

    # line of sight
    if not _segment_blocked(scene.tx.position, rx.position, facets):
        mpcs.append(_path_mpc([scene.tx.position, rx.position], scene, rx, 0, 1.0))

    n_f = len(facets)
    for order in range(1, max_order + 1):
        for seq in itertools.product(range(n_f), repeat=order):
            if any(seq[i] == seq[i + 1] for i in range(order - 1)):
                continue
            points = trace_sequence(scene, rx.position, seq)
            if points is None:
                continue
            if not _occlusion_ok(points, facets, seq):
                continue
            refl = float(np.prod([facets[i].reflection_coeff for i in seq]))
            mpcs.append(_path_mpc(points, scene, rx, order, refl))

    if diffuse_grid > 0:
        mpcs.extend(_diffuse_mpcs(scene, rx, diffuse_grid, scatter_coeff))

    mpcs.sort(key=lambda m: m.delay)
    return ChannelRealization(mpcs=tuple(mpcs), rx_pose=rx, tx_pose=scene.tx)


def _diffuse_mpcs(scene, rx, grid_n, scatter_coeff):
    out = []
    lam = scene.wavelength
    tx = scene.tx.position
    fr = (np.arange(grid_n) + 0.5) / grid_n
    for f_idx, facet in enumerate(scene.facets):
        c = facet.corners
        for iu, iv in itertools.product(range(grid_n), repeat=2):
            u, v = fr[iu], fr[iv]
            # bilinear patch point of the quad
            p = (
                (1 - u) * (1 - v) * c[0]
                + u * (1 - v) * c[1]
                + u * v * c[2]
                + (1 - u) * v * c[3]
            )
            if _segment_blocked(tx, p, scene.facets, skip={f_idx}):
                continue
            if _segment_blocked(p, rx.position, scene.facets, skip={f_idx}):
                continue
            d1 = float(np.linalg.norm(p - tx))
            d2 = float(np.linalg.norm(rx.position - p))
            if d1 == 0.0 or d2 == 0.0:
                continue
            amp = float(np.sqrt(friis_gain(d1, lam) * friis_gain(d2, lam)) * scatter_coeff)
            total = d1 + d2
            arr_dir = (p - rx.position) / d2
            dep_dir = (p - tx) / d1
            out.append(
                Mpc(
                    amplitude=amp,
                    phase=float(np.mod(2.0 * np.pi * total / lam, 2.0 * np.pi)),
                    aoa=rotate_to_array_frame(arr_dir, rx.quaternion),
                    aod=tuple(float(x) for x in direction_to_angles(dep_dir)),
                    delay=total / SPEED_OF_LIGHT,
                    bounce_count=1,
                )
            )
    return out


def rotate_to_array_frame(direction, rx_quaternion) -> tuple:
    """Express a global direction as (zenith, azimuth) in the array frame."""
    if not quat_is_unit(rx_quaternion, tol=1e-6):
        raise ValueError("rx orientation quaternion is not unit")
    local = quat_to_matrix(rx_quaternion).T @ np.asarray(direction, dtype=np.float64)
    ze, az = direction_to_angles(local)
    return (float(ze), float(az))


CSV_FIELDS = (
    "amplitude",
    "phase",
    "aoa_zenith",
    "aoa_azimuth",
    "aod_zenith",
    "aod_azimuth",
    "delay_s",
    "bounces",
)


def export_mpcs_csv(ch: ChannelRealization, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for m in ch.mpcs:
            w.writerow(
                [
                    repr(m.amplitude),
                    repr(m.phase),
                    repr(m.aoa[0]),
                    repr(m.aoa[1]),
                    repr(m.aod[0]),
                    repr(m.aod[1]),
                    repr(m.delay),
                    m.bounce_count,
                ]
            )


def import_mpcs_csv(path, rx_pose: Pose, tx_pose: Pose) -> ChannelRealization:
    """Ingest an externally produced MPC list (same columns as the export)."""
    mpcs = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mpcs.append(
                Mpc(
                    amplitude=float(row["amplitude"]),
                    phase=float(row["phase"]),
                    aoa=(float(row["aoa_zenith"]), float(row["aoa_azimuth"])),
                    aod=(float(row["aod_zenith"]), float(row["aod_azimuth"])),
                    delay=float(row["delay_s"]),
                    bounce_count=int(row["bounces"]),
                )
            )
    mpcs.sort(key=lambda m: m.delay)
    return ChannelRealization(mpcs=tuple(mpcs), rx_pose=rx_pose, tx_pose=tx_pose)
