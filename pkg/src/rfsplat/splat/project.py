"""Perspective projection of 3D Gaussians to screen-space ellipses.

The 2D footprint is the linearized push-forward of the 3D covariance through
the pinhole projection (cov2d = J W Sigma W^T J^T) plus a 0.3 px^2 low-pass
term that keeps sub-pixel splats rasterizable. Splats behind the near plane
or whose 3-sigma disk misses the image are culled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, ProjectionModel
from .cloud import Gaussian, GaussianCloud, covariance3d_batch, sigmoid
from .sh import sh_basis

NEAR_PLANE = 0.01  # meters
LOW_PASS_PX2 = 0.3  # isotropic pixel-space covariance floor
SIGMA_CUTOFF = 3.0  # footprint radius in standard deviations


@dataclass
class SplatProjection:
    """Screen-space view of one splat (see project)."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixels^2, SPD after regularization
    depth: float  # camera-space z, meters
    color: np.ndarray  # (C,) SH evaluated toward the camera
    radius_px: float


@dataclass
class ProjectionContext:
    """Vectorized projection of a whole cloud, plus backward intermediates."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2) regularized
    conic: np.ndarray  # (N, 3) upper-triangular inverse (a, b, c)
    depth: np.ndarray  # (N,)
    radius_px: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool, survived culling
    colors: np.ndarray  # (N, C)
    opacities: np.ndarray  # (N,)
    # intermediates for the analytic backward pass
    t_cam: np.ndarray  # (N, 3) camera-space means
    w_mat: np.ndarray  # (3, 3) world->camera rotation
    cam_pos: np.ndarray  # (3,)
    view_dirs: np.ndarray  # (N, 3) unit, gaussian -> camera
    view_dist: np.ndarray  # (N,)
    basis: np.ndarray  # (N, K) SH basis at view_dirs
    rot_mats: np.ndarray  # (N, 3, 3)
    cov3d: np.ndarray  # (N, 3, 3)
    a_mat: np.ndarray  # (N, 2, 3) = J @ W
    intrinsics: tuple  # (fx, fy, cx, cy)
    width: int
    height: int


def _pinhole_quantities(means, quats, log_scales, view: Pose, fx, fy, cx, cy):
    w_mat = view.rotation.T  # world -> camera
    t = (means - view.position) @ w_mat.T
    depth = t[:, 2]
    safe_z = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    u = fx * t[:, 0] / safe_z + cx
    v = fy * t[:, 1] / safe_z + cy
    mean2d = np.stack([u, v], axis=1)

    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    from .cloud import quats_to_matrices

    rot = quats_to_matrices(quats / norm)
    cov3d = np.einsum("nij,nj,nkj->nik", rot, np.exp(log_scales) ** 2, rot)

    n = means.shape[0]
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = fx / safe_z
    j[:, 0, 2] = -fx * t[:, 0] / safe_z**2
    j[:, 1, 1] = fy / safe_z
    j[:, 1, 2] = -fy * t[:, 1] / safe_z**2
    a_mat = j @ w_mat
    cov2d = a_mat @ cov3d @ np.transpose(a_mat, (0, 2, 1))
    cov2d[:, 0, 0] += LOW_PASS_PX2
    cov2d[:, 1, 1] += LOW_PASS_PX2
    return w_mat, t, mean2d, rot, cov3d, a_mat, cov2d


def project_cloud(
    cloud: GaussianCloud, view: Pose, proj: ProjectionModel, width: int, height: int
) -> ProjectionContext:
    if proj.kind != "pinhole":
        raise ValueError("project_cloud handles pinhole views; see render() for equirect")
    fx, fy, cx, cy = proj.intrinsics(width, height)
    w_mat, t, mean2d, rot, cov3d, a_mat, cov2d = _pinhole_quantities(
        cloud.means, cloud.quaternions, cloud.log_scales, view, fx, fy, cx, cy
    )
    depth = t[:, 2]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius = np.ceil(SIGMA_CUTOFF * np.sqrt(np.maximum(lam_max, 0.0)))

    u, v = mean2d[:, 0], mean2d[:, 1]
    on_image = (u + radius > 0) & (u - radius < width) & (v + radius > 0) & (v - radius < height)
    valid = (depth > NEAR_PLANE) & on_image & (det > 0)

    inv_det = np.where(det != 0, 1.0 / np.where(det != 0, det, 1.0), 0.0)
    conic = np.stack(
        [cov2d[:, 1, 1] * inv_det, -cov2d[:, 0, 1] * inv_det, cov2d[:, 0, 0] * inv_det],
        axis=1,
    )

    diff = view.position - cloud.means
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 1e-12, dist, 1.0)
    view_dirs = diff / safe[:, None]
    basis = sh_basis(view_dirs)[:, : cloud.n_coeffs]
    colors = np.einsum("nck,nk->nc", cloud.sh, basis)

    return ProjectionContext(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=depth,
        radius_px=radius,
        valid=valid,
        colors=colors,
        opacities=sigmoid(cloud.opacity_logits),
        t_cam=t,
        w_mat=w_mat,
        cam_pos=view.position.copy(),
        view_dirs=view_dirs,
        view_dist=dist,
        basis=basis,
        rot_mats=rot,
        cov3d=cov3d,
        a_mat=a_mat,
        intrinsics=(fx, fy, cx, cy),
        width=width,
        height=height,
    )


def project(
    g: Gaussian, view: Pose, proj: ProjectionModel, width: int, height: int
) -> SplatProjection | None:
    """Project one splat; returns None when culled."""
    cloud = GaussianCloud(
        means=g.mean[None],
        quaternions=np.asarray(g.rotation, dtype=np.float64)[None],
        log_scales=np.asarray(g.log_scale, dtype=np.float64)[None],
        opacity_logits=np.array([g.opacity_logit]),
        sh=np.asarray(g.sh, dtype=np.float64)[None],
        channel_names=tuple(f"ch{i}" for i in range(np.asarray(g.sh).shape[0])),
    )
    ctx = project_cloud(cloud, view, proj, width, height)
    if not ctx.valid[0]:
        return None
    return SplatProjection(
        mean2d=ctx.mean2d[0],
        cov2d=ctx.cov2d[0],
        depth=float(ctx.depth[0]),
        color=ctx.colors[0],
        radius_px=float(ctx.radius_px[0]),
    )
