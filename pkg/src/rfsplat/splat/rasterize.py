"""Tile-based forward/backward rasterization of projected Gaussians.

Per pixel, overlapping splats are composited front to back:

    C = sum_i T_i * alpha_i * c_i,   T_i = prod_{j<i} (1 - alpha_j),

with alpha_i = opacity_i * exp(-0.5 d^T conic_i d) clamped to 0.99. Rays stop
early once T drops below 1e-4. The image is partitioned into 16x16 tiles;
each tile owns a depth-sorted splat list, so tiles parallelize with no shared
mutable state. Backward accumulates into per-(tile, splat) slots that are
reduced in a fixed order, making gradients bit-reproducible for a fixed tile
count. The analytic backward covers every learnable field, including the
projection-Jacobian and SH view-direction dependence on the mean.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from ..geometry import Pose, ProjectionModel, quat_from_axis_angle, quat_multiply
from .cloud import GaussianCloud
from .project import ProjectionContext, project_cloud
from .sh import sh_basis_grad

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
POWER_MIN = -5.55  # exp(POWER_MIN) < ALPHA_MIN, cheap skip before the exp
T_EARLY_EXIT = 1e-4

_threads_env = os.environ.get("RF3DGS_THREADS")
if _threads_env:
    numba.set_num_threads(max(1, min(int(_threads_env), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class RenderAux:
    """Forward-pass byproducts: per-pixel transmittance, per-splat stats,
    and everything the backward pass needs to avoid re-projection."""

    final_t: np.ndarray  # (H, W) transmittance left after compositing
    n_processed: np.ndarray  # (H, W) tile-list entries consumed per pixel
    radii_px: np.ndarray  # (N,) screen-space 3-sigma radius (0 if culled)
    visible: np.ndarray  # (N,) bool
    ctx: ProjectionContext
    pair_gauss: np.ndarray  # (P,) gaussian index per tile-list entry
    tile_starts: np.ndarray  # (n_tiles + 1,)
    tiles_x: int
    faces: list | None = None  # populated for equirectangular renders


def _bin_tiles(ctx: ProjectionContext):
    """Depth-sorted per-tile splat lists (ties broken by gaussian index)."""
    width, height = ctx.width, ctx.height
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y

    idx = np.nonzero(ctx.valid)[0]
    if idx.size == 0:
        return (
            np.zeros(0, dtype=np.int64),
            np.zeros(n_tiles + 1, dtype=np.int64),
            tiles_x,
            tiles_y,
        )
    u = ctx.mean2d[idx, 0]
    v = ctx.mean2d[idx, 1]
    r = ctx.radius_px[idx]
    tx0 = np.clip(np.floor((u - r) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((u + r) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((v - r) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((v + r) / TILE).astype(np.int64), 0, tiles_y - 1)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    pair_gauss = np.empty(offsets[-1], dtype=np.int64)
    pair_tile = np.empty(offsets[-1], dtype=np.int64)
    _fill_pairs(idx, tx0, tx1, ty0, ty1, offsets, tiles_x, pair_gauss, pair_tile)

    order = np.lexsort((pair_gauss, ctx.depth[pair_gauss], pair_tile))
    pair_gauss = pair_gauss[order]
    pair_tile = pair_tile[order]
    tile_starts = np.searchsorted(pair_tile, np.arange(n_tiles + 1)).astype(np.int64)
    return pair_gauss, tile_starts, tiles_x, tiles_y


@njit(cache=True)
def _fill_pairs(idx, tx0, tx1, ty0, ty1, offsets, tiles_x, pair_gauss, pair_tile):
    for i in range(idx.shape[0]):
        p = offsets[i]
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                pair_gauss[p] = idx[i]
                pair_tile[p] = ty * tiles_x + tx
                p += 1


@njit(cache=True, parallel=True)
def _forward_kernel(
    pair_gauss,
    tile_starts,
    tiles_x,
    mean2d,
    conic,
    colors,
    opac,
    width,
    height,
    image,
    final_t,
    n_processed,
):
    n_tiles = tile_starts.shape[0] - 1
    n_ch = colors.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_starts[tile]
        stop = tile_starts[tile + 1]
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                t_acc = 1.0
                processed = stop - start
                for p in range(start, stop):
                    g = pair_gauss[p]
                    dx = px + 0.5 - mean2d[g, 0]
                    dy = py + 0.5 - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    alpha = opac[g] * np.exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    for c in range(n_ch):
                        image[py, px, c] += t_acc * alpha * colors[g, c]
                    t_acc *= 1.0 - alpha
                    if t_acc < T_EARLY_EXIT:
                        processed = p + 1 - start
                        break
                final_t[py, px] = t_acc
                n_processed[py, px] = processed


@njit(cache=True, parallel=True)
def _backward_kernel(
    pair_gauss,
    tile_starts,
    tiles_x,
    mean2d,
    conic,
    colors,
    opac,
    width,
    height,
    grad_image,
    final_t,
    n_processed,
    pair_dmean2d,
    pair_dconic,
    pair_dopac,
    pair_dcolor,
):
    n_tiles = tile_starts.shape[0] - 1
    n_ch = colors.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_starts[tile]
        suffix = np.empty(n_ch)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                last = start + n_processed[py, px] - 1
                t_run = final_t[py, px]
                for c in range(n_ch):
                    suffix[c] = 0.0
                for p in range(last, start - 1, -1):
                    g = pair_gauss[p]
                    dx = px + 0.5 - mean2d[g, 0]
                    dy = py + 0.5 - mean2d[g, 1]
                    power = (
                        -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                        - conic[g, 1] * dx * dy
                    )
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    g_exp = np.exp(power)
                    raw_alpha = opac[g] * g_exp
                    clamped = raw_alpha > ALPHA_MAX
                    alpha = ALPHA_MAX if clamped else raw_alpha
                    if alpha < ALPHA_MIN:
                        continue
                    t_run = t_run / (1.0 - alpha)  # transmittance before this splat

                    d_alpha = 0.0
                    for c in range(n_ch):
                        w = grad_image[py, px, c]
                        d_alpha += w * (t_run * colors[g, c] - suffix[c] / (1.0 - alpha))
                        pair_dcolor[p, c] += w * t_run * alpha
                        suffix[c] += t_run * alpha * colors[g, c]

                    if clamped:
                        continue  # clamp is flat: no gradient into alpha inputs
                    pair_dopac[p] += d_alpha * g_exp
                    d_power = d_alpha * alpha
                    pair_dconic[p, 0] += d_power * (-0.5 * dx * dx)
                    pair_dconic[p, 1] += d_power * (-dx * dy)
                    pair_dconic[p, 2] += d_power * (-0.5 * dy * dy)
                    pair_dmean2d[p, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    pair_dmean2d[p, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)


def render(
    cloud: GaussianCloud,
    view: Pose,
    proj: ProjectionModel,
    width: int,
    height: int,
):
    """Rasterize the cloud; returns (image (H, W, C), RenderAux).

    Equirectangular projections are rendered as six 90-degree pinhole cube
    faces and resampled bilinearly onto the azimuth/zenith grid.
    """
    if cloud.n == 0:
        raise ValueError("cannot render an empty cloud")
    if proj.kind == "equirectangular":
        return _render_equirect(cloud, view, width, height)

    ctx = project_cloud(cloud, view, proj, width, height)
    pair_gauss, tile_starts, tiles_x, _ = _bin_tiles(ctx)

    image = np.zeros((height, width, cloud.n_channels))
    final_t = np.ones((height, width))
    n_processed = np.zeros((height, width), dtype=np.int64)
    if pair_gauss.size:
        _forward_kernel(
            pair_gauss,
            tile_starts,
            tiles_x,
            ctx.mean2d,
            ctx.conic,
            ctx.colors,
            ctx.opacities,
            width,
            height,
            image,
            final_t,
            n_processed,
        )
    aux = RenderAux(
        final_t=final_t,
        n_processed=n_processed,
        radii_px=np.where(ctx.valid, ctx.radius_px, 0.0),
        visible=ctx.valid.copy(),
        ctx=ctx,
        pair_gauss=pair_gauss,
        tile_starts=tile_starts,
        tiles_x=tiles_x,
    )
    return image, aux


def render_backward(
    cloud: GaussianCloud, aux: RenderAux, grad_image: np.ndarray, geometry: bool = True
):
    """Analytic gradients of sum(grad_image * image) w.r.t. all parameters.

    Returns a dict with means/quaternions/log_scales/opacity_logits/sh grads
    plus 'screen_grad_norm', the per-splat NDC-space positional gradient
    magnitude used by the densification heuristic. geometry=False skips the
    chain into means/rotations/scales (stage-2 training, where they are
    frozen anyway).
    """
    if aux.faces is not None:
        return _equirect_backward(cloud, aux, grad_image, geometry)

    ctx = aux.ctx
    n = cloud.n
    grads = {
        "means": np.zeros((n, 3)),
        "quaternions": np.zeros((n, 4)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros(n),
        "sh": np.zeros_like(cloud.sh),
        "screen_grad_norm": np.zeros(n),
    }
    if aux.pair_gauss.size == 0:
        return grads

    p_count = aux.pair_gauss.size
    pair_dmean2d = np.zeros((p_count, 2))
    pair_dconic = np.zeros((p_count, 3))
    pair_dopac = np.zeros(p_count)
    pair_dcolor = np.zeros((p_count, cloud.n_channels))
    _backward_kernel(
        aux.pair_gauss,
        aux.tile_starts,
        aux.tiles_x,
        ctx.mean2d,
        ctx.conic,
        ctx.colors,
        ctx.opacities,
        ctx.width,
        ctx.height,
        np.ascontiguousarray(grad_image, dtype=np.float64),
        aux.final_t,
        aux.n_processed,
        pair_dmean2d,
        pair_dconic,
        pair_dopac,
        pair_dcolor,
    )

    # fixed-order reduction of per-(tile, splat) partials
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, cloud.n_channels))
    np.add.at(d_mean2d, aux.pair_gauss, pair_dmean2d)
    np.add.at(d_conic, aux.pair_gauss, pair_dconic)
    np.add.at(d_opac, aux.pair_gauss, pair_dopac)
    np.add.at(d_color, aux.pair_gauss, pair_dcolor)

    sel = np.nonzero(ctx.valid)[0]  # chain rule only where splats rendered
    _chain_to_params(cloud, ctx, sel, d_mean2d, d_conic, d_opac, d_color, grads, geometry)
    grads["screen_grad_norm"] = np.hypot(
        d_mean2d[:, 0] * ctx.width / 2.0, d_mean2d[:, 1] * ctx.height / 2.0
    )
    return grads


def _chain_to_params(cloud, ctx, sel, d_mean2d, d_conic, d_opac, d_color, grads, geometry):
    """Vectorized chain rule from screen-space cotangents to parameters."""
    # opacity logit
    op = ctx.opacities[sel]
    grads["opacity_logits"][sel] += d_opac[sel] * op * (1.0 - op)

    # SH coefficients
    d_color = d_color[sel]
    grads["sh"][sel] += np.einsum("nc,nk->nck", d_color, ctx.basis[sel])

    if not geometry:
        return

    fx, fy, _, _ = ctx.intrinsics
    t = ctx.t_cam[sel]
    z = t[:, 2]
    safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
    ns = sel.size
    d_mean2d = d_mean2d[sel]
    d_conic = d_conic[sel]

    # conic -> cov2d (conic = cov2d^-1, both symmetric)
    m = np.empty((ns, 2, 2))
    m[:, 0, 0] = ctx.conic[sel, 0]
    m[:, 0, 1] = m[:, 1, 0] = ctx.conic[sel, 1]
    m[:, 1, 1] = ctx.conic[sel, 2]
    dm = np.empty_like(m)
    dm[:, 0, 0] = d_conic[:, 0]
    dm[:, 0, 1] = dm[:, 1, 0] = 0.5 * d_conic[:, 1]
    dm[:, 1, 1] = d_conic[:, 2]
    dv = -np.einsum("nij,njk,nkl->nil", m, dm, m)

    # cov2d = A Sigma A^T + low-pass
    a = ctx.a_mat[sel]
    cov3d = ctx.cov3d[sel]
    dv_sym = dv + np.transpose(dv, (0, 2, 1))
    da = np.einsum("nij,njk,nkl->nil", dv_sym, a, cov3d)
    dsigma = np.einsum("nji,njk,nkl->nil", a, dv, a)

    # A = J W: gradients into J, then into camera-space position
    dj = da @ ctx.w_mat.T
    dt = np.zeros((ns, 3))
    inv_z2 = 1.0 / safe_z**2
    dt[:, 0] += dj[:, 0, 2] * (-fx * inv_z2)
    dt[:, 1] += dj[:, 1, 2] * (-fy * inv_z2)
    dt[:, 2] += dj[:, 0, 0] * (-fx * inv_z2) + dj[:, 1, 1] * (-fy * inv_z2)
    dt[:, 2] += dj[:, 0, 2] * (2.0 * fx * t[:, 0] / safe_z**3)
    dt[:, 2] += dj[:, 1, 2] * (2.0 * fy * t[:, 1] / safe_z**3)

    # screen mean -> camera-space position
    dt[:, 0] += d_mean2d[:, 0] * fx / safe_z
    dt[:, 1] += d_mean2d[:, 1] * fy / safe_z
    dt[:, 2] += -(d_mean2d[:, 0] * fx * t[:, 0] + d_mean2d[:, 1] * fy * t[:, 1]) * inv_z2

    grads["means"][sel] += dt @ ctx.w_mat

    # Sigma = R diag(s^2) R^T
    rot = ctx.rot_mats[sel]
    s2 = np.exp(cloud.log_scales[sel]) ** 2
    dsigma_sym = dsigma + np.transpose(dsigma, (0, 2, 1))
    dr = np.einsum("nij,njk,nk->nik", dsigma_sym, rot, s2)
    b = np.einsum("nji,njk,nkl->nil", rot, dsigma, rot)
    grads["log_scales"][sel] += 2.0 * s2 * np.einsum("nii->ni", b)

    # R -> quaternion (through the normalization)
    qnorm = np.linalg.norm(cloud.quaternions[sel], axis=1, keepdims=True)
    qn = cloud.quaternions[sel] / qnorm
    dq_hat = _rotation_quat_backward(qn, dr)
    proj_perp = dq_hat - qn * np.sum(qn * dq_hat, axis=1, keepdims=True)
    grads["quaternions"][sel] += proj_perp / qnorm

    # view-direction path back to the mean
    gbasis = sh_basis_grad(ctx.view_dirs[sel])[:, : cloud.n_coeffs]  # (N, K, 3)
    ddir = np.einsum("nc,nck,nki->ni", d_color, cloud.sh[sel], gbasis)
    dirs = ctx.view_dirs[sel]
    safe_dist = np.where(ctx.view_dist[sel] > 1e-12, ctx.view_dist[sel], 1.0)
    radial = np.sum(dirs * ddir, axis=1, keepdims=True)
    grads["means"][sel] += (-ddir + dirs * radial) / safe_dist[:, None]


def _rotation_quat_backward(qn, dr):
    """Contract dL/dR with dR/dq for unit quaternions; (N, 4)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r = dr  # (N, 3, 3) cotangent
    out = np.empty((qn.shape[0], 4))
    out[:, 0] = 2.0 * (
        -z * r[:, 0, 1] + y * r[:, 0, 2] + z * r[:, 1, 0] - x * r[:, 1, 2]
        - y * r[:, 2, 0] + x * r[:, 2, 1]
    )
    out[:, 1] = 2.0 * (
        y * r[:, 0, 1] + z * r[:, 0, 2] + y * r[:, 1, 0] - 2.0 * x * r[:, 1, 1]
        - w * r[:, 1, 2] + z * r[:, 2, 0] + w * r[:, 2, 1] - 2.0 * x * r[:, 2, 2]
    )
    out[:, 2] = 2.0 * (
        -2.0 * y * r[:, 0, 0] + x * r[:, 0, 1] + w * r[:, 0, 2] + x * r[:, 1, 0]
        + z * r[:, 1, 2] - w * r[:, 2, 0] + z * r[:, 2, 1] - 2.0 * y * r[:, 2, 2]
    )
    out[:, 3] = 2.0 * (
        -2.0 * z * r[:, 0, 0] - w * r[:, 0, 1] + x * r[:, 0, 2] + w * r[:, 1, 0]
        - 2.0 * z * r[:, 1, 1] + y * r[:, 1, 2] + x * r[:, 2, 0] + y * r[:, 2, 1]
    )
    return out


# --- equirectangular rendering via cube faces -------------------------------

_FACE_QUATS = [
    quat_from_axis_angle([0, 1, 0], 0.0),  # +z (boresight)
    quat_from_axis_angle([0, 1, 0], np.pi / 2),  # +x
    quat_from_axis_angle([0, 1, 0], -np.pi / 2),  # -x
    quat_from_axis_angle([1, 0, 0], -np.pi / 2),  # +y
    quat_from_axis_angle([1, 0, 0], np.pi / 2),  # -y
    quat_from_axis_angle([0, 1, 0], np.pi),  # -z
]


class EquirectResampler:
    """Bilinear cube-face lookup for every equirect pixel (a fixed linear map)."""

    def __init__(self, width: int, height: int, face_res: int):
        self.width = width
        self.height = height
        self.face_res = face_res
        margin = 3.0 / face_res
        self.face_fov = 2.0 * np.arctan(1.0 + margin)
        fx = (face_res / 2.0) / (1.0 + margin)
        cx = face_res / 2.0

        proj = ProjectionModel("equirectangular")
        dirs = proj.pixel_directions(width, height).reshape(-1, 3)
        face_mats = [np.array(_quat_matrix(q)) for q in _FACE_QUATS]

        abs_d = np.abs(dirs)
        face = np.where(
            (abs_d[:, 2] >= abs_d[:, 0]) & (abs_d[:, 2] >= abs_d[:, 1]),
            np.where(dirs[:, 2] >= 0, 0, 5),
            np.where(
                abs_d[:, 0] >= abs_d[:, 1],
                np.where(dirs[:, 0] >= 0, 1, 2),
                np.where(dirs[:, 1] >= 0, 3, 4),
            ),
        )
        local = np.empty_like(dirs)
        for f in range(6):
            sel = face == f
            local[sel] = dirs[sel] @ face_mats[f]  # R^T d
        u = fx * local[:, 0] / local[:, 2] + cx - 0.5
        v = fx * local[:, 1] / local[:, 2] + cx - 0.5
        u0 = np.clip(np.floor(u).astype(np.int64), 0, face_res - 2)
        v0 = np.clip(np.floor(v).astype(np.int64), 0, face_res - 2)
        au = np.clip(u - u0, 0.0, 1.0)
        av = np.clip(v - v0, 0.0, 1.0)
        self.face = face
        self.base = v0 * face_res + u0
        self.weights = np.stack(
            [(1 - au) * (1 - av), au * (1 - av), (1 - au) * av, au * av], axis=1
        )
        self.offsets = np.array([0, 1, face_res, face_res + 1])

    def forward(self, faces: np.ndarray) -> np.ndarray:
        """faces (6, R, R, C) -> equirect (H, W, C)."""
        n_ch = faces.shape[-1]
        flat = faces.reshape(6, -1, n_ch)
        out = np.zeros((self.face.size, n_ch))
        for k in range(4):
            out += self.weights[:, k:k + 1] * flat[self.face, self.base + self.offsets[k]]
        return out.reshape(self.height, self.width, n_ch)

    def backward(self, grad_eq: np.ndarray) -> np.ndarray:
        n_ch = grad_eq.shape[-1]
        g = grad_eq.reshape(-1, n_ch)
        grad_faces = np.zeros((6, self.face_res * self.face_res, n_ch))
        for k in range(4):
            np.add.at(
                grad_faces,
                (self.face, self.base + self.offsets[k]),
                self.weights[:, k:k + 1] * g,
            )
        return grad_faces.reshape(6, self.face_res, self.face_res, n_ch)


def _quat_matrix(q):
    from ..geometry import quat_to_matrix

    return quat_to_matrix(q)


def _render_equirect(cloud: GaussianCloud, view: Pose, width: int, height: int):
    face_res = max(32, int(np.ceil(max(width / 4.0, height / 2.0))))
    rs = EquirectResampler(width, height, face_res)
    proj = ProjectionModel("pinhole", rs.face_fov, rs.face_fov)
    faces = np.empty((6, face_res, face_res, cloud.n_channels))
    face_aux = []
    for f, qf in enumerate(_FACE_QUATS):
        pose_f = Pose(view.position, quat_multiply(view.quaternion, qf))
        img_f, aux_f = render(cloud, pose_f, proj, face_res, face_res)
        faces[f] = img_f
        face_aux.append(aux_f)
    image = rs.forward(faces)
    aux = RenderAux(
        final_t=rs.forward(
            np.stack([a.final_t[..., None] for a in face_aux])
        )[..., 0],
        n_processed=np.zeros((height, width), dtype=np.int64),
        radii_px=np.maximum.reduce([a.radii_px for a in face_aux]),
        visible=np.logical_or.reduce([a.visible for a in face_aux]),
        ctx=face_aux[0].ctx,
        pair_gauss=np.zeros(0, dtype=np.int64),
        tile_starts=np.zeros(1, dtype=np.int64),
        tiles_x=0,
        faces=[rs, face_aux],
    )
    return image, aux


def _equirect_backward(cloud, aux: RenderAux, grad_image: np.ndarray, geometry: bool):
    rs, face_aux = aux.faces
    grad_faces = rs.backward(np.asarray(grad_image, dtype=np.float64))
    total = None
    for f in range(6):
        g = render_backward(cloud, face_aux[f], grad_faces[f], geometry)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] += g[k]
    return total
