"""Real spherical harmonics basis up to degree 3, with analytic gradients.

Coefficient layout follows the usual graphics ordering: degree-major, m from
-l to +l inside each degree, 16 coefficients total. The normalization bakes
the Condon-Shortley phase into the constants, as in the common splatting
codebases, so degree-0-only coefficients give a view-independent value
k * 0.2820948.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_COEFFS = 16  # degree 3


def sh_basis(dirs) -> np.ndarray:
    """Basis values Y_k at unit directions; dirs (..., 3) -> (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(d.shape[:-1] + (N_COEFFS,), dtype=np.float64)
    b[..., 0] = C0
    b[..., 1] = -C1 * y
    b[..., 2] = C1 * z
    b[..., 3] = -C1 * x
    b[..., 4] = C2[0] * xy
    b[..., 5] = C2[1] * yz
    b[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = C2[3] * xz
    b[..., 8] = C2[4] * (xx - yy)
    b[..., 9] = C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = C3[1] * xy * z
    b[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = C3[5] * z * (xx - yy)
    b[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs) -> np.ndarray:
    """Partials dY_k/d(x, y, z) of the basis polynomials; (..., 16, 3).

    These are gradients of the homogeneous extension; composed with the
    tangential projection of a normalized direction they give the on-sphere
    derivative.
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (N_COEFFS, 3), dtype=np.float64)
    g[..., 1, 1] = -C1
    g[..., 2, 2] = C1
    g[..., 3, 0] = -C1
    g[..., 4, 0] = C2[0] * y
    g[..., 4, 1] = C2[0] * x
    g[..., 5, 1] = C2[1] * z
    g[..., 5, 2] = C2[1] * y
    g[..., 6, 0] = C2[2] * (-2.0 * x)
    g[..., 6, 1] = C2[2] * (-2.0 * y)
    g[..., 6, 2] = C2[2] * 4.0 * z
    g[..., 7, 0] = C2[3] * z
    g[..., 7, 2] = C2[3] * x
    g[..., 8, 0] = C2[4] * 2.0 * x
    g[..., 8, 1] = C2[4] * (-2.0 * y)
    g[..., 9, 0] = C3[0] * 6.0 * x * y
    g[..., 9, 1] = C3[0] * (3.0 * x * x - 3.0 * y * y)
    g[..., 9, 2] = zero
    g[..., 10, 0] = C3[1] * y * z
    g[..., 10, 1] = C3[1] * x * z
    g[..., 10, 2] = C3[1] * x * y
    g[..., 11, 0] = C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
    g[..., 11, 2] = C3[2] * 8.0 * y * z
    g[..., 12, 0] = C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
    g[..., 13, 0] = C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
    g[..., 13, 1] = C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = C3[4] * 8.0 * x * z
    g[..., 14, 0] = C3[5] * 2.0 * x * z
    g[..., 14, 1] = C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = C3[5] * (x * x - y * y)
    g[..., 15, 0] = C3[6] * (3.0 * x * x - 3.0 * y * y)
    g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    g[..., 15, 2] = zero
    return g


def eval_sh(coeffs, view_dir) -> np.ndarray:
    """Channel value(s) sum_k c_k Y_k(d) for unit view direction(s).

    coeffs (..., C, K) with K <= 16 and view_dir (..., 3) broadcast over
    leading axes; returns (..., C).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    k = coeffs.shape[-1]
    if k > N_COEFFS:
        raise ValueError(f"at most {N_COEFFS} coefficients (degree 3) supported")
    basis = sh_basis(view_dir)[..., :k]
    return np.einsum("...ck,...k->...c", coeffs, basis)
