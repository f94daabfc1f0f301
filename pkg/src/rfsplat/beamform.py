"""Uniform planar array model and spatial-spectrum estimators.

Implements the narrowband element-response model x = A s + n for a UPA, plus
four estimators producing angular power images over a ScanGrid: conventional
delay-and-sum (CBF), Hann-tapered CBF, MVDR with diagonal loading, and an
ideal Gaussian-lobe kernel driven directly by the multipath list. Output
transforms convert linear power to the [0, 1] training range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal.windows import hann

from .geometry import ScanGrid, angles_to_direction

FWHM_TO_SIGMA = 2.355  # Gaussian full width at half maximum -> sigma


@dataclass(frozen=True)
class UpaConfig:
    """Uniform planar array in the local xy-plane, boresight +z.

    Element (row r, col c) sits at (c, r, 0) * spacing * lam with the
    reference element (0, 0) at the origin.
    """

    rows: int = 8
    cols: int = 8
    spacing: float = 0.5  # element pitch in wavelengths
    lam: float = 0.005  # meters
    element_pattern: str = "isotropic"  # or "cosine_patch"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one element")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.element_pattern not in ("isotropic", "cosine_patch"):
            raise ValueError(f"unknown element pattern {self.element_pattern!r}")

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    def element_positions(self) -> np.ndarray:
        """(N, 3) element positions in meters, row-major over (row, col)."""
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        d = self.spacing * self.lam
        return np.stack(
            [cc.ravel() * d, rr.ravel() * d, np.zeros(self.n_elements)], axis=-1
        )

    def pattern_gain(self, zenith) -> np.ndarray:
        """Element amplitude pattern G(theta); isotropic is 1 everywhere."""
        zenith = np.asarray(zenith, dtype=np.float64)
        if self.element_pattern == "isotropic":
            return np.ones_like(zenith)
        return np.where(zenith < np.pi / 2.0, np.cos(zenith), 0.0)


@dataclass(frozen=True)
class Snapshot:
    x: np.ndarray  # complex element responses, length N
    noise_power: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.complex128).reshape(-1))
        if self.noise_power < 0:
            raise ValueError("noise_power must be non-negative")


def array_manifold(zenith, azimuth, upa: UpaConfig) -> np.ndarray:
    """Complex element response a(theta, phi) to a unit plane wave.

    The path difference of element n relative to the reference element for a
    wave arriving from direction u is -u . r_n, so
    a_n = G(theta) * exp(+j * 2*pi * u . r_n / lam). Accepts scalar angles
    (returns (N,)) or arrays (returns (..., N)).
    """
    u = angles_to_direction(zenith, azimuth)
    r = upa.element_positions()
    phase = 2.0 * np.pi / upa.lam * (u @ r.T)
    return (upa.pattern_gain(zenith)[..., None] * np.exp(1j * phase)).astype(np.complex128)


def synthesize_snapshots(
    mpcs,
    upa: UpaConfig,
    count: int,
    snr_db: float | None = 30.0,
    seed=0,
    coherent: bool = False,
    noise_power: float | None = None,
) -> list:
    """Simulate element responses x_k = sum_m a(theta_m, phi_m) s_mk + n_k.

    Per-path signals are amplitude_m * exp(j(phase_m + psi_mk)) with psi_mk a
    fresh uniform phase per snapshot unless coherent=True. White complex
    Gaussian noise is calibrated so that the mean per-element signal power /
    noise power equals snr_db; pass noise_power to pin it explicitly (the
    noise-only mode when mpcs is empty). snr_db=None disables noise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    n = upa.n_elements

    if len(mpcs) == 0:
        if noise_power is None:
            raise ValueError(
                "SNR is undefined with no multipath components; "
                "pass noise_power for a noise-only simulation"
            )
        sig = np.zeros((count, n), dtype=np.complex128)
        npow = float(noise_power)
    else:
        zen = np.array([m.aoa[0] for m in mpcs])
        az = np.array([m.aoa[1] for m in mpcs])
        amps = np.array([m.amplitude for m in mpcs])
        phases = np.array([m.phase for m in mpcs])
        a = array_manifold(zen, az, upa)  # (M, N)
        if coherent:
            s = amps * np.exp(1j * phases)
            s = np.broadcast_to(s, (count, len(mpcs)))
        else:
            psi = rng.uniform(0.0, 2.0 * np.pi, size=(count, len(mpcs)))
            s = amps * np.exp(1j * (phases + psi))
        sig = s @ a  # (count, N)
        if noise_power is not None:
            npow = float(noise_power)
        elif snr_db is None or np.isinf(snr_db):
            npow = 0.0
        else:
            mean_sig_power = float(np.sum(amps**2 * np.mean(np.abs(a) ** 2, axis=1)))
            npow = mean_sig_power / 10.0 ** (snr_db / 10.0)

    if npow > 0.0:
        noise = rng.standard_normal((count, n)) + 1j * rng.standard_normal((count, n))
        sig = sig + np.sqrt(npow / 2.0) * noise
    return [Snapshot(sig[k], noise_power=npow) for k in range(count)]


def _snapshot_matrix(snapshots) -> np.ndarray:
    if len(snapshots) == 0:
        raise ValueError("need at least one snapshot")
    return np.stack([s.x for s in snapshots])  # (K, N)


def _grid_manifolds(upa: UpaConfig, grid: ScanGrid) -> np.ndarray:
    """(L, N) manifold for every scan pixel, L = H*W row-major."""
    return array_manifold(grid.zenith.ravel(), grid.azimuth.ravel(), upa)


def cbf_spectrum(snapshots, upa: UpaConfig, grid: ScanGrid) -> np.ndarray:
    """Delay-and-sum power image: P = mean_k |w^H x_k|^2, w = a/||a||."""
    x = _snapshot_matrix(snapshots)
    a = _grid_manifolds(upa, grid)
    w = a / np.linalg.norm(a, axis=1, keepdims=True)
    y = x @ w.conj().T  # (K, L)
    return np.mean(np.abs(y) ** 2, axis=0).reshape(grid.shape)


def upa_hann_taper(upa: UpaConfig) -> np.ndarray:
    """Separable 2D Hann taper over the UPA, nonzero at every element."""
    wr = hann(upa.rows + 2, sym=True)[1:-1]
    wc = hann(upa.cols + 2, sym=True)[1:-1]
    return np.outer(wr, wc).ravel()


def tapered_cbf_spectrum(snapshots, upa: UpaConfig, grid: ScanGrid) -> np.ndarray:
    """CBF with a Hann-tapered, renormalized steering vector."""
    x = _snapshot_matrix(snapshots)
    a = _grid_manifolds(upa, grid) * upa_hann_taper(upa)
    w = a / np.linalg.norm(a, axis=1, keepdims=True)
    y = x @ w.conj().T
    return np.mean(np.abs(y) ** 2, axis=0).reshape(grid.shape)


def sample_covariance(snapshots, loading: float | None = None) -> np.ndarray:
    """R_hat = mean_k x_k x_k^H (+ loading * I); default loading 1e-3 tr/N."""
    x = _snapshot_matrix(snapshots)
    n = x.shape[1]
    r = x.conj().T @ x / x.shape[0]
    if loading is None:
        loading = 1e-3 * float(np.real(np.trace(r))) / n
    return r + loading * np.eye(n)


def mvdr_spectrum(
    snapshots, upa: UpaConfig, grid: ScanGrid, loading: float | None = None
) -> np.ndarray:
    """Capon power image P = 1 / (a^H R^-1 a) per scan pixel."""
    r = sample_covariance(snapshots, loading)
    return mvdr_spectrum_from_covariance(r, upa, grid)


def mvdr_spectrum_from_covariance(r, upa: UpaConfig, grid: ScanGrid) -> np.ndarray:
    a = _grid_manifolds(upa, grid)  # (L, N)
    try:
        cho = np.linalg.cholesky(r)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "covariance matrix is singular; re-run with nonzero diagonal loading"
        ) from exc
    z = np.linalg.solve(cho, a.conj().T)  # cho @ z = a^H
    quad = np.sum(np.abs(z) ** 2, axis=0)  # a^H R^-1 a, real
    if np.any(quad <= 0):
        raise ValueError("covariance matrix is not positive definite")
    return (1.0 / quad).reshape(grid.shape)


def mvdr_weights(r, a) -> np.ndarray:
    """Distortionless steering vector w = R^-1 a / (a^H R^-1 a)."""
    ri_a = np.linalg.solve(r, a)
    return ri_a / np.real(np.vdot(a, ri_a))


def ideal_spectrum(mpcs, grid: ScanGrid, lobe_fwhm: float | None = None) -> np.ndarray:
    """Non-coherent Gaussian-lobe splat of each path onto the scan grid.

    Each path deposits amplitude^2 * exp(-dpsi^2 / (2 sigma^2)) with dpsi the
    great-circle angle to the pixel direction and sigma = fwhm / 2.355. The
    default lobe width is twice the grid's angular pitch, the narrowest lobe
    that keeps the spectrum continuous across neighboring pixels.
    """
    if lobe_fwhm is None:
        lobe_fwhm = 2.0 * grid.angular_pitch()
    if lobe_fwhm <= 0:
        raise ValueError("lobe_fwhm must be positive")
    sigma = lobe_fwhm / FWHM_TO_SIGMA
    dirs = grid.directions.reshape(-1, 3)
    out = np.zeros(dirs.shape[0])
    for m in mpcs:
        u = angles_to_direction(*m.aoa)
        dpsi = np.arccos(np.clip(dirs @ u, -1.0, 1.0))
        out += m.amplitude**2 * np.exp(-(dpsi**2) / (2.0 * sigma**2))
    return out.reshape(grid.shape)


def to_db_normalized(linear_image, p_ref: float, dynamic_range_db: float = 100.0):
    """Map linear power to [0, 1] over a fixed dB window below p_ref.

    v = clamp((10 log10(p / p_ref) + D) / D, 0, 1). p_ref is a dataset-level
    constant so spectra stay comparable across views; zero pixels map to 0.
    """
    if p_ref <= 0:
        raise ValueError("p_ref must be positive")
    if dynamic_range_db <= 0:
        raise ValueError("dynamic_range_db must be positive")
    p = np.asarray(linear_image, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.where(p > 0, p / p_ref, np.nan))
    v = (db + dynamic_range_db) / dynamic_range_db
    return np.clip(np.where(np.isnan(v), 0.0, v), 0.0, 1.0)


def per_view_normalize(linear_image) -> np.ndarray:
    """Divide by the per-image maximum (the linear-scale comparison arm)."""
    p = np.asarray(linear_image, dtype=np.float64)
    peak = p.max()
    if peak <= 0:
        raise ValueError("cannot normalize an all-zero image")
    return p / peak
