"""Encoding multipath state into multi-channel spatial-spectrum images.

A SpatialSpectrum stacks a gain plane with per-direction channel-state
planes (departure angles and normalized delay), every value in [0, 1] so the
planes can be treated exactly like image color channels by the renderer and
the training loop. Decoding inverts the arithmetic at any pixel with nonzero
gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beamform import (
    FWHM_TO_SIGMA,
    UpaConfig,
    cbf_spectrum,
    ideal_spectrum,
    mvdr_spectrum,
    per_view_normalize,
    synthesize_snapshots,
    tapered_cbf_spectrum,
    to_db_normalized,
)
from .channel import ChannelRealization
from .geometry import ScanGrid, angles_to_direction

ANGLE_CHANNELS = ("gain", "aod_az", "aod_ze", "delay")
VECTOR_CHANNELS = ("gain", "aod_x", "aod_y", "aod_z", "delay")


@dataclass
class EncodeOptions:
    """Knobs for building training spectra from a channel realization.

    method selects the gain-plane estimator; the CSI planes always use the
    ideal-kernel dominant-path assignment. delay_window_s and p_ref are
    dataset-level constants shared by every view. normalization defaults to
    the fixed-dB transform except for the cbf/tcbf comparison arm, which uses
    the per-view linear normalization.
    """

    method: str = "ideal"  # ideal | cbf | tcbf | mvdr
    delay_window_s: float = 1e-7
    p_ref: float = 1.0
    dynamic_range_db: float = 100.0
    lobe_fwhm: float | None = None  # ideal kernel width; default 2x pixel pitch
    upa: UpaConfig | None = None  # required for cbf/tcbf/mvdr
    snapshots: int = 128
    snr_db: float | None = 30.0
    coherent: bool = False
    seed: int = 0
    normalization: str | None = None  # "db" | "per_view"; None = per-method default
    vector_aod: bool = False  # encode AoD as a 3-channel unit vector

    def resolved_normalization(self) -> str:
        if self.normalization is not None:
            return self.normalization
        return "per_view" if self.method in ("cbf", "tcbf") else "db"

    def channel_names(self) -> tuple:
        return VECTOR_CHANNELS if self.vector_aod else ANGLE_CHANNELS


@dataclass
class SpatialSpectrum:
    """Multi-channel angular image plus the metadata needed to decode it."""

    grid: ScanGrid
    planes: np.ndarray  # (C, H, W), all values in [0, 1]
    channel_names: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.shape[0] != len(self.channel_names):
            raise ValueError("channel name count does not match planes")
        if self.planes.shape[1:] != self.grid.shape:
            raise ValueError("plane dimensions do not match the grid")

    def plane(self, name: str) -> np.ndarray:
        return self.planes[self.channel_names.index(name)]

    @property
    def gain(self) -> np.ndarray:
        return self.plane("gain")


def linear_gain_image(
    ch: ChannelRealization, grid: ScanGrid, opts: EncodeOptions
) -> np.ndarray:
    """The raw (pre-normalization) power image for the configured method."""
    method = opts.method
    if method == "ideal":
        return ideal_spectrum(ch.mpcs, grid, opts.lobe_fwhm)
    if method in ("cbf", "tcbf", "mvdr"):
        if opts.upa is None:
            raise ValueError(f"method {method!r} needs a UpaConfig")
        snaps = synthesize_snapshots(
            ch.mpcs,
            opts.upa,
            count=opts.snapshots,
            snr_db=opts.snr_db,
            seed=opts.seed,
            coherent=opts.coherent,
        )
        est = {"cbf": cbf_spectrum, "tcbf": tapered_cbf_spectrum, "mvdr": mvdr_spectrum}
        return est[method](snaps, opts.upa, grid)
    raise ValueError(f"unknown spectrum method {method!r}")


def _gain_plane(ch: ChannelRealization, grid: ScanGrid, opts: EncodeOptions, linear=None):
    method = opts.method
    if linear is not None:
        pass
    elif method == "ideal":
        linear = ideal_spectrum(ch.mpcs, grid, opts.lobe_fwhm)
    elif method in ("cbf", "tcbf", "mvdr"):
        if opts.upa is None:
            raise ValueError(f"method {method!r} needs a UpaConfig")
        snaps = synthesize_snapshots(
            ch.mpcs,
            opts.upa,
            count=opts.snapshots,
            snr_db=opts.snr_db,
            seed=opts.seed,
            coherent=opts.coherent,
        )
        est = {"cbf": cbf_spectrum, "tcbf": tapered_cbf_spectrum, "mvdr": mvdr_spectrum}
        linear = est[method](snaps, opts.upa, grid)
    else:
        raise ValueError(f"unknown spectrum method {method!r}")

    norm = opts.resolved_normalization()
    if norm == "db":
        gain = to_db_normalized(linear, opts.p_ref, opts.dynamic_range_db)
        scale = None
    elif norm == "per_view":
        gain = per_view_normalize(linear)
        scale = float(np.asarray(linear).max())
    else:
        raise ValueError(f"unknown normalization {norm!r}")
    return gain, scale


def dominant_path_index(ch: ChannelRealization, grid: ScanGrid, sigma: float):
    """Per-pixel argmax of the ideal-kernel weighted power over paths."""
    dirs = grid.directions.reshape(-1, 3)
    aoa = ch.aoa_array()
    u = angles_to_direction(aoa[:, 0], aoa[:, 1])  # (M, 3)
    dpsi = np.arccos(np.clip(dirs @ u.T, -1.0, 1.0))  # (L, M)
    w = ch.amplitudes() ** 2 * np.exp(-(dpsi**2) / (2.0 * sigma**2))
    return np.argmax(w, axis=1).reshape(grid.shape)


def encode_target(
    ch: ChannelRealization, grid: ScanGrid, opts: EncodeOptions, linear_gain=None
) -> SpatialSpectrum:
    """Build the multi-channel training target for one Rx pose.

    The gain plane comes from the selected estimator mapped into [0, 1]. At
    each pixel the dominant path (largest ideal-kernel weighted power there)
    supplies the CSI values, each scaled by that pixel's gain g: azimuth
    g * phi/2pi, zenith g * theta/pi, delay g * (1 - (tau - tau_first)/W)
    so nearer arrivals are brighter. Zero-gain pixels carry zero everywhere.
    A precomputed linear power image may be passed to skip the estimator.
    """
    if len(ch.mpcs) == 0:
        raise ValueError("cannot encode an empty channel realization")
    if opts.delay_window_s <= 0:
        raise ValueError("delay_window_s must be positive")

    gain, view_scale = _gain_plane(ch, grid, opts, linear_gain)
    fwhm = opts.lobe_fwhm if opts.lobe_fwhm is not None else 2.0 * grid.angular_pitch()
    idx = dominant_path_index(ch, grid, fwhm / FWHM_TO_SIGMA)

    aod = ch.aod_array()[idx.ravel()].reshape(grid.shape + (2,))
    delays = ch.delays()[idx.ravel()].reshape(grid.shape)
    tau0 = ch.first_delay
    delay_norm = np.clip(1.0 - (delays - tau0) / opts.delay_window_s, 0.0, 1.0)

    if opts.vector_aod:
        uvec = angles_to_direction(aod[..., 0], aod[..., 1])  # (H, W, 3)
        planes = np.stack(
            [
                gain,
                gain * (uvec[..., 0] + 1.0) / 2.0,
                gain * (uvec[..., 1] + 1.0) / 2.0,
                gain * (uvec[..., 2] + 1.0) / 2.0,
                gain * delay_norm,
            ]
        )
    else:
        planes = np.stack(
            [
                gain,
                gain * aod[..., 1] / (2.0 * np.pi),
                gain * aod[..., 0] / np.pi,
                gain * delay_norm,
            ]
        )
    planes = np.clip(planes, 0.0, 1.0)

    meta = {
        "p_ref": opts.p_ref,
        "dynamic_range_db": opts.dynamic_range_db,
        "delay_window_s": opts.delay_window_s,
        "normalization": opts.resolved_normalization(),
        "per_view_scale": view_scale,
        "first_delay_s": tau0,
        "method": opts.method,
        "vector_aod": opts.vector_aod,
        "rx_pose": ch.rx_pose.to_dict(),
    }
    return SpatialSpectrum(
        grid=grid, planes=planes, channel_names=opts.channel_names(), meta=meta
    )


def decode_csi(spec: SpatialSpectrum, pixel) -> dict:
    """Invert the encoding at one (row, col) pixel with nonzero gain.

    Returns absolute gain in dB (10 log10 of linear power), the departure
    direction (zenith, azimuth), and the delay offset from the view's first
    arrival in seconds.
    """
    row, col = pixel
    g = float(spec.gain[row, col])
    if g <= 0.0:
        raise ValueError("CSI is undefined at a zero-gain pixel")
    meta = spec.meta
    w = float(meta["delay_window_s"])

    if meta.get("normalization", "db") == "db":
        d = float(meta.get("dynamic_range_db", 100.0))
        gain_db = g * d - d + 10.0 * np.log10(float(meta["p_ref"]))
    else:
        gain_db = 10.0 * np.log10(g * float(meta["per_view_scale"]))

    if meta.get("vector_aod", False):
        v = np.array(
            [
                spec.plane("aod_x")[row, col],
                spec.plane("aod_y")[row, col],
                spec.plane("aod_z")[row, col],
            ]
        )
        v = 2.0 * (v / g) - 1.0
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("degenerate AoD vector at this pixel")
        v = v / n
        zenith = float(np.arccos(np.clip(v[2], -1.0, 1.0)))
        azimuth = float(np.mod(np.arctan2(v[1], v[0]), 2.0 * np.pi))
    else:
        azimuth = float(spec.plane("aod_az")[row, col] / g * 2.0 * np.pi)
        zenith = float(spec.plane("aod_ze")[row, col] / g * np.pi)

    delay_offset = float((1.0 - spec.plane("delay")[row, col] / g) * w)
    return {
        "gain_db": float(gain_db),
        "aod": (zenith, azimuth),
        "delay_offset_s": delay_offset,
    }
