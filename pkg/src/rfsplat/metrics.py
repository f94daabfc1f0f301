"""Evaluation metrics: PSNR, SSIM, beam-steering deviation, CSI accuracy.

Perceptual metrics are deliberately not implemented (they need a pretrained
network); register_metric lets callers plug an external one into the
evaluation reports as a plain image-pair-to-scalar callable.
"""

from __future__ import annotations

import math

import numpy as np

from .csi import SpatialSpectrum, decode_csi
from .geometry import ScanGrid
from .train import ssim_with_grad

PSNR_INF = math.inf

_EXTRA_METRICS: dict = {}


def register_metric(name: str, fn) -> None:
    """Plug in an external metric fn(image_a, image_b) -> float."""
    _EXTRA_METRICS[name] = fn


def extra_metrics() -> dict:
    return dict(_EXTRA_METRICS)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); math.inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak**2 / mse)


def ssim(a, b) -> float:
    """Mean structural similarity (same constants as the training loss)."""
    value, _ = ssim_with_grad(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return value


def steering_angle_deviation(rendered_gain, target_gain, grid: ScanGrid) -> float:
    """Great-circle angle (degrees) between the two argmax-pixel directions.

    This is the penalty a receiver would pay for pointing its delay-and-sum
    beam at the rendered spectrum's strongest direction instead of the true
    one.
    """
    rendered_gain = np.asarray(rendered_gain, dtype=np.float64)
    target_gain = np.asarray(target_gain, dtype=np.float64)
    if rendered_gain.shape != grid.shape or target_gain.shape != grid.shape:
        raise ValueError("gain planes must match the scan grid")
    if rendered_gain.max() <= 0 or target_gain.max() <= 0:
        raise ValueError("cannot steer from an all-zero gain plane")
    ra = np.unravel_index(int(np.argmax(rendered_gain)), grid.shape)
    ta = np.unravel_index(int(np.argmax(target_gain)), grid.shape)
    ua = grid.pixel_direction(*ra)
    ub = grid.pixel_direction(*ta)
    return float(np.degrees(np.arccos(np.clip(ua @ ub, -1.0, 1.0))))


def top_k_pixels(gain: np.ndarray, k: int) -> list:
    """Indices of the k brightest pixels, brightest first, index-stable."""
    flat = np.asarray(gain, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")[:k]
    h, w = gain.shape
    return [(int(i) // w, int(i) % w) for i in order]


def csi_accuracy(
    rendered: SpatialSpectrum, target: SpatialSpectrum, k: int = 5
) -> dict:
    """Channel-state errors at the k strongest target pixels.

    Decodes both spectra at each pixel and reports per-pixel AoD great-circle
    error (degrees) and delay-offset error (seconds), plus PSNR/SSIM for each
    channel plane.
    """
    if rendered.grid.shape != target.grid.shape:
        raise ValueError("spectra live on different grids")
    if rendered.channel_names != target.channel_names:
        raise ValueError("spectra carry different channels")
    pixels = top_k_pixels(target.gain, k)
    aod_err = []
    delay_err = []
    for px in pixels:
        dec_t = decode_csi(target, px)
        dec_r = decode_csi(rendered, px)  # raises on a zero-gain top pixel
        zt, at = dec_t["aod"]
        zr, ar = dec_r["aod"]
        ut = np.array(
            [np.sin(zt) * np.cos(at), np.sin(zt) * np.sin(at), np.cos(zt)]
        )
        ur = np.array(
            [np.sin(zr) * np.cos(ar), np.sin(zr) * np.sin(ar), np.cos(zr)]
        )
        aod_err.append(float(np.degrees(np.arccos(np.clip(ut @ ur, -1.0, 1.0)))))
        delay_err.append(abs(dec_r["delay_offset_s"] - dec_t["delay_offset_s"]))

    per_channel = {}
    for i, name in enumerate(rendered.channel_names):
        per_channel[name] = {
            "psnr": psnr(rendered.planes[i], target.planes[i]),
            "ssim": ssim(rendered.planes[i], target.planes[i]),
        }
    return {
        "pixels": pixels,
        "aod_err_deg": aod_err,
        "delay_err_s": delay_err,
        "per_channel": per_channel,
    }


def summarize(values) -> dict:
    """{median, mean, p90} of a list, with infs kept out of the mean."""
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {"median": None, "mean": None, "p90": None}
    return {
        "median": float(np.median(arr)),
        "mean": float(np.mean(arr)),
        "p90": float(np.percentile(arr, 90)),
    }
