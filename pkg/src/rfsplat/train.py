"""Two-stage fusion training of the splat cloud.

Stage 1 fits geometry and appearance to visual images with the standard
adaptive-density schedule: a resolution warm-up (quarter resolution until
iteration 250, half until 500), split/clone densification every 100
iterations inside the densify window, pruning of weak or oversized splats,
and opacity resets every 3000 iterations. Stage 2 freezes all geometry
fields, re-initializes the SH coefficients for the spectrum channels, and
retrains only SH and opacity against the radio spectra.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Pose, ProjectionModel
from .splat.cloud import GaussianCloud, logit, random_cloud
from .splat.rasterize import render, render_backward
from .splat.sh import C0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class TrainConfig:
    """Schedule and optimizer knobs; defaults follow the usual splatting recipe."""

    stage1_iters: int = 7000
    stage2_iters: int = 5000
    warmup_upscale_iters: tuple = (250, 500)
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int | None = None  # default stage1_iters // 2
    opacity_reset_interval: int = 3000
    grad_threshold: float = 2e-4
    scale_split_frac: float = 0.01  # of scene extent
    prune_opacity: float = 0.005
    prune_screen_frac: float = 0.3
    lambda_ssim: float = 0.2
    lr_position_init: float = 1.6e-4  # x scene extent
    lr_position_final: float = 1.6e-6  # x scene extent
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest_div: float = 20.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    init_points: int = 10_000
    checkpoint_interval: int = 1000
    seed: int = 0
    keep_visual_sh: bool = False  # stage 2: keep visual channels alongside CSI

    def resolved_densify_stop(self) -> int:
        return self.stage1_iters // 2 if self.densify_stop is None else self.densify_stop

    def resolution_factor(self, iteration: int) -> int:
        """Downscale factor during the warm-up (4, then 2, then 1)."""
        up1, up2 = self.warmup_upscale_iters
        if iteration <= up1:
            return 4
        if iteration <= up2:
            return 2
        return 1

    def schedule_events(self) -> dict:
        """Closed-form stage-1 schedule derived from the config."""
        up1, up2 = self.warmup_upscale_iters
        stop = self.resolved_densify_stop()
        return {
            "upscale": [i for i in (up1, up2) if i <= self.stage1_iters],
            "densify": [
                i
                for i in range(
                    self.densify_interval, self.stage1_iters + 1, self.densify_interval
                )
                if self.densify_start <= i <= stop
            ],
            "opacity_reset": list(
                range(self.opacity_reset_interval, self.stage1_iters + 1,
                      self.opacity_reset_interval)
            ),
        }


@dataclass
class TrainState:
    """Optimizer moments plus the densification statistics."""

    iteration: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    grad_accum: np.ndarray | None = None  # summed screen grad norm per splat
    grad_denom: np.ndarray | None = None  # render count per splat
    max_radii: np.ndarray | None = None  # peak screen radius since last prune
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def ensure_buffers(self, cloud: GaussianCloud):
        shapes = {
            "means": cloud.means.shape,
            "quaternions": cloud.quaternions.shape,
            "log_scales": cloud.log_scales.shape,
            "opacity_logits": cloud.opacity_logits.shape,
            "sh": cloud.sh.shape,
        }
        for name, shape in shapes.items():
            if name not in self.adam_m or self.adam_m[name].shape != shape:
                self.adam_m[name] = np.zeros(shape)
                self.adam_v[name] = np.zeros(shape)
        n = cloud.n
        if self.grad_accum is None or self.grad_accum.shape[0] != n:
            self.grad_accum = np.zeros(n)
            self.grad_denom = np.zeros(n)
            self.max_radii = np.zeros(n)

    def extend(self, n_new: int):
        for name in self.adam_m:
            pad = np.zeros((n_new,) + self.adam_m[name].shape[1:])
            self.adam_m[name] = np.concatenate([self.adam_m[name], pad])
            self.adam_v[name] = np.concatenate([self.adam_v[name], pad])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(n_new)])
        self.grad_denom = np.concatenate([self.grad_denom, np.zeros(n_new)])
        self.max_radii = np.concatenate([self.max_radii, np.zeros(n_new)])

    def keep(self, mask: np.ndarray):
        for name in self.adam_m:
            self.adam_m[name] = self.adam_m[name][mask]
            self.adam_v[name] = self.adam_v[name][mask]
        self.grad_accum = self.grad_accum[mask]
        self.grad_denom = self.grad_denom[mask]
        self.max_radii = self.max_radii[mask]

    def reset_stats(self):
        self.grad_accum[:] = 0.0
        self.grad_denom[:] = 0.0
        self.max_radii[:] = 0.0


# --- loss -------------------------------------------------------------------


def _gauss_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(img):
    """Separable Gaussian filter, zero-padded same size, per channel."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def ssim_with_grad(a, b):
    """Mean SSIM over pixels and channels, plus d(mean SSIM)/da.

    Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a**2
    var_b = _blur(b * b) - mu_b**2
    cov = _blur(a * b) - mu_a * mu_b

    lum_n = 2.0 * mu_a * mu_b + c1
    lum_d = mu_a**2 + mu_b**2 + c1
    cs_n = 2.0 * cov + c2
    cs_d = var_a + var_b + c2
    lum = lum_n / lum_d
    cs = cs_n / cs_d
    ssim_map = lum * cs
    value = float(np.mean(ssim_map))

    # closed-form gradient, filtered back through the (symmetric) window
    dlum_dmua = (2.0 * mu_b * lum_d - 2.0 * mu_a * lum_n) / lum_d**2
    dcs_dvar = -cs / cs_d
    dcs_dcov = 2.0 / cs_d
    w1 = cs * dlum_dmua + lum * (dcs_dvar * (-2.0 * mu_a) + dcs_dcov * (-mu_b))
    w2 = lum * dcs_dvar
    w3 = lum * dcs_dcov
    grad = _blur(w1) + 2.0 * a * _blur(w2) + b * _blur(w3)
    return value, grad / ssim_map.size


def loss_and_grad(rendered, target, lambda_ssim: float = 0.2):
    """(1 - lambda) L1 + lambda (1 - SSIM), with the analytic image gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    if lambda_ssim == 0.0:
        return l1, g_l1
    s, g_s = ssim_with_grad(rendered, target)
    value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    grad = (1.0 - lambda_ssim) * g_l1 - lambda_ssim * g_s
    return value, grad


# --- optimizer ----------------------------------------------------------------


def position_lr(cfg: TrainConfig, iteration: int, scene_extent: float) -> float:
    """Exponential decay over stage 1, clamped at the final value."""
    lo = cfg.lr_position_final * scene_extent
    hi = cfg.lr_position_init * scene_extent
    if cfg.stage1_iters <= 0:
        return lo
    frac = min(max(iteration / cfg.stage1_iters, 0.0), 1.0)
    return float(hi * (lo / hi) ** frac)


def optimizer_step(
    state: TrainState,
    cloud: GaussianCloud,
    grads: dict,
    lr: dict,
    betas=(0.9, 0.999),
    eps: float = 1e-15,
):
    """Biased first/second-moment adaptive update with per-group rates.

    lr values may be scalars or arrays broadcastable to the parameter shape.
    Quaternions are renormalized to unit length after the update.
    """
    state.adam_t += 1
    b1, b2 = betas
    params = {
        "means": cloud.means,
        "quaternions": cloud.quaternions,
        "log_scales": cloud.log_scales,
        "opacity_logits": cloud.opacity_logits,
        "sh": cloud.sh,
    }
    bc1 = 1.0 - b1**state.adam_t
    bc2 = 1.0 - b2**state.adam_t
    for name, p in params.items():
        if name not in lr:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr[name] * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if "quaternions" in lr:
        cloud.normalize_rotations()


def _lr_groups(cfg: TrainConfig, cloud: GaussianCloud, iteration: int, stage2: bool):
    sh_lr = np.full((1, 1, cloud.n_coeffs), cfg.lr_sh_dc / cfg.lr_sh_rest_div)
    sh_lr[..., 0] = cfg.lr_sh_dc
    groups = {"sh": sh_lr, "opacity_logits": cfg.lr_opacity}
    if not stage2:
        groups.update(
            {
                "means": position_lr(cfg, iteration, cloud.scene_extent),
                "quaternions": cfg.lr_rotation,
                "log_scales": cfg.lr_scale,
            }
        )
    return groups


# --- adaptive density ---------------------------------------------------------


def split_and_clone(cloud: GaussianCloud, state: TrainState, cfg: TrainConfig):
    """Densify over-stressed splats: split the large ones, clone the small.

    Splats whose mean accumulated screen-space positional gradient exceeds
    the threshold are refined. Large ones (max scale above the split
    threshold) are replaced by two children offset +-0.5 sigma along the
    major axis with scales divided by 1.6; small ones are cloned with a
    sampled sigma offset. Returns (cloud, n_split, n_cloned).
    """
    denom = np.maximum(state.grad_denom, 1.0)
    avg_grad = state.grad_accum / denom
    stressed = avg_grad > cfg.grad_threshold
    scales = cloud.scales
    max_scale = scales.max(axis=1)
    limit = cfg.scale_split_frac * cloud.scene_extent
    split_mask = stressed & (max_scale > limit)
    clone_mask = stressed & ~split_mask

    pieces = [cloud]
    n_split = int(split_mask.sum())
    n_clone = int(clone_mask.sum())

    if n_clone:
        sub = cloud.select(clone_mask)
        offs = state.rng.standard_normal((n_clone, 3)) * sub.scales
        rot = _rot_mats(sub.quaternions)
        sub.means = sub.means + np.einsum("nij,nj->ni", rot, offs)
        pieces.append(sub)

    if n_split:
        parent = cloud.select(split_mask)
        rot = _rot_mats(parent.quaternions)
        major = np.argmax(parent.scales, axis=1)
        axis = rot[np.arange(n_split), :, major]
        sigma = parent.scales[np.arange(n_split), major]
        for sign in (+0.5, -0.5):
            child = parent.copy()
            child.means = parent.means + sign * sigma[:, None] * axis
            child.log_scales = parent.log_scales - np.log(1.6)
            pieces.append(child)

    keep = ~split_mask  # parents of splits are replaced by their children
    merged = _concat_clouds([pieces[0].select(keep)] + pieces[1:])
    state.keep(keep)
    state.extend(merged.n - int(keep.sum()))
    return merged, n_split, n_clone


def prune(cloud: GaussianCloud, state: TrainState, cfg: TrainConfig, min_side: int):
    """Drop splats that are nearly transparent or dominate the screen."""
    weak = cloud.opacities < cfg.prune_opacity
    huge = state.max_radii > cfg.prune_screen_frac * min_side
    drop = weak | huge
    if not np.any(drop):
        return cloud, 0
    keep = ~drop
    if not np.any(keep):  # never empty the cloud
        keep[np.argmax(cloud.opacities)] = True
    state.keep(keep)
    return cloud.select(keep), int(np.sum(~keep))


def reset_opacity(cloud: GaussianCloud, state: TrainState, ceiling: float = 0.01):
    """Clamp every opacity to <= ceiling and restart its moments."""
    cap = float(logit(ceiling))
    cloud.opacity_logits = np.minimum(cloud.opacity_logits, cap)
    state.adam_m["opacity_logits"][:] = 0.0
    state.adam_v["opacity_logits"][:] = 0.0


def _rot_mats(quats):
    from .splat.cloud import quats_to_matrices

    return quats_to_matrices(quats / np.linalg.norm(quats, axis=1, keepdims=True))


def _concat_clouds(clouds):
    first = clouds[0]
    return GaussianCloud(
        means=np.concatenate([c.means for c in clouds]),
        quaternions=np.concatenate([c.quaternions for c in clouds]),
        log_scales=np.concatenate([c.log_scales for c in clouds]),
        opacity_logits=np.concatenate([c.opacity_logits for c in clouds]),
        sh=np.concatenate([c.sh for c in clouds]),
        channel_names=first.channel_names,
        scene_extent=first.scene_extent,
        meta=dict(first.meta),
    )


# --- datasets -----------------------------------------------------------------


@dataclass
class TrainingView:
    pose: Pose
    target: np.ndarray  # (H, W, C) in [0, 1]


@dataclass
class ViewDataset:
    views: list
    proj: ProjectionModel
    width: int
    height: int
    channel_names: tuple

    def __post_init__(self):
        if len(self.views) == 0:
            raise ValueError("dataset has no views")


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w, c = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image {w}x{h} not divisible by warm-up factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


class _ViewSampler:
    """Epoch-shuffled view order, deterministic under the state RNG."""

    def __init__(self, n_views: int, rng: np.random.Generator):
        self.n = n_views
        self.rng = rng
        self._order = []

    def next(self) -> int:
        if not self._order:
            self._order = list(self.rng.permutation(self.n))
        return int(self._order.pop(0))


# --- stages -------------------------------------------------------------------


def train_stage1(
    dataset: ViewDataset,
    cloud: GaussianCloud | None,
    cfg: TrainConfig,
    state: TrainState | None = None,
    bounds=None,
    checkpoint_cb=None,
    log_cb=None,
):
    """Geometry + appearance optimization from visual images.

    Runs the full schedule (warm-up, densify/prune, opacity resets), one
    optimizer step per iteration on an epoch-shuffled view. Returns
    (cloud, state, log) where log is a list of dict records; schedule events
    carry an 'event' key.
    """
    if cloud is None:
        if bounds is None:
            raise ValueError("need bounds for random initialization")
        rng = np.random.default_rng(cfg.seed)
        cloud = random_cloud(
            rng, cfg.init_points, bounds[0], bounds[1],
            channel_names=dataset.channel_names,
        )
    else:
        cloud = cloud.copy()
    if state is None:
        state = TrainState(rng=np.random.default_rng(cfg.seed + 1))
    state.ensure_buffers(cloud)

    pyramid = {
        f: [_downsample(v.target, f) for v in dataset.views]
        for f in (4, 2, 1)
    }
    sampler = _ViewSampler(len(dataset.views), state.rng)
    log = []
    densify_stop = cfg.resolved_densify_stop()

    for it in range(state.iteration + 1, cfg.stage1_iters + 1):
        state.iteration = it
        factor = cfg.resolution_factor(it)
        w, h = dataset.width // factor, dataset.height // factor
        vi = sampler.next()
        view = dataset.views[vi]

        image, aux = render(cloud, view.pose, dataset.proj, w, h)
        value, grad_img = loss_and_grad(image, pyramid[factor][vi], cfg.lambda_ssim)
        grads = render_backward(cloud, aux, grad_img)
        optimizer_step(
            state, cloud, grads, _lr_groups(cfg, cloud, it, stage2=False),
            betas=cfg.adam_betas, eps=cfg.adam_eps,
        )

        state.grad_accum += grads["screen_grad_norm"]
        state.grad_denom += aux.visible.astype(np.float64)
        state.max_radii = np.maximum(state.max_radii, aux.radii_px)

        events = []
        if it in cfg.warmup_upscale_iters:
            events.append("upscale")
        if (
            it % cfg.densify_interval == 0
            and cfg.densify_start <= it <= densify_stop
        ):
            cloud, n_split, n_clone = split_and_clone(cloud, state, cfg)
            cloud, n_pruned = prune(cloud, state, cfg, min(dataset.width, dataset.height))
            state.reset_stats()
            events.append(f"densify(split={n_split},clone={n_clone},prune={n_pruned})")
        if it % cfg.opacity_reset_interval == 0:
            reset_opacity(cloud, state)
            events.append("opacity_reset")
        if checkpoint_cb is not None and it % cfg.checkpoint_interval == 0:
            checkpoint_cb(it, cloud, state)

        rec = {"iter": it, "loss": value, "n_gaussians": cloud.n}
        if events:
            rec["event"] = ";".join(events)
        log.append(rec)
        if log_cb is not None:
            log_cb(rec)
    return cloud, state, log


def reinit_sh_for_channels(
    cloud: GaussianCloud, channel_names, channel_means
) -> GaussianCloud:
    """Fresh SH for the spectrum channels: DC from the dataset mean, rest 0."""
    out = cloud.copy()
    n_ch = len(channel_names)
    sh = np.zeros((cloud.n, n_ch, cloud.n_coeffs))
    sh[:, :, 0] = np.asarray(channel_means, dtype=np.float64) / C0
    out.sh = sh
    out.channel_names = tuple(channel_names)
    return out


def train_stage2(
    dataset: ViewDataset,
    cloud: GaussianCloud,
    cfg: TrainConfig,
    state: TrainState | None = None,
    checkpoint_cb=None,
    log_cb=None,
):
    """Radio retraining: only SH and opacity move; geometry is frozen.

    The SH coefficients are re-initialized for the spectrum channels (DC from
    the per-channel dataset mean) unless the cloud already ends with exactly
    those channels, which happens when resuming. With keep_visual_sh the
    stage-1 channels stay in front of the new spectrum channels; they receive
    no loss gradient and therefore keep their coefficients.
    """
    if cloud.n == 0:
        raise ValueError("stage 2 needs the stage-1 cloud")
    names = tuple(dataset.channel_names)
    if cloud.channel_names[-len(names):] != names:
        ch_means = np.mean(
            [v.target.reshape(-1, v.target.shape[-1]).mean(axis=0) for v in dataset.views],
            axis=0,
        )
        fresh = reinit_sh_for_channels(cloud, names, ch_means)
        if cfg.keep_visual_sh:
            fresh.sh = np.concatenate([cloud.sh, fresh.sh], axis=1)
            fresh.channel_names = tuple(cloud.channel_names) + names
        cloud = fresh
    else:
        cloud = cloud.copy()
    ch_offset = len(cloud.channel_names) - len(names)

    if state is None:
        state = TrainState(rng=np.random.default_rng(cfg.seed + 2))
    state.adam_m.clear()
    state.adam_v.clear()
    state.ensure_buffers(cloud)

    geometry_before = cloud.geometry_bytes()
    sampler = _ViewSampler(len(dataset.views), state.rng)
    log = []

    for it in range(state.iteration + 1, cfg.stage2_iters + 1):
        state.iteration = it
        vi = sampler.next()
        view = dataset.views[vi]
        image, aux = render(cloud, view.pose, dataset.proj, dataset.width, dataset.height)
        value, grad_sub = loss_and_grad(
            image[..., ch_offset:], view.target, cfg.lambda_ssim
        )
        grad_img = np.zeros_like(image)
        grad_img[..., ch_offset:] = grad_sub
        grads = render_backward(cloud, aux, grad_img, geometry=False)
        optimizer_step(
            state, cloud, grads, _lr_groups(cfg, cloud, it, stage2=True),
            betas=cfg.adam_betas, eps=cfg.adam_eps,
        )
        if checkpoint_cb is not None and it % cfg.checkpoint_interval == 0:
            checkpoint_cb(it, cloud, state)
        rec = {"iter": it, "loss": value, "n_gaussians": cloud.n}
        log.append(rec)
        if log_cb is not None:
            log_cb(rec)

    if cloud.geometry_bytes() != geometry_before:
        raise RuntimeError("stage-2 geometry freeze violated")
    return cloud, state, log
