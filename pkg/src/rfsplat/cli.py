"""Command-line surface: simulate, train, render, eval, inspect.

Every command accepts --config pointing at a JSON file whose keys override
the corresponding flags. The env var RF3DGS_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .beamform import UpaConfig
from .channel import image_source_mpcs
from .csi import EncodeOptions, SpatialSpectrum, encode_target, linear_gain_image
from .geometry import Pose, ProjectionModel, ScanGrid, look_at_pose
from .io import (
    Dataset,
    atomic_path,
    save_png,
    save_train_state,
    load_train_state,
    sha256_file,
    spectrum_previews,
    spectrum_to_rfsp,
    write_manifest,
    write_rfsp,
)
from .metrics import (
    csi_accuracy,
    extra_metrics,
    psnr,
    ssim,
    steering_angle_deviation,
    summarize,
)
from .scene import load_scene, render_visual
from .splat.cloud import load_ply, save_ply
from .splat.rasterize import render
from .train import TrainConfig, TrainingView, ViewDataset, train_stage1, train_stage2


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            setattr(args, key.replace("-", "_"), value)
    return args


def parse_pose(text: str) -> Pose:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 7:
        raise ValueError("pose must be 'x,y,z,qw,qx,qy,qz'")
    return Pose(parts[:3], parts[3:])


def _random_poses(scene, n, rng, margin=0.5, pitch_max_deg=15.0):
    lo = scene.bounds_min + margin
    hi = scene.bounds_max - margin
    poses = []
    for _ in range(n):
        pos = rng.uniform(lo, hi)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        pitch = np.deg2rad(rng.uniform(-pitch_max_deg, pitch_max_deg))
        fwd = np.array(
            [np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)]
        )
        poses.append(look_at_pose(pos, pos + fwd))
    return poses


# --- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    proj = ProjectionModel("pinhole", np.deg2rad(args.fov_x), np.deg2rad(args.fov_y)) \
        if args.projection == "pinhole" else ProjectionModel("equirectangular")
    grid = ScanGrid(proj, args.width, args.height)
    upa = UpaConfig(
        rows=args.array_rows,
        cols=args.array_cols,
        lam=scene.wavelength,
        element_pattern=args.element_pattern,
    )

    poses = _random_poses(scene, args.n_poses, rng)
    ids = list(range(args.n_poses))
    perm = rng.permutation(args.n_poses)
    n_train = int(round(args.split * args.n_poses))
    train_ids = sorted(int(i) for i in perm[:n_train])
    test_ids = sorted(int(i) for i in perm[n_train:])

    realizations = []
    linears = []
    base_opts = EncodeOptions(method=args.method, upa=upa)
    for i, pose in enumerate(poses):
        ch = image_source_mpcs(scene, pose, max_order=args.max_order)
        opts_i = EncodeOptions(
            method=args.method, upa=upa, seed=args.seed * 100_003 + i,
            snapshots=args.snapshots, snr_db=args.snr_db,
        )
        realizations.append((ch, opts_i))
        linears.append(linear_gain_image(ch, grid, opts_i))

    # dataset-level constants from the training split
    p_ref = max(float(linears[i].max()) for i in train_ids)
    offsets = np.concatenate(
        [realizations[i][0].delays() - realizations[i][0].first_delay for i in train_ids]
    )
    delay_window = max(float(np.percentile(offsets, 99)), 1e-12)

    entries = {}
    for i, pose in enumerate(poses):
        ch, opts_i = realizations[i]
        opts_i.p_ref = p_ref
        opts_i.delay_window_s = delay_window
        opts_i.vector_aod = args.vector_aod
        spec = encode_target(ch, grid, opts_i, linear_gain=linears[i])
        vis = render_visual(scene, pose, proj, args.width, args.height)

        vis_rel = f"vis_{i:04d}.rfsp"
        rf_rel = f"rf_{i:04d}.rfsp"
        with atomic_path(out / vis_rel) as tmp:
            write_rfsp(
                tmp,
                np.transpose(vis, (2, 0, 1)),
                {"kind": "visual", "pose": pose.to_dict(), "projection": proj.to_dict()},
            )
        with atomic_path(out / rf_rel) as tmp:
            spectrum_to_rfsp(tmp, spec)
        if args.previews:
            save_png(out / f"vis_{i:04d}.png", vis)
            spectrum_previews(spec, out / f"rf_{i:04d}")
        entries[str(i)] = {
            "pose": pose.to_dict(),
            "visual": vis_rel,
            "spectrum": rf_rel,
            "visual_sha256": sha256_file(out / vis_rel),
            "spectrum_sha256": sha256_file(out / rf_rel),
        }

    manifest = {
        "seed": args.seed,
        "n_poses": args.n_poses,
        "scene": scene.to_dict(),
        "method": args.method,
        "grid": {
            "projection": proj.to_dict(),
            "width": args.width,
            "height": args.height,
        },
        "meta": {
            "p_ref": p_ref,
            "delay_window_s": delay_window,
            "dynamic_range_db": base_opts.dynamic_range_db,
            "normalization": base_opts.resolved_normalization(),
            "vector_aod": args.vector_aod,
            "channel_names": list(
                EncodeOptions(method=args.method, vector_aod=args.vector_aod).channel_names()
            ),
            "array": {"rows": upa.rows, "cols": upa.cols, "pattern": upa.element_pattern},
        },
        "split": {"ratio": args.split, "train": train_ids, "test": test_ids},
        "entries": entries,
    }
    with atomic_path(out / "manifest.json") as tmp:
        tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    print(
        f"wrote {args.n_poses} poses ({len(train_ids)} train / {len(test_ids)} test) to {out}"
    )
    return 0


# --- train ----------------------------------------------------------------------


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig()
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(cfg, f.name, flag)
    return cfg


def _visual_dataset(ds: Dataset) -> ViewDataset:
    views = [
        TrainingView(pose=ds.pose(i), target=ds.load_visual(i)) for i in ds.train_ids
    ]
    return ViewDataset(views, ds.proj, ds.width, ds.height, ("r", "g", "b"))


def _rf_dataset(ds: Dataset) -> ViewDataset:
    names = tuple(ds.meta["channel_names"])
    views = []
    for i in ds.train_ids:
        spec = ds.load_spectrum(i)
        views.append(
            TrainingView(pose=ds.pose(i), target=np.transpose(spec.planes, (1, 2, 0)))
        )
    return ViewDataset(views, ds.proj, ds.width, ds.height, names)


def _save_ckpt(out: Path, tag: str, cloud, state) -> None:
    with atomic_path(out / f"{tag}.ply") as tmp:
        save_ply(cloud, tmp)
    with atomic_path(out / f"{tag}.state.npz") as tmp:
        save_train_state(tmp, state)


def cmd_train(args) -> int:
    ds = Dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args)
    log_path = out / "train_log.jsonl"
    log_fh = open(log_path, "a" if args.resume else "w")

    def log_line(stage):
        def cb(rec):
            log_fh.write(json.dumps({"stage": stage, **rec}, sort_keys=True) + "\n")
        return cb

    def ckpt_cb(tag):
        def cb(it, cloud, state):
            _save_ckpt(out, f"{tag}_{it:06d}", cloud, state)
        return cb

    bounds = (
        np.array(ds.manifest["scene"]["bounds"]["min"]),
        np.array(ds.manifest["scene"]["bounds"]["max"]),
    )
    t0 = time.perf_counter()

    if args.stage in ("visual", "both"):
        cloud = state = None
        if args.resume:
            cloud = load_ply(Path(args.resume + ".ply"))
            state = load_train_state(Path(args.resume + ".state.npz"))
        cloud, state, _ = train_stage1(
            _visual_dataset(ds), cloud, cfg, state=state, bounds=bounds,
            checkpoint_cb=ckpt_cb("ckpt_stage1"), log_cb=log_line(1),
        )
        cloud.meta.update({"grid": ds.manifest["grid"], "stage": 1})
        _save_ckpt(out, "stage1", cloud, state)
        print(f"stage 1 done: {cloud.n} gaussians")

    if args.stage in ("rf", "both"):
        state2_in = None
        if args.stage == "rf":
            # --resume must point at a stage-2 checkpoint prefix; otherwise a
            # stage-1 checkpoint (or out/stage1) supplies the frozen geometry
            src = args.resume or args.stage1_ckpt or str(out / "stage1")
            ply = Path(src + ".ply")
            if not ply.exists():
                print(
                    f"error: stage 'rf' needs trained geometry; no checkpoint at {ply}",
                    file=sys.stderr,
                )
                return 2
            cloud = load_ply(ply)
            if args.resume:
                state2_in = load_train_state(Path(src + ".state.npz"))
        cloud2, state2, _ = train_stage2(
            _rf_dataset(ds), cloud, cfg, state=state2_in,
            checkpoint_cb=ckpt_cb("ckpt_stage2"), log_cb=log_line(2),
        )
        cloud2.meta.update({"grid": ds.manifest["grid"], "spectrum": ds.meta, "stage": 2})
        _save_ckpt(out, "stage2", cloud2, state2)
        print(f"stage 2 done: {cloud2.n} gaussians")

    log_fh.close()
    print(f"training wall time {time.perf_counter() - t0:.1f} s; log at {log_path}")
    return 0


# --- render ---------------------------------------------------------------------


def _spectrum_from_render(cloud, image, grid, names) -> SpatialSpectrum:
    planes = np.clip(np.transpose(image, (2, 0, 1)), 0.0, 1.0)
    meta = dict(cloud.meta.get("spectrum", {}))
    meta.pop("channel_names", None)
    meta["rendered"] = True
    return SpatialSpectrum(grid=grid, planes=planes, channel_names=names, meta=meta)


def cmd_render(args) -> int:
    cloud = load_ply(args.checkpoint)
    pose = parse_pose(args.pose)
    gridinfo = cloud.meta.get("grid")
    if args.width and args.height:
        width, height = args.width, args.height
    elif gridinfo:
        width, height = int(gridinfo["width"]), int(gridinfo["height"])
    else:
        width, height = 128, 96
    if args.projection:
        proj = (
            ProjectionModel("pinhole", np.deg2rad(args.fov_x), np.deg2rad(args.fov_y))
            if args.projection == "pinhole"
            else ProjectionModel("equirectangular")
        )
    elif gridinfo:
        proj = ProjectionModel.from_dict(gridinfo["projection"])
    else:
        proj = ProjectionModel("pinhole")

    t0 = time.perf_counter()
    image, _ = render(cloud, pose, proj, width, height)
    dt = time.perf_counter() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid = ScanGrid(proj, width, height)
    spec = _spectrum_from_render(cloud, image, grid, cloud.channel_names)
    spec.meta["pose"] = pose.to_dict()
    with atomic_path(out) as tmp:
        spectrum_to_rfsp(tmp, spec)
    previews = spectrum_previews(spec, out.with_suffix(""))
    print(f"rendered {width}x{height}x{cloud.n_channels} in {dt * 1e3:.2f} ms")
    print(f"tensor: {out}; previews: {', '.join(str(p) for p in previews)}")
    return 0


# --- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    cloud = load_ply(args.checkpoint)
    ds = Dataset(args.dataset)
    ids = ds.test_ids if args.split == "test" else ds.train_ids
    if not ids:
        print(f"error: the {args.split} split is empty", file=sys.stderr)
        return 2
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"psnr", "ssim", "steer", "csi"}
    bad = set(wanted) - known
    if bad:
        print(f"error: unknown metrics {sorted(bad)}; pick from {sorted(known)}",
              file=sys.stderr)
        return 2

    rows = []
    for i in ids:
        target = ds.load_spectrum(i)
        image, _ = render(cloud, ds.pose(i), ds.proj, ds.width, ds.height)
        rendered = _spectrum_from_render(cloud, image, ds.grid, target.channel_names)
        rendered.meta.update(
            {k: target.meta[k] for k in ("p_ref", "delay_window_s", "normalization",
                                         "dynamic_range_db", "per_view_scale",
                                         "vector_aod")
             if k in target.meta}
        )
        row = {"pose_id": i}
        if "psnr" in wanted:
            for c, name in enumerate(target.channel_names):
                row[f"psnr_{name}"] = psnr(rendered.planes[c], target.planes[c])
        if "ssim" in wanted:
            for c, name in enumerate(target.channel_names):
                row[f"ssim_{name}"] = ssim(rendered.planes[c], target.planes[c])
        if "steer" in wanted:
            row["steer_deg"] = steering_angle_deviation(
                rendered.gain, target.gain, ds.grid
            )
        if "csi" in wanted:
            acc = csi_accuracy(rendered, target, k=args.top_k)
            row["aod_err_deg_top1"] = acc["aod_err_deg"][0]
            row["aod_err_deg_mean"] = float(np.mean(acc["aod_err_deg"]))
            row["delay_err_s_top1"] = acc["delay_err_s"][0]
            row["delay_err_s_mean"] = float(np.mean(acc["delay_err_s"]))
        for name, fn in extra_metrics().items():
            row[name] = float(
                fn(np.transpose(rendered.planes, (1, 2, 0)),
                   np.transpose(target.planes, (1, 2, 0)))
            )
        rows.append(row)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"metrics_{args.split}.csv"
    keys = list(rows[0].keys())
    with atomic_path(csv_path) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    summary = {
        k: summarize([r[k] for r in rows]) for k in keys if k != "pose_id"
    }
    summary_path = out / f"summary_{args.split}.json"
    with atomic_path(summary_path) as tmp:
        tmp.write_text(json.dumps(summary, sort_keys=True, indent=2))
    print(f"wrote {csv_path} and {summary_path}")
    for k, v in summary.items():
        if v["median"] is not None:
            print(f"  {k}: median {v['median']:.4g}  mean {v['mean']:.4g}  p90 {v['p90']:.4g}")
    return 0


# --- inspect --------------------------------------------------------------------


def cmd_inspect(args) -> int:
    cloud = load_ply(args.checkpoint)
    op = cloud.opacities
    sc = cloud.scales
    print(f"checkpoint: {args.checkpoint}")
    print(f"  gaussians: {cloud.n}")
    print(f"  channels:  {', '.join(cloud.channel_names)} ({cloud.n_coeffs} SH coeffs)")
    print(f"  extent:    {cloud.scene_extent:.3f} m")
    print(f"  opacity:   min {op.min():.4f}  median {np.median(op):.4f}  max {op.max():.4f}")
    print(f"  scale:     min {sc.min():.4g}  median {np.median(sc):.4g}  max {sc.max():.4g} m")
    if cloud.meta:
        print(f"  meta:      {json.dumps(cloud.meta, sort_keys=True)[:200]}")
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rfsplat",
        description="Simulate multipath spectra and train/evaluate splat radiance fields",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a visual + RF dataset from a scene")
    sim.add_argument("--scene", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--n-poses", type=int, default=60)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--method", default="ideal", choices=["ideal", "cbf", "tcbf", "mvdr"])
    sim.add_argument("--width", type=int, default=128)
    sim.add_argument("--height", type=int, default=96)
    sim.add_argument("--projection", default="pinhole", choices=["pinhole", "equirectangular"])
    sim.add_argument("--fov-x", type=float, default=90.0, help="degrees")
    sim.add_argument("--fov-y", type=float, default=73.0, help="degrees")
    sim.add_argument("--split", type=float, default=0.8)
    sim.add_argument("--max-order", type=int, default=2)
    sim.add_argument("--array-rows", type=int, default=8)
    sim.add_argument("--array-cols", type=int, default=8)
    sim.add_argument("--element-pattern", default="isotropic",
                     choices=["isotropic", "cosine_patch"])
    sim.add_argument("--snapshots", type=int, default=128)
    sim.add_argument("--snr-db", type=float, default=30.0)
    sim.add_argument("--vector-aod", action="store_true")
    sim.add_argument("--previews", action="store_true")
    sim.add_argument("--config")
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="two-stage training on a simulated dataset")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--stage", default="both", choices=["visual", "rf", "both"])
    tr.add_argument("--stage1-ckpt", help="path prefix of stage-1 checkpoint (for --stage rf)")
    tr.add_argument("--resume", help="path prefix of a checkpoint to resume from")
    tr.add_argument("--config")
    for f in fields(TrainConfig):
        if f.name in ("warmup_upscale_iters", "adam_betas"):
            continue
        kind = type(f.default) if f.default is not None else float
        if kind is bool:
            tr.add_argument(f"--{f.name.replace('_', '-')}", type=lambda s: s == "true",
                            default=None)
        elif kind in (int, float):
            tr.add_argument(f"--{f.name.replace('_', '-')}", type=kind, default=None)
    tr.set_defaults(func=cmd_train)

    rd = sub.add_parser("render", help="render a spectrum at a pose from a checkpoint")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--pose", required=True, help="x,y,z,qw,qx,qy,qz")
    rd.add_argument("--out", required=True, help="output .rfsp path")
    rd.add_argument("--width", type=int)
    rd.add_argument("--height", type=int)
    rd.add_argument("--projection", choices=["pinhole", "equirectangular"])
    rd.add_argument("--fov-x", type=float, default=90.0)
    rd.add_argument("--fov-y", type=float, default=73.0)
    rd.add_argument("--config")
    rd.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="render and score a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test", choices=["test", "train"])
    ev.add_argument("--metrics", default="psnr,ssim,steer,csi")
    ev.add_argument("--top-k", type=int, default=5)
    ev.add_argument("--config")
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="print checkpoint statistics")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args = _apply_config_file(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
