"""Command-line entry point: ``scpainter <command> [flags]``.

Exit codes: 0 success, 1 internal invariant violation, 2 user-input error.
Set ``SCPAINTER_LOG`` (DEBUG, INFO, WARNING, ...) to change verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import filelock
import numpy as np

from . import fileio
from .conditioning import Trajectory, render_joint
from .dataset import (
    MAX_NEIGHBORS,
    AssetTrack,
    Scene,
    build_insertion_pair,
    build_nvs_pair,
    embed_first_frame,
    frame_cloud,
    job_seed,
    neighbor_window,
)
from .diffusion import TrainConfig, load_checkpoint, prepare_pair, sample, save_checkpoint, train
from .geometry import lateral_shift, merge_clouds
from .metrics import FrameMetric, MetricsReport, psnr
from .splat import align_asset
from .synth import canonical_scene

log = logging.getLogger("scpainter")

LOCK_NAME = ".scpainter.lock"
EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad user input: missing paths, malformed flags, mismatched inputs."""


def parse_frame_range(text: str | None, n: int) -> list[int]:
    """``A:B`` (Python slice semantics, either side optional) over ``n`` frames."""
    if text is None:
        return list(range(n))
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"frame range must look like A:B, got {text!r}")
    try:
        lo = int(parts[0]) if parts[0] else None
        hi = int(parts[1]) if parts[1] else None
    except ValueError as exc:
        raise UsageError(f"frame range must contain integers, got {text!r}") from exc
    return list(range(n))[lo:hi]


def _load_scene(path) -> Scene:
    if not Path(path).exists():
        raise UsageError(f"scene not found: {path}")
    return fileio.load_scene(path)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------


def cmd_synth_scene(out, seed: int = 0, n_frames: int = 8) -> Path:
    return fileio.write_scene(canonical_scene(seed, n_frames), out)


def cmd_unproject(scene_path, out, frames: str | None = None) -> list[Path]:
    scene = _load_scene(scene_path)
    out = Path(out)
    written = []
    for i in parse_frame_range(frames, len(scene)):
        path = out / f"points_{i:04d}.ply"
        fileio.write_point_ply(path, frame_cloud(scene, i))
        written.append(path)
    return written


def _replace_assets(scene: Scene, asset_path) -> Scene:
    if asset_path is None:
        return scene
    if not Path(asset_path).exists():
        raise UsageError(f"asset not found: {asset_path}")
    asset = fileio.read_asset(asset_path)
    tracks = tuple(AssetTrack(tr.asset_id, asset, tr.placements) for tr in scene.assets)
    return Scene(scene.frames, tracks, scene.scene_id)


def render_shifted(scene: Scene, shift: float, frames=None, include_assets: bool = True, jobs: int = 1,
                   tile_size: int = 16):
    """Render the scene's points and assets along the recorded path moved sideways by ``shift``."""
    if not np.isfinite(shift):
        raise UsageError("shift must be finite")
    idx = list(range(len(scene))) if frames is None else list(frames)
    if not idx:
        raise UsageError("empty frame range")
    tracks = list(scene.assets) if include_assets else []
    cloud = merge_clouds(frame_cloud(scene, i, tracks) for i in idx)
    traj = Trajectory(tuple(
        (scene.frames[i].intrinsics, lateral_shift(scene.frames[i].pose, shift)) for i in idx
    ))
    aligned = {}

    def splats(t):
        frame = idx[t]
        groups = []
        for tr in tracks:
            box = tr.placements.get(frame)
            if box is not None:
                key = (tr.asset_id, frame)
                if key not in aligned:
                    aligned[key] = align_asset(tr.asset, box)
                groups.append(aligned[key])
        return groups

    return render_joint(cloud, splats, traj, tile_size=tile_size, jobs=jobs)


def cmd_render_traj(scene_path, out, shift: float = 0.0, frames: str | None = None, asset_path=None,
                    include_assets: bool = True, jobs: int = 1):
    scene = _replace_assets(_load_scene(scene_path), asset_path)
    idx = parse_frame_range(frames, len(scene))
    bundle = render_shifted(scene, shift, idx, include_assets, jobs)
    fileio.write_bundle(bundle, out, {"shift": float(shift), "frames": idx, "scene_id": scene.scene_id})
    return bundle


def cmd_build_pairs(scene_path, out, k: int = 4, seed: int = 0, kind: str = "nvs", jobs: int = 1) -> list[Path]:
    scene = _load_scene(scene_path)
    n = len(scene)
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if k > MAX_NEIGHBORS:
        log.warning("k=%d exceeds the %d-frame window; clamping", k, MAX_NEIGHBORS)
        k = MAX_NEIGHBORS
    out = Path(out)
    jobs_spec = []
    if kind in ("nvs", "both"):
        clamped = []
        for t in range(n):
            window = neighbor_window(t, n)
            if not window:
                continue
            if k > len(window):
                clamped.append(t)
            jobs_spec.append(("nvs", t, min(k, len(window)), None))
        if clamped:
            log.warning("k=%d exceeds the frames available around %d target frame(s); clamping to the window",
                        k, len(clamped))
    if kind in ("insertion", "both"):
        for tr in scene.assets:
            for t in sorted(tr.placements):
                jobs_spec.append(("insertion", t, 0, tr.asset_id))
    if kind not in ("nvs", "insertion", "both"):
        raise UsageError(f"unknown pair kind {kind!r}")

    def build(spec):
        what, t, kt, asset_id = spec
        if what == "nvs":
            return build_nvs_pair(scene, t, rng_seed=job_seed(seed, scene.scene_id, t), k=kt)
        return build_insertion_pair(scene, asset_id, t)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(build, jobs_spec))
    else:
        pairs = [build(s) for s in jobs_spec]

    dirs, entries = [], []
    for j, pair in enumerate(pairs):
        d = fileio.write_pair(pair, out / f"pair_{j:04d}")
        dirs.append(d)
        entries.append({"dir": d.name, **pair.meta})
    manifest = {"scene_id": scene.scene_id, "k": k, "seed": seed, "kind": kind, "pairs": entries}
    (out / "pairs.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return dirs


def _pair_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"pairs directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "bundle.json").is_file() and (p / "embed.scpt").is_file())
    if not dirs:
        raise UsageError(f"no training pairs under {root}")
    return dirs


def cmd_train_toy(pairs_dir, out, iters: int = 500, seed: int = 0, dropout: float = 0.15,
                  batch_size: int = 4, learning_rate: float = 2e-3, joint_dropout: bool = False):
    if not 0.0 <= dropout <= 1.0:
        raise UsageError(f"dropout must be in [0, 1], got {dropout}")
    if iters < 1:
        raise UsageError("--iters must be >= 1")
    pairs = [prepare_pair(fileio.read_pair(d)) for d in _pair_dirs(pairs_dir)]
    cfg = TrainConfig(batch_size=batch_size, iterations=iters, learning_rate=learning_rate, dropout=dropout,
                      seed=seed, joint_dropout=joint_dropout)
    result = train(pairs, cfg, log_every=50, logger=log)
    out = Path(out)
    save_checkpoint(out / "ckpt.bin", result.params, iters)
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i + 1, repr(float(loss))])
    return result


def cmd_sample(ckpt, bundle_dir, out, steps: int = 16, seed: int = 0) -> np.ndarray:
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    if not Path(ckpt).is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    params, header = load_checkpoint(ckpt)
    bundle = fileio.read_bundle(bundle_dir)
    embed_path = Path(bundle_dir) / "embed.scpt"
    if embed_path.is_file():
        embed = fileio.read_tensor(embed_path)
    else:
        embed = embed_first_frame(np.transpose(bundle.I[0], (1, 2, 0)))
    video = sample(params, bundle, embed, steps, np.random.default_rng(seed))
    out = Path(out)
    for t in range(video.shape[0]):
        fileio.write_png(out / f"frame_{t:04d}.png", np.transpose(video[t], (1, 2, 0)))
    info = {"steps": steps, "seed": seed, "checkpoint_iteration": header["iteration"], "T": int(video.shape[0])}
    (out / "sample.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return video


def _read_frames(root, pattern: str):
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"directory not found: {root}")
    paths = sorted(p for p in root.glob(pattern) if p.is_file())
    frames = []
    for p in paths:
        if p.suffix == ".png":
            frames.append(fileio.read_png(p))
        elif p.suffix == ".scpt":
            frames.append(fileio.read_tensor(p))
        else:
            raise UsageError(f"unsupported frame file {p}")
    return paths, frames


def cmd_eval(generated, ground_truth, out, gen_pattern: str = "*.png", gt_pattern: str = "*.png",
             bundle_dir=None, record_runtime: bool = False) -> MetricsReport:
    start = time.perf_counter()
    gen_paths, gen = _read_frames(generated, gen_pattern)
    gt_paths, gt = _read_frames(ground_truth, gt_pattern)
    if not gen or not gt:
        raise UsageError("no frames to evaluate")
    if len(gen) != len(gt):
        raise UsageError(f"frame count mismatch: {len(gen)} generated vs {len(gt)} ground truth")
    report = MetricsReport()
    for i, (a, b, pa, pb) in enumerate(zip(gen, gt, gen_paths, gt_paths)):
        if a.shape != b.shape:
            raise UsageError(f"frame {i}: shape {a.shape} vs {b.shape}")
        err = float(np.mean((a - b) ** 2))
        report.frames.append(FrameMetric(i, pa.name, pb.name, err, psnr(a, b)))
    if bundle_dir is not None:
        bundle = fileio.read_bundle(bundle_dir)
        report.coverage_fraction = float(bundle.coverage.mean())
        report.asset_fraction = float(bundle.asset_mask_binary.mean())
    if record_runtime:
        report.runtime_s = time.perf_counter() - start
    out = Path(out)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(report.csv_rows())
    return report


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, defaults):
        # Subcommands repeat the flags with suppressed defaults so they may appear on either side.
        parser.add_argument("--seed", type=int, default=0 if defaults else argparse.SUPPRESS, help="global random seed")
        parser.add_argument("--jobs", type=int, default=1 if defaults else argparse.SUPPRESS,
                            help="worker threads for per-frame work")
        parser.add_argument("--out", default=None if defaults else argparse.SUPPRESS, help="output directory")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, False)
    p = argparse.ArgumentParser(prog="scpainter", description=__doc__.splitlines()[0])
    global_flags(p, True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-scene", parents=[common], help="write the canonical synthetic scene")
    s.add_argument("--frames", type=int, default=8, help="number of frames")

    s = sub.add_parser("unproject", parents=[common], help="write one colored point PLY per frame")
    s.add_argument("--scene", required=True)
    s.add_argument("--frames", help="frame range A:B")

    s = sub.add_parser("render-traj", parents=[common], help="render a laterally shifted trajectory")
    s.add_argument("--scene", required=True)
    s.add_argument("--shift", type=float, default=0.0, help="meters along each camera's right axis")
    s.add_argument("--frames", help="frame range A:B")
    s.add_argument("--asset", help="replace every scene asset with this gaussian PLY")
    s.add_argument("--no-assets", action="store_true", help="render points only")

    s = sub.add_parser("build-pairs", parents=[common], help="build training pairs")
    s.add_argument("--scene", required=True)
    s.add_argument("--k", type=int, default=4, help="neighbor frames per NVS pair")
    s.add_argument("--kind", choices=("nvs", "insertion", "both"), default="nvs")

    s = sub.add_parser("train-toy", parents=[common], help="train the toy denoiser")
    s.add_argument("--pairs", required=True)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--dropout", type=float, default=0.15)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--joint-dropout", action="store_true", help="drop both conditions with one draw")

    s = sub.add_parser("sample", parents=[common], help="sample a video for a bundle")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--steps", type=int, default=16)

    s = sub.add_parser("eval", parents=[common], help="per-frame PSNR against ground truth")
    s.add_argument("--generated", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--gen-pattern", default="*.png")
    s.add_argument("--gt-pattern", default="*.png")
    s.add_argument("--bundle", help="bundle directory for coverage and asset fractions")
    s.add_argument("--record-runtime", action="store_true", help="include wall time (breaks byte-identical reruns)")
    return p


def _dispatch(args) -> None:
    out = _out_dir(args.out)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    c = args.command
    if c == "synth-scene":
        cmd_synth_scene(out, args.seed, args.frames)
    elif c == "unproject":
        cmd_unproject(args.scene, out, args.frames)
    elif c == "render-traj":
        cmd_render_traj(args.scene, out, args.shift, args.frames, args.asset, not args.no_assets, args.jobs)
    elif c == "build-pairs":
        cmd_build_pairs(args.scene, out, args.k, args.seed, args.kind, args.jobs)
    elif c == "train-toy":
        cmd_train_toy(args.pairs, out, args.iters, args.seed, args.dropout, args.batch_size, args.lr,
                      args.joint_dropout)
    elif c == "sample":
        cmd_sample(args.ckpt, args.bundle, out, args.steps, args.seed)
    elif c == "eval":
        cmd_eval(args.generated, args.gt, out, args.gen_pattern, args.gt_pattern, args.bundle, args.record_runtime)


def _setup_logging() -> None:
    level = os.environ.get("SCPAINTER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="scpainter: %(levelname)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        out = _out_dir(args.out)
        with filelock.FileLock(str(out / LOCK_NAME), timeout=0):
            _dispatch(args)
    except filelock.Timeout:
        print(f"scpainter: another scpainter process is writing to {args.out}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError, OSError) as exc:
        # Library validation errors subclass ValueError; they all stem from bad inputs.
        print(f"scpainter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"scpainter: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
