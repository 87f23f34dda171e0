"""Command-line entry point: synth, run, eval, render, plot.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from . import geometry
from .config import load_pipeline_config, load_synth_config, pipeline_config_from_dict
from .dataset_io import (load_checkpoint, load_scene, read_metrics_csv, save_checkpoint,
                         save_scene, write_metrics_csv, write_ppm)
from .errors import VALIDATION_ERRORS, SemSplatError, ValidationError
from .metrics import evaluate_run
from .objectives import LOSS_LOG_COLUMNS
from .pipeline import result_from_checkpoint, run_slam, to_checkpoint
from .plotting import plot_report
from .scene_synth import generate_scene
from .splatting import render
from .tracking import write_trajectory

log = logging.getLogger("semsplat")

CHECKPOINT_NAME = "checkpoint.bin"
LOSS_LOG_NAME = "losses.csv"
METRICS_NAME = "metrics.csv"
TRAJECTORY_NAME = "trajectory.txt"
BANK_NAME = "memory_bank.txt"


def cmd_synth(args):
    cfg = load_synth_config(args.config)
    scene = generate_scene(cfg)
    path = save_scene(scene, args.out)
    log.info("wrote %d frames to %s", len(scene), path)


def cmd_run(args):
    cfg = load_pipeline_config(args.config)
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(e, n, it, row):
        log.info("event %d/%d  iter %d  L_total %s", e + 1, n, it,
                 f"{row['L_total']:.5f}" if row else "-")

    result = run_slam(scene, cfg, progress)
    save_checkpoint(to_checkpoint(result, cfg), out / CHECKPOINT_NAME)
    write_metrics_csv(result.loss_log, out / LOSS_LOG_NAME, LOSS_LOG_COLUMNS)
    traj = result.trajectory
    write_trajectory(out / TRAJECTORY_NAME, traj.poses, traj.keyframe)
    (out / BANK_NAME).write_text(result.bank.summary() + "\n")
    report = evaluate_run(result, scene, cfg)
    write_metrics_csv([report.row()], out / METRICS_NAME)
    log.info("done in %.1fs: psnr %.2f miou %.3f ate %.2e", time.time() - t0, report.psnr,
             report.miou, report.ate_rmse)


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = pipeline_config_from_dict(ckpt.config)
    scene = load_scene(args.scene)
    result = result_from_checkpoint(ckpt)
    if len(result.trajectory.poses) != len(scene):
        raise ValidationError(f"checkpoint has {len(result.trajectory.poses)} poses, "
                              f"scene has {len(scene)} frames")
    report = evaluate_run(result, scene, cfg)
    write_metrics_csv([report.row()], args.report)
    log.info("psnr %.3f ssim %.4f miou %.4f fwiou %.4f acc %.4f ate %.3e", report.psnr,
             report.ssim, report.miou, report.fwiou, report.acc, report.ate_rmse)


def cmd_render(args):
    ckpt = load_checkpoint(args.checkpoint)
    poses = ckpt.extras.get("poses")
    if poses is None or not 0 <= args.frame < len(poses):
        raise ValidationError(f"frame {args.frame} not in checkpoint trajectory")
    intr = result_from_checkpoint(ckpt).camera
    if intr is None:
        raise ValidationError("checkpoint has no camera intrinsics")
    out = render(ckpt.gaussians, geometry.invert(poses[args.frame]), intr)
    write_ppm(args.out, out.color)


def cmd_plot(args):
    run = Path(args.run)
    if not run.is_dir():
        raise ValidationError(f"not a run directory: {run}")
    losses = read_metrics_csv(run / LOSS_LOG_NAME) if (run / LOSS_LOG_NAME).exists() else []
    metrics = read_metrics_csv(run / METRICS_NAME) if (run / METRICS_NAME).exists() else []
    paths = plot_report(losses, metrics[0] if metrics else {}, run / "plots")
    for p in paths:
        log.info("wrote %s", p)


def build_parser():
    p = argparse.ArgumentParser(prog="semsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic oracle scene")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", help="track and map a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", help="evaluate a checkpoint against a scene")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render one frame of a checkpoint to PPM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("plot", help="plot the losses and metrics of a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, *VALIDATION_ERRORS) as exc:
        log.error("%s", exc)
        return 2
    except (SemSplatError, RuntimeError, ArithmeticError) as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
