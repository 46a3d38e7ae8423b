"""Command line entry point: ``run``, ``eval``, ``plot`` and ``gen-scene``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import yaml


def _cmd_run(args) -> int:
    from .harness import load_config, run_experiment

    cfg = load_config(args.config)
    over = {}
    if args.output:
        over["output_dir"] = args.output
    if args.seeds:
        over["seeds"] = tuple(args.seeds)
    if args.cycles is not None:
        over["cycles"] = args.cycles
    if over:
        cfg = dataclasses.replace(cfg, **over)
    res = run_experiment(cfg, plots=not args.no_plots)
    print((res.output_dir / "summary.md").read_text(), end="")
    if res.collisions:
        print(f"warning: {res.collisions} executed segments intersect ground truth", file=sys.stderr)
    if res.failures:
        for f in res.failures:
            print(f"failed: {f['method']} seed {f['seed']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_frames, render_test_set
    from .segmodel import load_model
    from .worldsim import Camera, load_scene, sample_test_poses

    model = load_model(args.checkpoint)
    scene = load_scene(args.scene)
    cam_kw = yaml.safe_load(Path(args.camera).read_text()) if args.camera else {}
    camera = Camera(**(cam_kw or {}))
    poses = sample_test_poses(scene, args.poses, args.seed)
    iou, miou, _ = evaluate_frames(model, render_test_set(scene, poses, camera, seed=args.seed),
                                   scene.n_classes)
    rows = [{"class": c, "iou": "" if v != v else f"{v:.6f}"} for c, v in enumerate(iou)]
    writer = csv.DictWriter(sys.stdout, fieldnames=["class", "iou"])
    writer.writeheader()
    writer.writerows(rows)
    print(f"miou,{miou:.6f}")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["class", "iou"])
            w.writeheader()
            w.writerows(rows + [{"class": "mean", "iou": f"{miou:.6f}"}])
    return 0


def _cmd_plot(args) -> int:
    from .harness import read_metrics, write_summary
    from .plotting import make_plots

    out = Path(args.metrics_dir)
    write_summary(out, read_metrics(out / "metrics.csv"))
    for p in make_plots(out):
        print(p)
    return 0


def _cmd_gen_scene(args) -> int:
    from .worldsim import (Camera, SceneConfig, false_color, generate_scene, render_frame,
                           save_scene, write_ppm)

    cfg_dict = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    cfg = SceneConfig.from_dict(cfg_dict or {})
    scene = generate_scene(args.seed, cfg, domain=args.domain)
    save_scene(scene, args.output)
    print(f"wrote {args.output}: {int(scene.occupied.sum())} occupied voxels, "
          f"shifted classes {list(scene.shifted_classes)}")
    if args.preview:
        frame = render_frame(scene, scene.start_pose, Camera())
        write_ppm(args.preview, false_color(frame))
        print(f"wrote {args.preview}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embodied-da",
                                description="Uncertainty-driven embodied domain adaptation simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="override output directory")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--cycles", type=int)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a saved scene")
    e.add_argument("checkpoint")
    e.add_argument("scene")
    e.add_argument("--poses", type=int, default=120)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--camera", help="YAML file with camera parameters")
    e.add_argument("-o", "--output", help="also write the IoU table to this CSV")
    e.set_defaults(func=_cmd_eval)

    pl = sub.add_parser("plot", help="re-render summary and figures of an experiment directory")
    pl.add_argument("metrics_dir")
    pl.set_defaults(func=_cmd_plot)

    g = sub.add_parser("gen-scene", help="generate and save a scene")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--config", help="YAML file with scene parameters")
    g.add_argument("--domain", choices=("source", "target"), default="target")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--preview", help="write a false-colour PPM from the start pose")
    g.set_defaults(func=_cmd_gen_scene)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
