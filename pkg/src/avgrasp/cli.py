"""Command-line interface.

Subcommands: collect-scripted, process, pretrain, finetune, evaluate,
compare, latency, serve-teleop. The data root defaults to ./data or the
AVGRASP_DATA_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import get_profile


def data_root() -> Path:
    return Path(os.environ.get("AVGRASP_DATA_ROOT", "data"))


def _add_common(p, config=True):
    p.add_argument("--profile", default="fast", help="configuration profile (default|fast)")
    p.add_argument("--seed", type=int, default=0)
    if config:
        p.add_argument("--config", default="tabletop",
                       choices=["tabletop", "bin", "wall", "random"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avgrasp",
                                     description="closed-loop 6DoF grasping at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect-scripted", help="record scripted demonstration archives")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", default=None, help="output directory (default <root>/demos)")
    p.add_argument("--objects", type=int, default=None,
                   help="objects per scene (default: mixed 1-3)")

    p = sub.add_parser("process", help="turn archives into labeled training samples")
    _add_common(p, config=False)
    p.add_argument("--data", required=True, help="directory of episode archives")
    p.add_argument("--out", required=True, help="dataset output directory")

    p = sub.add_parser("pretrain", help="bootstrap the value network from demonstrations")
    _add_common(p, config=False)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--epochs", type=int, default=3)

    p = sub.add_parser("finetune", help="trial-and-error fine-tuning in the simulator")
    _add_common(p)
    p.add_argument("--params", default=None, help="initial parameters (omit for from-scratch)")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints", type=int, nargs="*", default=[])
    p.add_argument("--objects", type=int, nargs=2, default=[1, 3], metavar=("LO", "HI"))

    p = sub.add_parser("evaluate", help="measure grasp success of a policy")
    _add_common(p)
    p.add_argument("--params", default=None)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--runs", type=int, default=10, help="dynamic-mode test runs")
    p.add_argument("--mode", choices=["static", "dynamic"], default="static")
    p.add_argument("--policy", choices=["net", "random", "oracle"], default="net")
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--pile-size", type=int, default=5)
    p.add_argument("--freeze-tsdf", action="store_true",
                   help="ablation: stop fusion after the first frame")
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("compare", help="overlay learning curves from finetune logs")
    p.add_argument("--curves", nargs="+", required=True,
                   metavar="NAME=points.json", help="named curve files [[episodes, success], ...]")
    p.add_argument("--out", required=True)

    p = sub.add_parser("latency", help="time one full action step")
    _add_common(p, config=False)
    p.add_argument("--view-height", type=int, default=45)
    p.add_argument("--view-width", type=int, default=80)

    p = sub.add_parser("serve-teleop", help="run the teleoperation websocket service")
    _add_common(p)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--out", default=None, help="archive directory (default <root>/teleop)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    profile = get_profile(getattr(args, "profile", "fast"))

    if args.command == "collect-scripted":
        from .experiments import collect_scripted

        out = Path(args.out) if args.out else data_root() / "demos"
        written = collect_scripted(out, args.config, args.n, args.seed, profile,
                                   n_objects=args.objects)
        print(f"wrote {len(written)} archives to {out}")
        return 0

    if args.command == "process":
        from .experiments import process_dataset

        stats = process_dataset(args.data, args.out, profile, seed=args.seed)
        print(json.dumps(stats, indent=1))
        return 0

    if args.command == "pretrain":
        from .experiments import pretrain

        info = pretrain(args.samples, args.out, profile, epochs=args.epochs, seed=args.seed,
                        log_path=Path(args.out).with_suffix(".log.json"))
        print(json.dumps({k: v for k, v in info.items() if k != "loss_curve"}, indent=1))
        return 0

    if args.command == "finetune":
        from .experiments import finetune

        out = Path(args.out)
        result = finetune(args.params, out, profile, config=args.config,
                          episodes=args.episodes, seed=args.seed,
                          checkpoints=tuple(args.checkpoints),
                          objects_range=tuple(args.objects),
                          log_path=out.with_suffix(".log.json"))
        print(json.dumps({k: v for k, v in result.items() if k != "history"}, indent=1))
        return 0

    if args.command == "evaluate":
        from .experiments import evaluate
        from .report import write_report

        report = evaluate(args.params, profile, config=args.config, episodes=args.episodes,
                          mode=args.mode, seed=args.seed, n_objects=args.objects,
                          pile_size=args.pile_size, runs=args.runs, policy=args.policy,
                          freeze_tsdf=args.freeze_tsdf)
        write_report(report, args.out)
        print(f"success rate {report['success_rate']:.3f} over {report['episode_count']} episodes"
              f" -> {args.out}")
        return 0

    if args.command == "compare":
        from .report import comparison_figure

        curves = {}
        for spec in args.curves:
            name, _, path = spec.partition("=")
            with open(path) as f:
                curves[name] = json.load(f)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        comparison_figure(curves, out / "comparison.png")
        with open(out / "comparison.csv", "w") as f:
            f.write("curve,episodes,success_rate\n")
            for name, pts in curves.items():
                for x, y in pts:
                    f.write(f"{name},{x},{y}\n")
        print(f"wrote {out / 'comparison.png'}")
        return 0

    if args.command == "latency":
        from .experiments import measure_latency

        timings = measure_latency(profile, args.view_height, args.view_width, seed=args.seed)
        print(json.dumps(timings, indent=1))
        return 0

    if args.command == "serve-teleop":
        from .teleop import serve

        out = Path(args.out) if args.out else data_root() / "teleop"
        serve(args.host, args.port, profile, args.config, out, seed=args.seed)
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
