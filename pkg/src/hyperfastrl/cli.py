"""Command line entry point: ``hyperfastrl {train,eval,heatmap,sweep,census,config}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, desk_config
from .env import CASES
from .hypernet import ENCODERS, full_scale_census


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = ExperimentConfig.load(args.config) if args.config else desk_config()
    manifest = train(cfg, args.seed, args.out, progress=not args.quiet)
    print(json.dumps({k: manifest[k] for k in ("config_hash", "reuse_ratio", "final_eval_mean", "wall_clock_s")}, indent=2))
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import TestProtocol, evaluate

    protocol = TestProtocol.load(args.protocol) if args.protocol else TestProtocol()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "report.json"
    report = evaluate(args.checkpoint, protocol, out_path=out, baseline=args.baseline)
    print(json.dumps(report["policy"]["summary"], indent=2))
    print(f"wrote {out}")
    return 0


def _cmd_heatmap(args) -> int:
    from .evaluation import heatmap

    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    res = heatmap(args.checkpoint, args.mu, args.case, out, seed=args.seed)
    res.pop("fields")
    print(json.dumps(res, indent=2))
    return 0


def _cmd_sweep(args) -> int:
    from .evaluation import sweep

    summary = sweep(args.runs, args.out)
    for h, g in summary["groups"].items():
        print(f"{h} {g['label']}: n={g['n_runs']} final eval {g['final_eval_mean']:.3f} +/- {g['final_eval_std']:.3f}")
    for d in summary["missing"]:
        print(f"missing or incomplete run: {d}")
    return 0


def _cmd_census(args) -> int:
    for enc in ENCODERS if args.encoder == "all" else [args.encoder]:
        trainable, frozen, total = full_scale_census(enc)
        print(f"{enc:8s} trainable={trainable:,} frozen={frozen:,} total={total:,}")
    return 0


def _cmd_config(args) -> int:
    desk_config().save(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperfastrl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train an agent and write metrics.csv, run.json, checkpoint.npz")
    s.add_argument("--config", help="YAML or JSON experiment config (default: desk config)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test protocol and write report.json")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--protocol", help="JSON test protocol (default: seen grid + 0.1125 + -0.25)")
    s.add_argument("--out")
    s.add_argument("--baseline", action="store_true", help="also evaluate the uniform random policy")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("heatmap", help="1000-step rollout with control switched on at step 500")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mu", type=float, required=True)
    s.add_argument("--case", choices=CASES, default="zero")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="run directory (default: the checkpoint's directory)")
    s.set_defaults(func=_cmd_heatmap)

    s = sub.add_parser("sweep", help="aggregate run directories matching a glob")
    s.add_argument("--runs", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sweep)

    s = sub.add_parser("census", help="full-scale parameter counts")
    s.add_argument("--encoder", choices=(*ENCODERS, "all"), default="all")
    s.set_defaults(func=_cmd_census)

    s = sub.add_parser("config", help="write the desk configuration to a file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
