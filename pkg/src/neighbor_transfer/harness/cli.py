"""Command line entry point: gen, train, eval, run, compare."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..models import ModelBundle
from ..objectives import MODES
from ..synthgen import read_dataset, write_dataset
from .config import ConfigError, load_config
from .experiment import config_id, evaluate, make_dataset, run_experiment
from .training import train


def _limit_threads(n: int) -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        return
    threadpool_limits(n)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "mode", None):
        out["objective.mode"] = args.mode
    return out


def _config(args):
    cfg = load_config(args.config)
    ov = _overrides(args)
    return cfg.replace(**ov) if ov else cfg


def cmd_gen(args) -> int:
    cfg = _config(args)
    ds = make_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = read_dataset(args.data) if args.data else make_dataset(cfg)
    bundle, history = train(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.save(out / "checkpoint_best.bin", {"seed": cfg.seed, "step": history.best_step,
                                              "config_id": config_id(cfg)})
    (out / "history.json").write_text(json.dumps(history.to_dict(), sort_keys=True) + "\n")
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    bundle, _ = ModelBundle.load(args.checkpoint)
    ds = read_dataset(args.data) if args.data else make_dataset(cfg)
    report = evaluate(bundle, ds, cfg, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "metrics.csv", run_id=config_id(cfg))
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    return run_experiment(args.config, args.out, _overrides(args))


def cmd_compare(args) -> int:
    ov = _overrides(args)
    ov.pop("objective.mode", None)
    ov["modes"] = args.modes or list(MODES)
    if args.seeds:
        ov["seeds"] = args.seeds
    status = run_experiment(args.config, args.out, ov)
    if status == 0:
        print((Path(args.out) / "compare.csv").read_text())
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntransfer", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="experiment config (JSON or YAML)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="numeric threads (1 = deterministic)")

    sp = sub.add_parser("gen", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train and write checkpoint + history")
    common(sp)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--data", help="dataset directory (default: generate from config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="dataset directory (default: generate from config)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run", help="generate/load, train, evaluate, write report")
    common(sp)
    sp.add_argument("--mode", choices=MODES)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="run several modes and tabulate medians")
    common(sp)
    sp.add_argument("--modes", nargs="+", choices=MODES)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NT_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
