"""Pipeline orchestration: data -> train -> evaluate -> artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
import traceback
from dataclasses import dataclass
from pathlib import Path

from ..metrics import MetricsReport
from ..models import ModelBundle
from ..synthgen import SparseDataset, generate, read_dataset
from .config import ExperimentConfig, load_config
from .evaluation import evaluate_split
from .training import RunHistory, train

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    report: MetricsReport
    bundle: ModelBundle
    history: RunHistory
    dataset: SparseDataset


def config_id(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def make_dataset(cfg: ExperimentConfig) -> SparseDataset:
    if cfg.task == "dataset":
        return read_dataset(cfg.dataset)
    return generate(cfg.task, cfg.seed, **cfg.generator)


def evaluate(bundle: ModelBundle, ds: SparseDataset, cfg: ExperimentConfig, extra: dict | None = None,
             split: str = "test") -> MetricsReport:
    start = time.perf_counter()
    metrics = evaluate_split(bundle, ds, cfg.eval, cfg.seed, split=split)
    config = cfg.to_dict()
    config["generator_resolved"] = ds.meta.get("config")
    return MetricsReport(metrics, config, cfg.seed, ds.fingerprint(),
                         wall_clock=time.perf_counter() - start, extra=extra or {})


def run(cfg: ExperimentConfig, ds: SparseDataset | None = None) -> RunResult:
    start = time.perf_counter()
    ds = ds if ds is not None else make_dataset(cfg)
    bundle, history = train(cfg, ds)
    extra = {
        "best_step": history.best_step,
        "best_validation": history.best_metric,
        "steps_run": history.stopped_at,
        "refreshes": len(history.refreshes),
    }
    report = evaluate(bundle, ds, cfg, extra)
    report.wall_clock = time.perf_counter() - start
    return RunResult(report, bundle, history, ds)


def write_run(result: RunResult, cfg: ExperimentConfig, out: Path, run_id: str, group: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if group:
        result.report.extra["run_group"] = group
    result.report.extra["run_id"] = run_id
    result.report.to_json(out / "report.json")
    result.report.to_csv(out / "metrics.csv", run_id)
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "history.json").write_text(json.dumps(result.history.to_dict(), sort_keys=True) + "\n")
    header = {"seed": cfg.seed, "step": result.history.best_step, "config_id": config_id(cfg)}
    result.bundle.save(out / "checkpoint_best.bin", header)


def _variants(cfg: ExperimentConfig):
    """(name, config) pairs expanded from sweep / modes / seeds."""
    if cfg.sweep:
        (key, values), = cfg.sweep.items()
        path = f"objective.{key}"
        return [(f"{key}={v}", cfg.replace(**{path: v, "sweep": {}})) for v in values]
    if cfg.modes:
        out = []
        seeds = cfg.seeds or [cfg.seed]
        for mode in cfg.modes:
            for s in seeds:
                name = mode if len(seeds) == 1 else f"{mode}/seed={s}"
                out.append((name, cfg.replace(**{"objective.mode": mode, "seed": s, "modes": [], "seeds": []})))
        return out
    if cfg.seeds:
        return [(f"seed={s}", cfg.replace(seed=s, seeds=[])) for s in cfg.seeds]
    return [("", cfg)]


def comparison_table(rows: list[tuple[str, int, dict]]) -> list[dict]:
    """Median metric per mode over seeds."""
    by_mode: dict[str, list[dict]] = {}
    for mode, _, metrics in rows:
        by_mode.setdefault(mode, []).append(metrics)
    table = []
    for mode, ms in by_mode.items():
        row = {"mode": mode, "runs": len(ms)}
        for key in sorted(ms[0]):
            row[key] = statistics.median(m[key] for m in ms)
        table.append(row)
    return table


def run_experiment(config_path, out_dir, overrides: dict | None = None) -> int:
    """Full pipeline for a config file; returns a process exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = load_config(config_path)
        if overrides:
            cfg = cfg.replace(**overrides)
        group = config_id(cfg)
        variants = _variants(cfg)
        rows = []
        for name, vcfg in variants:
            target = out / name if name else out
            log.info("running %s", name or "experiment")
            result = run(vcfg)
            write_run(result, vcfg, target, run_id=name or group, group=group)
            rows.append((vcfg.objective.mode, vcfg.seed, result.report.metrics))
        if cfg.modes:
            write_table(comparison_table(rows), out / "compare.csv")
    except Exception as err:  # any stage failure -> flagged partial output
        (out / "FAILED").write_text(f"{type(err).__name__}: {err}\n{traceback.format_exc()}")
        log.error("experiment failed: %s", err)
        return 1
    return 0


def write_table(table: list[dict], path: Path) -> None:
    keys = []
    for row in table:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in table:
            w.writerow(row)
