"""Training loop with an adaptive neighborhood and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import backward
from ..models import DecoderSpec, MlpSpec, ModelBundle, ProjectionSpec, init_params
from ..neighborhood import RefreshPolicy, assemble_batch, build_index, refresh
from ..objectives import ObjectiveConfig, total_objective
from ..rng import stream
from ..synthgen import SparseDataset
from .config import ExperimentConfig
from .evaluation import VALIDATION_METRIC, validation_metric
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RunHistory:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    refreshes: list[tuple[int, int]] = field(default_factory=list)
    pairings: list[int] = field(default_factory=list)
    best_step: int = 0
    best_metric: float = float("nan")
    stopped_at: int = 0

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "evals": [list(e) for e in self.evals],
            "refreshes": [list(r) for r in self.refreshes],
            "pairings": sorted(set(self.pairings)),
            "best_step": self.best_step,
            "best_metric": self.best_metric,
            "stopped_at": self.stopped_at,
        }


def subset(ds: SparseDataset, ids: np.ndarray) -> SparseDataset:
    return SparseDataset(
        ds.kind, ds.features[ids], [ds.annotations[i] for i in ids], ds.n_outputs, ds.split[ids],
        full=None if ds.full is None else [ds.full[i] for i in ids],
        posterior=None if ds.posterior is None else ds.posterior[ids], meta=ds.meta,
    )


def build_bundle(cfg: ExperimentConfig, ds: SparseDataset) -> ModelBundle:
    if ds.kind == "sequence":
        _, k, f = ds.features.shape
        m = cfg.model
        task_spec = DecoderSpec(vocab=ds.n_outputs, embed=m.embed, hidden=m.state, regions=k,
                                region_width=f, attention=m.attention)
        proj_in = f
    else:
        head = "softmax-multiclass" if ds.kind == "multiclass" else "sigmoid-multilabel"
        d = ds.features.shape[1]
        task_spec = MlpSpec((d, *cfg.model.hidden, ds.n_outputs), head)
        proj_in = d
    proj_spec = ProjectionSpec(proj_in, cfg.projection.output, tuple(cfg.projection.hidden))
    return ModelBundle(init_params(task_spec, cfg.seed), init_params(proj_spec, cfg.seed),
                       task_spec, proj_spec, cfg.optimizer.lr, cfg.projection_lr)


def _sample_negatives(rng, batch, n_labels: int, ratio: float):
    out = []
    for annots in batch.annotations:
        observed = set(annots)
        pool = np.array([j for j in range(n_labels) if j not in observed])
        count = min(pool.size, int(math.floor(ratio * len(annots) + 0.5)))
        out.append(sorted(int(j) for j in rng.choice(pool, size=count, replace=False)) if count else [])
    return out


def _batches(rng, m: int, size: int):
    while True:
        perm = rng.permutation(m)
        for start in range(0, m - size + 1, size):
            yield perm[start:start + size]


def train(cfg: ExperimentConfig, ds: SparseDataset) -> tuple[ModelBundle, RunHistory]:
    """Adam on the configured objective; returns the best-validation parameters."""
    obj: ObjectiveConfig = cfg.objective_config(ds.kind)
    train_ids, val_ids = ds.ids("train"), ds.ids("val")
    if train_ids.size < 2:
        raise ValueError("need at least two training examples")
    if val_ids.size == 0:
        raise ValueError("dataset has no validation split")
    tr = subset(ds, train_ids)
    bundle = build_bundle(cfg, ds)
    history = RunHistory()

    opt = Adam({"task": bundle.task_lr, "projection": bundle.projection_lr},
               cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    nb = cfg.neighborhood
    n = min(nb.n, len(tr) - 1)
    policy = RefreshPolicy(period=nb.refresh_period, n=n, adaptive=obj.refines_projection, strict=nb.strict)
    index = None
    if obj.uses_neighbors:
        index = build_index(bundle.embed(tr.projection_inputs), n, version=0)
        history.refreshes.append((0, index.version))

    batch_rng = stream(cfg.seed, "batching")
    neg_rng = stream(cfg.seed, "negatives")
    batches = _batches(batch_rng, len(tr), min(cfg.batch_size, len(tr)))
    metric_name, higher_better = VALIDATION_METRIC[ds.kind]
    best = bundle.copy()
    best_metric = -math.inf if higher_better else math.inf
    bad_evals = 0

    for step in range(cfg.max_steps):
        if index is not None and step > 0:
            new = refresh(index, bundle.embed(tr.projection_inputs), step, policy)
            if new is not index:
                index = new
                history.refreshes.append((step, index.version))
        batch = assemble_batch(tr, index, next(batches), step=step, policy=policy)
        if obj.loss_kind == "sigmoid-bce":
            batch.negatives = _sample_negatives(neg_rng, batch, ds.n_outputs, obj.negative_ratio)
        res = total_objective(obj, batch, bundle)
        loss = res.loss.item()
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        backward(res.loss)
        opt.step("task", bundle.task, {k: t.grad for k, t in res.task.items()})
        if res.projection is not None and obj.refines_projection:
            opt.step("projection", bundle.projection, {k: t.grad for k, t in res.projection.items()})
        history.losses.append(loss)
        history.pairings.append(batch.pairings)

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.max_steps:
            metric = validation_metric(bundle, ds, val_ids, cfg.eval, cfg.seed)
            history.evals.append((done, metric))
            improved = metric > best_metric if higher_better else metric < best_metric
            log.debug("step %d loss %.5f val %s %.5f", done, loss, metric_name, metric)
            if improved:
                best_metric, best, bad_evals = metric, bundle.copy(), 0
                history.best_step = done
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    history.stopped_at = done
                    break
    history.stopped_at = history.stopped_at or len(history.losses)
    history.best_metric = best_metric
    return best, history
