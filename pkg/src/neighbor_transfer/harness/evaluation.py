"""Task-specific evaluation of a trained bundle."""

from __future__ import annotations

import numpy as np

from ..diffcore import Graph
from ..metrics import (average_precision_at_k, distinct_ngrams, kl_divergence, oracle_best,
                       recall_m_at_k)
from ..models import EOS, ModelBundle, beam_search, lift, mlp_forward, sequence_log_prob_batch
from ..objectives import _pad
from ..rng import stream
from ..synthgen import SparseDataset
from .config import EvalConfig

# higher-is-better flag per task kind for the early-stopping metric
VALIDATION_METRIC = {
    "multiclass": ("kl_mean", False),
    "multilabel": ("precision@10", True),
    "sequence": ("recall", True),
}


def _limit(ids: np.ndarray, limit: int) -> np.ndarray:
    return ids[:limit] if limit and limit < ids.size else ids


def predict_logits(bundle: ModelBundle, features: np.ndarray) -> np.ndarray:
    g = Graph()
    return mlp_forward(lift(bundle.task, g, trainable=False), g.constant(features)).value


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mean_kl(bundle: ModelBundle, ds: SparseDataset, ids: np.ndarray) -> float:
    if ds.posterior is None:
        raise ValueError("dataset has no true posterior; KL evaluation impossible")
    q = softmax(predict_logits(bundle, ds.features[ids]))
    return float(np.mean([kl_divergence(ds.posterior[i], qi) for i, qi in zip(ids, q)]))


def precision_report(bundle: ModelBundle, ds: SparseDataset, ids: np.ndarray, k_values) -> dict[str, float]:
    if ds.full is None:
        raise ValueError("dataset has no full label sets; precision@k evaluation impossible")
    scores = predict_logits(bundle, ds.features[ids])
    truth = [ds.full[i] for i in ids]
    out = {}
    for k in k_values:
        k_eff = min(k, ds.n_outputs)
        out[f"precision@{k}"] = average_precision_at_k(scores, truth, k_eff)
    return out


def _strip(seq) -> tuple[int, ...]:
    return tuple(t for t in seq if t != EOS)


def sequence_scores(bundle: ModelBundle, regions: np.ndarray, seqs: list) -> np.ndarray:
    """Total log-probability of every candidate in ``seqs`` given one region bag."""
    g = Graph()
    params = lift(bundle.task, g, trainable=False)
    tokens, lengths = _pad(seqs)
    reg = np.broadcast_to(regions, (len(seqs), *regions.shape))
    logp, _ = sequence_log_prob_batch(params, g.constant(reg), tokens, lengths)
    return logp.value.sum(axis=1)


def retrieval_pool(ds: SparseDataset, ids: np.ndarray, i: int, others: int, seed: int):
    """Candidate pool for example ``i``: its references plus those of ``others`` sampled examples."""
    rng = stream(seed, "eval/pool", int(i))
    rest = ids[ids != i]
    picked = rng.choice(rest, size=min(others, rest.size), replace=False) if rest.size else rest
    pool: dict[tuple, int] = {}
    for j in (i, *sorted(int(p) for p in picked)):
        for ref in ds.full[j]:
            pool.setdefault(tuple(ref), len(pool))
    seqs = list(pool)
    truth = [pool[tuple(r)] for r in ds.full[i]]
    return seqs, truth


def mean_recall(bundle: ModelBundle, ds: SparseDataset, ids: np.ndarray, cfg: EvalConfig, seed: int) -> float:
    if ds.full is None:
        raise ValueError("dataset has no reference sequences; retrieval evaluation impossible")
    vals = []
    for i in ids:
        seqs, truth = retrieval_pool(ds, ids, int(i), cfg.pool_others, seed)
        scores = sequence_scores(bundle, ds.features[i], seqs)
        vals.append(recall_m_at_k(scores, truth[: cfg.m], min(cfg.recall_k, len(seqs))))
    return float(np.mean(vals))


def sequence_report(bundle: ModelBundle, ds: SparseDataset, ids: np.ndarray, cfg: EvalConfig, seed: int) -> dict[str, float]:
    decoded, oracle = [], []
    for i in ids:
        beams = beam_search(bundle.task, ds.features[i], cfg.beam_size, cfg.max_length)
        cands = [_strip(s) for s, _ in beams]
        refs = [_strip(r) for r in ds.full[i]]
        oracle.append(oracle_best(cands, refs))
        decoded.extend(c for c in cands)
    return {
        f"oracle_token_f1@{cfg.beam_size}": float(np.mean(oracle)),
        f"distinct_{cfg.ngram}grams": distinct_ngrams(decoded, cfg.ngram),
        "distinct_1grams": distinct_ngrams(decoded, 1),
        f"recall_{cfg.m}@{cfg.recall_k}": mean_recall(bundle, ds, ids, cfg, seed),
    }


def validation_metric(bundle: ModelBundle, ds: SparseDataset, ids: np.ndarray, cfg: EvalConfig, seed: int) -> float:
    """Early-stopping criterion; an infinite KL counts as the worst possible value."""
    ids = _limit(ids, cfg.val_max_examples)
    if ds.kind == "multiclass":
        try:
            return mean_kl(bundle, ds, ids)
        except ValueError as err:
            if "zero mass" in str(err):
                return float("inf")
            raise
    if ds.kind == "multilabel":
        return precision_report(bundle, ds, ids, [10])["precision@10"]
    return mean_recall(bundle, ds, ids, cfg, seed)


def evaluate_split(bundle: ModelBundle, ds: SparseDataset, cfg: EvalConfig, seed: int, split: str = "test") -> dict[str, float]:
    ids = _limit(ds.ids(split), cfg.max_examples)
    if ids.size == 0:
        raise ValueError(f"no examples in split {split!r}")
    if ds.kind == "multiclass":
        return {"kl_mean": mean_kl(bundle, ds, ids)}
    if ds.kind == "multilabel":
        return precision_report(bundle, ds, ids, cfg.k_values)
    if ds.full is None:
        raise ValueError("dataset has no reference sequences")
    return sequence_report(bundle, ds, ids, cfg, seed)
