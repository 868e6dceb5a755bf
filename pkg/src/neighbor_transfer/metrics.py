"""Evaluation measures and the serializable metrics report."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


def kl_divergence(p, q) -> float:
    """KL(p || q) over the support of p.

    Raises if q is numerically zero (< 1e-12) where p has mass.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support size mismatch: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a normalized distribution")
    support = p > 0
    if np.any(q[support] < 1e-12):
        raise ValueError("q assigns numerically zero mass where p > 0")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the k highest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")[:k]


def precision_at_k(scores, positives: Iterable[int], k: int) -> float:
    scores = np.asarray(scores)
    positives = set(int(p) for p in positives)
    if not positives:
        raise ValueError("precision@k needs at least one true positive")
    if not 1 <= k <= scores.size:
        raise ValueError(f"k={k} outside [1, {scores.size}]")
    hits = sum(1 for j in top_k(scores, k) if int(j) in positives)
    return hits / k


def average_precision_at_k(score_rows, positive_sets, k: int) -> float:
    return float(np.mean([precision_at_k(s, t, k) for s, t in zip(score_rows, positive_sets)]))


def recall_m_at_k(log_probs, truth_ids: Sequence[int], k: int) -> float:
    """How many of the ground-truth pool entries rank in the top k."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    truth = set(int(t) for t in truth_ids)
    if any(t < 0 or t >= log_probs.size for t in truth):
        raise ValueError("ground-truth candidate missing from the pool")
    if not 1 <= k <= log_probs.size:
        raise ValueError(f"k={k} outside [1, {log_probs.size}]")
    return float(sum(1 for j in top_k(log_probs, k) if int(j) in truth))


def _ngrams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


def distinct_ngrams(sequences: Sequence[Sequence], n: int) -> float:
    """Distinct n-grams across the list divided by its total token count."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seqs = [s.split() if isinstance(s, str) else list(s) for s in sequences]
    if not seqs:
        raise ValueError("empty sequence list")
    total = sum(len(s) for s in seqs)
    if total == 0:
        return 0.0
    grams = set()
    for s in seqs:
        grams.update(_ngrams(s, n))
    return len(grams) / total


def token_f1(candidate, references) -> float:
    """Token-level F1 against the best-matching reference."""
    cand = Counter(candidate.split() if isinstance(candidate, str) else candidate)
    best = 0.0
    for ref in references:
        ref = Counter(ref.split() if isinstance(ref, str) else ref)
        overlap = sum((cand & ref).values())
        if overlap == 0:
            continue
        p = overlap / sum(cand.values())
        r = overlap / sum(ref.values())
        best = max(best, 2 * p * r / (p + r))
    return best


def oracle_best(candidates, references, scorer: Callable = token_f1) -> float:
    if len(candidates) == 0:
        raise ValueError("oracle_best needs a non-empty candidate list")
    best = -math.inf
    for c in candidates:
        s = float(scorer(c, references))
        if not math.isfinite(s):
            raise ValueError("scorer returned a non-finite value")
        best = max(best, s)
    return best


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    config: dict
    seed: int
    fingerprint: str
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite ({v})")

    def to_dict(self) -> dict:
        return {
            "metrics": dict(sorted(self.metrics.items())),
            "config": self.config,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "wall_clock": self.wall_clock,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path, run_id: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "metric", "value"])
            for k, v in sorted(self.metrics.items()):
                w.writerow([run_id, k, repr(float(v))])

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["metrics"], d["config"], d["seed"], d["fingerprint"], d.get("wall_clock", 0.0),
                   d.get("extra", {}))
