"""Training losses: empirical risk, neighbor transfer, similarity regularizers.

Per-example functions (``neighbor_transfer_loss`` and friends) mirror the
objective term by term and accept either Tensors or arrays. Training goes
through :func:`total_objective`, which evaluates the same terms vectorized
over a whole :class:`~neighbor_transfer.neighborhood.Batch`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Graph, Tensor, apply
from .models import EOS, ModelBundle, lift, mlp_forward, project, sequence_log_prob_batch
from .neighborhood import Batch, similarity_tensor

MODES = ("ours", "mle", "ce-l2", "augment", "no-refine")
LOSS_KINDS = ("softmax-ce", "sigmoid-bce", "sequence-nll")
LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.5
    mu: float = 1.0
    mode: str = "ours"
    l2_weight: float = 1e-4
    loss_kind: str = "softmax-ce"
    negative_ratio: float = 1.0
    use_attention: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        for name in ("lam", "mu", "l2_weight", "negative_ratio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def uses_neighbors(self) -> bool:
        return self.mode in ("ours", "augment", "no-refine")

    @property
    def refines_projection(self) -> bool:
        return self.mode == "ours"

    @property
    def effective_lam(self) -> float:
        return self.lam if self.uses_neighbors else 0.0

    @property
    def effective_mu(self) -> float:
        return self.mu if self.uses_neighbors else 0.0


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
        if isinstance(x, (list, tuple)):
            for y in x:
                if isinstance(y, Tensor):
                    return y.graph
    return Graph()


def _t(x, g: Graph) -> Tensor:
    return x if isinstance(x, Tensor) else g.constant(np.asarray(x, dtype=np.float64))


# pointwise losses ---------------------------------------------------------------

def clamped_log_softmax(logits: Tensor) -> Tensor:
    return apply("clamp_min", logits.log_softmax(axis=-1), floor=LOG_FLOOR)


def clamped_log_sigmoid(logits: Tensor) -> Tensor:
    return apply("clamp_min", apply("log_sigmoid", logits), floor=LOG_FLOOR)


def annotation_loss(prediction, annotation, kind: str = "softmax-ce", negatives=None) -> Tensor:
    """l(y~, y) for one prediction and one annotation.

    softmax-ce: ``prediction`` is a logit vector, ``annotation`` a class id.
    sigmoid-bce: ``annotation`` is a set of positive label ids; the loss is the
    mean binary NLL over those positives and any ``negatives``.
    sequence-nll: ``prediction`` is the per-token log-probability vector of
    the annotated sequence.
    """
    g = _graph_of(prediction)
    pred = _t(prediction, g)
    if kind == "softmax-ce":
        logp = clamped_log_softmax(pred)
        return -apply("gather_row", logp, index=int(annotation))
    if kind == "sigmoid-bce":
        pos = np.atleast_1d(np.asarray(list(annotation), dtype=np.int64))
        terms = -apply("gather_row", clamped_log_sigmoid(pred), index=pos).sum()
        count = pos.size
        if negatives is not None and len(negatives):
            neg = np.asarray(list(negatives), dtype=np.int64)
            terms = terms - apply("gather_row", clamped_log_sigmoid(-pred), index=neg).sum()
            count += neg.size
        return terms / count
    if kind == "sequence-nll":
        return -pred.sum()
    raise ValueError(f"unknown loss kind {kind!r}")


def empirical_risk(predictions, annotation_sets, kind: str = "softmax-ce", negatives=None) -> Tensor:
    """Mean over examples of the mean loss over each example's annotations.

    For classification kinds ``predictions`` is an (M, C) logit array/Tensor.
    For ``sigmoid-bce`` each example's annotation list is its observed positive
    set. For ``sequence-nll`` ``predictions[m]`` is a list of per-token
    log-probability vectors, one per annotation of example m.
    """
    g = _graph_of(predictions)
    terms = []
    for m, annots in enumerate(annotation_sets):
        if len(annots) == 0:
            raise ValueError(f"example {m} has an empty annotation set")
        if kind == "softmax-ce":
            row = apply("gather_row", _t(predictions, g), index=m)
            per = [annotation_loss(row, a, kind) for a in annots]
            term = per[0]
            for p in per[1:]:
                term = term + p
            terms.append(term / len(per))
        elif kind == "sigmoid-bce":
            row = apply("gather_row", _t(predictions, g), index=m)
            neg = None if negatives is None else negatives[m]
            terms.append(annotation_loss(row, annots, kind, negatives=neg))
        elif kind == "sequence-nll":
            per = [annotation_loss(lp, None, kind) for lp in predictions[m]]
            if len(per) != len(annots):
                raise ValueError(f"example {m}: {len(per)} predictions for {len(annots)} annotations")
            term = per[0]
            for p in per[1:]:
                term = term + p
            terms.append(term / len(per))
        else:
            raise ValueError(f"unknown loss kind {kind!r}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def neighbor_transfer_loss(prediction, own_label, neighbor_labels, k_values, lam: float,
                           kind: str = "softmax-ce", negatives=None) -> Tensor:
    """l(y~_i, y_i) + lam/|N| * sum_j K_ij * l(y~_i, y_j) for a single example."""
    g = _graph_of(prediction, k_values)
    pred = _t(prediction, g)
    k = _t(k_values, g).reshape(-1) if np.size(getattr(k_values, "value", k_values)) else None
    n = len(neighbor_labels)
    if (k is None and n) or (k is not None and k.shape[0] != n):
        raise ValueError(f"{n} neighbor labels but {0 if k is None else k.shape[0]} K values")
    own = annotation_loss(pred, own_label, kind, negatives=negatives)
    if n == 0:
        if lam > 0:
            raise ValueError("lambda > 0 needs at least one neighbor")
        return own
    nbr = apply("concat", *[annotation_loss(pred, y, kind).reshape(1) for y in neighbor_labels], axis=0)
    return own + (k * nbr).sum() * (lam / n)


def similarity_regularizer(k_values, mu: float) -> Tensor:
    """mu/|N| * sum_j (K_ij - 1)^2."""
    g = _graph_of(k_values)
    k = _t(k_values, g).reshape(-1)
    return (k - 1.0).square().sum() * (mu / k.shape[0])


def smoothed_targets(neighbor_classes, k_values, num_classes: int) -> np.ndarray:
    """Class mass proportional to the summed K of neighbors annotated with it."""
    k = np.asarray(k_values, dtype=np.float64)
    total = k.sum()
    if total <= 0:
        raise ValueError("sum of K is zero; no neighbor mass to redistribute")
    out = np.zeros(num_classes)
    np.add.at(out, np.asarray(neighbor_classes, dtype=np.int64), k)
    return out / total


def sequence_transfer_loss(log_probs, alphas, k_values, lam: float) -> Tensor:
    """-lam/|N| * sum_j K_ij * sum_t alpha_jt * log p(y_jt | y_j,<t, x_i)."""
    g = _graph_of(log_probs, alphas, k_values)
    if len(log_probs) != len(alphas):
        raise ValueError("one alpha vector per neighbor sequence is required")
    k = _t(k_values, g).reshape(-1)
    n = len(log_probs)
    per = []
    for lp, al in zip(log_probs, alphas):
        lp, al = _t(lp, g).reshape(-1), _t(al, g).reshape(-1)
        if lp.shape != al.shape:
            raise ValueError(f"alpha length {al.shape[0]} does not match log-prob length {lp.shape[0]}")
        per.append((al * lp).sum().reshape(1))
    weighted = apply("concat", *per, axis=0)
    return -(k * weighted).sum() * (lam / n)


def alpha_regularizer(alphas, k_values, mu: float, T: int) -> Tensor:
    """mu/(T |N|) * sum_j K_ij * (sum_t alpha_jt - 1)^2."""
    if T < 1:
        raise ValueError("T must be >= 1")
    g = _graph_of(alphas, k_values)
    k = _t(k_values, g).reshape(-1)
    dev = apply("concat", *[(_t(a, g).sum() - 1.0).square().reshape(1) for a in alphas], axis=0)
    return (k * dev).sum() * (mu / (T * len(alphas)))


# batched objective -------------------------------------------------------------------

@dataclass
class ObjectiveResult:
    loss: Tensor
    task: dict[str, Tensor]
    projection: dict[str, Tensor] | None
    k: Tensor | None = None
    parts: dict[str, float] = field(default_factory=dict)


def live_similarities(projection: dict[str, Tensor], batch: Batch, own_inputs, neighbor_inputs) -> Tensor:
    """(B, N) similarities recomputed from the current projection parameters."""
    b, n = batch.neighbor_ids.shape
    e_own = project(projection, own_inputs)
    e_nbr = project(projection, neighbor_inputs.reshape(b * n, -1))
    rep = apply("gather_row", e_own, index=np.repeat(np.arange(b), n))
    return similarity_tensor(rep, e_nbr).reshape(b, n)


def _proj_inputs(features: np.ndarray, region_bags: bool) -> np.ndarray:
    # region bags project through their mean region vector
    return features.mean(axis=-2) if region_bags else features


def _class_weights(batch: Batch, num_classes: int):
    b, n = batch.neighbor_ids.shape
    own = np.zeros((b, num_classes))
    for i, annots in enumerate(batch.annotations):
        for c in annots:
            own[i, c] += 1.0 / len(annots)
    nbr = np.zeros((b, max(n, 1), num_classes))
    for i, row in enumerate(batch.neighbor_annotations):
        for j, annots in enumerate(row):
            for c in annots:
                nbr[i, j, c] += 1.0 / len(annots)
    return own, nbr[:, :n]


def _label_weights(batch: Batch, num_labels: int):
    b, n = batch.neighbor_ids.shape
    pos = np.zeros((b, num_labels))
    neg = np.zeros((b, num_labels))
    for i, annots in enumerate(batch.annotations):
        negs = batch.negatives[i] if batch.negatives is not None else []
        denom = len(annots) + len(negs)
        pos[i, list(annots)] += 1.0 / denom
        if len(negs):
            neg[i, list(negs)] += 1.0 / denom
    nbr = np.zeros((b, max(n, 1), num_labels))
    for i, row in enumerate(batch.neighbor_annotations):
        for j, annots in enumerate(row):
            nbr[i, j, list(annots)] += 1.0 / len(annots)
    return pos, neg, nbr[:, :n]


def _classification_terms(cfg: ObjectiveConfig, batch: Batch, task: dict[str, Tensor], g: Graph):
    logits = mlp_forward(task, g.constant(batch.features))
    b, n = batch.neighbor_ids.shape
    if cfg.loss_kind == "softmax-ce":
        logp = clamped_log_softmax(logits)
        own_w, nbr_w = _class_weights(batch, logits.shape[1])
        own = -(logp * own_w).sum(axis=1)
        nbr = None
        if n:
            nbr = -(logp.reshape(b, 1, -1) * nbr_w).sum(axis=2)
        return own, nbr
    pos_w, neg_w, nbr_w = _label_weights(batch, logits.shape[1])
    ls_pos = clamped_log_sigmoid(logits)
    own = -(ls_pos * pos_w).sum(axis=1)
    if neg_w.any():
        own = own - (clamped_log_sigmoid(-logits) * neg_w).sum(axis=1)
    nbr = None
    if n:
        nbr = -(ls_pos.reshape(b, 1, -1) * nbr_w).sum(axis=2)
    return own, nbr


def _pad(seqs):
    lengths = np.array([len(s) for s in seqs])
    tokens = np.full((len(seqs), lengths.max()), EOS, dtype=np.int64)
    for r, s in enumerate(seqs):
        tokens[r, : len(s)] = s
    return tokens, lengths


def _sequence_terms(cfg: ObjectiveConfig, batch: Batch, task: dict[str, Tensor], g: Graph):
    """Own NLL (B,), alpha-weighted neighbor NLL (B, N) and alpha deviation (B, N)."""
    b, n = batch.neighbor_ids.shape
    rows, seqs, own_w, nbr_w = [], [], [], []
    for i, annots in enumerate(batch.annotations):
        for a in annots:
            rows.append(i)
            seqs.append(a)
            own_w.append((i, 1.0 / len(annots)))
    n_own = len(seqs)
    for i, row in enumerate(batch.neighbor_annotations):
        for j, annots in enumerate(row):
            for a in annots:
                rows.append(i)
                seqs.append(a)
                nbr_w.append((i, j, 1.0 / len(annots)))
    tokens, lengths = _pad(seqs)
    regions = g.constant(batch.features[np.asarray(rows)])
    logp, alpha = sequence_log_prob_batch(task, regions, tokens, lengths)

    seq_rows = len(seqs)
    own_sel = np.zeros((b, seq_rows))
    for r, (i, w) in enumerate(own_w):
        own_sel[i, r] = w
    own = -(own_sel @ logp.sum(axis=1))
    if not n:
        return own, None, None
    nbr_sel = np.zeros((b * n, seq_rows))
    dev_len = np.zeros(b * n)
    for r, (i, j, w) in enumerate(nbr_w):
        nbr_sel[i * n + j, n_own + r] = w
        dev_len[i * n + j] += w * lengths[n_own + r]
    if cfg.use_attention:
        weighted = (alpha * logp).sum(axis=1)
        nbr = -(nbr_sel @ weighted).reshape(b, n)
        dev = (nbr_sel @ (alpha.sum(axis=1) - 1.0).square()).reshape(b, n)
        dev = dev * (1.0 / dev_len.reshape(b, n))
    else:
        nbr = -(nbr_sel @ logp.sum(axis=1)).reshape(b, n)
        dev = None
    return own, nbr, dev


def total_objective(cfg: ObjectiveConfig, batch: Batch, bundle: ModelBundle, graph: Graph | None = None,
                    lifted: tuple[dict, dict | None] | None = None) -> ObjectiveResult:
    """Scalar loss over a batch, with its graph ready for :func:`backward`.

    mle / ce-l2 use only the own-annotation term (ce-l2 adds an L2 penalty on
    task parameters). ours adds the K-weighted neighbor term and the
    similarity regularizer; augment fixes K = 1; no-refine computes K from a
    frozen projection. ``lifted`` supplies ready-made (task, projection)
    tensors, e.g. the leaves of a finite-difference check.
    """
    if lifted is not None:
        task, given_proj = lifted
        g = next(iter(task.values())).graph
    else:
        g = graph or Graph()
        task, given_proj = lift(bundle.task, g, trainable=True), None
    proj = None
    b, n = batch.neighbor_ids.shape
    if cfg.uses_neighbors and n == 0 and cfg.lam > 0:
        raise ValueError(f"mode {cfg.mode} with lambda > 0 needs a batch with neighbors")
    is_seq = cfg.loss_kind == "sequence-nll"
    if is_seq != (batch.features.ndim == 3):
        raise ValueError("sequence-nll needs a batch of region bags (and vice versa)")

    if is_seq:
        own, nbr, dev = _sequence_terms(cfg, batch, task, g)
    else:
        own, nbr = _classification_terms(cfg, batch, task, g)
        dev = None

    k = None
    per_example = own
    parts = {"own": float(own.value.mean())}
    if cfg.uses_neighbors and n:
        if cfg.mode == "augment":
            k = g.constant(np.ones((b, n)))
        else:
            proj = given_proj or lift(bundle.projection, g, trainable=cfg.refines_projection)
            k = live_similarities(proj, batch, _proj_inputs(batch.features, is_seq),
                                  _proj_inputs(batch.neighbor_features, is_seq))
        transfer = (k * nbr).sum(axis=1) * (cfg.lam / n)
        per_example = per_example + transfer
        parts["transfer"] = float(transfer.value.mean())
        if is_seq:
            if dev is not None:
                reg = (k * dev).sum(axis=1) * (cfg.mu / n)
                per_example = per_example + reg
                parts["alpha_reg"] = float(reg.value.mean())
        else:
            reg = (k - 1.0).square().sum(axis=1) * (cfg.mu / n)
            per_example = per_example + reg
            parts["similarity_reg"] = float(reg.value.mean())
    loss = per_example.mean()
    if cfg.mode == "ce-l2" and cfg.l2_weight > 0:
        sq = None
        for p in task.values():
            s = p.square().sum()
            sq = s if sq is None else sq + s
        loss = loss + sq * cfg.l2_weight
    return ObjectiveResult(loss, task, proj, k, parts)
