"""Task models and the projection network.

Parameters live in plain ``dict[str, np.ndarray]`` objects whose insertion
order is the declaration order. Forward functions take the same names
mapped to :class:`~neighbor_transfer.diffcore.Tensor` objects, so callers
decide per step which groups are trainable (``lift``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .diffcore import Graph, Tensor, apply
from .rng import stream

EOS = 0
BOS = 1

HEADS = ("softmax-multiclass", "sigmoid-multilabel", "none")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    head: str = "softmax-multiclass"
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs input and output widths (at least one layer)")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")


@dataclass(frozen=True)
class ProjectionSpec:
    input_width: int
    output_width: int = 64
    hidden: tuple[int, ...] = (512, 512)
    kind: str = field(default="projection", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden, self.output_width)


@dataclass(frozen=True)
class DecoderSpec:
    vocab: int
    embed: int
    hidden: int
    regions: int
    region_width: int
    attention: int = 0  # 0 -> same as hidden
    kind: str = field(default="decoder", init=False)

    def __post_init__(self):
        for name in ("vocab", "embed", "hidden", "regions", "region_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"DecoderSpec.{name} must be positive")
        if self.vocab < 2:
            raise ValueError("vocabulary must hold at least the EOS and BOS tokens")

    @property
    def attention_width(self) -> int:
        return self.attention or self.hidden


def spec_from_dict(d: Mapping) -> MlpSpec | ProjectionSpec | DecoderSpec:
    d = dict(d)
    kind = d.pop("kind")
    cls = {"mlp": MlpSpec, "projection": ProjectionSpec, "decoder": DecoderSpec}[kind]
    return cls(**d)


def spec_to_dict(spec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _dense_layers(widths, rng, prefix=""):
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if a <= 0 or b <= 0:
            raise ValueError(f"zero-width layer in {widths}")
        params[f"{prefix}W{i}"] = _uniform(rng, a, (a, b))
        params[f"{prefix}b{i}"] = np.zeros(b)
    return params


def init_params(spec, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = stream(seed, f"init/{spec.kind}")
    if isinstance(spec, (MlpSpec, ProjectionSpec)):
        return _dense_layers(spec.widths, rng)
    if isinstance(spec, DecoderSpec):
        v, e, h, f, a = spec.vocab, spec.embed, spec.hidden, spec.region_width, spec.attention_width
        cell_in = e + f + h
        return {
            "embed": _uniform(rng, e, (v, e)),
            "Wz": _uniform(rng, cell_in, (cell_in, h)),
            "bz": np.zeros(h),
            "Wc": _uniform(rng, cell_in, (cell_in, h)),
            "bc": np.zeros(h),
            "Wv": _uniform(rng, f, (f, a)),
            "Wg": _uniform(rng, h, (h, a)),
            "wa": _uniform(rng, a, (a, 1)),
            "sentinel": _uniform(rng, f, (f,)),
            "Wo": _uniform(rng, h + f, (h + f, v)),
            "bo": np.zeros(v),
        }
    raise TypeError(f"unsupported spec {spec!r}")


def lift(params: Mapping[str, np.ndarray], graph: Graph, trainable: bool) -> dict[str, Tensor]:
    if trainable:
        return {k: graph.param(v, name=k) for k, v in params.items()}
    return {k: graph.constant(v, name=k) for k, v in params.items()}


def _as_tensor(x, graph: Graph | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return (graph or Graph()).constant(x)


def _first_graph(params: Mapping[str, Tensor]) -> Graph:
    return next(iter(params.values())).graph


def _dense_forward(params, x: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = x @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            x = x.relu()
    return x


def _check_width(name, x: Tensor, width: int):
    if x.shape[-1] != width:
        raise ValueError(f"{name}: input width {x.shape[-1]} does not match spec width {width}")


def mlp_forward(params: Mapping[str, Tensor], x, spec: MlpSpec | None = None) -> Tensor:
    """Logits for one feature vector or a batch of rows; heads are applied by the loss."""
    n_layers = sum(1 for k in params if k.startswith("W"))
    x = _as_tensor(x, _first_graph(params))
    _check_width("mlp_forward", x, params["W0"].shape[0])
    return _dense_forward(params, x, n_layers)


def project(params: Mapping[str, Tensor], x, spec: ProjectionSpec | None = None) -> Tensor:
    """Embedding r(x) used for similarities."""
    n_layers = sum(1 for k in params if k.startswith("W"))
    x = _as_tensor(x, _first_graph(params))
    _check_width("project", x, params["W0"].shape[0])
    return _dense_forward(params, x, n_layers)


@dataclass
class ModelBundle:
    """Task parameters plus projection parameters, each with its own learning rate."""

    task: dict[str, np.ndarray]
    projection: dict[str, np.ndarray] | None
    task_spec: MlpSpec | DecoderSpec
    projection_spec: ProjectionSpec | None
    task_lr: float = 1e-3
    projection_lr: float | None = None

    def __post_init__(self):
        if self.projection_lr is None:
            self.projection_lr = self.task_lr / 10.0

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            {k: v.copy() for k, v in self.task.items()},
            None if self.projection is None else {k: v.copy() for k, v in self.projection.items()},
            self.task_spec, self.projection_spec, self.task_lr, self.projection_lr,
        )

    def embed(self, inputs: np.ndarray) -> np.ndarray:
        """Projected embeddings of a (M, d) array, computed without a gradient tape."""
        g = Graph()
        return project(lift(self.projection, g, trainable=False), g.constant(inputs)).value

    def save(self, path, header: Mapping | None = None) -> None:
        groups = {"task": self.task}
        if self.projection is not None:
            groups["projection"] = self.projection
        meta = {
            "task_spec": spec_to_dict(self.task_spec),
            "projection_spec": spec_to_dict(self.projection_spec) if self.projection_spec else None,
            "task_lr": self.task_lr,
            "projection_lr": self.projection_lr,
            **(header or {}),
        }
        save_checkpoint(path, groups, meta)

    @classmethod
    def load(cls, path) -> tuple["ModelBundle", dict]:
        groups, header = load_checkpoint(path)
        pspec = header.pop("projection_spec")
        bundle = cls(
            groups["task"], groups.get("projection"),
            spec_from_dict(header.pop("task_spec")),
            spec_from_dict(pspec) if pspec else None,
            header.pop("task_lr"), header.pop("projection_lr"),
        )
        return bundle, header


# decoder -------------------------------------------------------------------

def initial_state(params: Mapping[str, Tensor], batch: int) -> Tensor:
    h = params["Wz"].shape[1]
    return _first_graph(params).constant(np.zeros((batch, h)))


def decoder_step(params: Mapping[str, Tensor], state: Tensor, prev_tokens, regions, global_feature=None):
    """One teacher-forced or free-running step for a batch of B inputs.

    ``regions`` is (B, k, f); ``global_feature`` defaults to the region mean.
    Returns ``(log_probs (B, V), alpha (B,), attention (B, k+1), new_state)``
    where ``alpha`` is the attention mass on the k visual regions, the last
    attention slot being the non-visual sentinel.
    """
    g = _first_graph(params)
    vocab = params["embed"].shape[0]
    prev_tokens = np.atleast_1d(np.asarray(prev_tokens, dtype=np.int64))
    if prev_tokens.min() < 0 or prev_tokens.max() >= vocab:
        raise ValueError(f"token id out of vocabulary range [0, {vocab})")
    regions = _as_tensor(regions, g)
    if regions.ndim == 2:
        regions = regions.reshape(1, *regions.shape)
    B, k, f = regions.shape
    if global_feature is None:
        global_feature = regions.mean(axis=1)
    global_feature = _as_tensor(global_feature, g)
    if global_feature.ndim == 1:
        global_feature = global_feature.reshape(1, -1)

    w = apply("gather_row", params["embed"], index=prev_tokens)
    cell_in = apply("concat", w, global_feature, state, axis=1)
    z = (cell_in @ params["Wz"] + params["bz"]).sigmoid()
    cand = (cell_in @ params["Wc"] + params["bc"]).tanh()
    new_state = state + z * (cand - state)

    a = params["Wv"].shape[1]
    query = (new_state @ params["Wg"]).reshape(B, 1, a)
    keys = (regions.reshape(B * k, f) @ params["Wv"]).reshape(B, k, a)
    region_scores = ((keys + query).tanh().reshape(B * k, a) @ params["wa"]).reshape(B, k)
    sentinel_key = params["sentinel"].reshape(1, f) @ params["Wv"]
    sentinel_score = (sentinel_key + query.reshape(B, a)).tanh() @ params["wa"]
    attention = apply("concat", region_scores, sentinel_score, axis=1).log_softmax(axis=1).exp()

    select = np.zeros((k + 1, k + 1))
    select[np.arange(k), np.arange(k)] = 1.0
    region_w = (attention @ select[:, :k]).reshape(B, k, 1)
    sentinel_w = attention @ np.eye(k + 1)[:, k:]
    context = (region_w * regions).sum(axis=1) + sentinel_w * params["sentinel"].reshape(1, f)
    alpha = (attention @ np.r_[np.ones(k), 0.0].reshape(k + 1, 1)).reshape(B)

    out = apply("concat", new_state, context, axis=1) @ params["Wo"] + params["bo"]
    return out.log_softmax(axis=1), alpha, attention, new_state


def sequence_log_prob_batch(params: Mapping[str, Tensor], regions, tokens: np.ndarray,
                            lengths: np.ndarray | None = None):
    """Teacher-forced per-token log-probabilities and alphas, (B, T) each.

    ``tokens`` is a (B, T) integer array; rows shorter than T are described by
    ``lengths`` and their padded positions come back as exact zeros.
    """
    g = _first_graph(params)
    tokens = np.asarray(tokens, dtype=np.int64)
    B, T = tokens.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    vocab = params["embed"].shape[0]
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    safe = np.where(mask > 0, tokens, EOS)
    if safe.min() < 0 or safe.max() >= vocab:
        raise ValueError(f"token id out of vocabulary range [0, {vocab})")
    regions = _as_tensor(regions, g)
    global_feature = regions.mean(axis=1)
    state = initial_state(params, B)
    prev = np.full(B, BOS)
    logps, alphas = [], []
    rows = np.arange(B)
    for t in range(T):
        logp, alpha, _, state = decoder_step(params, state, prev, regions, global_feature)
        picked = apply("gather_row", logp.reshape(B * vocab), index=rows * vocab + safe[:, t])
        logps.append(picked.reshape(B, 1))
        alphas.append(alpha.reshape(B, 1))
        prev = safe[:, t]
    logp = apply("concat", *logps, axis=1) * mask
    alpha = apply("concat", *alphas, axis=1) * mask
    return logp, alpha


def sequence_log_prob(params: Mapping[str, Tensor], regions, tokens):
    """Per-token log p(y_t | y_<t, x) and alpha_t for a single sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0 or tokens[-1] != EOS:
        raise ValueError("sequence must be non-empty and end with EOS")
    g = _first_graph(params)
    regions = _as_tensor(regions, g)
    if regions.ndim == 2:
        regions = regions.reshape(1, *regions.shape)
    logp, alpha = sequence_log_prob_batch(params, regions, tokens[None, :])
    T = tokens.size
    return logp.reshape(T), alpha.reshape(T)


def beam_search(params: Mapping[str, np.ndarray], regions: np.ndarray, beam_size: int,
                max_length: int) -> list[tuple[tuple[int, ...], float]]:
    """Completed hypotheses sorted by total log-probability, best first.

    Each step keeps the best ``width`` expansions, where ``width`` is the
    beam size minus the hypotheses already finished; an expansion ending in
    EOS finishes, and every live hypothesis finishes at ``max_length``.
    Ties go to the earlier beam, then to the lower token id.
    """
    if beam_size < 1 or max_length < 1:
        raise ValueError("beam_size and max_length must be >= 1")
    regions = np.asarray(regions, dtype=np.float64)
    if regions.ndim == 3:
        regions = regions[0]
    vocab = params["embed"].shape[0]
    seqs: list[tuple[int, ...]] = [()]
    scores = np.zeros(1)
    states = np.zeros((1, params["Wz"].shape[1]))
    finished: list[tuple[tuple[int, ...], float]] = []
    for step in range(max_length):
        g = Graph()
        consts = {k: g.constant(v) for k, v in params.items()}
        prev = np.array([s[-1] if s else BOS for s in seqs])
        reg = np.broadcast_to(regions, (len(seqs), *regions.shape))
        logp, _, _, new_state = decoder_step(consts, g.constant(states), prev, reg)
        total = scores[:, None] + logp.value
        width = beam_size - len(finished)
        order = np.argsort(-total.reshape(-1), kind="stable")[:width]
        keep_seqs, keep_scores, keep_rows = [], [], []
        for flat in order:
            bi, tok = divmod(int(flat), vocab)
            seq = seqs[bi] + (tok,)
            if tok == EOS or step == max_length - 1:
                finished.append((seq, float(total[bi, tok])))
            else:
                keep_seqs.append(seq)
                keep_scores.append(total[bi, tok])
                keep_rows.append(bi)
        if not keep_seqs:
            break
        seqs, scores, states = keep_seqs, np.array(keep_scores), new_state.value[keep_rows]
    finished.sort(key=lambda item: -item[1])
    return finished


def greedy_decode(params: Mapping[str, np.ndarray], regions: np.ndarray, max_length: int) -> tuple[int, ...]:
    regions = np.asarray(regions, dtype=np.float64)
    state = np.zeros((1, params["Wz"].shape[1]))
    prev, out = BOS, []
    for _ in range(max_length):
        g = Graph()
        consts = {k: g.constant(v) for k, v in params.items()}
        logp, _, _, new = decoder_step(consts, g.constant(state), [prev], regions[None])
        prev = int(np.argmax(logp.value[0]))
        out.append(prev)
        state = new.value
        if prev == EOS:
            break
    return tuple(out)


# checkpoints ---------------------------------------------------------------

_MAGIC = b"NTCK1\n"


def save_checkpoint(path, groups: Mapping[str, Mapping[str, np.ndarray]], header: Mapping) -> None:
    """JSON header followed by little-endian float64 payload per parameter."""
    layout = []
    for group, params in groups.items():
        for name, arr in params.items():
            layout.append({"group": group, "name": name, "shape": list(np.shape(arr))})
    head = json.dumps({**header, "layout": layout}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for group, params in groups.items():
            for arr in params.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (n,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    header = json.loads(raw[off:off + n])
    off += n
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header.pop("layout"):
        size = int(np.prod(entry["shape"], dtype=np.int64))
        end = off + 8 * size
        if end > len(raw):
            raise ValueError(f"{path}: payload truncated at {entry['group']}/{entry['name']}")
        arr = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
        off = end
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return groups, header
