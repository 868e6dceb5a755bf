"""Seeded synthetic tasks with known ground truth, the sparse annotator, dataset files.

Three task families share one container, :class:`SparseDataset`:

* ``multiclass``: Gaussian clusters, each with a multi-modal class posterior;
  observed labels are draws from that posterior.
* ``multilabel``: Gaussian clusters, each with a fixed positive label set plus
  per-example flip noise; training sees a subsample of the positives.
* ``sequence``: bags of region vectors; each bag admits five token sequences
  built from region-conditioned templates.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import EOS
from .rng import stream

KINDS = ("multiclass", "multilabel", "sequence")
SPLITS = ("train", "val", "test")


@dataclass
class SparseDataset:
    kind: str
    features: np.ndarray  # (M, d) or (M, k, f) for region bags
    annotations: list  # observed outputs per example
    n_outputs: int  # classes, labels, or vocabulary size
    split: np.ndarray  # "train" / "val" / "test" per example
    full: list | None = None  # every valid output per example (evaluation targets)
    posterior: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.features = np.asarray(self.features, dtype=np.float64)
        self.split = np.asarray(self.split)
        m = len(self.features)
        if len(self.annotations) != m or len(self.split) != m:
            raise ValueError("features, annotations and split must have one entry per example")
        for i, a in enumerate(self.annotations):
            if len(a) == 0:
                raise ValueError(f"example {i} has no annotation")
        if self.posterior is not None:
            self.posterior = np.asarray(self.posterior, dtype=np.float64)
            if np.max(np.abs(self.posterior.sum(axis=1) - 1.0)) > 1e-9:
                raise ValueError("posterior rows must sum to 1")

    def __len__(self):
        return len(self.features)

    def ids(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    @property
    def projection_inputs(self) -> np.ndarray:
        """Per-example vector fed to r(.): the features, or the mean region vector."""
        if self.features.ndim == 3:
            return self.features.mean(axis=1)
        return self.features

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(json.dumps([_jsonable(a) for a in self.annotations]).encode())
        h.update(json.dumps(self.split.tolist()).encode())
        if self.full is not None:
            h.update(json.dumps([_jsonable(a) for a in self.full]).encode())
        if self.posterior is not None:
            h.update(np.ascontiguousarray(self.posterior, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def _jsonable(annots):
    return [list(a) if isinstance(a, tuple) else int(a) for a in annots]


def _assign_splits(rng, m: int, fractions) -> np.ndarray:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    counts = np.floor(fractions * m).astype(int)
    counts[0] += m - counts.sum()
    labels = np.repeat(np.array(SPLITS), counts)
    return labels[rng.permutation(m)]


def _cluster_inputs(rng, clusters, points, input_dim, overlap):
    """Isotropic Gaussian clusters around scaled simplex vertices.

    Centroid spacing is 6 sigma at overlap 0 and 1 sigma at overlap 1.
    """
    if input_dim < clusters:
        raise ValueError("input_dim must be >= clusters (centroids sit on simplex vertices)")
    scale = 3.0
    spacing = scale * math.sqrt(2.0)
    sigma = spacing / (6.0 - 5.0 * overlap)
    centroids = np.zeros((clusters, input_dim))
    centroids[np.arange(clusters), np.arange(clusters)] = scale
    assign = np.repeat(np.arange(clusters), points)
    x = centroids[assign] + sigma * rng.standard_normal((clusters * points, input_dim))
    return x, assign, centroids, sigma


def multimodal_posterior(rng, classes: int, concentration: float = 0.5, floor: float = 0.1) -> np.ndarray:
    """Dirichlet draw pulled toward its top two classes until both hold >= floor."""
    p = rng.dirichlet(np.full(classes, concentration))
    a, b = np.argsort(-p, kind="stable")[:2]
    if p[b] < floor:
        w = (floor - p[b]) / (0.5 - p[b])
        target = np.zeros(classes)
        target[[a, b]] = 0.5
        p = (1.0 - w) * p + w * target
    return p / p.sum()


def gen_multiclass(clusters: int = 8, classes: int = 5, points_per_cluster: int = 40,
                   input_dim: int = 16, overlap: float = 0.3, seed: int = 0,
                   annotations_per_input: int = 1, concentration: float = 0.5,
                   split_fractions=(0.5, 0.25, 0.25)) -> SparseDataset:
    if classes < 3 or clusters < 2 or not 0.0 <= overlap <= 1.0 or points_per_cluster < 1:
        raise ValueError("need classes >= 3, clusters >= 2, overlap in [0, 1], points_per_cluster >= 1")
    if annotations_per_input < 1:
        raise ValueError("annotations_per_input must be >= 1")
    rng = stream(seed, "gen/multiclass")
    x, assign, _, sigma = _cluster_inputs(rng, clusters, points_per_cluster, input_dim, overlap)
    cluster_post = np.stack([multimodal_posterior(rng, classes, concentration) for _ in range(clusters)])
    posterior = cluster_post[assign]
    observed = [
        [int(c) for c in rng.choice(classes, size=annotations_per_input, p=posterior[i])]
        for i in range(len(x))
    ]
    full = [[int(c) for c in np.flatnonzero(posterior[i] > 0)] for i in range(len(x))]
    split = _assign_splits(rng, len(x), split_fractions)
    meta = {
        "generator": "multiclass",
        "config": dict(clusters=clusters, classes=classes, points_per_cluster=points_per_cluster,
                       input_dim=input_dim, overlap=overlap, annotations_per_input=annotations_per_input,
                       concentration=concentration, split_fractions=list(split_fractions)),
        "seed": seed, "sigma": sigma, "cluster": assign.tolist(),
    }
    return SparseDataset("multiclass", x, observed, classes, split, full=full, posterior=posterior, meta=meta)


def gen_multilabel(clusters: int = 10, labels: int = 85, points_per_cluster: int = 30,
                   positives_per_cluster: int = 20, input_dim: int = 32, seed: int = 0,
                   overlap: float = 0.3, flip: float = 0.05, annotation: dict | None = None,
                   split_fractions=(0.5, 0.25, 0.25)) -> SparseDataset:
    """Cluster label sets with flip noise; observed labels are a subsample of the positives."""
    if not 1 <= positives_per_cluster <= labels or clusters < 2 or points_per_cluster < 1:
        raise ValueError("need 1 <= positives_per_cluster <= labels, clusters >= 2, points_per_cluster >= 1")
    if not 0.0 <= flip < 1.0 or not 0.0 <= overlap <= 1.0:
        raise ValueError("flip must be in [0, 1) and overlap in [0, 1]")
    annotation = annotation or {"count": 1}
    rng = stream(seed, "gen/multilabel")
    x, assign, _, sigma = _cluster_inputs(rng, clusters, points_per_cluster, input_dim, overlap)
    cluster_sets = np.zeros((clusters, labels), dtype=bool)
    for c in range(clusters):
        cluster_sets[c, rng.choice(labels, size=positives_per_cluster, replace=False)] = True
    full_bits = cluster_sets[assign].copy()
    flips = rng.random(full_bits.shape) < flip
    noisy = full_bits ^ flips
    empty = ~noisy.any(axis=1)
    noisy[empty] = full_bits[empty]
    full = [[int(j) for j in np.flatnonzero(row)] for row in noisy]
    observed = subsample(full, annotation, seed=int(rng.integers(2**31)))
    split = _assign_splits(rng, len(x), split_fractions)
    meta = {
        "generator": "multilabel",
        "config": dict(clusters=clusters, labels=labels, points_per_cluster=points_per_cluster,
                       positives_per_cluster=positives_per_cluster, input_dim=input_dim,
                       overlap=overlap, flip=flip, annotation=dict(annotation),
                       split_fractions=list(split_fractions)),
        "seed": seed, "sigma": sigma, "cluster": assign.tolist(),
        "cluster_sets": [[int(j) for j in np.flatnonzero(r)] for r in cluster_sets],
    }
    return SparseDataset("multilabel", x, observed, labels, split, full=full, meta=meta)


REFERENCES_PER_INPUT = 5


def gen_sequences(templates: int = 12, inputs: int = 400, vocab: int = 24, regions_per_input: int = 3,
                  seed: int = 0, concepts: int = 8, region_width: int = 8, length: int = 4,
                  noise: float = 0.3, split_fractions=(0.5, 0.25, 0.25)) -> SparseDataset:
    """Grounded toy captions: every input admits exactly five reference sequences.

    Token ids: 0 = EOS, 1 = BOS, then one word per region concept, then
    filler words. A template is ``length`` positions, each a filler word or
    a slot naming the r-th region of the bag (regions are stored in concept
    order). The five templates of an input are the top-5 by summed
    concept-template affinity, so similar bags share templates and words.
    """
    fillers = vocab - 2 - concepts
    if templates < REFERENCES_PER_INPUT:
        raise ValueError(f"templates must be >= {REFERENCES_PER_INPUT}")
    if fillers < 2 or not 1 <= regions_per_input <= concepts or length < 2 or inputs < 1:
        raise ValueError("vocab too small for concepts plus two fillers, or invalid region/length settings")
    rng = stream(seed, "gen/sequence")
    concept_word = 2 + np.arange(concepts)
    filler_word = 2 + concepts + np.arange(fillers)

    patterns: set[tuple] = set()
    tmpl: list[tuple] = []
    while len(tmpl) < templates:
        slots = rng.random(length) < 0.5
        if slots.all() or not slots.any():
            continue
        pat = tuple(("slot", int(rng.integers(regions_per_input))) if s
                    else ("word", int(filler_word[rng.integers(fillers)])) for s in slots)
        if pat not in patterns:
            patterns.add(pat)
            tmpl.append(pat)
    affinity = rng.random((concepts, templates))
    prototypes = rng.standard_normal((concepts, region_width))

    bags = np.stack([np.sort(rng.choice(concepts, size=regions_per_input, replace=False)) for _ in range(inputs)])
    feats = prototypes[bags] + noise * rng.standard_normal((inputs, regions_per_input, region_width))
    full = [references_for_bag(b, tmpl, affinity, concept_word) for b in bags]
    observed = subsample(full, {"count": 1}, seed=int(rng.integers(2**31)))
    split = _assign_splits(rng, inputs, split_fractions)
    meta = {
        "generator": "sequence",
        "config": dict(templates=templates, inputs=inputs, vocab=vocab, regions_per_input=regions_per_input,
                       concepts=concepts, region_width=region_width, length=length, noise=noise,
                       split_fractions=list(split_fractions)),
        "seed": seed, "bags": bags.tolist(),
    }
    return SparseDataset("sequence", feats, observed, vocab, split, full=full, meta=meta)


def references_for_bag(bag, templates, affinity, concept_word) -> list[tuple[int, ...]]:
    score = affinity[np.asarray(bag)].sum(axis=0)
    chosen = np.argsort(-score, kind="stable")[:REFERENCES_PER_INPUT]
    refs = []
    for t in sorted(chosen):
        seq = [concept_word[bag[v]] if kind == "slot" else v for kind, v in templates[t]]
        refs.append(tuple(int(s) for s in seq) + (EOS,))
    return refs


def _policy_size(policy: dict, n: int) -> int:
    if "count" in policy:
        k = int(policy["count"])
        if k < 1:
            raise ValueError("count policy needs k >= 1")
        return min(k, n)
    if "fraction" in policy:
        p = float(policy["fraction"])
        if not 0.0 < p <= 1.0:
            raise ValueError("fraction policy needs p in (0, 1]")
        return max(1, min(n, math.floor(p * n + 0.5)))
    raise ValueError("subsample policy must carry 'count' or 'fraction'")


def subsample(full_sets, policy: dict, seed: int) -> list[list]:
    """Uniform sampling without replacement; kept items stay in their original order."""
    rng = stream(seed, "subsample")
    out = []
    for i, items in enumerate(full_sets):
        items = list(items)
        if not items:
            raise ValueError(f"example {i} has an empty full annotation set")
        k = _policy_size(policy, len(items))
        if k == len(items):
            out.append(items)
            continue
        keep = np.sort(rng.choice(len(items), size=k, replace=False))
        out.append([items[j] for j in keep])
    return out


def generate(task: str, seed: int, **params) -> SparseDataset:
    gens = {"multiclass-toy": gen_multiclass, "multilabel-toy": gen_multilabel, "sequence-toy": gen_sequences}
    try:
        fn = gens[task]
    except KeyError:
        raise ValueError(f"unknown generator task {task!r}") from None
    return fn(seed=seed, **params)


# dataset files ----------------------------------------------------------------

def _format_annotation(kind, a) -> str:
    if kind == "sequence":
        return " ".join(str(int(t)) for t in a)
    return str(int(a))


def _parse_annotation(kind, s: str):
    if kind == "sequence":
        return tuple(int(t) for t in s.split())
    return int(s)


def write_dataset(ds: SparseDataset, path) -> Path:
    """Directory with header.json, features.f64, annotations.csv and optional posterior.f64."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "generator": ds.meta.get("generator"),
        "config": ds.meta.get("config"),
        "seed": ds.meta.get("seed"),
        "kind": ds.kind,
        "M": len(ds),
        "dims": list(ds.features.shape[1:]),
        "n_outputs": ds.n_outputs,
        "split": ds.split.tolist(),
        "posterior": list(ds.posterior.shape) if ds.posterior is not None else None,
        "meta": {k: v for k, v in ds.meta.items() if k not in ("generator", "config", "seed")},
    }
    (path / "header.json").write_text(json.dumps(header, sort_keys=True))
    (path / "features.f64").write_bytes(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
    with open(path / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "role", "annotation"])
        for role, table in (("observed", ds.annotations), ("full", ds.full or [])):
            for i, annots in enumerate(table):
                for a in annots:
                    w.writerow([i, role, _format_annotation(ds.kind, a)])
    if ds.posterior is not None:
        (path / "posterior.f64").write_bytes(np.ascontiguousarray(ds.posterior, dtype="<f8").tobytes())
    return path


def _read_payload(file: Path, shape) -> np.ndarray:
    raw = file.read_bytes()
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise ValueError(f"{file.name}: payload has {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def read_dataset(path, with_posterior: bool = True) -> SparseDataset:
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    m = int(header["M"])
    kind = header["kind"]
    feats = _read_payload(path / "features.f64", (m, *header["dims"]))
    bad = np.flatnonzero(~np.isfinite(feats.reshape(m, -1)).all(axis=1))
    if bad.size:
        raise ValueError(f"non-finite feature value in row {int(bad[0])}")
    observed: list[list] = [[] for _ in range(m)]
    full: list[list] = [[] for _ in range(m)]
    with open(path / "annotations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["example_id"])
            target = observed if row["role"] == "observed" else full
            target[i].append(_parse_annotation(kind, row["annotation"]))
    posterior = None
    if with_posterior and header.get("posterior"):
        posterior = _read_payload(path / "posterior.f64", header["posterior"])
    meta = dict(header.get("meta") or {})
    meta.update(generator=header.get("generator"), config=header.get("config"), seed=header.get("seed"))
    return SparseDataset(kind, feats, observed, int(header["n_outputs"]), np.array(header["split"]),
                         full=full if any(full) else None, posterior=posterior, meta=meta)


def load_features(path) -> SparseDataset:
    """Ingest precomputed features and annotations; any posterior is ignored."""
    return read_dataset(path, with_posterior=False)
