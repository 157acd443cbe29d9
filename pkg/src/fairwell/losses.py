"""VICReg regularizers and the subject-aware batch losses M1-M4.

Every term is built as graph nodes (so gradients reach the encoders); the
plain-array functions (``variance_reg`` etc.) wrap the same builders around
constants for direct evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adcore import Graph, Var
from .encoders import EmbeddingSet

METHODS = ("vicreg", "m1", "m2", "m3", "m4")
POOLING = ("none", "single", "double")
VC_SCOPES = ("subject", "batch")

CSV_FIELDS = [
    "epoch", "step", "method", "invariance", "variance_m1", "variance_m2",
    "covariance_m1", "covariance_m2", "total",
]


class ConstraintViolation(ValueError):
    """A batch breaks a method's precondition (e.g. mixed labels under M3)."""


@dataclass(frozen=True)
class LossWeights:
    lam: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("lam", "mu", "nu"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - {"lam", "mu", "nu", "gamma", "epsilon"}
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mu": self.mu, "nu": self.nu,
                "gamma": self.gamma, "epsilon": self.epsilon}


@dataclass
class LossBreakdown:
    invariance: float
    variance_m1: float
    variance_m2: float
    covariance_m1: float
    covariance_m2: float
    total: float
    method: str
    epoch: int = 1
    step: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def recompute_total(self) -> float:
        w = self.weights
        return (w.lam * self.invariance + w.mu * (self.variance_m1 + self.variance_m2)
                + w.nu * (self.covariance_m1 + self.covariance_m2))

    def csv_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k in CSV_FIELDS}
        row["method"] = self.method.upper()
        return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}


def write_loss_csv(path, rows: Iterable[LossBreakdown]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.csv_row())


def select_m4(epoch: int) -> str:
    """Odd epochs use M2, even epochs M3 (epochs count from 1)."""
    if epoch < 1:
        raise ValueError("epoch index starts at 1")
    return "m2" if epoch % 2 == 1 else "m3"


def resolve_method(method: str, epoch: int = 1) -> str:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return select_m4(epoch) if method == "m4" else method


# ----------------------------------------------------------------------------
# graph-level terms; z arguments are (n, d) nodes


def variance_term(z: Var, gamma: float, eps: float) -> Var:
    n, d = z.shape
    if n < 2:
        raise ValueError(f"variance needs at least 2 embeddings, got {n}")
    zc = z - z.mean(0).broadcast_to((n, d))
    var = zc.square().sum(0) * (1.0 / (n - 1))
    return (gamma - var.sqrt(eps)).clamp_min(0.0).mean()


def covariance_term(z: Var) -> Var:
    n, d = z.shape
    if n < 2:
        raise ValueError(f"covariance needs at least 2 embeddings, got {n}")
    zc = z - z.mean(0).broadcast_to((n, d))
    cov = (zc.T @ zc) * (1.0 / (n - 1))
    off = cov * (1.0 - np.eye(d))
    return off.square().sum() * (1.0 / d)


def weighted_sqdist(left: Var, right: Var, pairs: Sequence[tuple[int, int, float]]) -> Var:
    """sum_w w * ||left[i] - right[j]||^2 over the listed (i, j, w) triples."""
    if not pairs:
        raise ValueError("no pairs to compare")
    li = [p[0] for p in pairs]
    ri = [p[1] for p in pairs]
    w = np.array([[p[2]] for p in pairs])
    diff = left.take_rows(li) - right.take_rows(ri)
    return (diff.square().sum(1) * w).sum()


def invariance_term(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ValueError(f"invariance needs equally many pairs, got {a.shape} vs {b.shape}")
    n = a.shape[0]
    return weighted_sqdist(a, b, [(i, i, 1.0 / n) for i in range(n)])


def pooled_invariance_term(pooled: Var, segments: Var) -> Var:
    n = segments.shape[0]
    if n == 0:
        raise ValueError("pooled invariance needs at least one segment")
    return weighted_sqdist(pooled, segments, [(0, j, 1.0 / n) for j in range(n)])


# ----------------------------------------------------------------------------
# array-level wrappers


def _as_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a list of vectors, got shape {arr.shape}")
    return arr


def _eval(build, *arrays) -> float:
    g = Graph()
    nodes = [g.constant(a) for a in arrays]
    out = build(*nodes)
    g.set_output(out)
    return g.forward({}).item()


def variance_reg(embeddings, gamma: float = 1.0, epsilon: float = 1e-4) -> float:
    return _eval(lambda z: variance_term(z, gamma, epsilon), _as_rows(embeddings))


def covariance_reg(embeddings) -> float:
    return _eval(covariance_term, _as_rows(embeddings))


def invariance_reg(a, b) -> float:
    a, b = _as_rows(a), _as_rows(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"invariance needs equally many pairs, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return _eval(invariance_term, a, b)


def pooled_invariance(pooled, segments) -> float:
    p = np.asarray(pooled, dtype=np.float64).reshape(1, -1)
    s = np.asarray(segments, dtype=np.float64)
    s = s.reshape(-1, 1) if p.shape[1] == 1 else np.atleast_2d(s)
    if s.shape[0] == 0:
        raise ValueError("pooled invariance needs at least one segment")
    if s.shape[1] != p.shape[1]:
        raise ValueError(f"dimension mismatch {p.shape[1]} vs {s.shape[1]}")
    return _eval(pooled_invariance_term, p, s)


def vicreg_loss(f1, f2, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Plain VICReg on two aligned views; λ does not enter (unit invariance weight)."""
    a, b = _as_rows(f1), _as_rows(f2)
    inv = invariance_reg(a, b)
    v1 = variance_reg(a, w.gamma, w.epsilon)
    v2 = variance_reg(b, w.gamma, w.epsilon)
    c1, c2 = covariance_reg(a), covariance_reg(b)
    eff = LossWeights(1.0, w.mu, w.nu, w.gamma, w.epsilon)
    total = inv + w.mu * (v1 + v2) + w.nu * (c1 + c2)
    return LossBreakdown(inv, v1, v2, c1, c2, total, "vicreg", weights=eff)


# ----------------------------------------------------------------------------
# batch losses


@dataclass
class SubjectPair:
    """One subject's segment embeddings for the pooled (m1) and segment (m2) modality."""

    m1: EmbeddingSet | None
    m2: EmbeddingSet | None
    label: int | None = None

    @property
    def subject_id(self) -> str:
        for e in (self.m1, self.m2):
            if e is not None:
                return e.subject_id
        return "?"


@dataclass
class BatchItem:
    subject_id: str
    z1: Var
    z2: Var
    label: int | None = None


@dataclass
class LossTerms:
    invariance: Var
    variance_m1: Var
    variance_m2: Var
    covariance_m1: Var
    covariance_m2: Var
    total: Var
    method: str
    weights: LossWeights

    def breakdown(self, epoch: int = 1, step: int = 0) -> LossBreakdown:
        vals = [float(v.value) for v in (self.invariance, self.variance_m1, self.variance_m2,
                                          self.covariance_m1, self.covariance_m2, self.total)]
        return LossBreakdown(*vals, method=self.method, epoch=epoch, step=step, weights=self.weights)


def pair_weights(method: str, b: int, exclude_diagonal: bool = False) -> np.ndarray:
    """Weight of subject pair (i, k) in the batch average."""
    if method in ("m1", "vicreg"):
        return np.eye(b) / b
    if exclude_diagonal and b > 1:
        return (1.0 - np.eye(b)) / (b * (b - 1))
    return np.full((b, b), 1.0 / (b * b))


def _check_labels(items: Sequence[BatchItem]):
    labels = {it.label for it in items}
    if None in labels:
        raise ConstraintViolation("M3 needs a label for every subject in the batch")
    if len(labels) > 1:
        raise ConstraintViolation(
            f"M3 requires a single-label batch, got labels {sorted(labels)}"
        )


def build_batch_loss(
    items: Sequence[BatchItem],
    weights: LossWeights,
    method: str,
    epoch: int = 1,
    pooling: str = "single",
    vc_scope: str = "subject",
    exclude_diagonal: bool = False,
) -> LossTerms:
    """Assemble the batch loss for ``method`` on the graph owning the items' nodes.

    Invariance, per pooling mode, for a subject pair (i, k):
      single -- mean squared distance from i's pooled m1 vector to each of k's m2 segments
      double -- squared distance between i's pooled m1 and k's pooled m2 vectors
      none   -- mean squared distance between positionally aligned segments,
                truncated to the shorter of the two sequences
    """
    if not items:
        raise ValueError("empty batch")
    if pooling not in POOLING:
        raise ValueError(f"unknown pooling {pooling!r}")
    if vc_scope not in VC_SCOPES:
        raise ValueError(f"unknown vc_scope {vc_scope!r}")
    resolved = resolve_method(method, epoch)
    if resolved == "m3":
        _check_labels(items)
    for it in items:
        if it.z1 is None or it.z2 is None:
            raise ValueError(f"subject {it.subject_id!r} is missing a modality")
    g = items[0].z1.graph
    b = len(items)
    d = items[0].z1.shape[1]
    for it in items:
        if it.z1.shape[1] != d or it.z2.shape[1] != d:
            raise ValueError(f"subject {it.subject_id!r}: embedding widths differ from {d}")
    W = pair_weights(resolved, b, exclude_diagonal)

    n1 = [it.z1.shape[0] for it in items]
    n2 = [it.z2.shape[0] for it in items]
    off1 = np.concatenate([[0], np.cumsum(n1)])
    off2 = np.concatenate([[0], np.cumsum(n2)])
    z1_all = g.concat_rows([it.z1 for it in items]) if b > 1 else items[0].z1
    z2_all = g.concat_rows([it.z2 for it in items]) if b > 1 else items[0].z2

    pairs: list[tuple[int, int, float]] = []
    if pooling == "none":
        if resolved == "vicreg":
            total_aligned = sum(min(n1[i], n2[i]) for i in range(b))
            W = np.diag([min(n1[i], n2[i]) / total_aligned for i in range(b)])
        left, right = z1_all, z2_all
        for i in range(b):
            for k in range(b):
                if W[i, k] == 0:
                    continue
                n = min(n1[i], n2[k])
                pairs += [(off1[i] + j, off2[k] + j, W[i, k] / n) for j in range(n)]
    else:
        pooled1 = [it.z1.mean(0) for it in items]
        left = g.concat_rows(pooled1) if b > 1 else pooled1[0]
        if pooling == "double":
            pooled2 = [it.z2.mean(0) for it in items]
            right = g.concat_rows(pooled2) if b > 1 else pooled2[0]
            pairs = [(i, k, W[i, k]) for i in range(b) for k in range(b) if W[i, k] != 0]
        else:
            right = z2_all
            for i in range(b):
                for k in range(b):
                    if W[i, k] != 0:
                        pairs += [(i, off2[k] + j, W[i, k] / n2[k]) for j in range(n2[k])]
    inv = weighted_sqdist(left, right, pairs)

    gam, eps = weights.gamma, weights.epsilon
    if resolved == "vicreg" or vc_scope == "batch":
        v1, v2 = variance_term(z1_all, gam, eps), variance_term(z2_all, gam, eps)
        c1, c2 = covariance_term(z1_all), covariance_term(z2_all)
    else:
        for it in items:
            if min(it.z1.shape[0], it.z2.shape[0]) < 2:
                raise ValueError(
                    f"subject {it.subject_id!r}: per-subject variance/covariance needs "
                    f">= 2 segments per modality"
                )
        # sum_{i,k} W_ik [V(z1_i) + V(z2_k)] splits into row and column marginals
        r, c = W.sum(axis=1), W.sum(axis=0)
        v1 = _weighted_sum([variance_term(it.z1, gam, eps) * float(r[i]) for i, it in enumerate(items)])
        v2 = _weighted_sum([variance_term(it.z2, gam, eps) * float(c[i]) for i, it in enumerate(items)])
        c1 = _weighted_sum([covariance_term(it.z1) * float(r[i]) for i, it in enumerate(items)])
        c2 = _weighted_sum([covariance_term(it.z2) * float(c[i]) for i, it in enumerate(items)])

    lam = 1.0 if resolved == "vicreg" else weights.lam
    eff = LossWeights(lam, weights.mu, weights.nu, weights.gamma, weights.epsilon)
    total = inv * lam + (v1 + v2) * weights.mu + (c1 + c2) * weights.nu
    return LossTerms(inv, v1, v2, c1, c2, total, resolved, eff)


def _weighted_sum(terms: list[Var]) -> Var:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _batch_from_pairs(batch: Sequence) -> tuple[Graph, list[BatchItem]]:
    g = Graph()
    items = []
    for p in batch:
        if not isinstance(p, SubjectPair):
            p = SubjectPair(*p)
        if p.m1 is None or p.m2 is None:
            raise ValueError(f"subject {p.subject_id!r} is missing a modality")
        items.append(BatchItem(p.subject_id, g.constant(p.m1.segments), g.constant(p.m2.segments), p.label))
    if not items:
        raise ValueError("empty batch")
    return g, items


def batch_loss(batch: Sequence, w: LossWeights = LossWeights(), method: str = "m1", epoch: int = 1,
               **options) -> LossBreakdown:
    """Evaluate a batch loss on fixed embeddings.

    ``batch`` holds :class:`SubjectPair` objects (or ``(m1, m2[, label])``
    tuples); ``options`` are passed to :func:`build_batch_loss`.
    """
    g, items = _batch_from_pairs(batch)
    terms = build_batch_loss(items, w, method, epoch, **options)
    g.set_output(terms.total)
    g.forward({})
    return terms.breakdown(epoch=epoch)


def batch_loss_m1(batch, w: LossWeights = LossWeights(), **options) -> LossBreakdown:
    return batch_loss(batch, w, "m1", **options)


def batch_loss_m2(batch, w: LossWeights = LossWeights(), **options) -> LossBreakdown:
    return batch_loss(batch, w, "m2", **options)


def batch_loss_m3(batch, w: LossWeights = LossWeights(), **options) -> LossBreakdown:
    return batch_loss(batch, w, "m3", **options)


def batch_loss_m4(batch, w: LossWeights = LossWeights(), epoch: int = 1, **options) -> LossBreakdown:
    return batch_loss(batch, w, "m4", epoch=epoch, **options)
