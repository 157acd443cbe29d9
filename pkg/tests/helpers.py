"""Shared test fixtures: a loop-based loss oracle and small random models."""

from __future__ import annotations

import math

import numpy as np

from fairwell.adcore import Graph
from fairwell.encoders import EmbeddingSet, SegmentEncoder
from fairwell.losses import BatchItem, LossWeights, SubjectPair, build_batch_loss


# ----------------------------------------------------------------------------
# scalar oracle: plain Python loops over subjects, pairs, dimensions


def _col(rows, j):
    return [r[j] for r in rows]


def _mean(xs):
    return sum(xs) / len(xs)


def o_variance(rows, gamma, eps):
    d = len(rows[0])
    n = len(rows)
    total = 0.0
    for j in range(d):
        c = _col(rows, j)
        m = _mean(c)
        var = sum((v - m) ** 2 for v in c) / (n - 1)
        total += max(0.0, gamma - math.sqrt(var + eps))
    return total / d


def o_covariance(rows):
    d = len(rows[0])
    n = len(rows)
    means = [_mean(_col(rows, j)) for j in range(d)]
    total = 0.0
    for j in range(d):
        for k in range(d):
            if j == k:
                continue
            cov = sum((r[j] - means[j]) * (r[k] - means[k]) for r in rows) / (n - 1)
            total += cov * cov
    return total / d


def o_sqdist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def o_pool(rows):
    return [_mean(_col(rows, j)) for j in range(len(rows[0]))]


def o_pair_invariance(z1, z2, pooling):
    if pooling == "double":
        return o_sqdist(o_pool(z1), o_pool(z2))
    if pooling == "single":
        p = o_pool(z1)
        return sum(o_sqdist(p, s) for s in z2) / len(z2)
    n = min(len(z1), len(z2))
    return sum(o_sqdist(z1[j], z2[j]) for j in range(n)) / n


def oracle_batch_loss(batch, w: LossWeights, method: str, pooling: str = "single") -> float:
    """Average of the per-pair summand over the subject pairs the method visits."""
    subjects = [(np.asarray(p.m1.segments).tolist(), np.asarray(p.m2.segments).tolist()) for p in batch]
    b = len(subjects)
    if method == "m1":
        pairs = [(i, i) for i in range(b)]
    else:
        pairs = [(i, k) for i in range(b) for k in range(b)]
    total = 0.0
    for i, k in pairs:
        z1, z2 = subjects[i][0], subjects[k][1]
        term = w.lam * o_pair_invariance(z1, z2, pooling)
        term += w.mu * (o_variance(z1, w.gamma, w.epsilon) + o_variance(z2, w.gamma, w.epsilon))
        term += w.nu * (o_covariance(z1) + o_covariance(z2))
        total += term
    return total / len(pairs)


def random_batch(rng, b, d, label=None, n_range=(2, 6)) -> list[SubjectPair]:
    out = []
    for i in range(b):
        n1, n2 = rng.integers(*n_range, size=2)
        y = int(rng.integers(2)) if label is None else label
        out.append(SubjectPair(
            EmbeddingSet(f"s{i}", "a", rng.normal(size=(n1, d))),
            EmbeddingSet(f"s{i}", "v", rng.normal(size=(n2, d))),
            y,
        ))
    return out


# ----------------------------------------------------------------------------
# gradient-check graphs over tiny encoders


def tiny_loss_graph(rng, method, pooling, epoch=1, max_d=8, max_subjects=4, max_segments=5):
    """Random two-encoder model and batch; returns (graph, parameter values)."""
    d = int(rng.integers(2, max_d + 1))
    b = int(rng.integers(1, max_subjects + 1))
    in1, in2 = (int(x) for x in rng.integers(2, 5, size=2))
    hidden = [int(rng.integers(2, 5))]
    enc1 = SegmentEncoder.init("a", in1, hidden, d, rng)
    enc2 = SegmentEncoder.init("v", in2, hidden, d, rng)
    for enc in (enc1, enc2):
        enc.biases = [rng.normal(scale=0.1, size=bb.shape) for bb in enc.biases]
    label = int(rng.integers(2))
    g = Graph()
    n1 = rng.integers(2, max_segments + 1, size=b)
    n2 = rng.integers(2, max_segments + 1, size=b)
    nodes1, nodes2 = enc1.declare(g), enc2.declare(g)
    items = []
    for i in range(b):
        z1 = enc1.apply(g, nodes1, g.constant(rng.normal(size=(n1[i], in1))))
        z2 = enc2.apply(g, nodes2, g.constant(rng.normal(size=(n2[i], in2))))
        items.append(BatchItem(f"s{i}", z1, z2, label))
    w = LossWeights(lam=float(rng.uniform(0.5, 25)), mu=float(rng.uniform(0.5, 25)), nu=float(rng.uniform(0.1, 2)))
    terms = build_batch_loss(items, w, method, epoch, pooling)
    g.set_output(terms.total)
    return g, {**enc1.bind(), **enc2.bind()}
