"""Group fairness ratios, aggregated fairness, Acc/F1 and performance-fairness Pareto fronts.

Every fairness measure is a directed ratio ``numerator group / denominator
group`` of a per-group rate, so 1 means parity and values on either side of
1 are possible (nothing is clipped).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

__all__ = [
    "Prediction",
    "PredictionSet",
    "GroupRates",
    "FairnessRatios",
    "FairnessReport",
    "MetricPreconditionError",
    "group_rates",
    "fairness_ratios",
    "agg_fairness",
    "performance",
    "fairness_report",
    "pareto_front",
    "pareto_mask",
    "read_predictions_csv",
    "write_predictions_csv",
    "write_fairness_csv",
    "read_fairness_csv",
    "write_pareto_csv",
    "pareto_svg",
]


class MetricPreconditionError(ValueError):
    """Predictions cannot support the requested metric (e.g. a group is absent)."""


@dataclass(frozen=True)
class Prediction:
    subject_id: str
    group: str
    label: int
    pred: int
    score: float = float("nan")


@dataclass
class PredictionSet:
    rows: list[Prediction]

    def __post_init__(self):
        for r in self.rows:
            if r.label not in (0, 1) or r.pred not in (0, 1):
                raise ValueError(f"subject {r.subject_id!r}: label and prediction must be 0/1")

    @classmethod
    def from_triples(cls, triples: Iterable[tuple], ids: Sequence[str] | None = None) -> "PredictionSet":
        """Build from ``(pred, label, group)`` triples."""
        rows = []
        for i, (pred, label, group) in enumerate(triples):
            sid = ids[i] if ids is not None else f"r{i}"
            rows.append(Prediction(sid, str(group), int(label), int(pred)))
        return cls(rows)

    @property
    def groups(self) -> list[str]:
        return sorted({r.group for r in self.rows})

    def __len__(self):
        return len(self.rows)


@dataclass
class GroupRates:
    group: str
    n: int
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    @property
    def base_rate(self) -> float | None:
        return (self.tp + self.fp) / self.n if self.n else None

    @property
    def tpr(self) -> float | None:
        """None when the group has no positives."""
        return self.tp / self.positives if self.positives else None

    @property
    def fpr(self) -> float | None:
        return self.fp / self.negatives if self.negatives else None

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.n if self.n else None

    @property
    def undefined(self) -> list[str]:
        return [k for k in ("base_rate", "tpr", "fpr", "accuracy") if getattr(self, k) is None]


def group_rates(preds: PredictionSet, groups: Sequence[str] | None = None) -> dict[str, GroupRates]:
    present = preds.groups
    groups = list(groups) if groups is not None else present
    missing = [g for g in groups if g not in present]
    if missing:
        raise MetricPreconditionError(f"no predictions for group(s) {missing}")
    if len(groups) < 2:
        raise MetricPreconditionError(f"need two groups, found {groups}")
    out = {}
    for g in groups:
        tp = fp = tn = fn = 0
        for r in preds.rows:
            if r.group != g:
                continue
            if r.pred == 1:
                tp += r.label == 1
                fp += r.label == 0
            else:
                tn += r.label == 0
                fn += r.label == 1
        out[g] = GroupRates(g, tp + fp + tn + fn, tp, fp, tn, fn)
    return out


@dataclass
class FairnessRatios:
    sp: float
    eopp: float
    eodd: float
    eacc: float
    numerator_group: str
    denominator_group: str
    flags: list[str] = field(default_factory=list)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sp, self.eopp, self.eodd, self.eacc)


def _ratio(num: float | None, den: float | None, name: str, flags: list[str]) -> float:
    # 0/0 means both groups behave identically; x/0 and undefined rates get a flagged 0
    if num is None or den is None:
        flags.append(f"{name}:undefined_rate")
        return 0.0
    if den == 0:
        if num == 0:
            return 1.0
        flags.append(f"{name}:zero_denominator")
        return 0.0
    return num / den


def fairness_ratios(
    rates: Mapping[str, GroupRates],
    numerator_group: str | None = None,
    denominator_group: str | None = None,
) -> FairnessRatios:
    """SP, EOpp, EOdd and EAcc as numerator/denominator group ratios.

    EOdd averages the TPR and FPR ratios.
    """
    groups = sorted(rates)
    if numerator_group is None:
        numerator_group = min(groups, key=lambda g: (rates[g].n, g))
    if numerator_group not in rates:
        raise MetricPreconditionError(f"numerator group {numerator_group!r} has no predictions")
    if denominator_group is None:
        others = [g for g in groups if g != numerator_group]
        if len(others) != 1:
            raise MetricPreconditionError(f"ratio metrics need exactly two groups, got {groups}")
        denominator_group = others[0]
    a, b = rates[numerator_group], rates[denominator_group]
    flags: list[str] = []
    sp = _ratio(a.base_rate, b.base_rate, "sp", flags)
    eopp = _ratio(a.tpr, b.tpr, "eopp", flags)
    eodd = 0.5 * (eopp + _ratio(a.fpr, b.fpr, "eodd_fpr", flags))
    eacc = _ratio(a.accuracy, b.accuracy, "eacc", flags)
    return FairnessRatios(sp, eopp, eodd, eacc, numerator_group, denominator_group, flags)


def agg_fairness(*values: float) -> float:
    """|1 - mean_i |F_i - 1||; 1 only when every measure is exactly 1."""
    if not values:
        raise ValueError("agg_fairness needs at least one measure")
    if not all(math.isfinite(v) for v in values):
        raise ValueError("fairness measures must be finite")
    return abs(1.0 - sum(abs(v - 1.0) for v in values) / len(values))


def performance(preds: PredictionSet) -> tuple[float, float]:
    """(accuracy, F1 of the positive class); F1 is 0 when it has no true positives."""
    if not len(preds):
        raise ValueError("no predictions")
    tp = sum(1 for r in preds.rows if r.pred == 1 and r.label == 1)
    fp = sum(1 for r in preds.rows if r.pred == 1 and r.label == 0)
    fn = sum(1 for r in preds.rows if r.pred == 0 and r.label == 1)
    acc = sum(1 for r in preds.rows if r.pred == r.label) / len(preds)
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


@dataclass
class FairnessReport:
    sp: float
    eopp: float
    eodd: float
    eacc: float
    agg_f: float
    acc: float
    f1: float
    numerator_group: str
    denominator_group: str = ""
    flags: list[str] = field(default_factory=list)
    run_id: str = ""


def fairness_report(preds: PredictionSet, numerator_group: str | None = None, run_id: str = "") -> FairnessReport:
    rates = group_rates(preds)
    ratios = fairness_ratios(rates, numerator_group)
    acc, f1 = performance(preds)
    return FairnessReport(
        ratios.sp, ratios.eopp, ratios.eodd, ratios.eacc, agg_fairness(*ratios.as_tuple()),
        acc, f1, ratios.numerator_group, ratios.denominator_group, ratios.flags, run_id,
    )


# ----------------------------------------------------------------------------
# Pareto front: maximise both coordinates


def pareto_mask(points: Sequence[tuple[float, float]]) -> list[bool]:
    """True for every point not dominated (>= in both, > in one) by another point."""
    pts = [(float(a), float(b)) for a, b in points]
    if not all(math.isfinite(a) and math.isfinite(b) for a, b in pts):
        raise ValueError("pareto_front needs finite values")
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], -pts[i][1]))
    keep = [False] * len(pts)
    best_y = -math.inf
    i = 0
    while i < len(order):
        # points sharing an x value are handled together
        j = i
        x = pts[order[i]][0]
        while j < len(order) and pts[order[j]][0] == x:
            j += 1
        top_y = pts[order[i]][1]
        if top_y > best_y:
            for k in order[i:j]:
                keep[k] = pts[k][1] == top_y
            best_y = top_y
        i = j
    return keep


def pareto_front(runs: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    mask = pareto_mask(runs)
    return [r for r, m in zip(runs, mask) if m]


# ----------------------------------------------------------------------------
# file formats

PREDICTION_FIELDS = ["subject_id", "group", "label", "score", "pred"]
FAIRNESS_FIELDS = ["run_id", "acc", "f1", "sp", "eopp", "eodd", "eacc", "agg_f", "flags"]
PARETO_FIELDS = ["run_id", "f1", "agg_f", "on_front"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_predictions_csv(preds: PredictionSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for r in preds.rows:
            w.writerow([r.subject_id, r.group, r.label, _fmt(r.score), r.pred])


def read_predictions_csv(path: str | Path) -> PredictionSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return PredictionSet([
            Prediction(row["subject_id"], row["group"], int(row["label"]), int(row["pred"]), float(row["score"]))
            for row in reader
        ])


def write_fairness_csv(reports: Sequence[FairnessReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FAIRNESS_FIELDS)
        for r in reports:
            w.writerow([r.run_id, _fmt(r.acc), _fmt(r.f1), _fmt(r.sp), _fmt(r.eopp), _fmt(r.eodd),
                        _fmt(r.eacc), _fmt(r.agg_f), ";".join(r.flags)])


def read_fairness_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in FAIRNESS_FIELDS[1:-1]:
            row[k] = float(row[k])
    return rows


def write_pareto_csv(rows: Sequence[tuple[str, float, float]], mask: Sequence[bool], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARETO_FIELDS)
        for (run_id, f1, agg), on in zip(rows, mask):
            w.writerow([run_id, _fmt(f1), _fmt(agg), int(on)])


def pareto_svg(rows: Sequence[tuple[str, float, float]], mask: Sequence[bool],
               width: int = 480, height: int = 360) -> str:
    """Static AGG_F-vs-F1 scatter; front members drawn as red triangles joined by a dashed line."""
    pad = 48
    xs = [r[1] for r in rows] or [0.0]
    ys = [r[2] for r in rows] or [0.0]
    x0, x1 = min(0.0, min(xs)), max(1.0, max(xs))
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">F1</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {height / 2:.1f})">AGG_F</text>',
    ]
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{px(xv):.1f}" y="{height - pad + 14}" text-anchor="middle">{xv:.2f}</text>')
        out.append(f'<text x="{pad - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
    front = sorted((r for r, m in zip(rows, mask) if m), key=lambda r: r[1])
    if len(front) > 1:
        pts = " ".join(f"{px(r[1]):.2f},{py(r[2]):.2f}" for r in front)
        out.append(f'<polyline points="{pts}" fill="none" stroke="red" stroke-dasharray="4 3"/>')
    for (run_id, f1, agg), on in zip(rows, mask):
        cx, cy = px(f1), py(agg)
        if on:
            out.append(
                f'<polygon points="{cx:.2f},{cy - 6:.2f} {cx - 5:.2f},{cy + 4:.2f} {cx + 5:.2f},{cy + 4:.2f}" '
                f'fill="red"><title>{escape(run_id)}</title></polygon>'
            )
        else:
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="steelblue">'
                       f'<title>{escape(run_id)}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
