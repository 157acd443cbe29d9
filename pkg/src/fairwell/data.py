"""Subject records: synthetic generation, JSONL I/O, leakage-free splits, batching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "SubjectRecord",
    "ModalitySpec",
    "SynthConfig",
    "SplitPlan",
    "generate",
    "load_jsonl",
    "save_jsonl",
    "split_subjects",
    "sample_batches",
    "require_modalities",
    "minority_group",
]


class DataError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    group: str
    label: int
    modalities: dict[str, np.ndarray]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"subject {self.subject_id!r}: label must be 0 or 1, got {self.label!r}")
        mods = {}
        for name, segs in self.modalities.items():
            arr = np.asarray(segs, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise DataError(f"subject {self.subject_id!r}: modality {name!r} needs >= 1 segment")
            mods[name] = arr
        self.modalities = mods

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "group": self.group,
            "label": int(self.label),
            "modalities": {k: v.tolist() for k, v in self.modalities.items()},
        }

    def __eq__(self, other):
        if not isinstance(other, SubjectRecord):
            return NotImplemented
        return (
            (self.subject_id, self.group, self.label) == (other.subject_id, other.group, other.label)
            and self.modalities.keys() == other.modalities.keys()
            and all(np.array_equal(v, other.modalities[k]) for k, v in self.modalities.items())
        )


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass
class ModalitySpec:
    feature_dim: int
    segment_count_range: tuple[int, int] = (3, 8)
    signal_strength: float = 1.0
    group_leak_strength: float = 0.0
    noise_std: float = 0.5

    def __post_init__(self):
        lo, hi = (int(x) for x in self.segment_count_range)
        self.segment_count_range = (lo, hi)
        if self.feature_dim < 1:
            raise DataError("feature_dim must be positive")
        if not 1 <= lo <= hi:
            raise DataError(f"segment_count_range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.noise_std < 0 or self.group_leak_strength < 0:
            raise DataError("noise_std and group_leak_strength must be non-negative")


@dataclass
class SynthConfig:
    """Generative story per subject i, modality m, segment s:

        u_i ~ N(0, I_k)
        x = A_m u_i + signal_m * b_m * [y_i = 1] + leak_m * c_m * [g_i = minority] + noise_m * e_s

    ``A_m``, ``b_m`` and ``c_m`` are drawn once per dataset from the seed;
    ``b_m`` and ``c_m`` are orthonormal so the group shift never carries label signal.
    """

    n_subjects: int = 240
    group_proportions: dict[str, float] = field(default_factory=lambda: {"M": 0.34, "F": 0.66})
    label_rate_per_group: dict[str, float] = field(default_factory=lambda: {"M": 0.5, "F": 0.56})
    modalities: dict[str, ModalitySpec] = field(default_factory=lambda: {
        "audio": ModalitySpec(12, (4, 10), 1.0, 1.0, 0.5),
        "visual": ModalitySpec(16, (2, 6), 1.0, 1.0, 0.5),
    })
    latent_dim: int = 4
    minority: str | None = None
    seed: int = 0

    def __post_init__(self):
        mods = {}
        for name, spec in self.modalities.items():
            mods[name] = spec if isinstance(spec, ModalitySpec) else ModalitySpec(**spec)
        self.modalities = mods
        self.validate()

    def validate(self):
        if self.n_subjects < 1:
            raise DataError("n_subjects must be positive")
        props = self.group_proportions
        if not props or any(p < 0 for p in props.values()):
            raise DataError("group proportions must be non-negative")
        if abs(sum(props.values()) - 1.0) > 1e-9:
            raise DataError(f"group proportions must sum to 1, got {sum(props.values())}")
        if sum(p > 0 for p in props.values()) < 2:
            raise DataError("need at least two groups with positive proportion")
        if set(self.label_rate_per_group) != set(props):
            raise DataError("label_rate_per_group must name exactly the configured groups")
        if any(not 0 <= r <= 1 for r in self.label_rate_per_group.values()):
            raise DataError("label rates must lie in [0, 1]")
        if not self.modalities:
            raise DataError("at least one modality is required")
        if self.minority is not None and self.minority not in props:
            raise DataError(f"minority group {self.minority!r} is not a configured group")
        if not 0 <= int(self.seed) < 2**64:
            raise DataError("seed must be a 64-bit unsigned integer")

    @property
    def minority_group(self) -> str:
        if self.minority is not None:
            return self.minority
        return min(sorted(self.group_proportions), key=lambda g: self.group_proportions[g])

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        if "modalities" in d:
            d["modalities"] = {k: ModalitySpec(**v) for k, v in d["modalities"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "group_proportions": dict(self.group_proportions),
            "label_rate_per_group": dict(self.label_rate_per_group),
            "modalities": {
                k: {
                    "feature_dim": m.feature_dim,
                    "segment_count_range": list(m.segment_count_range),
                    "signal_strength": m.signal_strength,
                    "group_leak_strength": m.group_leak_strength,
                    "noise_std": m.noise_std,
                }
                for k, m in self.modalities.items()
            },
            "latent_dim": self.latent_dim,
            "minority": self.minority,
            "seed": int(self.seed),
        }


def _orthonormal_pair(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if dim == 1:
        return np.ones(1), np.ones(1)
    q, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    return q[:, 0], q[:, 1]


def generate(config: SynthConfig) -> list[SubjectRecord]:
    config.validate()
    rng = np.random.default_rng(int(config.seed))
    groups = sorted(config.group_proportions)
    probs = np.array([config.group_proportions[g] for g in groups])
    minority = config.minority_group
    names = sorted(config.modalities)

    mixing = {}
    for name in names:
        spec = config.modalities[name]
        a = rng.normal(size=(spec.feature_dim, config.latent_dim)) / math.sqrt(config.latent_dim)
        b, c = _orthonormal_pair(rng, spec.feature_dim)
        mixing[name] = (a, b, c)

    width = len(str(config.n_subjects - 1))
    records = []
    for i in range(config.n_subjects):
        g = groups[rng.choice(len(groups), p=probs)]
        y = int(rng.random() < config.label_rate_per_group[g])
        u = rng.normal(size=config.latent_dim)
        mods = {}
        for name in names:
            spec = config.modalities[name]
            a, b, c = mixing[name]
            lo, hi = spec.segment_count_range
            n = int(rng.integers(lo, hi + 1))
            centre = a @ u + spec.signal_strength * y * b
            if g == minority:
                centre = centre + spec.group_leak_strength * c
            mods[name] = centre + spec.noise_std * rng.normal(size=(n, spec.feature_dim))
        records.append(SubjectRecord(f"s{i:0{width}d}", g, y, mods))
    return records


def minority_group(records: Sequence[SubjectRecord]) -> str:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.group] = counts.get(r.group, 0) + 1
    return min(sorted(counts), key=lambda g: counts[g])


# ----------------------------------------------------------------------------
# JSONL


def save_jsonl(records: Sequence[SubjectRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def _parse_record(obj, lineno: int) -> SubjectRecord:
    where = f"line {lineno}"
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("subject_id", "group", "label", "modalities"):
        if key not in obj:
            raise DataError(f"{where}: missing required field {key!r}")
    extra = set(obj) - {"subject_id", "group", "label", "modalities"}
    if extra:
        raise DataError(f"{where}: unexpected fields {sorted(extra)}")
    sid, group, label, mods = obj["subject_id"], obj["group"], obj["label"], obj["modalities"]
    if not isinstance(sid, str) or not sid:
        raise DataError(f"{where}: subject_id must be a non-empty string")
    if not isinstance(group, str):
        raise DataError(f"{where}: group must be a string")
    if isinstance(label, bool) or label not in (0, 1):
        raise DataError(f"{where}: label must be 0 or 1")
    if not isinstance(mods, dict) or not mods:
        raise DataError(f"{where}: modalities must be a non-empty object")
    parsed = {}
    for name, segs in mods.items():
        if not isinstance(segs, list) or not segs:
            raise DataError(f"{where}: modality {name!r} of subject {sid!r} needs >= 1 segment")
        lengths = set()
        for seg in segs:
            if not isinstance(seg, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in seg
            ):
                raise DataError(f"{where}: modality {name!r} segments must be lists of numbers")
            lengths.add(len(seg))
        if len(lengths) != 1 or 0 in lengths:
            raise DataError(
                f"{where}: modality {name!r} of subject {sid!r} has inconsistent segment lengths {sorted(lengths)}"
            )
        arr = np.array(segs, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{where}: modality {name!r} of subject {sid!r} has non-finite values")
        parsed[name] = arr
    return SubjectRecord(sid, group, int(label), parsed)


def load_jsonl(path: str | Path) -> list[SubjectRecord]:
    records = []
    dims: dict[str, tuple[int, str]] = {}
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            rec = _parse_record(obj, lineno)
            if rec.subject_id in seen:
                raise DataError(f"line {lineno}: duplicate subject_id {rec.subject_id!r}")
            seen.add(rec.subject_id)
            for name, arr in rec.modalities.items():
                dim = arr.shape[1]
                if name in dims and dims[name][0] != dim:
                    first_dim, first_sid = dims[name]
                    raise DataError(
                        f"line {lineno}: modality {name!r} of subject {rec.subject_id!r} has segment "
                        f"length {dim}, but subject {first_sid!r} uses {first_dim}"
                    )
                dims.setdefault(name, (dim, rec.subject_id))
            records.append(rec)
    return records


def require_modalities(records: Sequence[SubjectRecord], names: Sequence[str]) -> None:
    for r in records:
        for name in names:
            if name not in r.modalities:
                raise DataError(f"subject {r.subject_id!r} is missing modality {name!r}")


# ----------------------------------------------------------------------------
# splits

SPLITS = ("train", "val", "test")


@dataclass
class SplitPlan:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int
    fractions: tuple[float, float, float]
    report: dict[str, dict[str, int]] = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        return getattr(self, split)

    def select(self, records: Sequence[SubjectRecord], split: str) -> list[SubjectRecord]:
        wanted = set(self.ids(split))
        return [r for r in records if r.subject_id in wanted]

    def to_json(self) -> dict:
        return {"seed": int(self.seed), "fractions": list(self.fractions),
                "train": self.train, "val": self.val, "test": self.test, "report": self.report}

    @classmethod
    def from_json(cls, d: Mapping) -> "SplitPlan":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]),
                   tuple(d["fractions"]), dict(d.get("report", {})))


def _hash_key(seed: int, subject_id: str) -> str:
    return hashlib.sha256(f"{seed}:{subject_id}".encode()).hexdigest()


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    exact = [total * f for f in fractions]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(exact)), key=lambda s: (-(exact[s] - counts[s]), s))
    for s in order[: total - sum(counts)]:
        counts[s] += 1
    return counts


def split_subjects(
    records: Sequence[SubjectRecord],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    allow_empty_cells: bool = False,
) -> SplitPlan:
    """Subject-level train/val/test split stratified on (group, label).

    Split sizes follow largest-remainder rounding of the fractions; every
    (group, label) cell gets the floor or ceiling of its proportional share
    in each split. Within a cell, subjects are ordered by a seeded hash of
    their id, so the plan depends only on (ids, cells, fractions, seed).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError("fractions must be three non-negative numbers (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = [r.subject_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate subject ids")
    cells: dict[tuple[str, int], list[str]] = {}
    for r in records:
        cells.setdefault((r.group, r.label), []).append(r.subject_id)
    groups = sorted({r.group for r in records})
    empty = [(g, y) for g in groups for y in (0, 1) if (g, y) not in cells]
    if empty and not allow_empty_cells:
        raise DataError(f"empty (group, label) cells {empty}; pass allow_empty_cells to waive")

    keys = sorted(cells)
    targets = _largest_remainder(len(records), fractions)
    exact = {c: [len(cells[c]) * f for f in fractions] for c in keys}
    alloc = {c: [math.floor(x) for x in exact[c]] for c in keys}
    # distribute each cell's leftover units, at most one extra per (cell, split);
    # largest remaining split demand first (Ryser's construction)
    need = [targets[s] - sum(alloc[c][s] for c in keys) for s in range(3)]
    for c in sorted(keys, key=lambda c: (-(len(cells[c]) - sum(alloc[c])), c)):
        left = len(cells[c]) - sum(alloc[c])
        order = sorted(range(3), key=lambda s: (-need[s], -(exact[c][s] - alloc[c][s]), s))
        for s in order[:left]:
            alloc[c][s] += 1
            need[s] -= 1
    if any(need):
        raise DataError("could not balance stratified split sizes")  # unreachable for valid input

    plan: dict[str, list[str]] = {s: [] for s in SPLITS}
    report: dict[str, dict[str, int]] = {}
    for c in keys:
        members = sorted(cells[c], key=lambda sid: _hash_key(seed, sid))
        start = 0
        cell_counts = {}
        for s, name in enumerate(SPLITS):
            chunk = members[start : start + alloc[c][s]]
            plan[name].extend(chunk)
            cell_counts[name] = len(chunk)
            start += alloc[c][s]
        report[f"{c[0]}|{c[1]}"] = cell_counts
    for name in SPLITS:
        plan[name].sort()
    return SplitPlan(plan["train"], plan["val"], plan["test"], int(seed), fractions, report)


# ----------------------------------------------------------------------------
# batching


def sample_batches(
    records: Sequence[SubjectRecord],
    batch_size: int,
    mode: str = "unconstrained",
    seed: int = 0,
    epoch: int = 1,
) -> Iterator[list[SubjectRecord]]:
    """Yield one epoch of batches; every subject appears exactly once.

    ``same_label`` batches are single-label and alternate between classes
    while both still have batches left.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in ("unconstrained", "same_label"):
        raise ValueError(f"unknown batch mode {mode!r}")
    rng = np.random.default_rng([int(seed), int(epoch)])
    records = list(records)
    if mode == "unconstrained":
        order = rng.permutation(len(records))
        for start in range(0, len(order), batch_size):
            yield [records[i] for i in order[start : start + batch_size]]
        return
    by_label = {0: [], 1: []}
    for r in records:
        by_label[r.label].append(r)
    if not by_label[0] or not by_label[1]:
        empty = [y for y in (0, 1) if not by_label[y]]
        raise DataError(f"same_label batching needs both classes; class {empty[0]} is empty")
    queues = {}
    for y in (0, 1):
        perm = rng.permutation(len(by_label[y]))
        members = [by_label[y][i] for i in perm]
        queues[y] = [members[s : s + batch_size] for s in range(0, len(members), batch_size)]
    turn = int(rng.integers(2))
    while queues[0] or queues[1]:
        if not queues[turn]:
            turn = 1 - turn
        yield queues[turn].pop(0)
        turn = 1 - turn
