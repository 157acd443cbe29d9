import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from fairwell.data import (
    DataError, ModalitySpec, SubjectRecord, SynthConfig, generate, load_jsonl, minority_group,
    sample_batches, save_jsonl, split_subjects,
)
from fairwell.training import fit_logistic


def small_config(**kw):
    base = dict(
        n_subjects=200,
        modalities={"a": ModalitySpec(4, (2, 4), 1.0, 1.0, 0.5), "v": ModalitySpec(3, (1, 3), 1.0, 1.0, 0.5)},
        seed=3,
    )
    base.update(kw)
    return SynthConfig(**base)


def group_probe_accuracy(records, modality="a"):
    x = np.array([r.modalities[modality].mean(0) for r in records])
    g = np.array([r.group == "M" for r in records], dtype=float)
    half = len(records) // 2
    w, b = fit_logistic(x[:half], g[:half], 1e-2)
    pred = (x[half:] @ w + b) > 0
    return float(np.mean(pred == g[half:])), float(max(g[half:].mean(), 1 - g[half:].mean()))


def test_generate_marginals():
    recs = generate(small_config(n_subjects=1000))
    share_m = np.mean([r.group == "M" for r in recs])
    assert abs(share_m - 0.34) < 0.05
    for r in recs:
        assert 2 <= r.modalities["a"].shape[0] <= 4 and r.modalities["a"].shape[1] == 4
        assert 1 <= r.modalities["v"].shape[0] <= 3
    assert minority_group(recs) == "M"


def test_generate_is_deterministic():
    assert generate(small_config()) == generate(small_config())
    assert generate(small_config()) != generate(small_config(seed=4))


def test_zero_leak_gives_chance_group_probe():
    mods = {"a": ModalitySpec(4, (2, 4), 1.0, 0.0, 0.5), "v": ModalitySpec(3, (1, 3), 1.0, 0.0, 0.5)}
    acc, majority = group_probe_accuracy(generate(small_config(n_subjects=1000, modalities=mods)))
    assert acc <= majority + 0.05


def test_group_probe_accuracy_rises_with_leak():
    leaks = [0.0, 0.5, 1.0, 2.0, 4.0]
    accs = []
    for leak in leaks:
        mods = {"a": ModalitySpec(4, (2, 4), 1.0, leak, 0.5), "v": ModalitySpec(3, (1, 3), 1.0, leak, 0.5)}
        accs.append(group_probe_accuracy(generate(small_config(n_subjects=600, modalities=mods)))[0])
    assert spearmanr(leaks, accs).statistic >= 0.8


def test_config_validation():
    with pytest.raises(DataError, match="sum to 1"):
        SynthConfig(group_proportions={"M": 0.5, "F": 0.6}, label_rate_per_group={"M": 0.5, "F": 0.5})
    with pytest.raises(DataError, match="segment_count_range"):
        ModalitySpec(3, (0, 2))
    with pytest.raises(DataError, match="unknown"):
        SynthConfig.from_dict({"n_subject": 5})
    cfg = small_config()
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_jsonl_round_trip(tmp_path):
    recs = generate(small_config(n_subjects=20))
    save_jsonl(recs, tmp_path / "d.jsonl")
    assert load_jsonl(tmp_path / "d.jsonl") == recs


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def good(sid="s0"):
    return {"subject_id": sid, "group": "M", "label": 1, "modalities": {"a": [[1.0, 2.0]]}}


def test_jsonl_missing_field_reports_line(tmp_path):
    bad = good("s1")
    del bad["group"]
    write_lines(tmp_path / "d.jsonl", [good(), bad])
    with pytest.raises(DataError, match=r"line 2: .*'group'"):
        load_jsonl(tmp_path / "d.jsonl")


def test_jsonl_inconsistent_segment_lengths(tmp_path):
    bad = good()
    bad["modalities"]["a"] = [[1.0, 2.0], [3.0]]
    write_lines(tmp_path / "d.jsonl", [bad])
    with pytest.raises(DataError, match="inconsistent"):
        load_jsonl(tmp_path / "d.jsonl")
    other = good("s1")
    other["modalities"]["a"] = [[1.0, 2.0, 3.0]]
    write_lines(tmp_path / "d.jsonl", [good(), other])
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(tmp_path / "d.jsonl")


def test_jsonl_rejects_bad_label_and_duplicates(tmp_path):
    bad = good()
    bad["label"] = 2
    write_lines(tmp_path / "d.jsonl", [bad])
    with pytest.raises(DataError, match="label"):
        load_jsonl(tmp_path / "d.jsonl")
    write_lines(tmp_path / "d.jsonl", [good(), good()])
    with pytest.raises(DataError, match="duplicate"):
        load_jsonl(tmp_path / "d.jsonl")


def grid_records(n=100):
    # four balanced (group, label) cells of 25
    return [SubjectRecord(f"s{i:03d}", "MF"[i % 2], (i // 2) % 2, {"a": np.zeros((1, 1))}) for i in range(n)]


def test_split_sizes_and_stratification():
    recs = grid_records()
    plan = split_subjects(recs, (0.8, 0.1, 0.1), seed=1)
    assert (len(plan.train), len(plan.val), len(plan.test)) == (80, 10, 10)
    assert set(plan.train) | set(plan.val) | set(plan.test) == {r.subject_id for r in recs}
    assert not set(plan.train) & set(plan.test)
    for counts in plan.report.values():
        for name, share in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
            assert abs(counts[name] - 25 * share) <= 1


def test_split_is_deterministic_and_seeded():
    recs = grid_records()
    a = split_subjects(recs, seed=5)
    assert a == split_subjects(list(reversed(recs)), seed=5)
    assert a.train != split_subjects(recs, seed=6).train


def test_split_single_subject():
    plan = split_subjects(grid_records(1), seed=0, allow_empty_cells=True)
    assert sorted(len(plan.ids(s)) for s in ("train", "val", "test")) == [0, 0, 1]


def test_split_errors():
    with pytest.raises(DataError, match="sum to 1"):
        split_subjects(grid_records(), (0.5, 0.1, 0.1))
    with pytest.raises(DataError, match="empty"):
        split_subjects(grid_records(1))


def test_same_label_batches():
    recs = grid_records(37)
    batches = list(sample_batches(recs, 4, "same_label", seed=2))
    assert all(len({r.label for r in b}) == 1 for b in batches)
    seen = sorted(r.subject_id for b in batches for r in b)
    assert seen == sorted(r.subject_id for r in recs)
    per_class = {y: sum(r.label == y for r in recs) for y in (0, 1)}
    n_batches = {y: sum(b[0].label == y for b in batches) for y in (0, 1)}
    assert n_batches == {y: -(-per_class[y] // 4) for y in (0, 1)}


def test_unconstrained_batches_cover_once_and_vary_by_epoch():
    recs = grid_records(10)
    e1 = [r.subject_id for b in sample_batches(recs, 3, seed=0, epoch=1) for r in b]
    e2 = [r.subject_id for b in sample_batches(recs, 3, seed=0, epoch=2) for r in b]
    assert sorted(e1) == sorted(r.subject_id for r in recs)
    assert e1 != e2
    assert e1 == [r.subject_id for b in sample_batches(recs, 3, seed=0, epoch=1) for r in b]


def test_same_label_needs_both_classes():
    recs = [r for r in grid_records(8) if r.label == 1]
    with pytest.raises(DataError, match="class 0"):
        list(sample_batches(recs, 2, "same_label"))
