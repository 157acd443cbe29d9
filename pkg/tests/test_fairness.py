import numpy as np
import pytest

from fairwell.fairness import (
    GroupRates, MetricPreconditionError, Prediction, PredictionSet, agg_fairness, fairness_ratios,
    fairness_report, group_rates, pareto_front, pareto_mask, pareto_svg, performance,
    read_fairness_csv, read_predictions_csv, write_fairness_csv, write_predictions_csv,
)


def triples(spec):
    """spec: {group: [(pred, label), ...]} -> PredictionSet."""
    return PredictionSet.from_triples([(p, y, g) for g, rows in spec.items() for p, y in rows])


def test_perfect_balanced_classifier():
    rates = group_rates(triples({"A": [(1, 1), (0, 0)] * 3, "B": [(1, 1), (0, 0)] * 2}))
    for r in rates.values():
        assert (r.tpr, r.fpr, r.accuracy) == (1.0, 0.0, 1.0)
    assert fairness_ratios(rates, "A").as_tuple() == (1.0, 1.0, 1.0, 1.0)


def test_group_without_positives_flags_tpr():
    rates = group_rates(triples({"A": [(0, 0), (1, 0)], "B": [(1, 1), (0, 0)]}))
    assert rates["A"].tpr is None and "tpr" in rates["A"].undefined
    ratios = fairness_ratios(rates, "A")
    assert ratios.eopp == 0.0 and "eopp:undefined_rate" in ratios.flags


def test_eight_row_tally():
    preds = triples({"A": [(1, 1), (1, 0), (0, 1), (0, 0)], "B": [(1, 1), (1, 1), (0, 0), (1, 0)]})
    rates = group_rates(preds)
    assert rates["A"] == GroupRates("A", 4, 1, 1, 1, 1)
    assert rates["B"] == GroupRates("B", 4, 2, 1, 1, 0)


def test_statistical_parity_ratio():
    a = [(1, 0)] * 3 + [(0, 0)] * 7
    b = [(1, 0)] * 6 + [(0, 0)] * 4
    assert fairness_ratios(group_rates(triples({"A": a, "B": b})), "A").sp == pytest.approx(0.5)


def test_eodd_example():
    a = [(1, 1)] * 9 + [(0, 1)] + [(1, 0)] * 2 + [(0, 0)] * 8
    b = [(1, 1)] * 9 + [(0, 1)] + [(1, 0)] * 1 + [(0, 0)] * 9
    assert fairness_ratios(group_rates(triples({"A": a, "B": b})), "A").eodd == pytest.approx(1.5)


def test_zero_denominator_policy():
    a = [(0, 0), (0, 1)]
    b = [(0, 0), (0, 1)]
    assert fairness_ratios(group_rates(triples({"A": a, "B": b})), "A").sp == 1.0
    r = fairness_ratios(group_rates(triples({"A": [(1, 0), (0, 1)], "B": b})), "A")
    assert r.sp == 0.0 and "sp:zero_denominator" in r.flags


def test_missing_group_and_single_group():
    preds = triples({"A": [(1, 1)], "B": [(0, 0)]})
    with pytest.raises(MetricPreconditionError, match="'C'"):
        group_rates(preds, ["A", "C"])
    with pytest.raises(MetricPreconditionError):
        group_rates(triples({"A": [(1, 1)]}))


def test_swap_inverts_defined_ratios():
    rng = np.random.default_rng(0)
    preds = PredictionSet.from_triples(
        [(int(rng.random() < 0.5), int(rng.random() < 0.5), "AB"[i % 2]) for i in range(200)])
    rates = group_rates(preds)
    ab, ba = fairness_ratios(rates, "A"), fairness_ratios(rates, "B")
    assert not ab.flags and not ba.flags
    for x, y in ((ab.sp, ba.sp), (ab.eopp, ba.eopp), (ab.eacc, ba.eacc)):
        assert x * y == pytest.approx(1.0, rel=1e-12)


def test_agg_fairness_examples():
    assert agg_fairness(1, 1, 1, 1) == 1.0
    assert agg_fairness(0.74, 1.19, 0.89, 0.99) == pytest.approx(0.8575, abs=1e-12)
    assert agg_fairness(1.00, 2.21, 1.00, 0.90) == pytest.approx(0.6725, abs=1e-12)
    assert agg_fairness(1, 1, 1, 1.01) < 1.0
    with pytest.raises(ValueError):
        agg_fairness(1.0, float("nan"))


def test_performance_examples():
    assert performance(triples({"A": [(1, 1), (0, 0)], "B": [(1, 1)]})) == (1.0, 1.0)
    assert performance(triples({"A": [(0, 1), (0, 0)]})) == (0.5, 0.0)
    # tp 3, fp 2, fn 1, tn 4
    rows = [(1, 1)] * 3 + [(1, 0)] * 2 + [(0, 1)] + [(0, 0)] * 4
    acc, f1 = performance(triples({"A": rows}))
    assert acc == pytest.approx(0.7) and f1 == pytest.approx(6 / 9)


def test_report_agg_is_recomputable():
    preds = triples({"A": [(1, 1), (1, 0), (0, 1), (0, 0)], "B": [(1, 1), (1, 1), (0, 0), (1, 0)]})
    rep = fairness_report(preds, "A")
    assert abs(rep.agg_f - agg_fairness(rep.sp, rep.eopp, rep.eodd, rep.eacc)) <= 1e-12


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(1)
    preds = PredictionSet([Prediction(f"s{i}", "AB"[i % 2], i % 2, int(rng.random() < 0.5), float(rng.random()))
                           for i in range(20)])
    write_predictions_csv(preds, tmp_path / "p.csv")
    assert read_predictions_csv(tmp_path / "p.csv") == preds
    rep = fairness_report(preds, "A", run_id="r1")
    write_fairness_csv([rep], tmp_path / "f.csv")
    row = read_fairness_csv(tmp_path / "f.csv")[0]
    assert row["run_id"] == "r1" and row["agg_f"] == rep.agg_f
    assert abs(row["agg_f"] - agg_fairness(row["sp"], row["eopp"], row["eodd"], row["eacc"])) <= 1e-12


def test_pareto_examples():
    assert pareto_front([(0.3, 0.4)]) == [(0.3, 0.4)]
    assert pareto_front([(0.5, 0.5), (0.6, 0.6)]) == [(0.6, 0.6)]
    assert pareto_mask([(0.5, 0.5), (0.5, 0.5)]) == [True, True]
    assert pareto_mask([(0.5, 0.7), (0.5, 0.6), (0.9, 0.1)]) == [True, False, True]
    with pytest.raises(ValueError):
        pareto_mask([(float("inf"), 0.0)])


def test_svg_is_deterministic_and_marks_front():
    rows = [("a", 0.5, 0.5), ("b", 0.6, 0.6), ("c<&>", 0.7, 0.2)]
    mask = pareto_mask([(r[1], r[2]) for r in rows])
    svg = pareto_svg(rows, mask)
    assert svg == pareto_svg(rows, mask)
    assert svg.count("<polygon") == 2 and svg.count("<circle") == 1
    assert "c&lt;&amp;&gt;" in svg
