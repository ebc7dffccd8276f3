from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from triage.corpus import ContactTypeTree
from triage.evaluation import (
    accuracy,
    accuracy_plus_parent,
    combined_accuracy,
    compare_runs,
    confusions,
    evaluate,
    hits_at_k,
    paired_bootstrap,
    per_class_f1_vs_frequency,
    prediction_records,
    read_predictions,
    write_f1_table,
    write_predictions,
)

TREE = ContactTypeTree(["R", "A", "B", "A1", "A2", "B1"],
                       {"R": None, "A": "R", "B": "R", "A1": "A", "A2": "A", "B1": "B"})
LABELS = ["A", "B", "A1", "A2", "B1"]


def test_accuracy_and_hits_examples():
    preds = [["a", "b", "c"], ["b", "a", "c"], ["c", "b", "a"], ["a"]]
    truth = ["a", "a", "a", "b"]
    assert accuracy(preds, truth) == 0.25
    assert hits_at_k(preds, truth, 1) == 0.25
    assert hits_at_k(preds, truth, 2) == 0.5
    assert hits_at_k(preds, truth, 3) == 0.75


def test_duplicates_are_dropped_before_ranking():
    preds = [[("a", 0.5), ("a", 0.4), ("b", 0.1)]]
    assert hits_at_k(preds, ["b"], 2) == 1.0


def test_accuracy_plus_parent_example():
    preds = [["A"], ["A"], ["B"], ["A2"], ["R"]]
    truth = ["A1", "A", "A1", "A2", "A"]
    # parent hit, exact, wrong, exact, root is parent of A
    assert accuracy_plus_parent(preds, truth, TREE) == 4 / 5
    with pytest.raises(ValueError):
        accuracy_plus_parent([["A"]], ["Z"], TREE)


def test_combined_needs_both():
    assert combined_accuracy([["x"], ["x"], ["y"]], [["1"], ["2"], ["1"]], ["x", "x", "x"], ["1", "1", "1"]) == 1 / 3


def test_errors_on_misaligned_inputs():
    with pytest.raises(ValueError):
        accuracy([["a"]], ["a", "b"])
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        hits_at_k([["a"]], ["a"], 0)


def test_per_class_f1_hand_example():
    truth = ["a", "a", "a", "b", "b", "c"]
    preds = [["a"], ["a"], ["b"], ["b"], ["c"], ["c"]]
    rows = {r.label: r for r in per_class_f1_vs_frequency(preds, truth)}
    # a: tp 2, predicted 2, support 3 -> p 1, r 2/3
    assert rows["a"].precision == 1.0 and math.isclose(rows["a"].recall, 2 / 3)
    assert math.isclose(rows["a"].f1, 0.8)
    # b: tp 1, predicted 2, support 2 -> p 1/2, r 1/2
    assert math.isclose(rows["b"].f1, 0.5)
    # c: tp 1, predicted 2, support 1 -> p 1/2, r 1
    assert math.isclose(rows["c"].f1, 2 / 3)
    assert [r.label for r in per_class_f1_vs_frequency(preds, truth)] == ["a", "b", "c"]
    assert math.isclose(rows["a"].frequency, 0.5)


def test_f1_includes_predicted_only_classes(tmp_path):
    rows = per_class_f1_vs_frequency([["z"], ["a"]], ["a", "a"])
    z = next(r for r in rows if r.label == "z")
    assert z.support == 0 and z.f1 == 0.0 and z.predicted == 1
    write_f1_table(tmp_path / "f1.tsv", rows)
    lines = (tmp_path / "f1.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "label" and len(lines) == 3


def test_confusions_counts():
    preds = [["b"], ["b"], ["c"], ["a"]]
    truth = ["a", "a", "a", "a"]
    assert confusions(preds, truth) == [("a", "b", 2), ("a", "c", 1)]


def _random_predictions(rng, n, n_classes, k):
    classes = [f"c{i}" for i in range(n_classes)]
    preds, truths = [], []
    for _ in range(n):
        preds.append(list(rng.permutation(classes)[:rng.integers(1, k + 1)]))
        truths.append(classes[rng.integers(n_classes)])
    return preds, truths


@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(2, 8))
@settings(max_examples=100, deadline=None)
def test_metric_identities(seed, n, C):
    rng = np.random.default_rng(seed)
    preds, truth = _random_predictions(rng, n, C, C)
    leaf_truth = [LABELS[rng.integers(len(LABELS))] for _ in range(n)]
    leaf_preds = [list(rng.permutation(LABELS + ["R"])[:3]) for _ in range(n)]
    pb, tb = _random_predictions(rng, n, C, C)
    assert hits_at_k(preds, truth, 1) == accuracy(preds, truth)
    hits = [hits_at_k(preds, truth, k) for k in range(1, C + 2)]
    assert all(a <= b for a, b in zip(hits, hits[1:]))
    comb = combined_accuracy(preds, pb, truth, tb)
    assert comb <= min(accuracy(preds, truth), accuracy(pb, tb))
    assert accuracy_plus_parent(leaf_preds, leaf_truth, TREE) >= accuracy(leaf_preds, leaf_truth)


@pytest.mark.parametrize("q", [0.2, 0.5, 0.9])
def test_accuracy_lies_in_binomial_band(q):
    """With a per-ticket hit chance q, accuracy over n tickets stays in the 99.9% binomial band."""
    n = 5000
    rng = np.random.default_rng(int(q * 100))
    truth = ["a"] * n
    preds = [["a"] if rng.random() < q else ["b"] for _ in range(n)]
    lo, hi = stats.binom.ppf([0.0005, 0.9995], n, q) / n
    assert lo <= accuracy(preds, truth) <= hi


def test_bootstrap_identical_runs_are_not_significant():
    a = np.random.default_rng(0).integers(0, 2, size=300)
    delta, p = paired_bootstrap(a, a, n_resamples=500)
    assert delta == 0.0 and p == 1.0


def test_bootstrap_p_value_agrees_with_normal_approximation():
    rng = np.random.default_rng(1)
    n = 3000
    a = (rng.random(n) < 0.70).astype(float)
    b = np.where(rng.random(n) < 0.9, a, (rng.random(n) < 0.76).astype(float))
    delta, p = paired_bootstrap(a, b, n_resamples=20000, seed=2)
    d = b - a
    z = d.mean() / (d.std(ddof=0) / math.sqrt(n))
    p_normal = 2 * stats.norm.sf(abs(z))
    assert math.isclose(delta, d.mean())
    assert abs(p - p_normal) < 0.02 + 0.2 * p_normal


def test_bootstrap_detects_large_gap():
    a = np.zeros(200)
    b = np.ones(200)
    b[:20] = 0
    delta, p = paired_bootstrap(a, b, n_resamples=2000)
    assert math.isclose(delta, 0.9)
    assert p == 1 / 2001


def test_unpaired_bootstrap_accepts_unequal_lengths():
    delta, p = paired_bootstrap(np.zeros(50), np.ones(80), n_resamples=200, paired=False)
    assert delta == 1.0 and p < 0.01
    with pytest.raises(ValueError):
        paired_bootstrap(np.zeros(5), np.ones(6))


def test_evaluate_report_and_compare():
    truths = {"contact_type": ["A1", "A", "B1"], "reply_template": ["t1", "t2", "t3"]}
    pa = {"contact_type": [["A"], ["A"], ["B1"]], "reply_template": [["t1"], ["t9"], ["t3"]]}
    pb = {"contact_type": [["A1"], ["A"], ["B1"]], "reply_template": [["t1"], ["t2"], ["t3"]]}
    ra = evaluate(pa, truths, ["x", "y", "z"], k=3, tree=TREE)
    rb = evaluate(pb, truths, ["x", "y", "z"], k=3, tree=TREE)
    assert ra.outputs["contact_type"] == {"accuracy": 2 / 3, "hits_at_k": 2 / 3, "accuracy_plus_parent": 1.0}
    assert ra.combined_accuracy == 1 / 3 and rb.combined_accuracy == 1.0
    assert "combined" in ra.format_table()
    cmp = compare_runs(ra, rb, n_resamples=200)
    assert math.isclose(cmp["combined_accuracy"]["delta"], 2 / 3)
    rc = evaluate(pb, truths, ["z", "y", "x"], k=3)
    with pytest.raises(ValueError):
        compare_runs(ra, rc)


def test_prediction_dump_round_trip(tmp_path):
    recs = prediction_records(["t1", "t2"], "contact_type", [[("A", 0.7), ("B", 0.2)], [("B", 1.0)]])
    write_predictions(tmp_path / "p.jsonl", recs)
    back = read_predictions(tmp_path / "p.jsonl")
    assert back == {"contact_type": {"t1": [("A", 0.7), ("B", 0.2)], "t2": [("B", 1.0)]}}
    (tmp_path / "bad.jsonl").write_text('{"task": "x"}\n')
    with pytest.raises(ValueError, match="line 1"):
        read_predictions(tmp_path / "bad.jsonl")
