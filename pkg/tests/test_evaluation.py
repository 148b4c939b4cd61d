"""Metric tests: hand-counted accuracy and F1 cases, a brute-force span
oracle on random well-formed sequences, and disagreement recounting."""

import random

import numpy as np
import pytest

from spenseq import evaluation as EV
from spenseq.data import render_bioes


def test_token_accuracy_values():
    assert EV.token_accuracy([["A", "B"]], [["A", "B"]]) == 100.0
    assert EV.token_accuracy([["A", "B"]], [["B", "A"]]) == 0.0
    assert EV.token_accuracy([["A", "B"], ["A", "A"]], [["A", "B"], ["B", "A"]]) == 75.0


def test_token_accuracy_misalignment():
    with pytest.raises(ValueError, match="sequences"):
        EV.token_accuracy([["A"]], [["A"], ["B"]])
    with pytest.raises(ValueError, match="length"):
        EV.token_accuracy([["A", "B"]], [["A"]])


def test_span_extraction_well_formed():
    spans, repairs = EV.extract_spans_bioes(["S-PER", "O", "B-LOC", "I-LOC", "E-LOC"])
    assert set(spans) == {(0, 0, "PER"), (2, 4, "LOC")}
    assert repairs == 0
    spans, _ = EV.extract_spans_bioes(["S-A", "S-A", "B-B", "E-B"])
    assert set(spans) == {(0, 0, "A"), (1, 1, "A"), (2, 3, "B")}


def test_span_extraction_lenient_on_malformed():
    spans, repairs = EV.extract_spans_bioes(["E-PER"])
    assert spans == [(0, 0, "PER")] and repairs == 1
    spans, repairs = EV.extract_spans_bioes(["I-LOC", "I-LOC"])
    assert spans == [(0, 1, "LOC")] and repairs == 1
    spans, repairs = EV.extract_spans_bioes(["B-A", "I-B"])
    assert set(spans) == {(0, 0, "A"), (1, 1, "B")} and repairs == 1


def test_span_extraction_rejects_foreign_labels():
    with pytest.raises(ValueError, match="X-FOO"):
        EV.extract_spans_bioes(["X-FOO"])
    with pytest.raises(ValueError, match="'B'"):
        EV.extract_spans_bioes(["B"])


def test_span_f1_values():
    gold = [["S-PER", "O", "O", "S-LOC"]]
    assert EV.span_f1(gold, gold) == (100.0, 100.0, 100.0)
    pred = [["S-PER", "O", "O", "O"]]
    p, r, f1 = EV.span_f1(pred, gold)
    assert (p, r) == (100.0, 50.0)
    assert f1 == pytest.approx(66.6667, abs=1e-3)


def test_span_f1_empty_conventions():
    empty = [["O", "O"]]
    full = [["S-PER", "O"]]
    assert EV.span_f1(empty, empty) == (100.0, 100.0, 100.0)
    assert EV.span_f1(empty, full) == (0.0, 0.0, 0.0)
    assert EV.span_f1(full, empty) == (0.0, 0.0, 0.0)


def random_spans(rng, length):
    spans, pos = [], 0
    while pos < length:
        if rng.random() < 0.4:
            end = min(length - 1, pos + rng.randrange(0, 4))
            spans.append((pos, end, rng.choice("XYZ")))
            pos = end + 2  # gap so rendered spans stay unambiguous
        else:
            pos += 1
    return spans


def parse_well_formed_bioes(labels):
    # direct reading of the strict grammar: S alone, or B I* E
    spans, start = [], None
    for i, lab in enumerate(labels):
        kind = lab[0]
        if kind == "S":
            spans.append((i, i, lab[2:]))
        elif kind == "B":
            start = i
        elif kind == "E":
            spans.append((start, i, lab[2:]))
            start = None
    return spans


def test_span_scoring_matches_brute_force_on_random_corpora():
    rng = random.Random(11)
    preds, golds = [], []
    for _ in range(100):
        length = rng.randrange(1, 15)
        golds.append(render_bioes(length, random_spans(rng, length)))
        preds.append(render_bioes(length, random_spans(rng, length)))
    for seq in preds + golds:
        got, repairs = EV.extract_spans_bioes(seq)
        assert repairs == 0
        assert sorted(got) == sorted(parse_well_formed_bioes(seq))
    pred_set = {(i, *s) for i, seq in enumerate(preds) for s in parse_well_formed_bioes(seq)}
    gold_set = {(i, *s) for i, seq in enumerate(golds) for s in parse_well_formed_bioes(seq)}
    n_match = len(pred_set & gold_set)
    p, r, f1 = EV.span_f1(preds, golds)
    assert p == pytest.approx(100.0 * n_match / len(pred_set))
    assert r == pytest.approx(100.0 * n_match / len(gold_set))
    assert f1 == pytest.approx(2 * p * r / (p + r))


def test_span_f1_swap_symmetry_and_order_invariance():
    rng = random.Random(5)
    a = [render_bioes(8, random_spans(rng, 8)) for _ in range(20)]
    b = [render_bioes(8, random_spans(rng, 8)) for _ in range(20)]
    p1, r1, f1 = EV.span_f1(a, b)
    p2, r2, f2 = EV.span_f1(b, a)
    assert (p1, r1, f1) == (r2, p2, f2)

    order = list(range(20))
    random.Random(6).shuffle(order)
    assert EV.span_f1([a[i] for i in order], [b[i] for i in order]) == (p1, r1, f1)
    assert EV.token_accuracy([a[i] for i in order], [b[i] for i in order]) == \
        EV.token_accuracy(a, b)


def test_disagreement_identical_nets():
    seqs = [["A", "B", "C"]]
    report = EV.disagreement(seqs, seqs, [["A", "B", "B"]])
    assert report.rate == 0.0 and report.pairs == () and report.n_differing == 0


def test_disagreement_hand_example():
    gold = [["A"] * 10]
    test = [["A"] * 10]
    cost = [["A"] * 8 + ["B", "C"]]
    report = EV.disagreement(test, cost, gold)
    assert report.n_positions == 10 and report.n_differing == 2
    assert report.rate == pytest.approx(20.0)
    assert dict(report.pairs) == {("A", "B"): 1, ("A", "C"): 1}
    assert report.n_differing_test_correct == 2


def test_disagreement_restricts_pairs_to_test_correct_positions():
    gold = [["A", "A", "A"]]
    test = [["A", "B", "B"]]   # correct only at position 0
    cost = [["C", "C", "B"]]   # differs at positions 0 and 1
    report = EV.disagreement(test, cost, gold)
    assert report.n_differing == 2
    assert report.pairs == ((("A", "C"), 1),)
    assert report.n_differing_test_correct == 1


def test_disagreement_recount_oracle():
    rng = np.random.default_rng(7)
    labels = ["A", "B", "C", "D"]
    gold = [[labels[j] for j in rng.integers(0, 4, size=rng.integers(3, 12))]
            for _ in range(30)]
    test = [[labels[j] for j in rng.integers(0, 4, size=len(g))] for g in gold]
    cost = [[labels[j] for j in rng.integers(0, 4, size=len(g))] for g in gold]
    report = EV.disagreement(test, cost, gold, top_n=16)
    flat = [(a, f, g) for ts, fs, gs in zip(test, cost, gold)
            for a, f, g in zip(ts, fs, gs)]
    assert report.n_positions == len(flat)
    assert report.n_differing == sum(a != f for a, f, _ in flat)
    assert report.n_differing_test_correct == sum(a != f and a == g for a, f, g in flat)
    assert sum(dict(report.pairs).values()) == report.n_differing_test_correct


def test_disagreement_misalignment():
    with pytest.raises(ValueError, match="counts differ"):
        EV.disagreement([["A"]], [["A"], ["B"]], [["A"]])
    with pytest.raises(ValueError, match="lengths"):
        EV.disagreement([["A", "B"]], [["A"]], [["A", "B"]])


def test_metrics_report_fields_and_rounding():
    gold = [["S-PER", "O", "O"]]
    pred = [["S-PER", "O", "S-PER"]]
    report = EV.metrics_report(pred, gold, scheme="bioes")
    assert report == {"accuracy": 66.67, "n_tokens": 3, "precision": 50.0,
                      "recall": 100.0, "f1": 66.67, "n_spans_gold": 1,
                      "n_spans_pred": 2}
    plain = EV.metrics_report([["X", "Y"]], [["X", "X"]])
    assert plain == {"accuracy": 50.0, "n_tokens": 2}
    with pytest.raises(ValueError, match="scheme"):
        EV.metrics_report(pred, gold, scheme="spans")
