"""Corpus metrics: token accuracy, span precision/recall/F1 over BIOES
sequences, and the disagreement analysis between the two inference nets.

Span scoring follows the standard CoNLL scorer's semantics on well-formed
BIOES sequences.  Malformed predictions are first mapped onto BIO ({B,S} ->
B, {I,E} -> I) and then repaired by the usual leniency rule, so every label
sequence scores without erroring out mid-evaluation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .data import bio_spans

_BIOES_TO_BIO = {"B": "B", "S": "B", "I": "I", "E": "I"}


def _to_bio(label: str) -> str:
    if label == "O":
        return label
    head, dash, typ = label.partition("-")
    if dash and head in _BIOES_TO_BIO:
        return f"{_BIOES_TO_BIO[head]}-{typ}"
    raise ValueError(f"label {label!r} is not BIOES (want O or B/I/E/S-<type>)")


def extract_spans_bioes(labels: Sequence[str]) -> tuple[list[tuple[int, int, str]], int]:
    """(start, end inclusive, type) spans from a BIOES sequence, plus the
    number of leniency repairs that were needed."""
    return bio_spans([_to_bio(lab) for lab in labels])


def first_non_bioes(labels: Sequence[str]) -> str | None:
    """The first label that is not valid BIOES, or None if all are."""
    for lab in labels:
        try:
            _to_bio(lab)
        except ValueError:
            return lab
    return None


def token_accuracy(pred: Sequence[Sequence], gold: Sequence[Sequence]) -> float:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences vs {len(gold)} gold")
    correct = total = 0
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: predicted length {len(p)} vs gold {len(g)}")
        total += len(g)
        correct += sum(a == b for a, b in zip(p, g))
    if total == 0:
        raise ValueError("no tokens to score")
    return 100.0 * correct / total


def _span_set(seqs: Sequence[Sequence[str]]) -> set:
    spans = set()
    for i, seq in enumerate(seqs):
        for span in extract_spans_bioes(seq)[0]:
            spans.add((i, *span))
    return spans


def _prf(n_match: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gold == 0:
        return 100.0, 100.0, 100.0
    p = 100.0 * n_match / n_pred if n_pred else 0.0
    r = 100.0 * n_match / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def span_f1(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]
            ) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, F1) over exact span matches.
    Both sets empty scores 100 across the board; a bare denominator of zero
    scores 0 for its metric."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sequences vs {len(gold)} gold")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sequence {i}: predicted length {len(p)} vs gold {len(g)}")
    pred_spans, gold_spans = _span_set(pred), _span_set(gold)
    return _prf(len(pred_spans & gold_spans), len(pred_spans), len(gold_spans))


@dataclass(frozen=True)
class DisagreementReport:
    """How the test-time net and the cost-augmented net differ on a corpus.

    ``pairs`` counts (test label, cost label) combinations only at positions
    where the test-time net matched gold, so it shows what the cost-augmented
    net does precisely where there was nothing left to fix."""
    n_positions: int
    n_differing: int
    rate: float
    pairs: tuple
    n_differing_test_correct: int


def disagreement(test_pred: Sequence[Sequence], cost_pred: Sequence[Sequence],
                 gold: Sequence[Sequence], top_n: int = 10) -> DisagreementReport:
    if not (len(test_pred) == len(cost_pred) == len(gold)):
        raise ValueError(f"sequence counts differ: {len(test_pred)} vs {len(cost_pred)} "
                         f"vs {len(gold)}")
    n_positions = n_differing = 0
    counts: Counter = Counter()
    for i, (a_seq, f_seq, g_seq) in enumerate(zip(test_pred, cost_pred, gold)):
        if not (len(a_seq) == len(f_seq) == len(g_seq)):
            raise ValueError(f"sequence {i}: lengths differ")
        n_positions += len(g_seq)
        for a, f, g in zip(a_seq, f_seq, g_seq):
            if a == f:
                continue
            n_differing += 1
            if a == g:
                counts[(a, f)] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    rate = 100.0 * n_differing / n_positions if n_positions else 0.0
    return DisagreementReport(n_positions=n_positions, n_differing=n_differing,
                              rate=rate, pairs=tuple(ranked),
                              n_differing_test_correct=sum(counts.values()))


def metrics_report(pred: Sequence[Sequence], gold: Sequence[Sequence],
                   scheme: str = "plain") -> dict:
    """Metric dict for serialization; span fields appear only under the
    "bioes" scheme.  Percentages are rounded to 2 decimals."""
    report = {"accuracy": round(token_accuracy(pred, gold), 2),
              "n_tokens": sum(len(g) for g in gold)}
    if scheme == "bioes":
        pred_spans, gold_spans = _span_set(pred), _span_set(gold)
        p, r, f1 = _prf(len(pred_spans & gold_spans), len(pred_spans), len(gold_spans))
        report.update({"precision": round(p, 2), "recall": round(r, 2),
                       "f1": round(f1, 2), "n_spans_gold": len(gold_spans),
                       "n_spans_pred": len(pred_spans)})
    elif scheme != "plain":
        raise ValueError(f"unknown labeling scheme {scheme!r} (want plain or bioes)")
    return report
