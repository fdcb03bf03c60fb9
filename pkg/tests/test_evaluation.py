import json

import numpy as np
import pytest

from ctxemo.corpus import EVALUATED_LABELS, EmotionLabel
from ctxemo.errors import EvaluationError
from ctxemo.evaluation import (
    ConfusionMatrix,
    build_report,
    confusion_matrix,
    evaluate,
    format_table,
    micro_f1,
    micro_prf,
    per_class_prf,
)
from helpers import corpus

N, J, S, A, O = EmotionLabel


def cm_from(tp, fp, fn, c=J):
    """A matrix with the given TP/FP/FN for class ``c`` (errors routed through Neutral)."""
    counts = np.zeros((5, 5), dtype=np.int64)
    counts[c, c] = tp
    counts[N, c] = fp
    counts[c, N] = fn
    return ConfusionMatrix(counts)


def test_confusion_layout():
    cm = confusion_matrix([J, A], [J, A])
    assert cm.counts[J, J] == 1 and cm.counts[A, A] == 1 and cm.counts.sum() == 2
    cm = confusion_matrix([N], [J])
    assert cm.counts[J, N] == 1


def test_confusion_brute_force():
    rng = np.random.default_rng(0)
    p, g = rng.integers(0, 5, 200), rng.integers(0, 5, 200)
    want = np.zeros((5, 5), dtype=int)
    for a, b in zip(g, p):
        want[a][b] += 1
    np.testing.assert_array_equal(confusion_matrix(p, g).counts, want)


def test_confusion_length_mismatch():
    with pytest.raises(EvaluationError):
        confusion_matrix([J], [J, A])


def test_prf_examples():
    assert per_class_prf(cm_from(1, 0, 0), J) == (1.0, 1.0, 1.0)
    assert per_class_prf(cm_from(0, 2, 0), J) == (0.0, 0.0, 0.0)
    p, r, f = per_class_prf(cm_from(3, 1, 2), J)
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(0.6667, abs=1e-4)


def test_micro_perfect_and_accuracy():
    labels = [N, J, S, A, O, J]
    assert micro_f1(confusion_matrix(labels, labels), {J, A}) == 1.0
    preds = [N, J, J, A, O, S]
    cm = confusion_matrix(preds, labels)
    acc = np.trace(cm.counts) / cm.counts.sum()
    assert micro_f1(cm, set(EmotionLabel)) == acc


def test_restricted_brute_force():
    preds = [J, J, A, N, A, O, J, S]
    golds = [J, A, A, J, N, J, S, A]
    ev = {J, A}
    tp = sum(p == g and g in ev for p, g in zip(preds, golds))
    fp = sum(p != g and p in ev for p, g in zip(preds, golds))
    fn = sum(p != g and g in ev for p, g in zip(preds, golds))
    P, R = tp / (tp + fp), tp / (tp + fn)
    assert micro_f1(confusion_matrix(preds, golds), ev) == pytest.approx(2 * P * R / (P + R), abs=1e-15)


def test_literal_flag_halves():
    cm = cm_from(3, 1, 2)
    p, r, f = micro_prf(cm, {J})
    _, _, lit = micro_prf(cm, {J}, literal_f1=True)
    assert lit == pytest.approx(f / 2)


def test_ood_rule_example():
    golds = [N, J, A, J]
    preds = [N, J, A, O]
    rep = build_report(preds, golds)
    assert rep.micro_recall == 0.75 and rep.micro_precision == 1.0
    assert rep.micro_f1 == pytest.approx(6 / 7)
    assert round(rep.micro_f1, 4) == 0.8571


def test_all_gold_ood():
    rep = build_report([J, O], [O, O])
    assert (rep.scored_count, rep.skipped_count, rep.micro_f1) == (0, 2, 0.0)


def test_default_classes():
    assert build_report([J], [J]).evaluated_classes == EVALUATED_LABELS


def test_evaluate_file(tmp_path):
    gold = corpus([[0, 1], [3, 4]])
    preds = [[{"predicted_emotion": "Neutral"}, {"predicted_emotion": "Joy"}],
             [{"predicted_emotion": "Anger", "flags": ["excluded_fallback"]}, {"predicted_emotion": "Joy"}]]
    p = tmp_path / "p.json"
    p.write_text(json.dumps(preds))
    rep = evaluate(p, gold)
    assert rep.micro_f1 == 1.0 and rep.skipped_count == 1
    js = rep.to_json()
    assert js["per_class"]["Joy"]["f1"] == 1.0
    assert set(js["evaluated_classes"]) == {"Neutral", "Joy", "Sadness", "Anger"}


def test_evaluate_missing_prediction():
    gold = corpus([[0, 1], [3, 4]])
    with pytest.raises(EvaluationError, match="dialogue 1"):
        evaluate([[N, J], [A]], gold)


def test_table_layout():
    rep = build_report([N, J, S, A], [N, J, S, J])
    lines = format_table(rep, "base").splitlines()
    assert lines[0].split() == ["Model", "Micro-f1", "Neutral", "Joy", "Sadness", "Anger"]
    cells = lines[1].split()
    assert cells[0] == "base" and cells[1] == f"{100 * rep.micro_f1:.1f}"
