"""Confusion matrices, per-class and micro-averaged precision/recall/F1."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .corpus import EVALUATED_LABELS, NUM_CLASSES, Corpus, EmotionLabel, RAW_LABELS
from .errors import EvaluationError, LabelError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = gold, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, c) -> int:
        return int(self.counts[c, c])

    def fp(self, c) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, c) -> int:
        return int(self.counts[c, :].sum() - self.counts[c, c])


def confusion_matrix(preds, golds, n_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    preds = np.asarray([int(p) for p in preds], dtype=np.int64)
    golds = np.asarray([int(g) for g in golds], dtype=np.int64)
    if preds.shape != golds.shape:
        raise EvaluationError(f"{len(preds)} predictions but {len(golds)} gold labels")
    return ConfusionMatrix(kernels.confusion(golds, preds, n_classes))


def _div(a, b) -> float:
    return a / b if b else 0.0


def _f1(p, r, literal: bool = False) -> float:
    if p + r == 0:
        return 0.0
    if p == r and not literal:
        return p  # avoids rounding in 2*p*p/(2*p)
    return (p * r if literal else 2 * p * r) / (p + r)


def per_class_prf(cm: ConfusionMatrix, c) -> tuple[float, float, float]:
    tp, fp, fn = cm.tp(c), cm.fp(c), cm.fn(c)
    p, r = _div(tp, tp + fp), _div(tp, tp + fn)
    return p, r, _f1(p, r)


def micro_prf(cm: ConfusionMatrix, evaluated_classes, literal_f1: bool = False) -> tuple[float, float, float]:
    """Micro precision, recall and F1 pooled over ``evaluated_classes``.

    ``literal_f1`` drops the harmonic mean's factor of two (P*R/(P+R)); it is
    only there for comparison against numbers computed that way.
    """
    classes = [int(c) for c in evaluated_classes]
    if not classes:
        raise ValueError("evaluated_classes must be non-empty")
    tp = sum(cm.tp(c) for c in classes)
    p = _div(tp, sum(cm.tp(c) + cm.fp(c) for c in classes))
    r = _div(tp, sum(cm.tp(c) + cm.fn(c) for c in classes))
    return p, r, _f1(p, r, literal_f1)


def micro_f1(cm: ConfusionMatrix, evaluated_classes, literal_f1: bool = False) -> float:
    return micro_prf(cm, evaluated_classes, literal_f1)[2]


@dataclass
class MetricsReport:
    per_class: dict  # EmotionLabel -> (precision, recall, f1)
    micro_precision: float
    micro_recall: float
    micro_f1: float
    scored_count: int
    skipped_count: int
    evaluated_classes: frozenset
    confusion: ConfusionMatrix | None = None
    # secondary metric: F1 of the macro-averaged precision and recall
    macro_f1: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        ordered = sorted(self.evaluated_classes)
        return {
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "scored_count": self.scored_count,
            "skipped_count": self.skipped_count,
            "evaluated_classes": [EmotionLabel(c).display for c in ordered],
            "per_class": {
                EmotionLabel(c).display: dict(zip(("precision", "recall", "f1"), self.per_class[c]))
                for c in ordered
            },
            "confusion": None if self.confusion is None else self.confusion.counts.tolist(),
            **self.extra,
        }


def build_report(preds, golds, evaluated_classes=EVALUATED_LABELS, literal_f1: bool = False) -> MetricsReport:
    """Score paired labels; utterances whose gold label is not evaluated are skipped.

    A prediction outside the evaluated set on a scored utterance is a miss for
    the gold class and a false positive for nothing.
    """
    evaluated = frozenset(EmotionLabel(c) for c in evaluated_classes)
    if not evaluated:
        raise ValueError("evaluated_classes must be non-empty")
    if len(preds) != len(golds):
        raise EvaluationError(f"{len(preds)} predictions but {len(golds)} gold labels")
    keep = [i for i, g in enumerate(golds) if EmotionLabel(g) in evaluated]
    cm = confusion_matrix([preds[i] for i in keep], [golds[i] for i in keep])
    p, r, f = micro_prf(cm, evaluated, literal_f1)
    per_class = {c: per_class_prf(cm, c) for c in evaluated}
    macro_p = float(np.mean([v[0] for v in per_class.values()]))
    macro_r = float(np.mean([v[1] for v in per_class.values()]))
    return MetricsReport(
        per_class=per_class,
        micro_precision=p,
        micro_recall=r,
        micro_f1=f,
        scored_count=len(keep),
        skipped_count=len(golds) - len(keep),
        evaluated_classes=evaluated,
        confusion=cm,
        macro_f1=_f1(macro_p, macro_r),
    )


def parse_label(name: str) -> EmotionLabel:
    try:
        return EmotionLabel.from_display(name)
    except LabelError:
        pass
    try:
        return RAW_LABELS[name.strip().lower()]
    except KeyError:
        raise LabelError(f"unknown emotion label {name!r}") from None


def load_predictions(path) -> list:
    """Read a prediction file; returns a list (per dialogue) of label lists."""
    path = Path(path)
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(records, list):
        raise EvaluationError(f"{path}: top level must be a list of dialogues")
    out = []
    for di, dia in enumerate(records):
        labels = []
        for ui, rec in enumerate(dia):
            if not isinstance(rec, dict) or "predicted_emotion" not in rec:
                raise EvaluationError(f"dialogue {di}, utterance {ui}: missing 'predicted_emotion'")
            labels.append(parse_label(rec["predicted_emotion"]))
        out.append(labels)
    return out


def align(predictions: list, gold: Corpus) -> tuple[list, list]:
    """Flatten per-dialogue predictions against a gold corpus, checking coverage."""
    preds, golds = [], []
    for di, dia in enumerate(gold):
        got = predictions[di] if di < len(predictions) else []
        for ui, utt in enumerate(dia.utterances):
            if ui >= len(got):
                raise EvaluationError(
                    f"no prediction for dialogue {di} ({dia.dialogue_id}), utterance {ui}"
                )
            if utt.gold_label is None:
                raise EvaluationError(f"gold corpus lacks a label at dialogue {di}, utterance {ui}")
            preds.append(got[ui])
            golds.append(utt.gold_label)
        if len(got) > len(dia):
            raise EvaluationError(f"dialogue {di} has {len(got)} predictions for {len(dia)} utterances")
    if len(predictions) > len(gold):
        raise EvaluationError(f"{len(predictions)} predicted dialogues but {len(gold)} gold dialogues")
    return preds, golds


def evaluate(predictions, gold: Corpus, evaluated_classes=EVALUATED_LABELS, literal_f1: bool = False) -> MetricsReport:
    """``predictions`` is a prediction-file path or an already-parsed list of label lists."""
    if isinstance(predictions, (str, Path)):
        predictions = load_predictions(predictions)
    preds, golds = align(predictions, gold)
    return build_report(preds, golds, evaluated_classes, literal_f1)


TABLE_COLUMNS = (EmotionLabel.NEUTRAL, EmotionLabel.JOY, EmotionLabel.SADNESS, EmotionLabel.ANGER)


def format_table(report: MetricsReport, name: str = "model") -> str:
    """Percent-scaled row: Micro-f1, then per-emotion F1."""
    header = ["Model", "Micro-f1"] + [c.display for c in TABLE_COLUMNS]
    row = [name, f"{100 * report.micro_f1:.1f}"]
    for c in TABLE_COLUMNS:
        row.append(f"{100 * report.per_class[c][2]:.1f}" if c in report.per_class else "-")
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return "\n".join([fmt.format(*header), fmt.format(*row)])
