"""Dialogue corpora: loading, label collapsing, statistics and k-fold splits."""

from __future__ import annotations

import json
import random
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from .errors import CorpusFormatError, LabelError, SplitError, StatsError


class EmotionLabel(IntEnum):
    NEUTRAL = 0
    JOY = 1
    SADNESS = 2
    ANGER = 3
    OUT_OF_DOMAIN = 4

    @property
    def display(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def from_display(cls, name: str) -> "EmotionLabel":
        try:
            return _FROM_DISPLAY[name]
        except KeyError:
            raise LabelError(f"unknown label name {name!r}") from None


_DISPLAY = {
    EmotionLabel.NEUTRAL: "Neutral",
    EmotionLabel.JOY: "Joy",
    EmotionLabel.SADNESS: "Sadness",
    EmotionLabel.ANGER: "Anger",
    EmotionLabel.OUT_OF_DOMAIN: "OutOfDomain",
}
_FROM_DISPLAY = {v: k for k, v in _DISPLAY.items()}
_FROM_DISPLAY.update({v.lower(): k for k, v in _DISPLAY.items()})
_FROM_DISPLAY["ood"] = EmotionLabel.OUT_OF_DOMAIN

NUM_CLASSES = len(EmotionLabel)
EVALUATED_LABELS = frozenset(
    {EmotionLabel.NEUTRAL, EmotionLabel.JOY, EmotionLabel.SADNESS, EmotionLabel.ANGER}
)

RAW_LABELS = {
    "neutral": EmotionLabel.NEUTRAL,
    "joy": EmotionLabel.JOY,
    "sadness": EmotionLabel.SADNESS,
    "anger": EmotionLabel.ANGER,
    "fear": EmotionLabel.OUT_OF_DOMAIN,
    "surprise": EmotionLabel.OUT_OF_DOMAIN,
    "disgust": EmotionLabel.OUT_OF_DOMAIN,
    "non-neutral": EmotionLabel.OUT_OF_DOMAIN,
}


def map_label(raw: str) -> EmotionLabel:
    """Collapse a raw 8-way corpus emotion onto the 5-way label space."""
    try:
        return RAW_LABELS[raw]
    except KeyError:
        raise LabelError(f"unknown emotion string {raw!r}") from None


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    gold_label: EmotionLabel | None = None
    # original corpus string, kept so files round-trip unchanged
    raw_emotion: str | None = None

    def __post_init__(self):
        if not self.text.strip():
            raise CorpusFormatError(f"empty utterance text for speaker {self.speaker!r}")


@dataclass(frozen=True)
class Dialogue:
    utterances: tuple[Utterance, ...]
    dialogue_id: str

    def __post_init__(self):
        if not self.utterances:
            raise CorpusFormatError(f"dialogue {self.dialogue_id} has no utterances")

    def __len__(self):
        return len(self.utterances)

    @property
    def labels(self) -> list[EmotionLabel | None]:
        return [u.gold_label for u in self.utterances]


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    name: str = "corpus"

    def __post_init__(self):
        ids = [d.dialogue_id for d in self.dialogues]
        if len(set(ids)) != len(ids):
            raise CorpusFormatError(f"duplicate dialogue ids in corpus {self.name!r}")

    def __len__(self):
        return len(self.dialogues)

    def __iter__(self):
        return iter(self.dialogues)

    @property
    def n_utterances(self) -> int:
        return sum(len(d) for d in self.dialogues)

    def is_labeled(self) -> bool:
        return all(u.gold_label is not None for d in self.dialogues for u in d.utterances)


@dataclass
class CorpusStats:
    n_dialogues: int
    n_utterances: int
    avg_utterances_per_dialogue: float
    avg_dialogue_length: float
    label_fractions: dict[EmotionLabel, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_dialogues": self.n_dialogues,
            "n_utterances": self.n_utterances,
            "avg_utterances_per_dialogue": self.avg_utterances_per_dialogue,
            "avg_dialogue_length": self.avg_dialogue_length,
            "label_fractions": {lab.display: v for lab, v in self.label_fractions.items()},
        }


def _parse_error(text: str, exc: json.JSONDecodeError, path) -> CorpusFormatError:
    lines = text.splitlines()
    context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
    return CorpusFormatError(
        f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}\n"
        f"    {context[:200]}"
    )


def corpus_from_records(records, name: str = "corpus", labeled: bool = True) -> Corpus:
    """Build a corpus from already-decoded JSON (list of lists of dicts)."""
    if not isinstance(records, list):
        raise CorpusFormatError("top level must be a list of dialogues")
    dialogues = []
    for di, dia in enumerate(records):
        if not isinstance(dia, list) or not dia:
            raise CorpusFormatError(f"dialogue {di}: expected a non-empty list of utterances")
        utts = []
        for ui, rec in enumerate(dia):
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"dialogue {di}, utterance {ui}: expected an object")
            required = ("speaker", "utterance", "emotion") if labeled else ("speaker", "utterance")
            for key in required:
                if key not in rec:
                    raise CorpusFormatError(
                        f"dialogue {di}, utterance {ui}: missing required key {key!r}"
                    )
            raw = rec.get("emotion") if labeled else None
            gold = map_label(raw.strip().lower()) if raw is not None else None
            try:
                utts.append(Utterance(str(rec["speaker"]), rec["utterance"], gold, raw))
            except CorpusFormatError as exc:
                raise CorpusFormatError(f"dialogue {di}, utterance {ui}: {exc}") from None
        dialogues.append(Dialogue(tuple(utts), f"{name}:{di}"))
    return Corpus(tuple(dialogues), name)


def load_corpus(path, format: str = "labeled") -> Corpus:
    """Load a challenge-style JSON corpus.

    ``format`` is ``"labeled"`` (every utterance needs ``emotion``) or
    ``"unlabeled"`` (``emotion`` ignored when present).
    """
    if format not in ("labeled", "unlabeled"):
        raise ValueError(f"format must be 'labeled' or 'unlabeled', got {format!r}")
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _parse_error(text, exc, path) from None
    return corpus_from_records(records, name=path.stem, labeled=format == "labeled")


def corpus_to_records(corpus: Corpus) -> list:
    out = []
    for dia in corpus:
        recs = []
        for u in dia.utterances:
            rec = {"speaker": u.speaker, "utterance": u.text}
            if u.raw_emotion is not None:
                rec["emotion"] = u.raw_emotion
            elif u.gold_label is not None:
                rec["emotion"] = u.gold_label.display.lower()
            recs.append(rec)
        out.append(recs)
    return out


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(
        json.dumps(corpus_to_records(corpus), ensure_ascii=False, indent=1), encoding="utf-8"
    )


def merge_corpora(corpora: Iterable[Corpus], name: str = "merged") -> Corpus:
    dialogues = tuple(d for c in corpora for d in c.dialogues)
    return Corpus(dialogues, name)


def dialogue_length(dialogue: Dialogue) -> int:
    # whitespace word count; the one place "dialogue length" is defined
    return sum(len(u.text.split()) for u in dialogue.utterances)


def corpus_stats(corpus: Corpus) -> CorpusStats:
    if not corpus.dialogues:
        raise StatsError(f"corpus {corpus.name!r} is empty")
    if not corpus.is_labeled():
        raise StatsError(f"corpus {corpus.name!r} has unlabeled utterances; fractions undefined")
    counts = class_counts(corpus)
    n_dia = len(corpus)
    n_utt = corpus.n_utterances
    return CorpusStats(
        n_dialogues=n_dia,
        n_utterances=n_utt,
        avg_utterances_per_dialogue=n_utt / n_dia,
        avg_dialogue_length=sum(dialogue_length(d) for d in corpus) / n_dia,
        label_fractions={lab: counts[lab] / n_utt for lab in EmotionLabel},
    )


def class_counts(corpus: Corpus) -> dict[EmotionLabel, int]:
    """Per-label utterance counts; all five labels are always present as keys."""
    counts = {lab: 0 for lab in EmotionLabel}
    for dia in corpus:
        for u in dia.utterances:
            if u.gold_label is None:
                raise StatsError(f"unlabeled utterance in dialogue {dia.dialogue_id}")
            counts[u.gold_label] += 1
    return counts


def split_folds(
    corpus: Corpus,
    k: int,
    seed: int,
    holdout_filter: Callable[[Dialogue], bool] | None = None,
) -> list[tuple[Corpus, Corpus]]:
    """Deterministic k-fold split over whole dialogues.

    Dialogues for which ``holdout_filter`` returns False never enter a
    validation fold; they join every training split instead (use it to keep
    augmented copies out of validation).
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    eligible = [d for d in corpus if holdout_filter is None or holdout_filter(d)]
    always_train = [d for d in corpus if holdout_filter is not None and not holdout_filter(d)]
    if k > len(eligible):
        raise SplitError(f"k={k} exceeds the number of splittable dialogues ({len(eligible)})")
    order = list(range(len(eligible)))
    random.Random(seed).shuffle(order)
    base, extra = divmod(len(eligible), k)
    folds, pos = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(order[pos:pos + size])
        pos += size
    splits = []
    for i in range(k):
        held = set(folds[i])
        train = [eligible[j] for j in order if j not in held] + always_train
        val = [eligible[j] for j in folds[i]]
        splits.append(
            (Corpus(tuple(train), f"{corpus.name}-train{i}"), Corpus(tuple(val), f"{corpus.name}-val{i}"))
        )
    return splits
