"""Synthetic dialogue corpora with known label-generating rules.

Every utterance is one or two stock phrases plus one marker word. Phrases
come from a per-dialogue topic, so neighbouring utterances share vocabulary.
A marker fixes the label directly, except the echo marker, whose label copies the previous
utterance's label. Labels of echo utterances therefore cannot be read off the
utterance alone.
"""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, Dialogue, EmotionLabel, Utterance

PHRASES = (
    "i went to the store",
    "did you see the movie",
    "we should get coffee",
    "she called me last night",
    "the apartment is a mess",
    "he is at work again",
    "they moved to a new place",
    "can you pass the phone",
    "my date was on friday",
    "you left the door open",
    "we watched it on the couch",
    "the party starts at nine",
    "i lost my car keys",
    "tell me about your week",
    "the dinner is almost ready",
    "joey ate all the food",
)
TOPIC_SIZE = 4

MARKERS = {
    EmotionLabel.NEUTRAL: ("okay", "alright", "fine"),
    EmotionLabel.JOY: ("great", "awesome", "yay"),
    EmotionLabel.SADNESS: ("sad", "miss", "lonely"),
    EmotionLabel.ANGER: ("hate", "furious", "stupid"),
    EmotionLabel.OUT_OF_DOMAIN: ("wow", "scary", "gross"),
}
ECHO_MARKER = "indeed"
SPEAKERS = ("Ross", "Rachel", "Monica", "Chandler", "Joey", "Phoebe")
RAW_NAMES = {
    EmotionLabel.NEUTRAL: ("neutral",),
    EmotionLabel.JOY: ("joy",),
    EmotionLabel.SADNESS: ("sadness",),
    EmotionLabel.ANGER: ("anger",),
    EmotionLabel.OUT_OF_DOMAIN: ("fear", "surprise", "disgust", "non-neutral"),
}
DEFAULT_LABEL_PROBS = (0.40, 0.18, 0.12, 0.12, 0.18)


def _utterance(rng, topic, marker, label):
    chunks = [PHRASES[i] for i in rng.choice(topic, size=int(rng.integers(1, 3)), replace=False)]
    chunks.insert(int(rng.integers(len(chunks) + 1)), marker)
    text = " ".join(chunks)
    text = text[0].upper() + text[1:] + str(rng.choice([".", "!", "?", ""]))
    raw = RAW_NAMES[label][int(rng.integers(len(RAW_NAMES[label])))]
    return Utterance(str(rng.choice(SPEAKERS)), text, label, raw)


def _topic(rng):
    return rng.choice(len(PHRASES), size=TOPIC_SIZE, replace=False)


def make_synthetic_corpus(n_dialogues: int = 500, seed: int = 0, min_utterances: int = 4,
                          max_utterances: int = 10, label_probs=DEFAULT_LABEL_PROBS,
                          echo_rate: float = 0.15, name: str = "synthetic") -> Corpus:
    """Keyword-marker corpus with a context-dependent echo marker."""
    rng = np.random.default_rng(seed)
    labels = list(EmotionLabel)
    dialogues = []
    for di in range(n_dialogues):
        n = int(rng.integers(min_utterances, max_utterances + 1))
        topic = _topic(rng)
        utts = []
        prev_echo = True
        for _ in range(n):
            if not prev_echo and rng.random() < echo_rate:
                label = utts[-1].gold_label
                utts.append(_utterance(rng, topic, ECHO_MARKER, label))
                prev_echo = True
                continue
            label = labels[int(rng.choice(len(labels), p=label_probs))]
            marker = MARKERS[label][int(rng.integers(len(MARKERS[label])))]
            utts.append(_utterance(rng, topic, marker, label))
            prev_echo = False
        dialogues.append(Dialogue(tuple(utts), f"{name}:{di}"))
    return Corpus(tuple(dialogues), name)


IMBALANCE_MARKER = "grr"


def make_imbalanced_corpus(n_dialogues: int = 300, seed: int = 0, minority_fraction: float = 0.1,
                           minority: EmotionLabel = EmotionLabel.ANGER,
                           majority: EmotionLabel = EmotionLabel.NEUTRAL,
                           cue_given_minority: float = 0.6, cue_given_majority: float = 0.1,
                           min_utterances: int = 4, max_utterances: int = 10,
                           name: str = "imbalanced") -> Corpus:
    """Two-emotion corpus where the minority class has only a noisy cue.

    The cue word appears in ``cue_given_minority`` of minority utterances and
    ``cue_given_majority`` of majority ones, so an unweighted classifier does
    best by ignoring it while a frequency-weighted one does not.
    """
    rng = np.random.default_rng(seed)
    dialogues = []
    for di in range(n_dialogues):
        n = int(rng.integers(min_utterances, max_utterances + 1))
        topic = _topic(rng)
        utts = []
        for _ in range(n):
            label = minority if rng.random() < minority_fraction else majority
            p_cue = cue_given_minority if label == minority else cue_given_majority
            if rng.random() < p_cue:
                marker = IMBALANCE_MARKER
            else:
                marker = MARKERS[majority][int(rng.integers(len(MARKERS[majority])))]
            utts.append(_utterance(rng, topic, marker, label))
        dialogues.append(Dialogue(tuple(utts), f"{name}:{di}"))
    return Corpus(tuple(dialogues), name)
