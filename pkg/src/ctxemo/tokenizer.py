"""Subword vocabulary, greedy longest-match tokenization and dialogue packing."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Dialogue
from .errors import VocabError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100
DEFAULT_MAX_LEN = 512


class TokenVocabulary:
    """Immutable token <-> id mapping with the five special tokens."""

    def __init__(self, tokens):
        tokens = list(tokens)
        token_to_id = {}
        for i, tok in enumerate(tokens):
            if tok == "":
                raise VocabError(f"empty token at line {i}")
            if tok in token_to_id:
                raise VocabError(f"duplicate token {tok!r} at lines {token_to_id[tok]} and {i}")
            token_to_id[tok] = i
        for special in SPECIAL_TOKENS:
            if special not in token_to_id:
                raise VocabError(f"missing special token {special}")
        self._tokens = tuple(tokens)
        self._token_to_id = token_to_id
        self.pad_id = token_to_id[PAD]
        self.unk_id = token_to_id[UNK]
        self.cls_id = token_to_id[CLS]
        self.sep_id = token_to_id[SEP]
        self.mask_id = token_to_id[MASK]
        self.special_ids = frozenset(token_to_id[s] for s in SPECIAL_TOKENS)
        self.regular_ids = np.array(
            [i for i in range(len(tokens)) if i not in self.special_ids], dtype=np.int64
        )

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._token_to_id

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> TokenVocabulary:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return TokenVocabulary(line.rstrip("\r") for line in lines)


def build_vocab(corpora, min_count: int = 1, extra_tokens=()) -> TokenVocabulary:
    """Whole-word vocabulary over the pre-tokenized words of ``corpora``."""
    if isinstance(corpora, Corpus):
        corpora = [corpora]
    counts = Counter()
    for corpus in corpora:
        for dia in corpus:
            for utt in dia.utterances:
                counts.update(basic_tokenize(utt.text))
    words = sorted(w for w, c in counts.items() if c >= min_count)
    extra = [t for t in extra_tokens if t not in SPECIAL_TOKENS and t not in counts]
    return TokenVocabulary([*SPECIAL_TOKENS, *words, *extra])


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and isolate punctuation characters."""
    words = []
    for chunk in text.lower().split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def wordpiece(word: str, vocab: TokenVocabulary) -> list[int]:
    """Greedy longest-match decomposition of one word; the whole word is UNK on failure."""
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(vocab.id(found))
        start = end
    return pieces


def tokenize_utterance(text: str, vocab: TokenVocabulary) -> list[int]:
    ids = []
    for word in basic_tokenize(text):
        ids.extend(wordpiece(word, vocab))
    return ids


@dataclass(frozen=True)
class PackedDialogue:
    token_ids: np.ndarray
    spans: tuple[tuple[int, int], ...]
    included_utterance_indices: tuple[int, ...]
    excluded_utterance_indices: tuple[int, ...]
    max_len: int

    @property
    def n_utterances(self) -> int:
        return len(self.included_utterance_indices) + len(self.excluded_utterance_indices)

    @property
    def starts(self) -> np.ndarray:
        return np.array([s for s, _ in self.spans], dtype=np.int64)

    @property
    def ends(self) -> np.ndarray:
        return np.array([e for _, e in self.spans], dtype=np.int64)


def pack_token_lists(token_lists, vocab: TokenVocabulary, max_len: int) -> PackedDialogue:
    """Pack pre-tokenized utterances as ``[CLS] u1 [SEP] u2 [SEP] ...``.

    Packing stops at the first utterance that would push the sequence past
    ``max_len``; it and every later utterance are excluded.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    ids = [vocab.cls_id]
    spans = []
    included = []
    n = len(token_lists)
    stop = n
    for i, toks in enumerate(token_lists):
        if len(ids) + len(toks) + 1 > max_len:
            stop = i
            break
        spans.append((len(ids), len(ids) + len(toks)))
        ids.extend(toks)
        ids.append(vocab.sep_id)
        included.append(i)
    if not included:
        # nothing fits: keep the bare [CLS] [SEP] frame so the encoder still has input
        ids = [vocab.cls_id, vocab.sep_id]
    return PackedDialogue(
        token_ids=np.array(ids, dtype=np.int64),
        spans=tuple(spans),
        included_utterance_indices=tuple(included),
        excluded_utterance_indices=tuple(range(stop, n)),
        max_len=max_len,
    )


def pack_dialogue(dialogue: Dialogue, vocab: TokenVocabulary, max_len: int = DEFAULT_MAX_LEN) -> PackedDialogue:
    return pack_token_lists(
        [tokenize_utterance(u.text, vocab) for u in dialogue.utterances], vocab, max_len
    )
