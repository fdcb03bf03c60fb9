"""Shared test utilities: tiny corpora, vocabularies and finite differences."""

import numpy as np

from ctxemo.corpus import Corpus, Dialogue, EmotionLabel, Utterance
from ctxemo.tokenizer import SPECIAL_TOKENS, TokenVocabulary

WORDS = ["good", "bad", "day", "cake", "joey", "ross", "i", "you", "love", "hate", "the", ".", "!", "?", ",", "##s"]


def small_vocab(extra=()):
    return TokenVocabulary([*SPECIAL_TOKENS, *WORDS, *extra])


def dialogue(labels, texts=None, did="d"):
    utts = []
    for i, lab in enumerate(labels):
        text = texts[i] if texts else f"i love the cake {i}"
        utts.append(Utterance("A" if i % 2 == 0 else "B", text, None if lab is None else EmotionLabel(lab)))
    return Dialogue(tuple(utts), did)


def corpus(label_lists, name="c"):
    return Corpus(tuple(dialogue(l, did=f"{name}:{i}") for i, l in enumerate(label_lists)), name)


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return num / den


def check_grads(f, params, analytic, eps=1e-5):
    """Relative error per tensor; tensors absent from ``analytic`` must have zero numeric gradient."""
    errors = {}
    for name, arr in params.items():
        num = numeric_grad(f, arr, eps)
        ana = analytic.get(name, np.zeros_like(arr))
        errors[name] = rel_error(ana, num)
    return errors
