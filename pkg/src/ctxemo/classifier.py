"""Two-layer SELU classification head and the class-weighted cross entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import NUM_CLASSES, EmotionLabel
from .errors import LossError, ShapeError, WeightError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
PROB_EPS = 1e-12


def selu(x):
    x = np.asarray(x, dtype=float) if np.isscalar(x) else x
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0))
    return SELU_LAMBDA * np.where(x > 0, x, neg)


def selu_grad(x):
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0))).astype(x.dtype)


@dataclass(frozen=True)
class ClassifierConfig:
    d_model: int
    d_hidden: int
    dropout_rate: float = 0.1
    n_classes: int = NUM_CLASSES

    @classmethod
    def for_encoder(cls, d_model: int, dropout_rate: float = 0.1) -> "ClassifierConfig":
        # hidden size follows the 768 -> 384 halving
        return cls(d_model=d_model, d_hidden=max(1, d_model // 2), dropout_rate=dropout_rate)


def init_classifier_params(config: ClassifierConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    std = 0.02
    return {
        "classifier/w1": (rng.standard_normal((config.d_model, config.d_hidden)) * std).astype(dtype),
        "classifier/b1": np.zeros(config.d_hidden, dtype),
        "classifier/w2": (rng.standard_normal((config.d_hidden, config.n_classes)) * std).astype(dtype),
        "classifier/b2": np.zeros(config.n_classes, dtype),
    }


@dataclass(frozen=True)
class PredictionDistribution:
    probabilities: np.ndarray
    predicted_label: EmotionLabel


@dataclass
class ClassifierCache:
    x: np.ndarray
    z1: np.ndarray
    h: np.ndarray
    keep: np.ndarray | None
    probs: np.ndarray


def classify_forward(utt_reps, params: dict, config: ClassifierConfig, mode: str = "inference", rng=None):
    """Returns ``(probabilities [n, classes], cache)``."""
    w1, b1 = params["classifier/w1"], params["classifier/b1"]
    w2, b2 = params["classifier/w2"], params["classifier/b2"]
    if utt_reps.ndim != 2 or utt_reps.shape[1] != w1.shape[0]:
        raise ShapeError(f"utterance representations {utt_reps.shape} do not match W1 {w1.shape}")
    z1 = utt_reps @ w1 + b1
    h = selu(z1)
    keep = None
    if mode == "train" and config.dropout_rate > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        keep = ((rng.random(h.shape) >= config.dropout_rate) / (1.0 - config.dropout_rate)).astype(h.dtype)
        h = h * keep
    logits = h @ w2 + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, ClassifierCache(utt_reps, z1, h, keep, probs)


def classify(utt_reps, params: dict, config: ClassifierConfig, mode: str = "inference", rng=None):
    probs, _ = classify_forward(utt_reps, params, config, mode, rng)
    return [PredictionDistribution(p, EmotionLabel(int(np.argmax(p)))) for p in probs]


def classify_backward(dprobs_logits, cache: ClassifierCache, params: dict):
    """Backprop from d(loss)/d(logits). Returns ``(d_utt_reps, grads)``."""
    w1, w2 = params["classifier/w1"], params["classifier/w2"]
    grads = {
        "classifier/w2": cache.h.T @ dprobs_logits,
        "classifier/b2": dprobs_logits.sum(axis=0),
    }
    dh = dprobs_logits @ w2.T
    if cache.keep is not None:
        dh = dh * cache.keep
    dz1 = dh * selu_grad(cache.z1)
    grads["classifier/w1"] = cache.x.T @ dz1
    grads["classifier/b1"] = dz1.sum(axis=0)
    return dz1 @ w1.T, grads


@dataclass(frozen=True)
class ClassWeights:
    weights: dict  # EmotionLabel -> float, only classes seen in training

    def as_array(self, n_classes: int = NUM_CLASSES) -> np.ndarray:
        arr = np.full(n_classes, np.nan)
        for lab, w in self.weights.items():
            arr[int(lab)] = w
        return arr

    @classmethod
    def uniform(cls, labels=tuple(EmotionLabel)) -> "ClassWeights":
        return cls({EmotionLabel(l): 1.0 for l in labels})


def class_weights(counts: dict, required=()) -> ClassWeights:
    """Inverse-frequency weights: total count divided by the class count.

    Classes with a zero count get no weight; naming one in ``required`` is an error.
    """
    total = sum(counts.values())
    if total <= 0:
        raise WeightError("class counts are all zero")
    for lab in required:
        if counts.get(lab, 0) <= 0:
            raise WeightError(f"class {EmotionLabel(lab).display} has no training samples")
    return ClassWeights({EmotionLabel(lab): total / x for lab, x in counts.items() if x > 0})


def _gold_weights(gold, weights: ClassWeights):
    arr = weights.as_array()
    w = arr[gold]
    if np.any(np.isnan(w)):
        missing = EmotionLabel(int(gold[np.isnan(w)][0]))
        raise WeightError(f"no class weight for {missing.display}")
    return w


def wce_loss_and_grad(probs, gold, weights: ClassWeights):
    """Weighted mean cross entropy and its gradient w.r.t. the pre-softmax logits."""
    probs = np.asarray(probs)
    gold = np.asarray(gold, dtype=np.int64)
    if len(gold) == 0 or len(gold) != len(probs):
        raise LossError(f"need equal, non-empty batches; got {len(probs)} predictions, {len(gold)} golds")
    n = len(gold)
    w = _gold_weights(gold, weights)
    pg = probs[np.arange(n), gold]
    loss = float(np.mean(w * -np.log(np.maximum(pg, PROB_EPS))))
    dlogits = probs.astype(probs.dtype, copy=True)
    dlogits[np.arange(n), gold] -= 1.0
    # a clamped row has a locally constant loss
    scale = np.where(pg > PROB_EPS, w / n, 0.0).astype(probs.dtype)
    return loss, dlogits * scale[:, None]


def wce_loss(predictions, gold, weights: ClassWeights) -> float:
    if isinstance(predictions, (list, tuple)) and predictions and isinstance(predictions[0], PredictionDistribution):
        probs = np.stack([p.probabilities for p in predictions])
    else:
        probs = np.asarray(predictions)
    return wce_loss_and_grad(probs, [int(g) for g in gold], weights)[0]
