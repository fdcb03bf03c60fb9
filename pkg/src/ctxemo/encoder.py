"""Self-attention encoder with hand-written backward passes, plus MLM/NSP heads.

Parameters live in a flat ``dict`` keyed by tensor path (``encoder/layer0/attn/wq``
and so on); the same paths are used for gradients, optimizer state and the
checkpoint archive.  All math follows the dtype of the parameter arrays, so
float64 copies of a float32 model give double-precision gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .corpus import Corpus
from .errors import EmbeddingError, LossError, NumericError, ShapeError
from .tokenizer import PackedDialogue, TokenVocabulary, tokenize_utterance

Params = dict  # str -> np.ndarray

CONSECUTIVE, RANDOM = 0, 1
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_positions: int = 512
    dropout_rate: float = 0.1
    activation: str = "gelu"
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


PRESETS = {
    "toy": dict(n_layers=2, n_heads=4, d_model=64, d_ff=256, max_positions=512),
    "paper-scale": dict(n_layers=12, n_heads=12, d_model=768, d_ff=3072, max_positions=512),
}


def preset(name: str, vocab_size: int, **overrides) -> EncoderConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return EncoderConfig(vocab_size=vocab_size, **base)


def _relu(x):
    return np.maximum(x, 0)


def _relu_backward(dy, x):
    return dy * (x > 0)


ACTIVATIONS = {
    "gelu": (kernels.gelu, kernels.gelu_backward),
    "relu": (_relu, _relu_backward),
}


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)

    p = {
        "encoder/token_embedding": normal(v, d),
        "encoder/position_embedding": normal(config.max_positions, d),
        "encoder/segment_embedding": normal(2, d),
    }
    for i in range(config.n_layers):
        pre = f"encoder/layer{i}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{pre}/attn/{name}"] = normal(d, d)
            p[f"{pre}/attn/b{name[1]}"] = np.zeros(d, dtype)
        p[f"{pre}/ln1/gain"] = np.ones(d, dtype)
        p[f"{pre}/ln1/bias"] = np.zeros(d, dtype)
        p[f"{pre}/ffn/w1"] = normal(d, f)
        p[f"{pre}/ffn/b1"] = np.zeros(f, dtype)
        p[f"{pre}/ffn/w2"] = normal(f, d)
        p[f"{pre}/ffn/b2"] = np.zeros(d, dtype)
        p[f"{pre}/ln2/gain"] = np.ones(d, dtype)
        p[f"{pre}/ln2/bias"] = np.zeros(d, dtype)
    p["encoder/mlm/w"] = normal(d, v)
    p["encoder/mlm/b"] = np.zeros(v, dtype)
    p["encoder/nsp/w"] = normal(d, 2)
    p["encoder/nsp/b"] = np.zeros(2, dtype)
    return p


# --------------------------------------------------------------------------
# embedding
# --------------------------------------------------------------------------


def embed(tokens, params: Params, segments=None) -> np.ndarray:
    """Token + position embeddings (+ segment embeddings when ``segments`` is given)."""
    ids = tokens.token_ids if isinstance(tokens, PackedDialogue) else np.asarray(tokens, dtype=np.int64)
    tok = params["encoder/token_embedding"]
    pos = params["encoder/position_embedding"]
    if ids.size and (ids.min() < 0 or ids.max() >= tok.shape[0]):
        bad = ids[(ids < 0) | (ids >= tok.shape[0])][0]
        raise EmbeddingError(f"token id {bad} outside vocabulary of size {tok.shape[0]}")
    if len(ids) > pos.shape[0]:
        raise EmbeddingError(f"sequence length {len(ids)} exceeds max_positions {pos.shape[0]}")
    out = tok[ids] + pos[: len(ids)]
    if segments is not None:
        out = out + params["encoder/segment_embedding"][np.asarray(segments, dtype=np.int64)]
    return out


def embed_backward(dx, tokens, params: Params, segments=None) -> dict:
    ids = tokens.token_ids if isinstance(tokens, PackedDialogue) else np.asarray(tokens, dtype=np.int64)
    g_tok = np.zeros_like(params["encoder/token_embedding"])
    np.add.at(g_tok, ids, dx)
    g_pos = np.zeros_like(params["encoder/position_embedding"])
    g_pos[: len(ids)] = dx
    grads = {"encoder/token_embedding": g_tok, "encoder/position_embedding": g_pos}
    if segments is not None:
        g_seg = np.zeros_like(params["encoder/segment_embedding"])
        np.add.at(g_seg, np.asarray(segments, dtype=np.int64), dx)
        grads["encoder/segment_embedding"] = g_seg
    return grads


# --------------------------------------------------------------------------
# encoder stack
# --------------------------------------------------------------------------


def _softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _mask_bias(mask, n, dtype):
    if mask is None:
        return np.zeros((1, 1, n), dtype=dtype)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        if mask.shape[0] != n:
            raise ShapeError(f"mask length {mask.shape[0]} != sequence length {n}")
        return np.where(mask, 0.0, -np.inf).astype(dtype)[None, None, :]
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} != ({n}, {n})")
    return np.where(mask, 0.0, -np.inf).astype(dtype)[None, :, :]


def _dropout_mask(shape, rate, rng, dtype):
    if rng is None:
        raise ValueError("train mode with dropout needs an rng")
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


@dataclass
class _LayerCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    probs_d: np.ndarray
    ctx: np.ndarray
    keep_attn: np.ndarray | None
    keep_out: np.ndarray | None
    xhat1: np.ndarray
    inv1: np.ndarray
    h1: np.ndarray
    f_pre: np.ndarray
    f_act: np.ndarray
    keep_ffn: np.ndarray | None
    xhat2: np.ndarray
    inv2: np.ndarray


@dataclass
class EncoderCache:
    layers: list = field(default_factory=list)

    @property
    def attention(self) -> list[np.ndarray]:
        """Per-layer attention probabilities, each ``(heads, T, T)``."""
        return [c.probs for c in self.layers]


def _layer_forward(x, bias, p, pre, cfg, train, rng):
    T, d = x.shape
    h, dh = cfg.n_heads, cfg.head_dim
    rate = cfg.dropout_rate if train else 0.0
    q = x @ p[f"{pre}/attn/wq"] + p[f"{pre}/attn/bq"]
    k = x @ p[f"{pre}/attn/wk"] + p[f"{pre}/attn/bk"]
    v = x @ p[f"{pre}/attn/wv"] + p[f"{pre}/attn/bv"]
    qh = q.reshape(T, h, dh).transpose(1, 0, 2)
    kh = k.reshape(T, h, dh).transpose(1, 0, 2)
    vh = v.reshape(T, h, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh)) + bias
    probs = _softmax(scores)
    keep_attn = keep_out = keep_ffn = None
    probs_d = probs
    if rate > 0:
        keep_attn = _dropout_mask(probs.shape, rate, rng, x.dtype)
        probs_d = probs * keep_attn
    ctx = (probs_d @ vh).transpose(1, 0, 2).reshape(T, d)
    o = ctx @ p[f"{pre}/attn/wo"] + p[f"{pre}/attn/bo"]
    if rate > 0:
        keep_out = _dropout_mask(o.shape, rate, rng, x.dtype)
        o = o * keep_out
    h1, xhat1, inv1 = kernels.layer_norm(x + o, p[f"{pre}/ln1/gain"], p[f"{pre}/ln1/bias"], cfg.layer_norm_eps)
    act, _ = ACTIVATIONS[cfg.activation]
    f_pre = h1 @ p[f"{pre}/ffn/w1"] + p[f"{pre}/ffn/b1"]
    f_act = act(f_pre)
    f = f_act @ p[f"{pre}/ffn/w2"] + p[f"{pre}/ffn/b2"]
    if rate > 0:
        keep_ffn = _dropout_mask(f.shape, rate, rng, x.dtype)
        f = f * keep_ffn
    out, xhat2, inv2 = kernels.layer_norm(h1 + f, p[f"{pre}/ln2/gain"], p[f"{pre}/ln2/bias"], cfg.layer_norm_eps)
    cache = _LayerCache(x, qh, kh, vh, probs, probs_d, ctx, keep_attn, keep_out,
                        xhat1, inv1, h1, f_pre, f_act, keep_ffn, xhat2, inv2)
    return out, cache


def _layer_backward(dout, c: _LayerCache, p, pre, cfg, grads):
    T, d = dout.shape
    h, dh = cfg.n_heads, cfg.head_dim
    dr2, grads[f"{pre}/ln2/gain"], grads[f"{pre}/ln2/bias"] = kernels.layer_norm_backward(
        dout, c.xhat2, c.inv2, p[f"{pre}/ln2/gain"]
    )
    df = dr2 if c.keep_ffn is None else dr2 * c.keep_ffn
    grads[f"{pre}/ffn/w2"] = c.f_act.T @ df
    grads[f"{pre}/ffn/b2"] = df.sum(axis=0)
    _, act_back = ACTIVATIONS[cfg.activation]
    dpre = act_back(df @ p[f"{pre}/ffn/w2"].T, c.f_pre)
    grads[f"{pre}/ffn/w1"] = c.h1.T @ dpre
    grads[f"{pre}/ffn/b1"] = dpre.sum(axis=0)
    dh1 = dr2 + dpre @ p[f"{pre}/ffn/w1"].T
    dr1, grads[f"{pre}/ln1/gain"], grads[f"{pre}/ln1/bias"] = kernels.layer_norm_backward(
        dh1, c.xhat1, c.inv1, p[f"{pre}/ln1/gain"]
    )
    do = dr1 if c.keep_out is None else dr1 * c.keep_out
    grads[f"{pre}/attn/wo"] = c.ctx.T @ do
    grads[f"{pre}/attn/bo"] = do.sum(axis=0)
    dctx = (do @ p[f"{pre}/attn/wo"].T).reshape(T, h, dh).transpose(1, 0, 2)
    dprobs = dctx @ c.v.transpose(0, 2, 1)
    dvh = c.probs_d.transpose(0, 2, 1) @ dctx
    if c.keep_attn is not None:
        dprobs = dprobs * c.keep_attn
    dscores = c.probs * (dprobs - (dprobs * c.probs).sum(axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(dh)
    dqh = (dscores @ c.k) * scale
    dkh = (dscores.transpose(0, 2, 1) @ c.q) * scale
    dq = dqh.transpose(1, 0, 2).reshape(T, d)
    dk = dkh.transpose(1, 0, 2).reshape(T, d)
    dv = dvh.transpose(1, 0, 2).reshape(T, d)
    x = c.x
    dx = dr1.copy()
    for name, g in (("q", dq), ("k", dk), ("v", dv)):
        grads[f"{pre}/attn/w{name}"] = x.T @ g
        grads[f"{pre}/attn/b{name}"] = g.sum(axis=0)
        dx += g @ p[f"{pre}/attn/w{name}"].T
    return dx


def encode_forward(embeddings, attention_mask, params: Params, config: EncoderConfig,
                   mode: str = "inference", rng=None):
    """Run the encoder stack; returns ``(representations, cache)``."""
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    x = embeddings
    bias = _mask_bias(attention_mask, x.shape[0], x.dtype)
    cache = EncoderCache()
    for i in range(config.n_layers):
        x, lc = _layer_forward(x, bias, params, f"encoder/layer{i}", config, mode == "train", rng)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations after encoder layer {i}")
        cache.layers.append(lc)
    return x, cache


def encode(embeddings, attention_mask, params: Params, config: EncoderConfig,
           mode: str = "inference", rng=None) -> np.ndarray:
    return encode_forward(embeddings, attention_mask, params, config, mode, rng)[0]


def encode_backward(dreps, cache: EncoderCache, params: Params, config: EncoderConfig) -> tuple[np.ndarray, dict]:
    """Backprop through the stack. Returns ``(d_embeddings, grads)``."""
    grads = {}
    dx = dreps
    for i in reversed(range(config.n_layers)):
        dx = _layer_backward(dx, cache.layers[i], params, f"encoder/layer{i}", config, grads)
    return dx, grads


# --------------------------------------------------------------------------
# post-training objectives
# --------------------------------------------------------------------------


def mask_tokens(token_ids, vocab: TokenVocabulary, rate: float, rng: np.random.Generator,
                protected=None):
    """BERT-style corruption: of the selected positions 80% -> [MASK], 10% random, 10% kept.

    ``protected`` marks positions that can never be selected; by default every
    special-token position is protected.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must lie in (0, 1), got {rate}")
    ids = np.asarray(token_ids, dtype=np.int64)
    if protected is None:
        protected = np.isin(ids, list(vocab.special_ids))
    protected = np.asarray(protected, dtype=bool)
    selected = (rng.random(len(ids)) < rate) & ~protected
    action = rng.random(len(ids))
    random_ids = rng.choice(vocab.regular_ids, size=len(ids))
    corrupted = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    corrupted[to_mask] = vocab.mask_id
    corrupted[to_random] = random_ids[to_random]
    targets = {int(i): int(ids[i]) for i in np.flatnonzero(selected)}
    return corrupted, targets


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mlm_loss_and_grad(reps, targets: dict, params: Params):
    """Mean masked-token cross entropy and its gradients.

    Returns ``(loss, d_reps, grads)`` where grads covers the MLM head.
    """
    if not targets:
        raise LossError("mlm_loss needs at least one target position")
    pos = np.fromiter(targets.keys(), dtype=np.int64)
    gold = np.fromiter(targets.values(), dtype=np.int64)
    w, b = params["encoder/mlm/w"], params["encoder/mlm/b"]
    hsel = reps[pos]
    logp = _log_softmax(hsel @ w + b)
    n = len(pos)
    loss = float(-logp[np.arange(n), gold].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), gold] -= 1.0
    dlogits /= n
    dreps = np.zeros_like(reps)
    np.add.at(dreps, pos, dlogits @ w.T)
    grads = {"encoder/mlm/w": hsel.T @ dlogits, "encoder/mlm/b": dlogits.sum(axis=0)}
    return loss, dreps, grads


def mlm_loss(reps, targets: dict, params: Params) -> float:
    return mlm_loss_and_grad(reps, targets, params)[0]


def nsp_loss_and_grad(cls_rep, label: int, params: Params):
    """Two-way cross entropy on the NSP head. Returns ``(loss, d_cls_rep, grads)``."""
    w, b = params["encoder/nsp/w"], params["encoder/nsp/b"]
    logp = _log_softmax(cls_rep @ w + b)
    loss = float(-logp[label])
    dlogits = np.exp(logp)
    dlogits[label] -= 1.0
    grads = {"encoder/nsp/w": np.outer(cls_rep, dlogits), "encoder/nsp/b": dlogits}
    return loss, dlogits @ w.T, grads


def nsp_loss(cls_rep, label: int, params: Params) -> float:
    return nsp_loss_and_grad(cls_rep, label, params)[0]


@dataclass(frozen=True)
class NspPair:
    token_ids: np.ndarray
    segments: np.ndarray
    label: int


def _truncate_pair(a, b, budget):
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def make_pair(a, b, label, vocab: TokenVocabulary, max_len: int) -> NspPair:
    a, b = _truncate_pair(a, b, max_len - 3)
    ids = [vocab.cls_id, *a, vocab.sep_id, *b, vocab.sep_id]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return NspPair(np.array(ids, dtype=np.int64), np.array(segments, dtype=np.int64), label)


def build_nsp_pairs(corpus: Corpus, vocab: TokenVocabulary, max_len: int, rng: np.random.Generator):
    """Endless stream of NSP pairs: half consecutive utterances, half cross-dialogue."""
    if len(corpus) < 2:
        raise ValueError("NSP pairs need at least two dialogues")
    if max_len < 5:
        raise ValueError(f"max_len must be >= 5 for a pair, got {max_len}")
    tokenized = [[tokenize_utterance(u.text, vocab) for u in d.utterances] for d in corpus]
    multi = [i for i, d in enumerate(tokenized) if len(d) >= 2]
    if not multi:
        raise ValueError("NSP pairs need at least one dialogue with two utterances")
    n = len(tokenized)
    while True:
        if rng.random() < 0.5:
            di = multi[rng.integers(len(multi))]
            ui = int(rng.integers(len(tokenized[di]) - 1))
            yield make_pair(tokenized[di][ui], tokenized[di][ui + 1], CONSECUTIVE, vocab, max_len)
        else:
            di = int(rng.integers(n))
            dj = int(rng.integers(n - 1))
            dj += dj >= di
            a = tokenized[di][rng.integers(len(tokenized[di]))]
            b = tokenized[dj][rng.integers(len(tokenized[dj]))]
            yield make_pair(a, b, RANDOM, vocab, max_len)


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


def with_dropout(config: EncoderConfig, rate: float) -> EncoderConfig:
    return replace(config, dropout_rate=rate)
