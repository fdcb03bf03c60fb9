"""Optimizer, learning-rate schedule, fine-tuning, post-training and k-fold ensembling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .checkpoint import load_archive, save_archive
from .classifier import (
    ClassifierConfig,
    ClassWeights,
    class_weights,
    classify_backward,
    classify_forward,
    init_classifier_params,
    wce_loss_and_grad,
)
from .corpus import Corpus, Dialogue, EmotionLabel, class_counts, merge_corpora, split_folds
from .encoder import (
    EncoderConfig,
    build_nsp_pairs,
    embed,
    embed_backward,
    encode_backward,
    encode_forward,
    init_encoder_params,
    mask_tokens,
    mlm_loss_and_grad,
    nsp_loss_and_grad,
)
from .errors import TrainingError
from .evaluation import build_report
from .pooling import pool_backward, pool_forward
from .tokenizer import PackedDialogue, TokenVocabulary, pack_dialogue

log = logging.getLogger(__name__)

EXCLUDED_FALLBACK = "excluded_fallback"


# --------------------------------------------------------------------------
# schedule / clipping / Adam
# --------------------------------------------------------------------------


@dataclass
class SchedulerState:
    eta_max: float
    eta_min: float
    T_i: float
    T_cur: float = 0.0
    run_index: int = 0

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError("eta_min must not exceed eta_max")
        if not 0 <= self.T_cur <= self.T_i:
            raise ValueError(f"T_cur={self.T_cur} outside [0, {self.T_i}]")


def cosine_lr(state: SchedulerState) -> float:
    return state.eta_min + 0.5 * (state.eta_max - state.eta_min) * (
        1.0 + math.cos(math.pi * state.T_cur / state.T_i)
    )


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Rescale all tensors together when their joint L2 norm exceeds ``clip_norm``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float):
    """Bias-corrected Adam, in place. Parameters without a gradient are left alone."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# configuration and model container
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size_dialogues: int = 1
    eta_max: float = 2e-5
    eta_min: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    pooling_mode: str = "max"
    max_len: int = 512
    encoder_dropout: float = 0.1
    classifier_dropout: float = 0.1
    class_weighting: bool = True
    scheduler_granularity: str = "step"
    post_train_steps: int = 0
    post_train_lr: float = 2e-3
    post_train_batch: int = 8
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.pooling_mode not in ("max", "mean"):
            raise ValueError(f"pooling_mode must be 'max' or 'mean', got {self.pooling_mode!r}")
        if self.scheduler_granularity not in ("step", "epoch"):
            raise ValueError("scheduler_granularity must be 'step' or 'epoch'")
        if self.batch_size_dialogues < 1:
            raise ValueError("batch_size_dialogues must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Model:
    encoder_config: EncoderConfig
    classifier_config: ClassifierConfig
    params: dict
    pooling_mode: str = "max"
    max_len: int = 512
    class_frequency: dict = field(default_factory=dict)  # EmotionLabel -> training count

    @property
    def majority_label(self) -> EmotionLabel:
        if not self.class_frequency or not any(self.class_frequency.values()):
            return EmotionLabel.NEUTRAL
        return max(EmotionLabel, key=lambda c: (self.class_frequency.get(c, 0), -int(c)))

    def meta(self) -> dict:
        return {
            "encoder_config": self.encoder_config.to_dict(),
            "classifier_config": asdict(self.classifier_config),
            "pooling_mode": self.pooling_mode,
            "max_len": self.max_len,
            "class_frequency": {c.display: n for c, n in self.class_frequency.items()},
        }

    def save(self, path, extra_tensors: dict | None = None, extra_meta: dict | None = None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        save_archive(path, {**self.params, **(extra_tensors or {})}, meta)

    @classmethod
    def load(cls, path) -> "Model":
        tensors, meta = load_archive(path)
        params = {k: v for k, v in tensors.items() if k.startswith(("encoder/", "classifier/"))}
        return cls(
            encoder_config=EncoderConfig.from_dict(meta["encoder_config"]),
            classifier_config=ClassifierConfig(**meta["classifier_config"]),
            params=params,
            pooling_mode=meta.get("pooling_mode", "max"),
            max_len=meta.get("max_len", 512),
            class_frequency={EmotionLabel.from_display(k): v for k, v in meta.get("class_frequency", {}).items()},
        )


def _rngs(seed: int):
    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss),
            np.random.default_rng(dropout_ss))


def new_model(encoder_config: EncoderConfig, config: TrainConfig, init: dict | None = None) -> Model:
    init_rng, _, _ = _rngs(config.seed)
    enc_cfg = replace(encoder_config, dropout_rate=config.encoder_dropout)
    params = init_encoder_params(enc_cfg, init_rng)
    cls_cfg = ClassifierConfig.for_encoder(enc_cfg.d_model, config.classifier_dropout)
    params.update(init_classifier_params(cls_cfg, init_rng))
    if init:
        for k, v in init.items():
            if k in params and params[k].shape != v.shape:
                raise TrainingError(f"init tensor {k} has shape {v.shape}, expected {params[k].shape}")
            params[k] = v.astype(np.float32, copy=True)
    return Model(enc_cfg, cls_cfg, params, config.pooling_mode, config.max_len)


# --------------------------------------------------------------------------
# per-dialogue forward / backward
# --------------------------------------------------------------------------


def dialogue_forward(model: Model, packed: PackedDialogue, mode: str = "inference", rng=None):
    x = embed(packed.token_ids, model.params)
    reps, ecache = encode_forward(x, None, model.params, model.encoder_config, mode, rng)
    pooled, pcache = pool_forward(reps, packed.spans, model.pooling_mode)
    probs, ccache = classify_forward(pooled, model.params, model.classifier_config, mode, rng)
    return probs, (packed, ecache, pcache, ccache)


def dialogue_backward(model: Model, dlogits, caches) -> dict:
    packed, ecache, pcache, ccache = caches
    dpooled, grads = classify_backward(dlogits, ccache, model.params)
    dreps = pool_backward(dpooled, pcache)
    dx, egrads = encode_backward(dreps, ecache, model.params, model.encoder_config)
    grads.update(egrads)
    grads.update(embed_backward(dx, packed.token_ids, model.params))
    return grads


def dialogue_loss_and_grads(model: Model, packed: PackedDialogue, gold, weights: ClassWeights,
                            mode: str = "train", rng=None):
    probs, caches = dialogue_forward(model, packed, mode, rng)
    loss, dlogits = wce_loss_and_grad(probs, gold, weights)
    return loss, dialogue_backward(model, dlogits, caches)


def _accumulate(total: dict, grads: dict, scale: float) -> None:
    for k, g in grads.items():
        if k in total:
            total[k] += g * scale
        else:
            total[k] = g * scale


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class UtterancePrediction:
    index: int
    label: EmotionLabel
    flags: tuple = ()
    probabilities: np.ndarray | None = None


def predict_dialogue(model: Model, dialogue: Dialogue, vocab: TokenVocabulary) -> list[UtterancePrediction]:
    packed = pack_dialogue(dialogue, vocab, model.max_len)
    out = {}
    if packed.spans:
        probs, _ = dialogue_forward(model, packed, "inference")
        for row, idx in enumerate(packed.included_utterance_indices):
            out[idx] = UtterancePrediction(idx, EmotionLabel(int(np.argmax(probs[row]))), (), probs[row])
    fallback = model.majority_label
    for idx in packed.excluded_utterance_indices:
        out[idx] = UtterancePrediction(idx, fallback, (EXCLUDED_FALLBACK,), None)
    return [out[i] for i in range(len(dialogue))]


def predict_corpus(model, corpus: Corpus, vocab: TokenVocabulary) -> list[list[UtterancePrediction]]:
    if isinstance(model, EnsembleModel):
        return [ensemble_predict(model, d, vocab) for d in corpus]
    return [predict_dialogue(model, d, vocab) for d in corpus]


def corpus_micro_f1(model, corpus: Corpus, vocab: TokenVocabulary, evaluated_classes=None) -> float:
    preds = predict_corpus(model, corpus, vocab)
    flat_p = [p.label for dia in preds for p in dia]
    flat_g = [u.gold_label for d in corpus for u in d.utterances]
    kwargs = {} if evaluated_classes is None else {"evaluated_classes": evaluated_classes}
    return build_report(flat_p, flat_g, **kwargs).micro_f1


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    lr: float
    val_micro_f1: float | None
    skipped_dialogues: int

    def to_dict(self) -> dict:
        return asdict(self)


def train(train_corpus: Corpus, val_corpus: Corpus | None, vocab: TokenVocabulary, config: TrainConfig,
          encoder_config: EncoderConfig, init=None, evaluated_classes=None):
    """Fine-tune encoder + classifier on whole dialogues.

    ``init`` may be a :class:`Model` (returned as-is when ``epochs == 0``) or a
    dict of tensors (e.g. post-trained encoder weights). Returns ``(model, log)``.
    """
    if not train_corpus.is_labeled():
        raise TrainingError(f"training corpus {train_corpus.name!r} has unlabeled utterances")
    if isinstance(init, Model):
        model = Model(init.encoder_config, init.classifier_config,
                      {k: v.copy() for k, v in init.params.items()},
                      init.pooling_mode, init.max_len, dict(init.class_frequency))
        if config.epochs == 0:
            return model, []
        model.pooling_mode = config.pooling_mode
        model.max_len = config.max_len
    else:
        model = new_model(encoder_config, config, init)
    counts = class_counts(train_corpus)
    model.class_frequency = counts
    if config.epochs == 0:
        return model, []
    weights = class_weights(counts) if config.class_weighting else ClassWeights.uniform()

    _, shuffle_rng, dropout_rng = _rngs(config.seed)
    packed = [pack_dialogue(d, vocab, config.max_len) for d in train_corpus]
    golds = [np.array([int(d.utterances[i].gold_label) for i in p.included_utterance_indices], dtype=np.int64)
             for d, p in zip(train_corpus, packed)]
    n = len(packed)
    steps_per_epoch = math.ceil(n / config.batch_size_dialogues)
    opt = OptimizerState()
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses, lr = [], config.eta_max
        for b in range(steps_per_epoch):
            batch = [i for i in order[b * config.batch_size_dialogues:(b + 1) * config.batch_size_dialogues]
                     if packed[i].spans]
            if not batch:
                continue
            n_utts = sum(len(golds[i]) for i in batch)
            grads: dict = {}
            batch_loss = 0.0
            for i in batch:
                loss, g = dialogue_loss_and_grads(model, packed[i], golds[i], weights, "train", dropout_rng)
                share = len(golds[i]) / n_utts
                batch_loss += loss * share
                _accumulate(grads, g, share)
            grads = clip_gradients(grads, config.clip_norm)
            t_cur = epoch + (b / steps_per_epoch if config.scheduler_granularity == "step" else 0.0)
            lr = cosine_lr(SchedulerState(config.eta_max, config.eta_min, config.epochs, t_cur))
            adam_step(model.params, grads, opt, lr)
            losses.append(batch_loss)
        skipped = sum(1 for p in packed if not p.spans)
        if skipped:
            log.info("epoch %d: %d dialogue(s) produced no spans and were skipped", epoch + 1, skipped)
        val_f1 = None
        if val_corpus is not None and len(val_corpus):
            val_f1 = corpus_micro_f1(model, val_corpus, vocab, evaluated_classes)
        entry = EpochLog(epoch + 1, float(np.mean(losses)) if losses else float("nan"), lr, val_f1, skipped)
        log.info("epoch %d loss %.4f lr %.3g val micro-F1 %s", entry.epoch, entry.train_loss, lr,
                 "n/a" if val_f1 is None else f"{val_f1:.4f}")
        history.append(entry)
    model.optimizer_state = opt
    return model, history


# --------------------------------------------------------------------------
# post-training (MLM + NSP)
# --------------------------------------------------------------------------


@dataclass
class PostTrainLog:
    step: int
    mlm_loss: float
    nsp_loss: float
    lr: float


def post_train(corpora, vocab: TokenVocabulary, config: TrainConfig, encoder_config: EncoderConfig,
               init: dict | None = None):
    """Continue self-supervised training of the encoder; returns ``(encoder_params, curve)``."""
    corpus = corpora if isinstance(corpora, Corpus) else merge_corpora(corpora)
    init_rng, _, _ = _rngs(config.seed)
    enc_cfg = replace(encoder_config, dropout_rate=config.encoder_dropout)
    params = init_encoder_params(enc_cfg, init_rng)
    if init:
        params.update({k: v.astype(np.float32, copy=True) for k, v in init.items() if k.startswith("encoder/")})
    steps = config.post_train_steps
    if steps <= 0:
        return params, []
    if len(corpus) < 2:
        raise TrainingError("post-training needs at least two dialogues")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    pairs = build_nsp_pairs(corpus, vocab, min(config.max_len, enc_cfg.max_positions), rng)
    opt = OptimizerState()
    curve = []
    for step in range(steps):
        grads: dict = {}
        mlm_total = nsp_total = 0.0
        share = 1.0 / config.post_train_batch
        for _ in range(config.post_train_batch):
            pair = next(pairs)
            corrupted, targets = mask_tokens(pair.token_ids, vocab, config.mask_rate, rng)
            if not targets:
                # guarantee one prediction per pair
                candidates = [i for i, t in enumerate(pair.token_ids) if t not in vocab.special_ids]
                pos = int(candidates[rng.integers(len(candidates))])
                targets = {pos: int(pair.token_ids[pos])}
                corrupted[pos] = vocab.mask_id
            x = embed(corrupted, params, pair.segments)
            reps, cache = encode_forward(x, None, params, enc_cfg, "train", rng)
            l_mlm, d_mlm, g_mlm = mlm_loss_and_grad(reps, targets, params)
            l_nsp, d_cls, g_nsp = nsp_loss_and_grad(reps[0], pair.label, params)
            dreps = d_mlm
            dreps[0] += d_cls
            dx, g_enc = encode_backward(dreps, cache, params, enc_cfg)
            g_enc.update(g_mlm)
            g_enc.update(g_nsp)
            g_enc.update(embed_backward(dx, corrupted, params, pair.segments))
            _accumulate(grads, g_enc, share)
            mlm_total += l_mlm * share
            nsp_total += l_nsp * share
        grads = clip_gradients(grads, config.clip_norm)
        lr = cosine_lr(SchedulerState(config.post_train_lr, 0.0, steps, step))
        adam_step(params, grads, opt, lr)
        curve.append(PostTrainLog(step, mlm_total, nsp_total, lr))
    return params, curve


# --------------------------------------------------------------------------
# k-fold ensemble
# --------------------------------------------------------------------------


@dataclass
class EnsembleModel:
    members: list
    k: int
    class_frequency: dict = field(default_factory=dict)
    tie_break: str = "probability_sum_then_class_frequency"
    fold_assignments: list = field(default_factory=list)  # per member, validation dialogue ids

    @property
    def majority_label(self) -> EmotionLabel:
        if not self.class_frequency:
            return self.members[0].majority_label
        return max(EmotionLabel, key=lambda c: (self.class_frequency.get(c, 0), -int(c)))


def _train_member(args):
    train_c, val_c, vocab, config, encoder_config, init, evaluated = args
    model, history = train(train_c, val_c, vocab, config, encoder_config, init, evaluated)
    return model, history


def train_kfold_ensemble(corpus: Corpus, vocab: TokenVocabulary, config: TrainConfig,
                         encoder_config: EncoderConfig, k: int = 5, init=None, jobs: int = 1,
                         holdout_filter=None, evaluated_classes=None):
    """Train one member per fold; returns ``(ensemble, histories)``."""
    splits = split_folds(corpus, k, config.seed, holdout_filter)
    tasks = [(tr, va, vocab, config, encoder_config, init, evaluated_classes) for tr, va in splits]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_member, tasks))
    else:
        results = [_train_member(t) for t in tasks]
    ensemble = EnsembleModel(
        members=[m for m, _ in results],
        k=k,
        class_frequency=class_counts(corpus) if corpus.is_labeled() else {},
        fold_assignments=[[d.dialogue_id for d in va] for _, va in splits],
    )
    return ensemble, [h for _, h in results]


def vote(labels, probabilities, class_frequency: dict) -> EmotionLabel:
    """Plurality vote with a two-stage tie break.

    Ties on vote count go to the label with the larger summed member
    probability, then to the more frequent training class, then to the lower
    label index.
    """
    counts = np.bincount([int(l) for l in labels], minlength=len(EmotionLabel))
    top = np.flatnonzero(counts == counts.max())
    if len(top) == 1:
        return EmotionLabel(int(top[0]))
    prob_sum = np.sum(np.asarray(probabilities, dtype=np.float64), axis=0)
    best = max(top, key=lambda c: (prob_sum[c], class_frequency.get(EmotionLabel(int(c)), 0), -c))
    return EmotionLabel(int(best))


def ensemble_predict(ensemble: EnsembleModel, dialogue: Dialogue, vocab: TokenVocabulary) -> list[UtterancePrediction]:
    if not ensemble.members:
        raise TrainingError("ensemble has no members")
    member_preds = [predict_dialogue(m, dialogue, vocab) for m in ensemble.members]
    out = []
    for i in range(len(dialogue)):
        votes = [mp[i] for mp in member_preds]
        if any(EXCLUDED_FALLBACK in v.flags for v in votes):
            out.append(UtterancePrediction(i, ensemble.majority_label, (EXCLUDED_FALLBACK,), None))
            continue
        probs = [v.probabilities for v in votes]
        label = vote([v.label for v in votes], probs, ensemble.class_frequency)
        out.append(UtterancePrediction(i, label, (), np.mean(probs, axis=0)))
    return out
