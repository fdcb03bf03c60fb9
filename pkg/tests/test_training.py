import math

import numpy as np
import pytest

from ctxemo.checkpoint import load_archive, save_archive
from ctxemo.classifier import ClassWeights, class_weights
from ctxemo.corpus import EmotionLabel
from ctxemo.encoder import EncoderConfig
from ctxemo.errors import SplitError, TrainingError
from ctxemo.synthetic import make_synthetic_corpus
from ctxemo.tokenizer import build_vocab, pack_dialogue
from ctxemo.training import (
    EXCLUDED_FALLBACK,
    EnsembleModel,
    Model,
    OptimizerState,
    SchedulerState,
    TrainConfig,
    adam_step,
    clip_gradients,
    cosine_lr,
    dialogue_loss_and_grads,
    ensemble_predict,
    global_norm,
    new_model,
    post_train,
    predict_dialogue,
    train,
    train_kfold_ensemble,
    vote,
)
from helpers import check_grads

L = EmotionLabel


def small_cfg(vocab, **kw):
    base = dict(vocab_size=len(vocab), n_layers=1, n_heads=2, d_model=16, d_ff=32, max_positions=128)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="module")
def data():
    c = make_synthetic_corpus(12, seed=11, max_utterances=6)
    return c, build_vocab(c)


def test_cosine_anchors():
    assert cosine_lr(SchedulerState(1e-3, 1e-5, 10, 0)) == 1e-3
    assert cosine_lr(SchedulerState(1e-3, 1e-5, 10, 5)) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)
    assert cosine_lr(SchedulerState(1e-3, 1e-5, 10, 10)) == pytest.approx(1e-5, abs=1e-15)
    with pytest.raises(ValueError):
        SchedulerState(1e-3, 0, 10, 11)
    with pytest.raises(ValueError):
        SchedulerState(1e-3, 1e-2, 10, 0)


def test_clip_examples():
    small = {"a": np.array([0.3, 0.4])}
    assert clip_gradients(small, 1.0) is small
    out = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.8])
    exact = {"a": np.array([0.6, 0.8])}
    assert clip_gradients(exact, 1.0) is exact


def test_clip_joint_norm_and_direction():
    g = {"a": np.array([[3.0, 0.0]]), "b": np.array([4.0, 12.0])}
    out = clip_gradients(g, 2.0)
    assert global_norm(out) == pytest.approx(2.0)
    np.testing.assert_allclose(out["b"] / g["b"], 2.0 / 13.0)


def test_clip_non_finite_names_tensor():
    with pytest.raises(TrainingError, match="layer3"):
        clip_gradients({"ok": np.ones(2), "layer3": np.array([np.nan])}, 1.0)


def test_adam_zero_grad():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step():
    for g in (0.37, -5.0):
        p = {"w": np.array([0.0])}
        adam_step(p, {"w": np.array([g])}, OptimizerState(), 0.01)
        assert p["w"][0] == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-6)


def test_adam_deterministic_and_shape_check():
    def run():
        p, s = {"w": np.array([1.0, 2.0])}, OptimizerState()
        for _ in range(3):
            adam_step(p, {"w": p["w"] * 0.5 + 0.1}, s, 0.05)
        return p["w"], s.step
    (a, n), (b, _) = run(), run()
    np.testing.assert_array_equal(a, b)
    assert n == 3
    with pytest.raises(TrainingError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), 0.1)


def test_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size_dialogues, c.eta_max, c.eta_min, c.clip_norm) == (10, 1, 2e-5, 0.0, 1.0)
    assert TrainConfig.from_dict({**c.to_dict(), "unknown": 1}) == c
    with pytest.raises(ValueError):
        TrainConfig(pooling_mode="sum")


def test_zero_epochs_returns_init(data):
    c, v = data
    m = new_model(small_cfg(v), TrainConfig())
    out, log = train(c, None, v, TrainConfig(epochs=0), small_cfg(v), init=m)
    assert log == []
    for k in m.params:
        np.testing.assert_array_equal(out.params[k], m.params[k])


def test_unlabeled_rejected(data):
    c, v = data
    from ctxemo.corpus import Corpus, Dialogue, Utterance
    bad = Corpus((Dialogue((Utterance("a", "okay", None),), "x"),), "u")
    with pytest.raises(TrainingError):
        train(bad, None, v, TrainConfig(epochs=1), small_cfg(v))


def test_training_deterministic_and_logged(data):
    c, v = data
    cfg = TrainConfig(epochs=2, eta_max=1e-3, seed=4)
    m1, h1 = train(c, c, v, cfg, small_cfg(v))
    m2, h2 = train(c, c, v, cfg, small_cfg(v))
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert [e.to_dict() for e in h1] == [e.to_dict() for e in h2]
    assert [e.epoch for e in h1] == [1, 2]
    assert all(0.0 <= e.val_micro_f1 <= 1.0 for e in h1)
    m3, _ = train(c, None, v, TrainConfig(epochs=2, eta_max=1e-3, seed=5), small_cfg(v))
    assert not np.array_equal(m1.params["classifier/w2"], m3.params["classifier/w2"])


def test_loss_decreases(data):
    c, v = data
    _, hist = train(c, None, v, TrainConfig(epochs=10, eta_max=1e-3), small_cfg(v))
    assert hist[-1].train_loss < hist[0].train_loss


def test_batching_and_epoch_schedule(data):
    c, v = data
    _, hist = train(c, None, v, TrainConfig(epochs=2, batch_size_dialogues=5, scheduler_granularity="epoch",
                                            eta_max=1e-3), small_cfg(v))
    # epoch granularity holds the rate fixed within an epoch
    assert hist[0].lr == 1e-3
    assert hist[1].lr == pytest.approx(cosine_lr(SchedulerState(1e-3, 0, 2, 1)))


def test_pipeline_gradients(data):
    c, v = data
    enc = small_cfg(v, d_model=8, d_ff=16, dropout_rate=0.0)
    m = new_model(enc, TrainConfig(encoder_dropout=0.0, classifier_dropout=0.0))
    rng = np.random.default_rng(0)
    m.params = {k: p.astype(np.float64) + rng.standard_normal(p.shape) * 0.1 for k, p in m.params.items()}
    d = c.dialogues[0]
    packed = pack_dialogue(d, v, 64)
    gold = np.array([int(u.gold_label) for u in d.utterances])[list(packed.included_utterance_indices)]
    weights = ClassWeights({l: 1.0 + int(l) for l in L})

    loss, grads = dialogue_loss_and_grads(m, packed, gold, weights)
    # the post-training heads and segment table are not on this path
    used = {k: v for k, v in m.params.items() if not k.startswith(("encoder/mlm", "encoder/nsp", "encoder/segment"))}
    errs = check_grads(lambda: dialogue_loss_and_grads(m, packed, gold, weights)[0], used, grads)
    assert max(errs.values()) < 1e-4, {k: e for k, e in errs.items() if e >= 1e-4}


def test_excluded_fallback_flag(data):
    c, v = data
    m, _ = train(c, None, v, TrainConfig(epochs=1, max_len=12), small_cfg(v))
    preds = predict_dialogue(m, c.dialogues[0], v)
    flagged = [p for p in preds if EXCLUDED_FALLBACK in p.flags]
    assert flagged and all(p.label == m.majority_label for p in flagged)
    assert len(preds) == len(c.dialogues[0])


def test_checkpoint_round_trip(tmp_path, data):
    c, v = data
    m, _ = train(c, None, v, TrainConfig(epochs=1), small_cfg(v))
    m.save(tmp_path / "m.npz")
    back = Model.load(tmp_path / "m.npz")
    for k in m.params:
        assert back.params[k].dtype == np.float32
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.encoder_config == m.encoder_config
    assert back.class_frequency == m.class_frequency
    with np.load(tmp_path / "m.npz") as raw:
        assert raw["encoder/token_embedding"].dtype.str == "<f4"


def test_archive_rejects_reserved(tmp_path):
    with pytest.raises(ValueError):
        save_archive(tmp_path / "x.npz", {"__meta__": np.zeros(1)})
    save_archive(tmp_path / "y.npz", {"a/b": np.arange(3.0)}, {"k": [1, 2]})
    t, meta = load_archive(tmp_path / "y.npz")
    assert meta == {"k": [1, 2]} and t["a/b"].tolist() == [0, 1, 2]


def test_post_train_zero_steps_is_init(data):
    c, v = data
    enc = small_cfg(v)
    params, curve = post_train([c], v, TrainConfig(seed=3), enc)
    fresh = new_model(enc, TrainConfig(seed=3)).params
    assert curve == []
    for k, p in params.items():
        np.testing.assert_array_equal(p, fresh[k])


def test_post_train_deterministic(data):
    c, v = data
    cfg = TrainConfig(seed=1, post_train_steps=4, post_train_batch=2)
    _, a = post_train([c], v, cfg, small_cfg(v))
    _, b = post_train([c], v, cfg, small_cfg(v))
    assert a == b
    assert [r.step for r in a] == [0, 1, 2, 3]
    assert a[0].lr == cfg.post_train_lr


def test_post_train_needs_two_dialogues(data):
    c, v = data
    from ctxemo.corpus import Corpus
    with pytest.raises(TrainingError):
        post_train([Corpus(c.dialogues[:1], "one")], v, TrainConfig(post_train_steps=1), small_cfg(v))


def test_vote_examples():
    uniform = [np.full(5, 0.2)] * 5
    J = L.JOY
    assert vote([J, J, L.ANGER, L.NEUTRAL, J], uniform, {}) is L.JOY
    probs = [np.eye(5)[1] * 0.9, np.eye(5)[1] * 0.8, np.eye(5)[3] * 0.7, np.eye(5)[3] * 0.7, np.eye(5)[0]]
    assert vote([L.JOY, L.JOY, L.ANGER, L.ANGER, L.NEUTRAL], probs, {}) is L.JOY
    # equal probability mass: the more frequent training class wins
    flat = [np.full(5, 0.2)] * 4
    freq = {L.JOY: 3, L.ANGER: 10}
    assert vote([L.JOY, L.JOY, L.ANGER, L.ANGER], flat, freq) is L.ANGER


def test_kfold_composition(data):
    c, v = data
    c10 = type(c)(c.dialogues[:10], "ten")
    ens, hists = train_kfold_ensemble(c10, v, TrainConfig(epochs=1), small_cfg(v), k=5)
    assert len(ens.members) == 5 and len(hists) == 5
    assert all(len(f) == 2 for f in ens.fold_assignments)
    assert sorted(i for f in ens.fold_assignments for i in f) == sorted(d.dialogue_id for d in c10)
    with pytest.raises(SplitError):
        train_kfold_ensemble(c10, v, TrainConfig(epochs=1), small_cfg(v), k=1)
    again, _ = train_kfold_ensemble(c10, v, TrainConfig(epochs=1), small_cfg(v), k=5)
    np.testing.assert_array_equal(ens.members[2].params["classifier/w1"], again.members[2].params["classifier/w1"])


def test_single_member_ensemble(data):
    c, v = data
    m, _ = train(c, None, v, TrainConfig(epochs=1, eta_max=1e-3), small_cfg(v))
    ens = EnsembleModel([m], 1, dict(m.class_frequency))
    for d in c:
        assert [p.label for p in ensemble_predict(ens, d, v)] == [p.label for p in predict_dialogue(m, d, v)]


def test_class_weights_once_from_split(data):
    c, _ = data
    from ctxemo.corpus import class_counts
    w = class_weights(class_counts(c))
    total = c.n_utterances
    for lab, x in class_counts(c).items():
        if x:
            assert w.weights[lab] * x == pytest.approx(total, rel=1e-12)
