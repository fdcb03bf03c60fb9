"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxemo.classifier import ClassWeights, class_weights, wce_loss
from ctxemo.corpus import EmotionLabel, class_counts, corpus_stats, split_folds
from ctxemo.evaluation import confusion_matrix, micro_f1, micro_prf, per_class_prf
from ctxemo.pooling import dynamic_max_pool, dynamic_mean_pool
from ctxemo.tokenizer import SPECIAL_TOKENS, TokenVocabulary, pack_token_lists, wordpiece
from ctxemo.training import SchedulerState, clip_gradients, cosine_lr, global_norm, vote
from helpers import corpus, small_vocab

labels = st.integers(0, 4)
dialogues = st.lists(st.lists(labels, min_size=1, max_size=6), min_size=1, max_size=12)
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@given(dialogues)
def test_counts_sum_and_fractions(label_lists):
    c = corpus(label_lists)
    counts = class_counts(c)
    assert sum(counts.values()) == c.n_utterances
    stats = corpus_stats(c)
    assert abs(sum(stats.label_fractions.values()) - 1) < 1e-9
    for lab, frac in stats.label_fractions.items():
        assert abs(frac * c.n_utterances - counts[lab]) < 1
    assert stats.avg_utterances_per_dialogue == c.n_utterances / len(c)


@given(st.integers(2, 40), st.integers(2, 8), st.integers(0, 10**6))
def test_folds_partition(n, k, seed):
    assume(k <= n)
    c = corpus([[0]] * n)
    splits = split_folds(c, k, seed)
    held = [d.dialogue_id for _, va in splits for d in va]
    assert sorted(held) == sorted(d.dialogue_id for d in c)
    sizes = [len(va) for _, va in splits]
    assert max(sizes) - min(sizes) <= 1
    for tr, va in splits:
        assert len(tr) + len(va) == n


token_lists = st.lists(st.lists(st.integers(5, 20), min_size=1, max_size=15), min_size=1, max_size=10)


def check_packed(p, lists, vocab, max_len):
    ids = p.token_ids.tolist()
    assert len(ids) <= max_len
    assert ids[0] == vocab.cls_id and ids[-1] == vocab.sep_id
    assert sorted(p.included_utterance_indices + p.excluded_utterance_indices) == list(range(len(lists)))
    prev_end = 0
    for (s, e), idx in zip(p.spans, p.included_utterance_indices):
        assert prev_end < s < e
        assert ids[s:e] == lists[idx]
        assert ids[e] == vocab.sep_id
        assert not set(ids[s:e]) & vocab.special_ids
        prev_end = e
    inner = [t for t in ids if t not in (vocab.cls_id, vocab.sep_id)]
    assert inner == [t for i in p.included_utterance_indices for t in lists[i]]


@given(token_lists, st.integers(3, 80), st.integers(0, 40))
def test_packing_contract(lists, max_len, extra):
    vocab = small_vocab()
    a = pack_token_lists(lists, vocab, max_len)
    check_packed(a, lists, vocab, max_len)
    b = pack_token_lists(lists, vocab, max_len + extra)
    assert set(a.included_utterance_indices) <= set(b.included_utterance_indices)


@given(st.text(alphabet="abcdef", min_size=1, max_size=8), st.lists(st.text(alphabet="abcdef", min_size=1, max_size=4)))
def test_whole_word_dominance(word, pieces):
    toks = list(dict.fromkeys([word, *pieces, *("##" + p for p in pieces)]))
    v = TokenVocabulary([*SPECIAL_TOKENS, *toks])
    assert wordpiece(word, v) == [v.id(word)]


def _brute_greedy(word, vocab):
    out, start = [], 0
    while start < len(word):
        cands = [e for e in range(start + 1, len(word) + 1)
                 if (word[start:e] if start == 0 else "##" + word[start:e]) in vocab]
        if not cands:
            return [vocab.unk_id]
        e = max(cands)
        out.append(vocab.id(word[start:e] if start == 0 else "##" + word[start:e]))
        start = e
    return out


@given(st.text(alphabet="abc", min_size=1, max_size=10), st.sets(st.text(alphabet="abc", min_size=1, max_size=3)))
def test_wordpiece_matches_prefix_search(word, pieces):
    toks = sorted(pieces) + ["##" + p for p in sorted(pieces)]
    v = TokenVocabulary([*SPECIAL_TOKENS, *toks])
    assert wordpiece(word, v) == _brute_greedy(word, v)


@st.composite
def reps_and_spans(draw):
    n = draw(st.integers(1, 30))
    d = draw(st.integers(1, 6))
    reps = draw(arrays(np.float64, (n, d), elements=finite))
    cuts = sorted(draw(st.sets(st.integers(0, n), min_size=2, max_size=8)))
    return reps, list(zip(cuts[:-1], cuts[1:]))


@given(reps_and_spans(), st.randoms())
def test_pooling_dominance_and_permutation(rs, rnd):
    reps, spans = rs
    mx, mn = dynamic_max_pool(reps, spans), dynamic_mean_pool(reps, spans)
    assert np.all(mx >= mn - 1e-12)
    perm = reps.copy()
    for s, e in spans:
        idx = list(range(s, e))
        rnd.shuffle(idx)
        perm[s:e] = reps[idx]
    np.testing.assert_array_equal(dynamic_max_pool(perm, spans), mx)
    np.testing.assert_allclose(dynamic_mean_pool(perm, spans), mn, atol=1e-12)


counts_st = st.lists(st.integers(1, 10**6), min_size=2, max_size=5)


@given(counts_st)
def test_weight_identity_and_monotonicity(xs):
    counts = {EmotionLabel(i): x for i, x in enumerate(xs)}
    w = class_weights(counts).weights
    total = sum(xs)
    for lab, x in counts.items():
        assert abs(w[lab] * x - total) <= 1e-9 * total
    for a in counts:
        for b in counts:
            if counts[a] < counts[b]:
                assert w[a] > w[b]


@given(st.integers(1, 20), st.floats(0.1, 10), st.integers(0, 1000))
def test_wce_scaling_and_unit_reduction(n, k, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(5), size=n)
    gold = rng.integers(0, 5, n)
    base = {EmotionLabel(i): float(w) for i, w in enumerate(rng.uniform(0.5, 3, 5))}
    a = wce_loss(probs, gold, ClassWeights(base))
    b = wce_loss(probs, gold, ClassWeights({c: w * k for c, w in base.items()}))
    assert math.isclose(b, k * a, rel_tol=1e-12)
    ce = float(np.mean(-np.log(probs[np.arange(n), gold])))
    assert abs(wce_loss(probs, gold, ClassWeights.uniform()) - ce) < 1e-12


pairs = st.lists(st.tuples(labels, labels), min_size=1, max_size=60)
class_sets = st.sets(labels, min_size=1)


@given(pairs, class_sets, st.permutations(range(5)))
def test_micro_f1_relabel_invariant(ps, ev, perm):
    preds, golds = zip(*ps)
    a = micro_f1(confusion_matrix(preds, golds), ev)
    b = micro_f1(confusion_matrix([perm[p] for p in preds], [perm[g] for g in golds]), {perm[c] for c in ev})
    assert a == b


@given(pairs)
def test_per_class_f1_between_p_and_r(ps):
    preds, golds = zip(*ps)
    cm = confusion_matrix(preds, golds)
    for c in range(5):
        p, r, f = per_class_prf(cm, c)
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


@given(pairs, class_sets, class_sets)
def test_restriction_never_adds_tp(ps, a, b):
    preds, golds = zip(*ps)
    cm = confusion_matrix(preds, golds)
    small = a & b
    assert sum(cm.tp(c) for c in small) <= sum(cm.tp(c) for c in a)


@given(pairs)
def test_all_classes_precision_equals_recall(ps):
    preds, golds = zip(*ps)
    p, r, _ = micro_prf(confusion_matrix(preds, golds), set(range(5)))
    assert p == r == sum(x == y for x, y in ps) / len(ps)


@given(st.floats(1e-6, 1.0), st.floats(0, 1), st.floats(0.5, 50), st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_cosine_monotone(eta_max, frac_min, t_i, ts):
    eta_min = eta_max * frac_min
    vals = [cosine_lr(SchedulerState(eta_max, eta_min, t_i, t * t_i)) for t in sorted(ts)]
    assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))


grad_el = st.one_of(st.just(0.0), st.floats(1e-3, 50), st.floats(-50, -1e-3))


@given(st.lists(arrays(np.float64, st.integers(1, 6), elements=grad_el), min_size=1, max_size=4), st.floats(0.01, 10))
def test_clip_bound_and_direction(tensors, clip):
    grads = {f"t{i}": t for i, t in enumerate(tensors)}
    out = clip_gradients(grads, clip)
    assert global_norm(out) <= clip + 1e-9 or out is grads
    ratios = [o[g != 0] / g[g != 0] for o, g in ((out[k], grads[k]) for k in grads)]
    flat = np.concatenate(ratios) if ratios else np.array([])
    if flat.size:
        assert np.all(flat > 0)
        np.testing.assert_allclose(flat, flat[0], rtol=1e-12)


@settings(max_examples=300)
@given(st.integers(1, 9), st.data())
def test_vote_strict_majority(k, data):
    votes = data.draw(st.lists(labels, min_size=k, max_size=k))
    probs = [np.random.default_rng(i).dirichlet(np.ones(5)) for i in range(k)]
    winner = vote([EmotionLabel(v) for v in votes], probs, {})
    top = max(set(votes), key=votes.count)
    if votes.count(top) > k / 2:
        assert winner == top
    assert votes.count(int(winner)) == max(votes.count(v) for v in set(votes))
