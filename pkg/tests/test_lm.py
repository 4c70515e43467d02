import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_forward, random_sequences, tiny_config
from unlearnlab.lm import (
    LengthError,
    ModelConfig,
    ModelState,
    NumericError,
    StaleTraceError,
    TokenSequence,
    Vocabulary,
    backward,
    backward_weighted,
    forward,
    greedy_decode,
    hidden_at,
    num_params,
    pad_batch,
    target_log_probs,
    token_log_prob,
)


def test_vocabulary_appends_mask_and_round_trips(tmp_path):
    v = Vocabulary.build(["a", "b", "a", "c"])
    assert v.tokens == ("a", "b", "c", "<mask>")
    assert v.mask_id == 3 and len(v) == 4
    assert v.decode(v.encode(["c", "a"])) == ["c", "a"]
    v.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == v
    with pytest.raises(KeyError):
        v.encode(["zzz"])


def test_token_sequence_validation():
    s = TokenSequence((1, 2, 3, 4), 3, frozenset({2}))
    assert s.T == 4
    assert list(s.answer_positions) == [3, 4]
    with pytest.raises(ValueError):
        TokenSequence((1,), 2, frozenset())
    with pytest.raises(ValueError):
        TokenSequence((1, 2, 3), 5, frozenset())
    with pytest.raises(ValueError):
        TokenSequence((1, 2, 3), 3, frozenset({3}))


def test_config_limits():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, n_layers=3)
    assert num_params(tiny_config()) <= 5000


def test_initialisation_statistics():
    cfg = ModelConfig(vocab_size=300, d_model=64, d_mlp=128, n_layers=2, context=32)
    p = ModelState.initialize(cfg, seed=0).params
    assert abs(p["wte"].std() - 1.0) < 0.02
    assert abs(p["l0.wq"].std() - 1 / 8) < 0.01
    assert abs(p["l0.wo"].std() - 1 / 8 / 2) < 0.01
    assert abs(p["l1.w2"].std() - 1 / math.sqrt(128) / 2) < 0.01
    assert not p["l0.b1"].any() and not p["bout"].any()


def test_forward_matches_reference_implementation(tiny_model, rng):
    seqs = random_sequences(rng, 3, 20)
    tr = forward(tiny_model, seqs)
    for b, s in enumerate(seqs):
        ref = naive_forward(tiny_model, s.ids)
        np.testing.assert_allclose(tr.logprobs[b, : s.T], ref, atol=1e-10)


def test_single_layer_forward_matches_reference(rng):
    m = ModelState.initialize(tiny_config(layers=1), seed=5)
    s = random_sequences(rng, 1, 20)[0]
    np.testing.assert_allclose(forward(m, s).logprobs[0], naive_forward(m, s.ids), atol=1e-10)


def test_padding_and_causality(tiny_model, rng):
    s = random_sequences(rng, 1, 20, 6, 6)[0]
    alone = forward(tiny_model, s).logprobs[0]
    padded = forward(tiny_model, [s, TokenSequence((1,) * 9, 3, frozenset())]).logprobs[0, :6]
    np.testing.assert_allclose(alone, padded, atol=1e-12)
    ids = np.array([s.ids])
    changed = ids.copy()
    changed[0, -1] = (changed[0, -1] + 1) % 19
    a, b = forward(tiny_model, ids).logprobs, forward(tiny_model, changed).logprobs
    np.testing.assert_array_equal(a[0, :-1], b[0, :-1])


def test_log_prob_accessors(tiny_model, rng):
    s = random_sequences(rng, 1, 20)[0]
    tr = forward(tiny_model, s)
    lp = target_log_probs(tr)
    assert lp.shape == (1, s.T - 1)
    assert token_log_prob(tr, 2, s.ids[1]) == pytest.approx(lp[0, 0])
    assert np.all(lp <= 0)
    assert hidden_at(tr, 0, 1).shape == (12,)
    with pytest.raises(IndexError):
        token_log_prob(tr, 1, 0)
    with pytest.raises(IndexError):
        token_log_prob(tr, s.T + 1, 0)


def test_length_and_vocab_errors(tiny_model):
    with pytest.raises(LengthError):
        forward(tiny_model, np.zeros((1, 11), dtype=int))
    with pytest.raises(ValueError):
        forward(tiny_model, np.array([[0, 25]]))


def test_backward_weighted_matches_finite_differences(tiny_model, rng):
    s = random_sequences(rng, 1, 20, 8, 8)[0]
    pairs = [(3, 1.0), (5, -0.5), (8, 2.0)]
    g = backward_weighted(tiny_model, forward(tiny_model, s), pairs)

    def f(theta):
        m = ModelState(tiny_model.config, theta)
        lp = target_log_probs(forward(m, s))[0]
        return sum(w * lp[p - 2] for p, w in pairs)

    v = rng.standard_normal(g.size)
    eps = 1e-5
    fd = (f(tiny_model.theta + eps * v) - f(tiny_model.theta - eps * v)) / (2 * eps)
    assert abs(fd - g @ v) <= 1e-6 * max(1.0, abs(fd))


def test_stale_trace_rejected(tiny_model, rng):
    s = random_sequences(rng, 1, 20)[0]
    tr = forward(tiny_model, s)
    tiny_model.update(np.zeros_like(tiny_model.theta))
    with pytest.raises(StaleTraceError):
        backward(tiny_model, tr, dlogits=np.zeros_like(tr.logits))
    other = tiny_model.copy()
    with pytest.raises(StaleTraceError):
        backward(other, forward(tiny_model, s), dlogits=np.zeros_like(tr.logits))


def test_reference_is_frozen_and_read_only(tiny_model, rng):
    tiny_model.freeze_reference()
    with pytest.raises(ValueError):
        tiny_model.freeze_reference()
    with pytest.raises(ValueError):
        tiny_model.reference[0] = 1.0
    before = tiny_model.reference.copy()
    tiny_model.update(np.ones_like(tiny_model.theta))
    np.testing.assert_array_equal(tiny_model.reference, before)
    s = random_sequences(rng, 1, 20)[0]
    tr = forward(tiny_model, s, use_reference=True)
    with pytest.raises(StaleTraceError):
        backward(tiny_model, tr, dlogits=np.zeros_like(tr.logits))


def test_non_finite_parameters_raise(tiny_model):
    tiny_model.theta[0] = np.nan
    with pytest.raises(NumericError):
        forward(tiny_model, np.array([[1, 2, 3]]))


def test_checkpoint_round_trip(tmp_path, tiny_model):
    tiny_model.freeze_reference()
    tiny_model.update(np.full_like(tiny_model.theta, 0.01))
    tiny_model.save(tmp_path / "m.npz")
    back = ModelState.load(tmp_path / "m.npz")
    assert back.config == tiny_model.config
    np.testing.assert_array_equal(back.theta, tiny_model.theta)
    np.testing.assert_array_equal(back.reference, tiny_model.reference)
    bad = tmp_path / "bad.npz"
    np.savez(bad, meta=np.array('{"format": "other"}'), theta=np.zeros(3))
    with pytest.raises(ValueError):
        ModelState.load(bad)


def test_greedy_decode_follows_argmax(tiny_model):
    out = greedy_decode(tiny_model, [1, 2], 3)
    ids = [1, 2]
    for _ in range(3):
        ids.append(int(np.argmax(naive_forward(tiny_model, ids)[-1])))
    assert out == ids[2:]


def test_pad_batch_shapes():
    ids, lengths = pad_batch([(1, 2, 3), (4, 5)])
    assert ids.tolist() == [[1, 2, 3], [4, 5, 0]]
    assert lengths.tolist() == [3, 2]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 18), min_size=2, max_size=10))
def test_log_probs_normalised(ids):
    m = ModelState.initialize(tiny_config(), seed=0)
    lp = forward(m, np.array([ids])).logprobs
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-12)
