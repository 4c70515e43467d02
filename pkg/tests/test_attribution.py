import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from conftest import naive_forward
from unlearnlab.attribution import (
    AnnotationError,
    attribution_scores,
    composite_scores,
    dump_profiles,
    entropy_scores,
    hard_select,
    importance_profiles,
    mask_knowledge,
    minmax_normalize,
    selection_size,
    token_weights,
)
from unlearnlab.lm import TokenSequence
from unlearnlab.schemas import PROFILE_RECORD, validate_jsonl

scores = st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40)


def test_mask_knowledge_replaces_slots_only():
    s = TokenSequence((5, 6, 7, 8, 9), 4, frozenset({2, 3}))
    m = mask_knowledge(s, 19)
    assert m.ids == (5, 19, 19, 8, 9)
    with pytest.raises(AnnotationError):
        mask_knowledge(TokenSequence((1, 2, 3), 3, frozenset()), 19)


def test_attribution_and_entropy_against_reference(tiny_model):
    s = TokenSequence((1, 4, 5, 2, 3, 7), 4, frozenset({2, 3}))
    masked = mask_knowledge(s, 19)
    lp = naive_forward(tiny_model, s.ids)
    lpm = naive_forward(tiny_model, masked.ids)
    expect = [abs(lp[i - 2, s.ids[i - 1]] - lpm[i - 2, s.ids[i - 1]]) for i in range(2, 7)]
    np.testing.assert_allclose(attribution_scores(tiny_model, s, masked), expect, atol=1e-12)
    ent = [-(np.exp(lp[t]) * lp[t]).sum() for t in range(5)]
    np.testing.assert_allclose(entropy_scores(tiny_model, s), ent, atol=1e-12)
    # masking the slot changes nothing before it
    assert attribution_scores(tiny_model, s, masked)[0] == 0.0


def test_attribution_rejects_foreign_variant(tiny_model):
    s = TokenSequence((1, 4, 5, 2), 4, frozenset({2}))
    other = mask_knowledge(TokenSequence((1, 3, 5, 2), 4, frozenset({2})), 19)
    with pytest.raises(ValueError):
        attribution_scores(tiny_model, s, other)


def test_minmax_and_composite():
    np.testing.assert_allclose(minmax_normalize([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])
    assert minmax_normalize([3.0, 3.0]).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(composite_scores([1.0, 0.0], [0.0, 1.0], 0.7), [0.7, 0.3])
    with pytest.raises(ValueError):
        composite_scores([1.0], [1.0, 2.0], 0.5)
    with pytest.raises(ValueError):
        composite_scores([1.0], [1.0], 1.5)


def test_hard_select_examples():
    assert selection_size(10, 0.2) == 2
    assert selection_size(3, 0.1) == 1
    assert hard_select([0.1, 0.9, 0.5, 0.9, 0.0], 0.4) == frozenset({3, 5})
    # ties resolved toward the earlier position
    assert hard_select([0.5, 0.5, 0.5], 0.34) == frozenset({2})
    with pytest.raises(ValueError):
        hard_select([], 0.2)
    with pytest.raises(ValueError):
        hard_select([1.0], 0.0)


def test_token_weights_modes():
    phi = np.array([0.0, 1.0, 0.5])
    u = token_weights(phi, "uniform")
    assert u.weights == (1.0, 1.0, 1.0)
    h = token_weights(phi, "hard", r=0.34)
    assert h.weights == (0.0, 1.0, 0.0) and h.selected == frozenset({3})
    s = token_weights(phi, "soft", tau=0.5)
    np.testing.assert_allclose(s.weights, softmax(phi / 0.5))
    assert s.dense(5).tolist() == pytest.approx([*softmax(phi / 0.5), 0.0])
    with pytest.raises(ValueError):
        token_weights(phi, "soft", tau=0)
    with pytest.raises(ValueError):
        token_weights(phi, "top")


@settings(max_examples=60, deadline=None)
@given(scores, st.floats(0.01, 1.0))
def test_hard_selection_properties(phi, r):
    w = token_weights(np.array(phi), "hard", r=r)
    k = selection_size(len(phi), r)
    assert sum(w.weights) == k
    chosen = [phi[p - 2] for p in w.selected]
    rest = [phi[i] for i in range(len(phi)) if i + 2 not in w.selected]
    assert not rest or min(chosen) >= max(rest)


@settings(max_examples=60, deadline=None)
@given(scores, st.floats(0.05, 5.0))
def test_soft_weights_form_distribution_and_keep_order(phi, tau):
    w = np.array(token_weights(np.array(phi), "soft", tau=tau).weights)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0)
    order = np.argsort(phi)
    assert np.all(np.diff(w[order]) >= -1e-15)


@settings(max_examples=60, deadline=None)
@given(scores, st.floats(0.1, 100), st.floats(-5, 5))
def test_minmax_invariant_to_positive_affine_maps(x, a, b):
    x = np.array(x)
    assume(np.ptp(x) > 1e-6)
    np.testing.assert_allclose(minmax_normalize(a * x + b), minmax_normalize(x), atol=1e-9)
    y = minmax_normalize(x)
    assert y.min() == 0.0 and y.max() == 1.0


def test_profiles_on_memorising_target(target0, tmp_path):
    ds, model = target0
    seqs = [s.sequence for s in ds.forget]
    profs = importance_profiles(model, seqs, ds.vocab.mask_id, alpha=0.7, region="answer")
    for p, s in zip(profs, ds.forget):
        assert p.positions[0] == s.sequence.answer_start
        assert p.phi.max() <= 1.0 + 1e-12
        # the attribute value is the top-scored answer token
        assert int(p.positions[np.argmax(p.phi)]) in s.answer_knowledge_positions
    weights = [token_weights(p.phi, "hard", 0.2, positions=p.positions) for p in profs]
    dump_profiles(tmp_path / "p.jsonl", profs, weights)
    assert validate_jsonl(tmp_path / "p.jsonl", PROFILE_RECORD) == len(profs)
    rec = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
    assert rec["selected"] == sorted(weights[0].selected)
