import math

import numpy as np
import pytest
from scipy.special import rel_entr

from conftest import naive_forward, random_sequences
from unlearnlab.lm import ModelState, forward, hidden_at
from unlearnlab.objectives import (
    ObjectiveConfig,
    kl_per_position,
    kl_retention_loss,
    region_mask,
    sequence_unlearn_loss,
    token_loss,
    total_loss,
    unified_unlearn_loss,
)


@pytest.fixture
def frozen(tiny_model):
    tiny_model.freeze_reference()
    return tiny_model


def _fd(f, theta, v, eps=1e-5):
    return (f(theta + eps * v) - f(theta - eps * v)) / (2 * eps)


def test_ga_and_wga_token_losses(tiny_model, rng):
    s = random_sequences(rng, 1, 20, 7, 7)[0]
    tr = forward(tiny_model, s)
    ref = naive_forward(tiny_model, s.ids)
    for pos in range(2, 8):
        lp = ref[pos - 2, s.ids[pos - 1]]
        assert token_loss("GA", tiny_model, tr, pos) == pytest.approx(lp, abs=1e-10)
        cfg = ObjectiveConfig(gamma=2.0)
        assert token_loss("WGA", tiny_model, tr, pos, cfg) == pytest.approx(math.exp(2 * lp) * lp, abs=1e-10)


def test_npo_at_reference_is_two_over_beta_log_two(frozen, rng):
    s = random_sequences(rng, 1, 20)[0]
    tr = forward(frozen, s)
    for beta in (0.1, 1.0):
        val = token_loss("NPO", frozen, tr, 3, ObjectiveConfig(beta=beta))
        assert val == pytest.approx(2 / beta * math.log(2), rel=1e-12)


def test_npo_decreases_when_probability_drops(frozen, rng):
    s = random_sequences(rng, 1, 20)[0]
    cfg = ObjectiveConfig(method="NPO")
    before, grad = unified_unlearn_loss(frozen, [(s, np.ones(s.T - 1))], cfg)
    frozen.update(-0.05 * grad)
    after, _ = unified_unlearn_loss(frozen, [(s, np.ones(s.T - 1))], cfg)
    assert after < before


def test_rmu_token_loss_is_distance_to_scaled_target(tiny_model, rng):
    s = random_sequences(rng, 1, 20)[0]
    tr = forward(tiny_model, s)
    cfg = ObjectiveConfig(rmu_scale=3.0, rmu_seed=7)
    u = cfg.target(12)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    for pos in (2, 4):
        h = hidden_at(tr, cfg.layer(tiny_model), pos - 1)
        assert token_loss("RMU", tiny_model, tr, pos, cfg) == pytest.approx(np.sum((h - 3.0 * u) ** 2))


@pytest.mark.parametrize("method", ["GA", "WGA", "NPO", "RMU"])
@pytest.mark.parametrize("normalize", ["sum", "mean"])
def test_unified_loss_gradient(frozen, rng, method, normalize):
    frozen.update(0.05 * rng.standard_normal(frozen.theta.size))
    seqs = random_sequences(rng, 3, 20)
    batch = [(s, rng.random(s.T - 1)) for s in seqs]
    cfg = ObjectiveConfig(method=method, normalize=normalize)
    _, g = unified_unlearn_loss(frozen, batch, cfg)

    def f(theta):
        m = ModelState(frozen.config, theta, frozen.reference)
        return unified_unlearn_loss(m, batch, cfg)[0]

    v = rng.standard_normal(g.size)
    fd = _fd(f, frozen.theta, v)
    assert abs(fd - g @ v) <= 1e-6 * max(1.0, abs(fd))


def test_weighted_sum_value(tiny_model, rng):
    seqs = random_sequences(rng, 2, 20)
    ws = [rng.random(s.T - 1) for s in seqs]
    val, _ = unified_unlearn_loss(tiny_model, list(zip(seqs, ws)), ObjectiveConfig())
    expect = 0.0
    for s, w in zip(seqs, ws):
        lp = naive_forward(tiny_model, s.ids)
        expect += sum(w[i - 2] * lp[i - 2, s.ids[i - 1]] for i in range(2, s.T + 1))
    assert val == pytest.approx(expect / 2, abs=1e-10)


def test_mean_normalisation_divides_by_weight_total(tiny_model, rng):
    s = random_sequences(rng, 1, 20)[0]
    w = rng.random(s.T - 1) + 0.1
    total, _ = unified_unlearn_loss(tiny_model, [(s, w)], ObjectiveConfig())
    mean, _ = unified_unlearn_loss(tiny_model, [(s, w)], ObjectiveConfig(normalize="mean"))
    assert mean == pytest.approx(total / w.sum())


@pytest.mark.parametrize("method", ["GA", "WGA", "NPO", "RMU"])
@pytest.mark.parametrize("region", ["all", "answer"])
def test_uniform_weights_equal_sequence_loss(frozen, rng, method, region):
    seqs = random_sequences(rng, 4, 20)
    cfg = ObjectiveConfig(method=method)
    mask = region_mask(seqs, region)
    batch = [(s, mask[b, : s.T - 1].astype(float)) for b, s in enumerate(seqs)]
    v1, g1 = unified_unlearn_loss(frozen, batch, cfg)
    v2, g2 = sequence_unlearn_loss(frozen, seqs, cfg, region)
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)


def test_region_mask():
    from unlearnlab.lm import TokenSequence

    seqs = [TokenSequence((1, 2, 3, 4, 5), 4, frozenset()), TokenSequence((1, 2, 3), 2, frozenset())]
    assert region_mask(seqs, "all").tolist() == [[True] * 4, [True, True, False, False]]
    assert region_mask(seqs, "answer").tolist() == [[False, False, True, True], [True, True, False, False]]
    with pytest.raises(ValueError):
        region_mask(seqs, "question")


def test_kl_zero_at_reference_and_matches_direct_sum(frozen, rng):
    seqs = random_sequences(rng, 3, 20)
    val, grad = kl_retention_loss(frozen, seqs)
    assert val == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(grad, 0.0, atol=1e-12)
    frozen.update(0.1 * rng.standard_normal(frozen.theta.size))
    val, _ = kl_retention_loss(frozen, seqs)
    ref = ModelState(frozen.config, frozen.reference)
    expect = 0.0
    for s in seqs:
        p_ref = np.exp(naive_forward(ref, s.ids))
        p_cur = np.exp(naive_forward(frozen, s.ids))
        expect += sum(rel_entr(p_ref[t], p_cur[t]).sum() for t in range(s.T - 1))
    assert val == pytest.approx(expect / 3, rel=1e-9)


def test_kl_gradient(frozen, rng):
    frozen.update(0.1 * rng.standard_normal(frozen.theta.size))
    seqs = random_sequences(rng, 3, 20)
    _, g = kl_retention_loss(frozen, seqs)

    def f(theta):
        return kl_retention_loss(ModelState(frozen.config, theta, frozen.reference), seqs)[0]

    v = rng.standard_normal(g.size)
    fd = _fd(f, frozen.theta, v)
    assert abs(fd - g @ v) <= 1e-6 * max(1.0, abs(fd))


def test_kl_per_position_ignores_padding(frozen):
    from unlearnlab.lm import TokenSequence

    frozen.update(np.full_like(frozen.theta, 0.01))
    seqs = [TokenSequence((1, 2, 3, 4), 3, frozenset()), TokenSequence((1, 2), 2, frozenset())]
    tr = forward(frozen, seqs)
    kl = kl_per_position(tr, forward(frozen, seqs, use_reference=True))
    assert np.all(kl[1, 1:] == 0) and np.all(kl[0] > 0)


def test_total_loss_combines_pairs():
    assert total_loss(1.0, 2.0, 0.5) == 2.0
    v, g = total_loss((1.0, np.ones(2)), (2.0, np.ones(2)), 0.5)
    assert v == 2.0 and g.tolist() == [1.5, 1.5]
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(method="DPO")
    with pytest.raises(ValueError):
        ObjectiveConfig(beta=0)
    with pytest.raises(ValueError):
        ObjectiveConfig(normalize="max")
    assert ObjectiveConfig(method="npo").method == "NPO"


def test_weights_length_checked(tiny_model, rng):
    s = random_sequences(rng, 1, 20)[0]
    with pytest.raises(ValueError):
        unified_unlearn_loss(tiny_model, [(s, np.ones(s.T))], ObjectiveConfig())
    with pytest.raises(ValueError):
        unified_unlearn_loss(tiny_model, [], ObjectiveConfig())
