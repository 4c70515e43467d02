import math

import numpy as np
import pytest

from conftest import random_sequences, tiny_config
from unlearnlab.lm import ModelState
from unlearnlab.metrics import evaluate, exact_match_by_decoding


def test_memorising_target(target0):
    ds, model = target0
    m = evaluate(model, ds.samples)
    # fine-tuning stops at the configured memorisation thresholds
    assert m["exact_match"] >= 0.95
    assert m["nll"] <= 0.02
    assert m["kl_drift"] == pytest.approx(0.0, abs=1e-15)
    assert m["n"] == 200


def test_uniform_output_gives_log_vocab(rng):
    cfg = tiny_config()
    model = ModelState.initialize(cfg, seed=0)
    p = model.params
    p["wout"][:] = 0.0
    p["bout"][:] = 0.0
    model = ModelState(cfg, np.concatenate([p[k].ravel() for k in p]))
    seqs = random_sequences(rng, 6, cfg.vocab_size)
    assert evaluate(model, seqs)["nll"] == pytest.approx(math.log(cfg.vocab_size), abs=1e-12)


def test_fast_exact_match_equals_decoding(tiny_model, rng, target0):
    seqs = random_sequences(rng, 12, 20)
    assert evaluate(tiny_model, seqs)["exact_match"] == exact_match_by_decoding(tiny_model, seqs)
    ds, model = target0
    subset = ds.forget[:10]
    assert evaluate(model, subset)["exact_match"] == exact_match_by_decoding(model, subset)


def test_deterministic_and_chunk_invariant(tiny_model, rng):
    seqs = random_sequences(rng, 9, 20)
    a, b = evaluate(tiny_model, seqs), evaluate(tiny_model, seqs, chunk=2)
    assert a["exact_match"] == b["exact_match"]
    assert a["nll"] == pytest.approx(b["nll"], rel=1e-12)


def test_empty_and_mismatched(tiny_model, rng):
    assert math.isnan(evaluate(tiny_model, [])["nll"])
    with pytest.raises(ValueError):
        evaluate(tiny_model, random_sequences(rng, 2, 20), vocab_size=21)
