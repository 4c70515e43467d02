"""Shared fixtures: tiny models for gradient checks and cached memorising targets."""

from __future__ import annotations

import math

import numpy as np
import pytest

from unlearnlab.datagen import generate, load_dataset
from unlearnlab.experiments import ExperimentSpec, build_target
from unlearnlab.lm import ModelConfig, ModelState, TokenSequence


# filled by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_config(vocab=20, d=12, mlp=24, layers=2, context=10) -> ModelConfig:
    return ModelConfig(vocab_size=vocab, d_model=d, d_mlp=mlp, n_layers=layers, context=context)


def random_sequences(rng, n, vocab, t_min=4, t_max=10):
    out = []
    for _ in range(n):
        T = int(rng.integers(t_min, t_max + 1))
        ids = tuple(int(i) for i in rng.integers(0, vocab - 1, size=T))
        start = int(rng.integers(3, T + 1))
        slots = frozenset({2}) if start > 2 else frozenset()
        out.append(TokenSequence(ids, start, slots))
    return out


def naive_forward(model: ModelState, ids) -> np.ndarray:
    """Position-by-position reference implementation returning log-probs ``(T, V)``."""
    p, cfg = model.params, model.config
    ids = list(ids)
    T, d = len(ids), cfg.d_model

    def rms(v):
        return v / math.sqrt(float(np.mean(v * v)) + 1e-6)

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))

    xs = [p["wte"][ids[t]] + p["wpe"][t] for t in range(T)]
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        a = [rms(x) for x in xs]
        q = [v @ p[pre + "wq"] for v in a]
        k = [v @ p[pre + "wk"] for v in a]
        v_ = [v @ p[pre + "wv"] for v in a]
        new = []
        for t in range(T):
            scores = np.array([q[t] @ k[j] / math.sqrt(d) for j in range(t + 1)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            o = sum(w[j] * v_[j] for j in range(t + 1))
            x1 = xs[t] + o @ p[pre + "wo"]
            h = gelu(rms(x1) @ p[pre + "w1"] + p[pre + "b1"])
            new.append(x1 + h @ p[pre + "w2"] + p[pre + "b2"])
        xs = new
    out = []
    for x in xs:
        z = rms(x) @ p["wout"] + p["bout"]
        z = z - z.max()
        out.append(z - math.log(np.exp(z).sum()))
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    m = ModelState.initialize(tiny_config(), seed=3)
    return m


@pytest.fixture(scope="session")
def dataset():
    return generate(seed=0)


@pytest.fixture(scope="session")
def target_cache(tmp_path_factory):
    return tmp_path_factory.mktemp("targets")


@pytest.fixture(scope="session")
def targets(target_cache):
    """Memorising targets for seeds 0, 1, 2 as ``{seed: (dataset, model)}``."""
    spec = ExperimentSpec(cache_dir=str(target_cache))
    out = {}
    for seed in (0, 1, 2):
        d = build_target(spec, seed)
        out[seed] = (load_dataset(d / "data"), ModelState.load(d / "target.npz"))
    return out


@pytest.fixture(scope="session")
def target0(targets):
    return targets[0]
