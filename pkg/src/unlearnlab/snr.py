"""Monte Carlo lab for the gradient-geometry analysis of token weighting.

Per-token gradients are modelled as ``g_i = mu_i + noise_i`` in ``R^d`` with a
low-dimensional unlearning subspace ``U``.  Critical tokens have their mean in
``U``; noise lives in ``U^perp`` and follows a shared-factor model

    noise_i = s_i / sqrt(d - k) * P_perp(sqrt(rho) z + sqrt(1 - rho) z_i)

(drawn directly in complement coordinates)

so ``E||P_perp g_i||^2 = s_i^2`` and the pairwise correlation of the noise
projections is exactly ``rho``.  Tokens are positions ``2..T`` (``T - 1`` of
them), matching the language-model side.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Sequence

import numpy as np
from scipy import linalg, stats

Z95 = 1.959963984540054


@dataclasses.dataclass(frozen=True)
class SubspaceModel:
    """Orthonormal basis (``d x k``) of the unlearning subspace."""

    basis: np.ndarray

    @classmethod
    def random(cls, d: int, k: int, seed: int = 0) -> "SubspaceModel":
        if not 0 < k < d:
            raise ValueError(f"need 0 < k < d, got k={k}, d={d}")
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, k)))
        return cls(q)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @functools.cached_property
    def complement(self) -> np.ndarray:
        """Orthonormal basis (``d x (d-k)``) of ``U^perp``."""
        return linalg.null_space(self.basis.T)

    def project(self, x: np.ndarray) -> np.ndarray:
        """``P_U x`` along the last axis."""
        return (x @ self.basis) @ self.basis.T

    def project_perp(self, x: np.ndarray) -> np.ndarray:
        return x - self.project(x)

    def signal_energy(self, x: np.ndarray) -> np.ndarray:
        c = x @ self.basis
        return np.sum(c * c, axis=-1)

    def noise_energy(self, x: np.ndarray) -> np.ndarray:
        return np.sum(x * x, axis=-1) - self.signal_energy(x)


@dataclasses.dataclass
class TokenGradientModel:
    """Per-token gradient distribution for a length-``T`` sequence.

    ``critical`` holds 1-indexed positions in ``2..T``.  Critical means are
    ``signal * u`` for one shared unit direction ``u`` in ``U``; non-critical
    means are zero.  Critical noise scale is ``sigma`` (scalar or one value
    per critical token), non-critical scale is ``nu``.
    """

    subspace: SubspaceModel
    T: int
    critical: tuple[int, ...]
    sigma: float | Sequence[float] = 1.0
    nu: float = 1.0
    rho: float = 0.0
    signal: float = 1.0
    direction_seed: int = 0

    def __post_init__(self):
        self.critical = tuple(sorted(int(p) for p in self.critical))
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if not self.critical or self.critical[0] < 2 or self.critical[-1] > self.T or len(set(self.critical)) != len(self.critical):
            raise ValueError(f"critical positions must be distinct, nonempty and within 2..{self.T}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (len(self.critical),))
        if np.any(sig < 0) or self.nu < 0:
            raise ValueError("noise scales must be non-negative")
        self._sigma = np.array(sig)
        c = np.random.default_rng(self.direction_seed).standard_normal(self.subspace.k)
        self._direction = self.subspace.basis @ (c / np.linalg.norm(c))

    @property
    def n(self) -> int:
        return self.T - 1

    @property
    def positions(self) -> np.ndarray:
        return np.arange(2, self.T + 1)

    @property
    def critical_mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[np.array(self.critical) - 2] = True
        return m

    @property
    def scales(self) -> np.ndarray:
        """Noise scale ``s_i`` per token, ``(T-1,)``."""
        s = np.full(self.n, float(self.nu))
        s[self.critical_mask] = self._sigma
        return s

    @property
    def means(self) -> np.ndarray:
        mu = np.zeros((self.n, self.subspace.d))
        mu[self.critical_mask] = self.signal * self._direction
        return mu

    def expected_noise(self) -> np.ndarray:
        """``E||P_perp g_i||^2`` per token."""
        return self.scales**2

    def sample(self, trials: int, rng: np.random.Generator) -> np.ndarray:
        """``(trials, T-1, d)`` gradient draws."""
        # P_perp of a standard Gaussian in R^d is a standard Gaussian in the
        # complement coordinates, so draw there directly
        comp = self.subspace.complement
        m = comp.shape[1]
        shared = rng.standard_normal((trials, 1, m))
        own = rng.standard_normal((trials, self.n, m))
        z = math.sqrt(self.rho) * shared + math.sqrt(1.0 - self.rho) * own
        noise = (z * (self.scales / math.sqrt(m))[None, :, None]) @ comp.T
        return self.means[None] + noise


def _chunks(trials: int, chunk: int, seed: int):
    """Fixed-size chunks with child seeds spawned from the master seed."""
    n_chunks = max(1, -(-trials // chunk))
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    for i, child in enumerate(children):
        yield min(chunk, trials - i * chunk), np.random.default_rng(child)


def sample_gradients(model: TokenGradientModel, seed: int = 0, trials: int | None = None) -> np.ndarray:
    """One draw ``(T-1, d)`` of per-token gradients, or ``(trials, T-1, d)``."""
    rng = np.random.default_rng(seed)
    g = model.sample(1 if trials is None else trials, rng)
    return g[0] if trials is None else g


@dataclasses.dataclass
class EstimatorStats:
    """Monte Carlo summary of ``S``, ``N`` and ``SNR = E[S] / E[N]``."""

    signal: float
    signal_hw: float
    noise: float
    noise_hw: float
    trials: int
    delta: float | None = None

    @property
    def snr(self) -> float:
        return math.inf if self.noise == 0 else self.signal / self.noise

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["snr"] = self.snr
        return d


def _mean_hw(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        return float(x.mean()), math.inf
    return float(x.mean()), float(Z95 * x.std(ddof=1) / math.sqrt(x.size))


def estimator(gradients: np.ndarray, weights) -> np.ndarray:
    """``g_hat = sum_i w_i g_i`` over the token axis (second to last)."""
    g = np.asarray(gradients, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or g.shape[-2] != w.shape[0]:
        raise ValueError(f"weights of length {w.shape} do not match {g.shape[-2]} token gradients")
    return np.einsum("...id,i->...d", g, w)


def estimator_stats(subspace: SubspaceModel, g_hat: np.ndarray) -> EstimatorStats:
    s = subspace.signal_energy(np.atleast_2d(g_hat))
    n = subspace.noise_energy(np.atleast_2d(g_hat))
    sm, sh = _mean_hw(s)
    nm, nh = _mean_hw(np.maximum(n, 0.0))
    return EstimatorStats(sm, sh, nm, nh, int(s.size))


def check_weights(weights, T: int) -> np.ndarray:
    """Weights over positions ``2..T``: non-negative with ``sum <= T``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (T - 1,):
        raise ValueError(f"weights must have length {T - 1}, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() > T + 1e-9:
        raise ValueError(f"sum of weights {w.sum():.6g} exceeds T={T}")
    return w


def selection_weights(model: TokenGradientModel, r: float, seed: int = 0) -> np.ndarray:
    """Hard weights over ``k = max(1, round(r (T-1)))`` tokens.

    Critical tokens are taken first; remaining slots go to randomly chosen
    non-critical tokens.  With ``k < |K|`` a random subset of the critical
    tokens is kept (imperfect selection).
    """
    if not 0.0 < r <= 1.0:
        raise ValueError("r must lie in (0, 1]")
    n = model.n
    k = max(1, int(round(r * n)))
    rng = np.random.default_rng(seed)
    crit = np.flatnonzero(model.critical_mask)
    rest = np.flatnonzero(~model.critical_mask)
    if k <= crit.size:
        chosen = rng.choice(crit, size=k, replace=False)
    else:
        chosen = np.concatenate([crit, rng.choice(rest, size=k - crit.size, replace=False)])
    w = np.zeros(n)
    w[chosen] = 1.0
    return w


@dataclasses.dataclass
class NoiseBoundReport:
    lhs: float
    lhs_hw: float
    rhs: float
    factor: float
    diff: float
    diff_hw: float
    trials: int

    @property
    def holds(self) -> bool:
        """Bound not violated at 95%: paired excess ``lhs - rhs`` is not significantly positive."""
        return self.diff - self.diff_hw <= 0.0

    @property
    def holds_strict(self) -> bool:
        """``lhs`` upper CI below ``rhs`` (fails by construction when the bound is tight)."""
        return self.lhs + self.lhs_hw <= self.rhs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(holds=self.holds, holds_strict=self.holds_strict)
        return d


def check_noise_bound(model: TokenGradientModel, weights, trials: int = 10_000, seed: int = 0, chunk: int = 1000) -> NoiseBoundReport:
    """Monte Carlo check of ``E||P_perp g_hat||^2 <= (1 + rho (T-1)) sum w_i^2 E||P_perp g_i||^2``.

    ``rhs`` uses the configured per-token noise energies.  The verdict uses
    the per-trial difference between the estimator's noise energy and the
    right-hand side evaluated on the same draw, which cancels most of the
    shared variance.
    """
    if trials < 1000:
        raise ValueError("trials must be at least 1000")
    w = check_weights(weights, model.T)
    factor = 1.0 + model.rho * (model.T - 1)
    rhs = factor * float(np.sum(w**2 * model.expected_noise()))
    lhs_all, diff_all = [], []
    for size, rng in _chunks(trials, chunk, seed):
        g = model.sample(size, rng)
        per_tok = model.subspace.noise_energy(g)
        lhs = model.subspace.noise_energy(estimator(g, w))
        lhs_all.append(lhs)
        diff_all.append(lhs - factor * per_tok @ (w**2))
    lhs_m, lhs_h = _mean_hw(np.concatenate(lhs_all))
    d_m, d_h = _mean_hw(np.concatenate(diff_all))
    return NoiseBoundReport(lhs_m, lhs_h, rhs, factor, d_m, d_h, trials)


def noise_energy_ratio(model: TokenGradientModel, r: float = 0.2, trials: int = 10_000, seed: int = 0) -> dict:
    """Selected-to-full Monte Carlo noise energy for hard selection at ratio ``r``."""
    ws = selection_weights(model, r, seed)
    sel = check_noise_bound(model, ws, trials, seed)
    full = check_noise_bound(model, np.ones(model.n), trials, seed)
    return {"selected": sel.lhs, "full": full.lhs, "ratio": sel.lhs / full.lhs, "k": int(ws.sum()), "n": model.n}


def _run_stats(model, weights, trials, seed, chunk=1000) -> EstimatorStats:
    s_all, n_all = [], []
    for size, rng in _chunks(trials, chunk, seed):
        gh = estimator(model.sample(size, rng), weights)
        s_all.append(model.subspace.signal_energy(gh))
        n_all.append(np.maximum(model.subspace.noise_energy(gh), 0.0))
    sm, sh = _mean_hw(np.concatenate(s_all))
    nm, nh = _mean_hw(np.concatenate(n_all))
    return EstimatorStats(sm, sh, nm, nh, trials)


def predicted_ratio(model: TokenGradientModel) -> float:
    """``1 + sum_{i not in K} nu^2 / sum_{i in K} sigma_i^2`` (token estimator on ``S = K``)."""
    crit = float(np.sum(model._sigma**2))
    rest = (model.n - len(model.critical)) * model.nu**2
    return math.inf if crit == 0 else 1.0 + rest / crit


@dataclasses.dataclass
class SNRReport:
    token: EstimatorStats
    seq: EstimatorStats
    predicted: float

    @property
    def snr_token(self) -> float:
        return self.token.snr

    @property
    def snr_seq(self) -> float:
        return self.seq.snr

    @property
    def ratio(self) -> float:
        """``SNR_token / SNR_seq``; NaN when either side has zero noise."""
        if math.isinf(self.snr_token) or math.isinf(self.snr_seq) or self.snr_seq == 0:
            return math.nan
        return self.snr_token / self.snr_seq

    def to_dict(self) -> dict:
        return {
            "snr_token": self.snr_token,
            "snr_seq": self.snr_seq,
            "ratio": self.ratio,
            "predicted": self.predicted,
            "token": self.token.to_dict(),
            "seq": self.seq.to_dict(),
        }


def check_snr_ratio(model: TokenGradientModel, trials: int = 10_000, seed: int = 0, selection=None) -> SNRReport:
    """Token estimator (``S = K`` unless ``selection`` is given) against the uniform one.

    Both estimators see the same draws.
    """
    w_tok = model.critical_mask.astype(np.float64) if selection is None else check_weights(selection, model.T)
    if not np.all(w_tok[model.critical_mask] > 0):
        raise ValueError("token selection must cover every critical position")
    tok = _run_stats(model, w_tok, trials, seed)
    seq = _run_stats(model, np.ones(model.n), trials, seed)
    return SNRReport(tok, seq, predicted_ratio(model))


def snr_lower_bound(model: TokenGradientModel, weights) -> float:
    """``c^2 sigma^2 / ((1 + rho (T-1)) sum_i w_i^2 E||P_perp g_i||^2)`` with ``sigma^2`` the per-token signal energy."""
    w = check_weights(weights, model.T)
    c = float(w[model.critical_mask].sum())
    denom = (1.0 + model.rho * (model.T - 1)) * float(np.sum(w**2 * model.expected_noise()))
    return math.inf if denom == 0 else c**2 * model.signal**2 / denom


def snr_ladder(model: TokenGradientModel, levels=(1.0, 0.5, 0.25, 0.1, 0.0), trials: int = 10_000, seed: int = 0) -> list[dict]:
    """SNR as non-critical weights shrink with critical weights fixed at 1."""
    out = []
    for level in levels:
        w = np.where(model.critical_mask, 1.0, float(level))
        st = _run_stats(model, w, trials, seed)
        out.append({"level": float(level), "noncritical_w2": float(np.sum(w[~model.critical_mask] ** 2)), "snr": st.snr, "bound": snr_lower_bound(model, w)})
    return out


def corollary_slope(
    Ts=(20, 50, 100, 200, 500),
    n_critical: int = 5,
    sigma: float = 1.0,
    nu: float = 1.0,
    rho: float = 0.0,
    trials: int = 4000,
    seed: int = 0,
    subspace: SubspaceModel | None = None,
) -> dict:
    """Log-log slope of the measured SNR ratio against ``T / |K|``."""
    sub = subspace or SubspaceModel.random(16, 4, seed)
    rows = []
    for T in Ts:
        m = TokenGradientModel(sub, T, tuple(range(2, 2 + n_critical)), sigma, nu, rho)
        rep = check_snr_ratio(m, trials, seed)
        rows.append({"T": T, "x": T / n_critical, "ratio": rep.ratio, "predicted": rep.predicted})
    fit = stats.linregress(np.log([r["x"] for r in rows]), np.log([r["ratio"] for r in rows]))
    return {"slope": float(fit.slope), "intercept": float(fit.intercept), "rows": rows}


def noise_correlation(model: TokenGradientModel, trials: int = 10_000, seed: int = 0) -> float:
    """Empirical correlation of noise projections between the first two non-critical tokens."""
    idx = np.flatnonzero(~model.critical_mask)[:2]
    if idx.size < 2:
        idx = np.arange(2)
    g = model.sample(trials, np.random.default_rng(seed))[:, idx, :]
    p = model.subspace.project_perp(g)
    num = np.mean(np.sum(p[:, 0] * p[:, 1], axis=-1))
    den = math.sqrt(np.mean(np.sum(p[:, 0] ** 2, axis=-1)) * np.mean(np.sum(p[:, 1] ** 2, axis=-1)))
    return float(num / den) if den > 0 else 0.0


def noise_bound_grid(
    Ts=(10, 100, 500),
    rhos=(0.0, 0.05, 0.2),
    rs=(0.1, 0.2, 0.5),
    n_critical: int = 3,
    trials: int = 10_000,
    seed: int = 0,
    d: int = 16,
    k: int = 4,
) -> list[dict]:
    """Noise-bound check over a (T, rho, r) grid with equal noise scales."""
    sub = SubspaceModel.random(d, k, seed)
    rows = []
    for T in Ts:
        for rho in rhos:
            m = TokenGradientModel(sub, T, tuple(range(2, 2 + min(n_critical, T - 1))), 1.0, 1.0, rho)
            for r in rs:
                rep = check_noise_bound(m, selection_weights(m, r, seed), trials, seed)
                rows.append({"T": T, "rho": rho, "r": r, **rep.to_dict()})
    return rows


# -- language-model side --------------------------------------------------


def attribution_proxy_experiment(model, samples, mask_id: int, n_directions: int = 3, region: str = "all", min_tokens: int = 10) -> dict:
    """Rank correlation between masking attribution and gradient alignment.

    Per-token gradients ``g_i`` of ``log p`` are computed for every scored
    position of the forget samples.  The unlearning directions are the top
    right-singular vectors of the per-sample mean gradients; alignment is
    ``||P_U g_i||``.  Returns Spearman's rho, the mean alignment at answer
    knowledge positions and elsewhere, and the raw pairs.
    """
    from .attribution import attribution_scores, mask_knowledge, score_positions
    from .lm import backward, forward

    deltas, aligns_raw, is_know = [], [], []
    per_sample = []
    token_grads = []
    for s in samples:
        seq = getattr(s, "sequence", s)
        know = set(getattr(s, "answer_knowledge_positions", ()))
        pos = score_positions(seq, region)
        delta = attribution_scores(model, seq, mask_knowledge(seq, mask_id))
        tr = forward(model, seq)
        gs = []
        for p in pos:
            dl = np.zeros_like(tr.logits)
            probs = np.exp(tr.logprobs[0, p - 2])
            dl[0, p - 2] = -probs
            dl[0, p - 2, seq.ids[p - 1]] += 1.0
            gs.append(backward(model, tr, dlogits=dl))
        gs = np.array(gs)
        token_grads.append(gs)
        per_sample.append(gs.sum(axis=0))
        deltas.extend(delta[pos - 2])
        is_know.extend(p in know for p in pos)
    if len(deltas) < min_tokens or len(per_sample) < 2:
        raise ValueError(f"need at least {min_tokens} tokens from 2 samples, got {len(deltas)} from {len(per_sample)}")
    _, _, vt = np.linalg.svd(np.array(per_sample), full_matrices=False)
    basis = vt[: min(n_directions, vt.shape[0])].T
    for gs in token_grads:
        aligns_raw.extend(np.linalg.norm(gs @ basis, axis=1))
    deltas = np.array(deltas)
    aligns = np.array(aligns_raw)
    is_know = np.array(is_know)
    corr = stats.spearmanr(deltas, aligns).statistic
    return {
        "spearman": float(corr) if np.isfinite(corr) else 0.0,
        "n_tokens": int(deltas.size),
        "align_knowledge": float(aligns[is_know].mean()) if is_know.any() else math.nan,
        "align_other": float(aligns[~is_know].mean()) if (~is_know).any() else math.nan,
        "delta": deltas.tolist(),
        "alignment": aligns.tolist(),
    }
