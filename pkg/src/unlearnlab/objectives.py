"""Token-level unlearning losses, the KL retention term and their gradients.

All four per-token losses are in minimisation form: descending on
``log p`` (GA), ``p**gamma * log p`` (WGA) or the NPO softplus all push the
forget-token probability down, so the trainer always minimises.

Loss arrays are ``(B, T-1)``; column ``j`` holds position ``j + 2``.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .lm import (
    ForwardTrace,
    ModelState,
    TokenSequence,
    backward,
    forward,
    logprob_upstream,
    pad_batch,
    target_log_probs,
    valid_mask,
)

METHODS = ("GA", "WGA", "NPO", "RMU")


@dataclasses.dataclass
class ObjectiveConfig:
    """Method choice and hyperparameters.

    Defaults: ``gamma=1`` (WGA), ``beta=0.1`` (NPO), ``rmu_scale=5`` and
    ``rmu_layer=None`` meaning the middle hidden layer, ``lam=0.1``.

    ``normalize="sum"`` uses the per-sample weighted sum of token losses;
    ``"mean"`` divides each sample's sum by its total weight, so uniform
    weights give the usual token-mean loss and hard selection spends the same
    per-sample budget on fewer tokens.
    """

    method: str = "GA"
    gamma: float = 1.0
    beta: float = 0.1
    rmu_layer: int | None = None
    rmu_scale: float = 5.0
    rmu_seed: int = 0
    lam: float = 0.1
    normalize: str = "sum"

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.gamma <= 0 or self.beta <= 0 or self.rmu_scale <= 0:
            raise ValueError("gamma, beta and rmu_scale must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.normalize not in ("sum", "mean"):
            raise ValueError("normalize must be 'sum' or 'mean'")
        self._target: np.ndarray | None = None

    def layer(self, model: ModelState) -> int:
        n = model.config.n_layers
        layer = (n + 1) // 2 if self.rmu_layer is None else self.rmu_layer
        if not 0 <= layer <= n:
            raise ValueError(f"rmu_layer {layer} outside [0, {n}]")
        return layer

    def target(self, dim: int) -> np.ndarray:
        """Fixed random unit vector ``u`` (uniform on the sphere, seeded)."""
        if self._target is None or self._target.size != dim:
            v = np.random.default_rng(self.rmu_seed).standard_normal(dim)
            self._target = v / np.linalg.norm(v)
        return self._target

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def token_loss_terms(
    model: ModelState,
    trace: ForwardTrace,
    config: ObjectiveConfig,
    ref_trace: ForwardTrace | None = None,
):
    """Per-position losses and their local derivative.

    Returns ``(losses, upstream)`` where ``upstream`` is ``d loss / d log p``
    for the likelihood methods and ``d loss / d hidden`` rows (``(B, T-1, d)``)
    for RMU.
    """
    method = config.method
    if method == "RMU":
        layer = config.layer(model)
        h = trace.hidden[layer][:, :-1, :]
        resid = h - config.rmu_scale * config.target(h.shape[-1])
        return np.sum(resid * resid, axis=-1), 2.0 * resid
    lp = target_log_probs(trace)
    if method == "GA":
        return lp, np.ones_like(lp)
    if method == "WGA":
        pg = np.exp(config.gamma * lp)
        return pg * lp, pg * (config.gamma * lp + 1.0)
    if ref_trace is None:
        ref_trace = forward(model, trace.ids, use_reference=True, lengths=trace.lengths)
    z = config.beta * (lp - target_log_probs(ref_trace))
    return (2.0 / config.beta) * _softplus(z), 2.0 * _sigmoid(z)


def _grad_from_terms(model, trace, config, upstream, coef):
    if config.method == "RMU":
        layer = config.layer(model)
        dh = np.zeros_like(trace.hidden[layer])
        dh[:, :-1, :] = coef[..., None] * upstream
        return backward(model, trace, dhidden={layer: dh})
    return backward(model, trace, dlogits=logprob_upstream(trace, coef * upstream))


def token_loss(
    method: str,
    model: ModelState,
    trace: ForwardTrace,
    position: int,
    config: ObjectiveConfig | None = None,
    b: int = 0,
) -> float:
    """Scalar ``l_i`` for one 1-indexed position of batch row ``b``."""
    cfg = dataclasses.replace(config or ObjectiveConfig(), method=method)
    if not 2 <= position <= int(trace.lengths[b]):
        raise IndexError(f"position {position} outside [2, {int(trace.lengths[b])}]")
    losses, _ = token_loss_terms(model, trace, cfg)
    return float(losses[b, position - 2])


def _dense_weights(weights, T: int) -> np.ndarray:
    if hasattr(weights, "dense"):
        return weights.dense(T)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (T - 1,):
        raise ValueError(f"weights must cover positions 2..{T} (length {T - 1}), got {w.shape}")
    return w


def unified_unlearn_loss(
    model: ModelState,
    batch: Sequence[tuple[TokenSequence, object]],
    config: ObjectiveConfig,
) -> tuple[float, np.ndarray]:
    """Batch mean of ``sum_i w_i * l_i`` and its gradient.

    Each batch item pairs a sequence with weights: a ``TokenWeights`` or an
    array over positions ``2..T``.
    """
    if not batch:
        raise ValueError("empty batch")
    seqs = [s for s, _ in batch]
    ids, lengths = pad_batch(seqs)
    B, T = ids.shape
    W = np.zeros((B, T - 1))
    for b, (s, w) in enumerate(batch):
        W[b, : s.T - 1] = _dense_weights(w, s.T)
    trace = forward(model, ids, lengths=lengths)
    losses, upstream = token_loss_terms(model, trace, config)
    coef = _coefficients(W, config) / B
    value = np.sum(coef * losses)
    grad = _grad_from_terms(model, trace, config, upstream, coef)
    return float(value), grad


def _coefficients(W: np.ndarray, config: ObjectiveConfig) -> np.ndarray:
    if config.normalize == "sum":
        return W
    Z = W.sum(axis=1, keepdims=True)
    return W / np.where(Z > 0, Z, 1.0)


def region_mask(seqs: Sequence[TokenSequence], region: str = "all") -> np.ndarray:
    """``(B, T-1)`` mask of loss positions: ``all`` = 2..T, ``answer`` = answer region."""
    T = max(s.T for s in seqs)
    pos = np.arange(2, T + 1)[None, :]
    lengths = np.array([s.T for s in seqs])[:, None]
    mask = pos <= lengths
    if region == "answer":
        mask &= pos >= np.array([s.answer_start for s in seqs])[:, None]
    elif region != "all":
        raise ValueError(f"unknown region {region!r}")
    return mask


def sequence_unlearn_loss(
    model: ModelState,
    seqs: Sequence[TokenSequence],
    config: ObjectiveConfig,
    region: str = "all",
) -> tuple[float, np.ndarray]:
    """Sequence-level baseline: batch mean of the unweighted token-loss sum."""
    if not seqs:
        raise ValueError("empty batch")
    ids, lengths = pad_batch(seqs)
    B = ids.shape[0]
    mask = region_mask(seqs, region)
    trace = forward(model, ids, lengths=lengths)
    losses, upstream = token_loss_terms(model, trace, config)
    ones = np.where(mask, 1.0, 0.0)
    if config.normalize == "mean":
        ones = ones / np.maximum(ones.sum(axis=1, keepdims=True), 1.0)
    coef = ones / B
    value = np.sum(coef * losses)
    grad = _grad_from_terms(model, trace, config, upstream, coef)
    return float(value), grad


def kl_per_position(trace: ForwardTrace, ref_trace: ForwardTrace) -> np.ndarray:
    """``KL(p_ref || p_theta)`` for each predicted position, ``(B, T-1)``."""
    lp = trace.logprobs[:, :-1, :]
    lq = ref_trace.logprobs[:, :-1, :]
    kl = np.sum(np.exp(lq) * (lq - lp), axis=-1)
    return np.where(valid_mask(trace), np.maximum(kl, 0.0), 0.0)


def kl_retention_loss(model: ModelState, seqs: Sequence[TokenSequence]) -> tuple[float, np.ndarray]:
    """Batch mean over retain sequences of the summed forward KL to the reference."""
    if not seqs:
        raise ValueError("empty batch")
    ids, lengths = pad_batch(seqs)
    B = ids.shape[0]
    trace = forward(model, ids, lengths=lengths)
    ref = forward(model, ids, use_reference=True, lengths=lengths)
    value = np.sum(kl_per_position(trace, ref)) / B
    mask = valid_mask(trace)[..., None]
    dl = np.zeros_like(trace.logits)
    dl[:, :-1, :] = np.where(mask, np.exp(trace.logprobs[:, :-1, :]) - np.exp(ref.logprobs[:, :-1, :]), 0.0) / B
    return float(value), backward(model, trace, dlogits=dl)


def total_loss(unlearn, kl, lam: float):
    """``unlearn + lam * kl`` for scalars or ``(value, grad)`` pairs."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if isinstance(unlearn, tuple):
        return unlearn[0] + lam * kl[0], unlearn[1] + lam * kl[1]
    return unlearn + lam * kl
