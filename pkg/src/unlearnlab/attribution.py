"""Per-token importance: masking attribution, predictive entropy and weights.

Score arrays are aligned with an explicit ``positions`` array of 1-indexed
positions (by default ``2..T``).  Everything here is per sample; nothing is
pooled across a batch.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .lm import ModelState, TokenSequence, Vocabulary, forward, pad_batch, target_log_probs

WEIGHT_MODES = ("uniform", "hard", "soft")


class AnnotationError(ValueError):
    """A sequence has no knowledge-slot annotations to mask."""


@dataclasses.dataclass(frozen=True)
class MaskedVariant:
    ids: tuple[int, ...]
    source: TokenSequence

    def __len__(self) -> int:
        return len(self.ids)


def mask_knowledge(seq: TokenSequence, vocab: Vocabulary | int) -> MaskedVariant:
    """Replace every knowledge-slot position with the mask token."""
    if not seq.knowledge_slots:
        raise AnnotationError("sequence has no knowledge slots to mask")
    mask_id = vocab if isinstance(vocab, (int, np.integer)) else vocab.mask_id
    ids = list(seq.ids)
    for p in seq.knowledge_slots:
        ids[p - 1] = int(mask_id)
    return MaskedVariant(tuple(ids), seq)


def _scores_batch(model, seqs, masked_ids=None, use_reference=False):
    ids, lengths = pad_batch(seqs)
    tr = forward(model, ids, use_reference=use_reference, lengths=lengths)
    lp_orig = target_log_probs(tr)
    lpv = tr.logprobs[:, :-1, :]
    entropy = np.maximum(-np.sum(np.exp(lpv) * lpv, axis=-1), 0.0)
    if masked_ids is None:
        return lp_orig, None, entropy
    mids, _ = pad_batch(masked_ids)
    trm = forward(model, mids, use_reference=use_reference, lengths=lengths)
    # targets stay the original tokens; only the conditioning prefix is masked
    lp_mask = target_log_probs(trm, targets=ids)
    return lp_orig, lp_mask, entropy


def attribution_scores(model: ModelState, seq: TokenSequence, masked: MaskedVariant, use_reference: bool = False) -> np.ndarray:
    """``|log p(s^i | s^<i) - log p(s^i | masked s^<i)|`` for positions ``2..T``."""
    if len(masked) != seq.T or masked.source.ids != seq.ids:
        raise ValueError("masked variant was not derived from this sequence")
    lp, lpm, _ = _scores_batch(model, [seq], [masked.ids], use_reference)
    return np.abs(lp[0] - lpm[0])


def entropy_scores(model: ModelState, seq: TokenSequence, use_reference: bool = False) -> np.ndarray:
    """Predictive entropy (nats) of the next-token distribution for positions ``2..T``."""
    return _scores_batch(model, [seq], None, use_reference)[2][0]


def minmax_normalize(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def composite_scores(delta_norm, entropy_norm, alpha: float) -> np.ndarray:
    dn, hn = np.asarray(delta_norm, dtype=np.float64), np.asarray(entropy_norm, dtype=np.float64)
    if dn.shape != hn.shape:
        raise ValueError("delta and entropy scores differ in length")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * dn + (1.0 - alpha) * hn


def selection_size(n: int, r: float) -> int:
    return max(1, int(round(r * n)))


def hard_select(phi, r: float, positions: Sequence[int] | None = None) -> frozenset[int]:
    """Top-``r`` positions by score; ties go to the earlier position.

    ``positions`` defaults to ``2, 3, ...`` aligned with ``phi``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise ValueError("empty score list")
    if not 0.0 < r <= 1.0:
        raise ValueError("r must lie in (0, 1]")
    pos = np.arange(2, phi.size + 2) if positions is None else np.asarray(positions)
    order = np.argsort(-phi, kind="stable")
    return frozenset(int(pos[j]) for j in order[: selection_size(phi.size, r)])


@dataclasses.dataclass(frozen=True)
class TokenWeights:
    mode: str
    positions: tuple[int, ...]
    weights: tuple[float, ...]
    selected: frozenset[int] | None = None
    r: float | None = None
    tau: float | None = None

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.positions, self.weights))

    def dense(self, T: int) -> np.ndarray:
        """Weights over positions ``2..T`` (zero where not scored)."""
        out = np.zeros(T - 1)
        for p, w in zip(self.positions, self.weights):
            if not 2 <= p <= T:
                raise ValueError(f"weight position {p} outside [2, {T}]")
            out[p - 2] = w
        return out

    @property
    def active(self) -> int:
        return sum(1 for w in self.weights if w != 0.0)


def token_weights(phi, mode: str, r: float = 0.2, tau: float = 0.5, positions: Sequence[int] | None = None) -> TokenWeights:
    phi = np.asarray(phi, dtype=np.float64)
    pos = tuple(int(p) for p in (range(2, phi.size + 2) if positions is None else positions))
    if len(pos) != phi.size:
        raise ValueError("positions and scores differ in length")
    if mode == "uniform":
        return TokenWeights(mode, pos, (1.0,) * len(pos))
    if mode == "hard":
        sel = hard_select(phi, r, pos)
        return TokenWeights(mode, pos, tuple(1.0 if p in sel else 0.0 for p in pos), sel, r=r)
    if mode == "soft":
        if tau <= 0:
            raise ValueError("tau must be positive")
        z = phi / tau
        z = z - z.max()
        e = np.exp(z)
        return TokenWeights(mode, pos, tuple(float(v) for v in e / e.sum()), tau=tau)
    raise ValueError(f"unknown weighting mode {mode!r}")


@dataclasses.dataclass(frozen=True)
class ImportanceProfile:
    positions: np.ndarray
    delta: np.ndarray
    entropy: np.ndarray
    delta_norm: np.ndarray
    entropy_norm: np.ndarray
    phi: np.ndarray
    alpha: float

    def to_record(self, weights: TokenWeights | None = None, sample_id: str | None = None) -> dict:
        rec = {
            "positions": self.positions.tolist(),
            "delta": self.delta.tolist(),
            "entropy": self.entropy.tolist(),
            "phi": self.phi.tolist(),
            "alpha": self.alpha,
            "selected": sorted(weights.selected) if weights is not None and weights.selected is not None else None,
        }
        if sample_id is not None:
            rec["sample_id"] = sample_id
        return rec


def score_positions(seq: TokenSequence, region: str = "all") -> np.ndarray:
    if region == "all":
        return np.arange(2, seq.T + 1)
    if region == "answer":
        return np.arange(max(2, seq.answer_start), seq.T + 1)
    raise ValueError(f"unknown region {region!r}")


def importance_profiles(
    model: ModelState,
    seqs: Sequence[TokenSequence],
    mask_id: int,
    alpha: float = 0.7,
    region: str = "all",
    use_reference: bool = False,
) -> list[ImportanceProfile]:
    """Attribution, entropy and composite scores for each sequence (batched forwards)."""
    masked = [mask_knowledge(s, mask_id).ids for s in seqs]
    lp, lpm, ent = _scores_batch(model, seqs, masked, use_reference)
    out = []
    for b, s in enumerate(seqs):
        pos = score_positions(s, region)
        cols = pos - 2
        delta = np.abs(lp[b, cols] - lpm[b, cols])
        h = ent[b, cols]
        dn, hn = minmax_normalize(delta), minmax_normalize(h)
        out.append(ImportanceProfile(pos, delta, h, dn, hn, composite_scores(dn, hn, alpha), alpha))
    return out


def dump_profiles(path, profiles: Sequence[ImportanceProfile], weights: Sequence[TokenWeights] | None = None, ids: Sequence[str] | None = None) -> None:
    """Write one JSON record per profile."""
    with open(path, "w") as fh:
        for k, prof in enumerate(profiles):
            w = weights[k] if weights is not None else None
            fh.write(json.dumps(prof.to_record(w, ids[k] if ids else None)) + "\n")
