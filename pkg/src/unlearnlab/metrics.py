"""Answer-region NLL, exact match and KL drift."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .lm import ModelState, TokenSequence, forward, greedy_decode, pad_batch, target_log_probs
from .objectives import kl_per_position, region_mask


def _as_seqs(samples) -> list[TokenSequence]:
    return [getattr(s, "sequence", s) for s in samples]


def evaluate(model: ModelState, samples: Sequence, vocab_size: int | None = None, chunk: int = 256) -> dict:
    """Metrics over a split.

    ``nll``: mean per-token negative log-likelihood over all answer tokens.
    ``exact_match``: fraction of samples whose greedy answer decode equals the
    reference (computed as "every teacher-forced argmax is correct", which is
    equivalent).  ``kl_drift``: mean per-token ``KL(p_ref || p)`` over
    positions ``2..T`` when a reference is frozen, else ``None``.
    """
    seqs = _as_seqs(samples)
    if vocab_size is not None and vocab_size != model.config.vocab_size:
        raise ValueError(f"vocabulary size {vocab_size} does not match model ({model.config.vocab_size})")
    if not seqs:
        return {"nll": float("nan"), "exact_match": float("nan"), "kl_drift": None, "n": 0}
    for s in seqs:
        s.check_vocab(model.config.vocab_size)
    nll_sum = n_tok = n_match = 0.0
    kl_sum = kl_tok = 0.0
    for start in range(0, len(seqs), chunk):
        part = seqs[start : start + chunk]
        ids, lengths = pad_batch(part)
        tr = forward(model, ids, lengths=lengths)
        ans = region_mask(part, "answer")
        lp = target_log_probs(tr)
        nll_sum += -np.sum(np.where(ans, lp, 0.0))
        n_tok += ans.sum()
        correct = np.argmax(tr.logprobs[:, :-1, :], axis=-1) == ids[:, 1:]
        n_match += np.sum(np.all(correct | ~ans, axis=1))
        if model.has_reference:
            ref = forward(model, ids, use_reference=True, lengths=lengths)
            kl_sum += np.sum(kl_per_position(tr, ref))
            kl_tok += np.sum(lengths - 1)
    return {
        "nll": float(nll_sum / n_tok),
        "exact_match": float(n_match / len(seqs)),
        "kl_drift": float(kl_sum / kl_tok) if model.has_reference else None,
        "n": len(seqs),
    }


def exact_match_by_decoding(model: ModelState, samples: Sequence) -> float:
    """Exact match via explicit greedy decoding (slow reference path)."""
    seqs = _as_seqs(samples)
    hits = 0
    for s in seqs:
        prompt = s.ids[: s.answer_start - 1]
        hits += greedy_decode(model, prompt, s.T - len(prompt)) == list(s.ids[len(prompt) :])
    return hits / len(seqs)
