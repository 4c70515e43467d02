"""Target fine-tuning and the token-level unlearning loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .attribution import WEIGHT_MODES, importance_profiles, score_positions, token_weights
from .lm import ModelState, NumericError, TokenSequence, backward, forward, logprob_upstream, pad_batch
from .metrics import evaluate
from .objectives import ObjectiveConfig, kl_retention_loss, region_mask, sequence_unlearn_loss, total_loss, unified_unlearn_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Fine-tuning did not reach the memorisation target."""


class UnlearningAborted(RuntimeError):
    """Non-finite loss; carries the rolled-back model and the partial report."""

    def __init__(self, msg, model, report):
        super().__init__(msg)
        self.model = model
        self.report = report


class SGD:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, grad: np.ndarray) -> np.ndarray:
        return -self.lr * grad


class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return -self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, size: int, lr: float):
    if kind == "sgd":
        return SGD(size, lr)
    if kind == "adam":
        return Adam(size, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def _seqs(samples) -> list[TokenSequence]:
    return [getattr(s, "sequence", s) for s in samples]


@dataclasses.dataclass
class FinetuneConfig:
    max_epochs: int = 400
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    mask_prob: float = 0.01
    target_em: float = 0.95
    stop_nll: float = 0.02
    check_every: int = 10


def finetune_target(model: ModelState, samples: Sequence, mask_id: int, config: FinetuneConfig | None = None) -> ModelState:
    """Train next-token prediction on every sample until memorised, then freeze the reference.

    Question tokens after ``<bos>`` are replaced by the mask token with
    probability ``mask_prob`` in the input (targets are untouched) so masked
    contexts are in-distribution for attribution.  Stops once exact match is
    at least ``target_em`` and answer NLL at most ``stop_nll`` on the data.
    """
    cfg = config or FinetuneConfig()
    seqs = _seqs(samples)
    if not seqs:
        raise ValueError("empty fine-tuning dataset")
    model = model.copy() if not model.has_reference else ModelState(model.config, model.theta)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.theta.size, cfg.lr)
    metrics = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(seqs))
        for start in range(0, len(seqs), cfg.batch_size):
            batch = [seqs[i] for i in order[start : start + cfg.batch_size]]
            ids, lengths = pad_batch(batch)
            pos = np.arange(1, ids.shape[1] + 1)[None, :]
            qmask = (pos >= 2) & (pos < np.array([s.answer_start for s in batch])[:, None])
            corrupt = qmask & (rng.random(ids.shape) < cfg.mask_prob)
            inputs = np.where(corrupt, mask_id, ids)
            tr = forward(model, inputs, lengths=lengths)
            w = region_mask(batch, "all").astype(np.float64)
            w /= w.sum()
            grad = -backward(model, tr, dlogits=logprob_upstream(tr, w, targets=ids))
            model.update(opt.step(grad))
        if epoch % cfg.check_every == 0 or epoch == cfg.max_epochs:
            metrics = evaluate(model, seqs)
            log.debug("finetune epoch %d: %s", epoch, metrics)
            if metrics["exact_match"] >= cfg.target_em and metrics["nll"] <= cfg.stop_nll:
                break
    if metrics["exact_match"] < cfg.target_em:
        raise TrainingError(
            f"memorisation not reached after {cfg.max_epochs} epochs: exact match "
            f"{metrics['exact_match']:.3f} < {cfg.target_em}, answer NLL {metrics['nll']:.4f}"
        )
    model.freeze_reference()
    return model


@dataclasses.dataclass
class TrainConfig:
    """Unlearning-loop configuration (``objective`` carries the method and ``lam``)."""

    epochs: int = 8
    batch_size: int = 4
    lr: float = 0.02
    optimizer: str = "sgd"
    seed: int = 0
    weighting: str = "hard"
    r: float = 0.2
    alpha: float = 0.7
    tau: float = 0.5
    region: str = "answer"
    score_source: str = "current"
    eval_every: int = 1
    sequence_level: bool = False
    objective: ObjectiveConfig = dataclasses.field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.r <= 1.0:
            raise ValueError("r must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.weighting not in WEIGHT_MODES:
            raise ValueError(f"weighting must be one of {WEIGHT_MODES}")
        if self.score_source not in ("current", "reference"):
            raise ValueError("score_source must be 'current' or 'reference'")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every out of range")

    @property
    def lam(self) -> float:
        return self.objective.lam

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "objective"}
        d["objective"] = self.objective.to_dict()
        return d


@dataclasses.dataclass
class RunReport:
    config: dict
    records: list[dict] = dataclasses.field(default_factory=list)
    aborted: bool = False

    def add(self, **rec) -> None:
        self.records.append(rec)

    def final(self) -> dict:
        return self.records[-1]

    def write_jsonl(self, path, append: bool = True) -> None:
        with open(path, "a" if append else "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


def compute_weights(model: ModelState, seqs: Sequence[TokenSequence], mask_id: int, cfg: TrainConfig):
    """Per-sample token weights over the configured scoring region."""
    if cfg.weighting == "uniform":
        return [token_weights(np.zeros(len(p)), "uniform", positions=p) for p in (score_positions(s, cfg.region) for s in seqs)], None
    profiles = importance_profiles(model, seqs, mask_id, cfg.alpha, cfg.region, use_reference=cfg.score_source == "reference")
    weights = [token_weights(p.phi, cfg.weighting, cfg.r, cfg.tau, p.positions) for p in profiles]
    return weights, profiles


def unlearn(
    target: ModelState,
    forget: Sequence,
    retain: Sequence,
    config: TrainConfig,
    mask_id: int,
    checkpoint: str | Path | None = None,
) -> tuple[ModelState, RunReport]:
    """Token-level unlearning starting from ``target`` (which must carry a frozen reference).

    Per batch: scores under the current parameters, weights, the weighted
    unlearning loss plus ``lam`` times the KL retention term on a retain batch
    of the same size, then one optimiser step.  Metrics are recorded before
    training (step 0) and every ``eval_every`` epochs.
    """
    fseqs, rseqs = _seqs(forget), _seqs(retain)
    if not fseqs:
        raise ValueError("empty forget set")
    if not target.has_reference:
        raise ValueError("target model has no frozen reference")
    cfg = config
    model = target.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.theta.size, cfg.lr)
    report = RunReport(cfg.to_dict())
    t0 = time.perf_counter()
    step = updates = 0

    def record(epoch):
        fm, rm = evaluate(model, fseqs), evaluate(model, rseqs) if rseqs else None
        report.add(
            step=step,
            epoch=epoch,
            forget_nll=fm["nll"],
            retain_nll=rm["nll"] if rm else None,
            forget_em=fm["exact_match"],
            retain_em=rm["exact_match"] if rm else None,
            kl_drift=rm["kl_drift"] if rm else None,
            token_updates=updates,
            wall_clock=time.perf_counter() - t0,
        )

    def loss_and_grad(batch, rbatch):
        if cfg.sequence_level:
            u = sequence_unlearn_loss(model, batch, cfg.objective, cfg.region)
            n_active = int(region_mask(batch, cfg.region).sum())
        else:
            weights, _ = compute_weights(model, batch, mask_id, cfg)
            u = unified_unlearn_loss(model, list(zip(batch, weights)), cfg.objective)
            n_active = sum(w.active for w in weights)
        if cfg.lam > 0 and rbatch:
            return total_loss(u, kl_retention_loss(model, rbatch), cfg.lam) + (n_active,)
        return u + (n_active,)

    record(0)
    last_good = model.theta.copy()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(fseqs))
        for start in range(0, len(fseqs), cfg.batch_size):
            batch = [fseqs[i] for i in order[start : start + cfg.batch_size]]
            rbatch = []
            if rseqs:
                ridx = rng.choice(len(rseqs), size=len(batch), replace=len(batch) > len(rseqs))
                rbatch = [rseqs[i] for i in ridx]
            try:
                # divergence is detected below; silence the intermediate overflow noise
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grad, n_active = loss_and_grad(batch, rbatch)
            except NumericError as exc:
                value, grad = float("nan"), None
                log.debug("numeric failure at step %d: %s", step, exc)
            if grad is None or not (np.isfinite(value) and np.all(np.isfinite(grad))):
                model.set_theta(last_good)
                _abort(model, report, checkpoint, f"non-finite loss at step {step}")
            last_good = model.theta.copy()
            model.update(opt.step(grad))
            if not np.all(np.isfinite(model.theta)):
                model.set_theta(last_good)
                _abort(model, report, checkpoint, f"non-finite parameters after step {step}")
            step += 1
            updates += n_active
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            try:
                record(epoch)
            except NumericError:
                model.set_theta(last_good)
                _abort(model, report, checkpoint, f"non-finite activations after step {step}")
    if checkpoint is not None:
        model.save(checkpoint)
    return model, report


def _abort(model, report, checkpoint, msg):
    report.aborted = True
    if checkpoint is not None:
        model.save(checkpoint)
    log.warning("unlearning aborted: %s", msg)
    raise UnlearningAborted(msg, model, report)
