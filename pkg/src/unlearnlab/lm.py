"""A tiny causal transformer language model with hand-written backpropagation.

Architecture (per block, pre-norm, parameter-free RMS normalisation)::

    a   = rmsnorm(x)
    x   = x + softmax(causal(a Wq (a Wk)^T / sqrt(d))) (a Wv) Wo
    b   = rmsnorm(x)
    x   = x + gelu(b W1 + b1) W2 + b2

followed by ``logits = rmsnorm(x) Wout + bout``.  Everything is float64 numpy.

Positions follow the 1-indexed convention used throughout the package: a
sequence ``s`` has positions ``1..T``; the token at position ``i`` (``i >= 2``)
is predicted by logits row ``i - 1`` (1-indexed), i.e. array row ``i - 2``.

Parameter initialisation: every weight matrix is drawn from
``N(0, 1/fan_in)``; the two residual-branch output projections (``Wo``, ``W2``)
are further scaled by ``1/sqrt(2 * n_layers)``; token and position embeddings
are ``N(0, 1)``; biases start at zero.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "unlearnlab-checkpoint"
CHECKPOINT_VERSION = 1
RMS_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


class LengthError(ValueError):
    """Sequence longer than the model context."""


class NumericError(ValueError):
    """Non-finite parameters or activations."""


class StaleTraceError(RuntimeError):
    """A trace was produced by a different parameter state than the one differentiated."""


@dataclasses.dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    mask_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if not 0 <= self.mask_id < len(self.tokens):
            raise ValueError(f"mask_id {self.mask_id} outside vocabulary of size {len(self.tokens)}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, tokens: Iterable[str], mask_token: str = "<mask>") -> "Vocabulary":
        """Vocabulary over ``tokens`` with the mask token appended last."""
        toks = [t for t in dict.fromkeys(tokens) if t != mask_token]
        toks.append(mask_token)
        return cls(tuple(toks), len(toks) - 1)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self._index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "mask_id": self.mask_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), int(d["mask_id"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclasses.dataclass(frozen=True)
class TokenSequence:
    """Token ids with a question/answer split and question knowledge slots.

    ``answer_start`` and ``knowledge_slots`` are 1-indexed positions.
    """

    ids: tuple[int, ...]
    answer_start: int
    knowledge_slots: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "knowledge_slots", frozenset(int(p) for p in self.knowledge_slots))
        T = len(self.ids)
        if T < 2:
            raise ValueError("sequence needs at least 2 tokens")
        if not 2 <= self.answer_start <= T:
            raise ValueError(f"answer_start {self.answer_start} outside [2, {T}]")
        bad = [p for p in self.knowledge_slots if not 1 <= p < self.answer_start]
        if bad:
            raise ValueError(f"knowledge slots {sorted(bad)} outside the question region")
        if min(self.ids) < 0:
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return len(self.ids)

    @property
    def answer_positions(self) -> range:
        return range(self.answer_start, self.T + 1)

    def check_vocab(self, vocab_size: int) -> None:
        if max(self.ids) >= vocab_size:
            raise ValueError(f"token id {max(self.ids)} >= vocabulary size {vocab_size}")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    d_mlp: int = 64
    n_layers: int = 2
    context: int = 32

    def __post_init__(self):
        if self.vocab_size < 2 or self.d_model < 1 or self.d_mlp < 1 or self.context < 2:
            raise ValueError(f"invalid model config {self}")
        if not 1 <= self.n_layers <= 2:
            raise ValueError("n_layers must be 1 or 2")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m, V = cfg.d_model, cfg.d_mlp, cfg.vocab_size
    shapes = [("wte", (V, d)), ("wpe", (cfg.context, d))]
    for l in range(cfg.n_layers):
        shapes += [
            (f"l{l}.wq", (d, d)),
            (f"l{l}.wk", (d, d)),
            (f"l{l}.wv", (d, d)),
            (f"l{l}.wo", (d, d)),
            (f"l{l}.w1", (d, m)),
            (f"l{l}.b1", (m,)),
            (f"l{l}.w2", (m, d)),
            (f"l{l}.b2", (d,)),
        ]
    shapes += [("wout", (d, V)), ("bout", (V,))]
    return shapes


def unflatten(cfg: ModelConfig, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into ``flat`` (no copies)."""
    out, off = {}, 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = flat[off : off + n].reshape(shape)
        off += n
    if off != flat.size:
        raise ValueError(f"parameter vector has {flat.size} entries, config needs {off}")
    return out


def num_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


class ModelState:
    """Trainable parameters plus an optional frozen reference copy.

    ``version`` increments on every in-place update so traces can be checked
    for staleness before backprop.
    """

    def __init__(self, config: ModelConfig, theta: np.ndarray, reference: np.ndarray | None = None):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != num_params(config):
            raise ValueError(f"theta must be a flat vector of length {num_params(config)}")
        self.config = config
        self.theta = theta.copy()
        self.version = 0
        self._views = unflatten(config, self.theta)
        self.reference: np.ndarray | None = None
        self._ref_views: dict[str, np.ndarray] | None = None
        if reference is not None:
            self._set_reference(np.asarray(reference, dtype=np.float64))

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelState":
        rng = np.random.default_rng(seed)
        theta = np.zeros(num_params(config))
        views = unflatten(config, theta)
        branch_scale = 1.0 / np.sqrt(2 * config.n_layers)
        for name, w in views.items():
            short = name.split(".")[-1]
            if short in ("wte", "wpe"):
                w[...] = rng.standard_normal(w.shape)
            elif short.startswith("b"):
                continue
            else:
                std = 1.0 / np.sqrt(w.shape[0])
                if short in ("wo", "w2"):
                    std *= branch_scale
                w[...] = rng.standard_normal(w.shape) * std
        return cls(config, theta)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._views

    @property
    def reference_params(self) -> dict[str, np.ndarray]:
        if self._ref_views is None:
            raise ValueError("model has no frozen reference parameters")
        return self._ref_views

    @property
    def has_reference(self) -> bool:
        return self.reference is not None

    def _set_reference(self, ref: np.ndarray) -> None:
        if ref.shape != self.theta.shape:
            raise ValueError("reference must match theta in length")
        ref = ref.copy()
        ref.flags.writeable = False
        self.reference = ref
        self._ref_views = unflatten(self.config, ref)

    def freeze_reference(self) -> None:
        """Snapshot the current parameters as the frozen reference."""
        if self.reference is not None:
            raise ValueError("reference parameters are already frozen")
        self._set_reference(self.theta)

    def update(self, delta: np.ndarray) -> None:
        """In-place ``theta += delta``."""
        self.theta += delta
        self.version += 1

    def set_theta(self, theta: np.ndarray) -> None:
        self.theta[...] = theta
        self.version += 1

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.theta, self.reference)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.theta)):
            raise NumericError("non-finite parameter values")

    def save(self, path) -> None:
        """Write a checkpoint (numpy ``.npz``; see README for the layout)."""
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(self.config),
            "has_reference": self.reference is not None,
        }
        arrays = {"meta": np.array(json.dumps(meta)), "theta": self.theta}
        if self.reference is not None:
            arrays["reference"] = np.asarray(self.reference)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ModelState":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not a checkpoint file")
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta['version']}")
            ref = z["reference"] if meta["has_reference"] else None
            return cls(ModelConfig(**meta["config"]), z["theta"], ref)


@dataclasses.dataclass
class ForwardTrace:
    """Forward-pass record for a padded batch of sequences.

    ``logits``/``logprobs`` are ``(B, T, V)``; ``hidden[l]`` is the residual
    stream after block ``l`` (``hidden[0]`` is the embedding output).
    """

    ids: np.ndarray
    lengths: np.ndarray
    logits: np.ndarray
    logprobs: np.ndarray
    hidden: list[np.ndarray]
    cache: dict
    version: int
    model_id: int
    use_reference: bool

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]


def _rmsnorm(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r, r


def _rmsnorm_backward(dy, y, r):
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * dt


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return z - (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))


def pad_batch(seqs: Sequence[TokenSequence | Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rows = [s.ids if isinstance(s, TokenSequence) else tuple(s) for s in seqs]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lengths.max())), pad_id, dtype=np.int64)
    for b, r in enumerate(rows):
        out[b, : len(r)] = r
    return out, lengths


def forward(
    model: ModelState,
    seqs: TokenSequence | Sequence[TokenSequence] | np.ndarray,
    use_reference: bool = False,
    lengths: np.ndarray | None = None,
) -> ForwardTrace:
    """Run the model on one sequence or a batch.

    ``seqs`` may be a single :class:`TokenSequence`, a list of them (padded
    internally), or an int array ``(B, T)`` of input ids.
    """
    cfg = model.config
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    if isinstance(seqs, np.ndarray):
        ids = np.atleast_2d(seqs).astype(np.int64)
        if lengths is None:
            lengths = np.full(ids.shape[0], ids.shape[1], dtype=np.int64)
    else:
        ids, lengths = pad_batch(seqs)
    B, T = ids.shape
    if T > cfg.context:
        raise LengthError(f"sequence length {T} exceeds context {cfg.context}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    if use_reference:
        p = model.reference_params
        if not np.all(np.isfinite(model.reference)):
            raise NumericError("non-finite reference parameter values")
    else:
        model.check_finite()
        p = model.params

    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(cfg, p, ids, lengths, model, use_reference)


def _forward(cfg, p, ids, lengths, model, use_reference):
    B, T = ids.shape
    scale = 1.0 / np.sqrt(cfg.d_model)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    x = p["wte"][ids] + p["wpe"][:T]
    hidden = [x]
    layers = []
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        a, ra = _rmsnorm(x)
        q, k, v = a @ p[pre + "wq"], a @ p[pre + "wk"], a @ p[pre + "wv"]
        s = (q @ k.transpose(0, 2, 1)) * scale
        s = np.where(causal, -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        att = np.exp(s)
        att /= att.sum(axis=-1, keepdims=True)
        o = att @ v
        x1 = x + o @ p[pre + "wo"]
        b, rb = _rmsnorm(x1)
        hpre = b @ p[pre + "w1"] + p[pre + "b1"]
        hact, t = _gelu(hpre)
        x = x1 + hact @ p[pre + "w2"] + p[pre + "b2"]
        hidden.append(x)
        layers.append(dict(a=a, ra=ra, q=q, k=k, v=v, att=att, o=o, b=b, rb=rb, hpre=hpre, t=t, hact=hact))
    f, rf = _rmsnorm(x)
    logits = f @ p["wout"] + p["bout"]
    logprobs = log_softmax(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return ForwardTrace(
        ids=ids,
        lengths=np.asarray(lengths, dtype=np.int64),
        logits=logits,
        logprobs=logprobs,
        hidden=hidden,
        cache=dict(layers=layers, f=f, rf=rf),
        version=model.version,
        model_id=id(model),
        use_reference=use_reference,
    )


def _check_position(trace: ForwardTrace, position: int, b: int) -> None:
    T = int(trace.lengths[b])
    if not 2 <= position <= T:
        raise IndexError(f"position {position} outside [2, {T}]")


def token_log_prob(trace: ForwardTrace, position: int, token: int, b: int = 0) -> float:
    """``log p(token at position | prefix)`` for 1-indexed ``position``."""
    _check_position(trace, position, b)
    return float(trace.logprobs[b, position - 2, token])


def target_log_probs(trace: ForwardTrace, targets: np.ndarray | None = None) -> np.ndarray:
    """Log-probabilities of the target tokens, shape ``(B, T-1)``.

    Column ``j`` corresponds to position ``j + 2``.  ``targets`` defaults to
    the trace's own input ids.
    """
    tgt = trace.ids if targets is None else targets
    lp = trace.logprobs[:, :-1, :]
    return np.take_along_axis(lp, tgt[:, 1:, None], axis=-1)[..., 0]


def hidden_at(trace: ForwardTrace, layer: int, position: int, b: int = 0) -> np.ndarray:
    """Hidden state after block ``layer`` (0 = embeddings) at 1-indexed ``position``."""
    if not 0 <= layer < len(trace.hidden):
        raise IndexError(f"layer {layer} outside [0, {len(trace.hidden) - 1}]")
    if not 1 <= position <= int(trace.lengths[b]):
        raise IndexError(f"position {position} outside [1, {int(trace.lengths[b])}]")
    return trace.hidden[layer][b, position - 1].copy()


def backward(
    model: ModelState,
    trace: ForwardTrace,
    dlogits: np.ndarray | None = None,
    dhidden: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Reverse-mode gradient w.r.t. the flat parameter vector.

    ``dlogits`` is the upstream gradient on ``trace.logits`` and ``dhidden``
    maps layer index to an upstream gradient on ``trace.hidden[layer]``.
    """
    if trace.use_reference:
        raise StaleTraceError("cannot differentiate a reference-parameter trace")
    if trace.model_id != id(model) or trace.version != model.version:
        raise StaleTraceError("trace was produced by a different parameter state")
    cfg = model.config
    p = model.params
    grad = np.zeros_like(model.theta)
    g = unflatten(cfg, grad)
    dhidden = dhidden or {}
    B, T = trace.ids.shape
    d = cfg.d_model
    scale = 1.0 / np.sqrt(d)
    L = cfg.n_layers

    f, rf = trace.cache["f"], trace.cache["rf"]
    if dlogits is None:
        dx = np.zeros((B, T, d))
    else:
        g["wout"][...] = f.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
        g["bout"][...] = dlogits.sum(axis=(0, 1))
        dx = _rmsnorm_backward(dlogits @ p["wout"].T, f, rf)
    if L in dhidden:
        dx = dx + dhidden[L]

    for l in reversed(range(L)):
        pre = f"l{l}."
        c = trace.cache["layers"][l]
        # MLP branch
        g[pre + "w2"][...] = c["hact"].reshape(-1, cfg.d_mlp).T @ dx.reshape(-1, d)
        g[pre + "b2"][...] = dx.sum(axis=(0, 1))
        dh = (dx @ p[pre + "w2"].T) * _gelu_grad(c["hpre"], c["t"])
        g[pre + "w1"][...] = c["b"].reshape(-1, d).T @ dh.reshape(-1, cfg.d_mlp)
        g[pre + "b1"][...] = dh.sum(axis=(0, 1))
        dx1 = dx + _rmsnorm_backward(dh @ p[pre + "w1"].T, c["b"], c["rb"])
        # attention branch
        g[pre + "wo"][...] = c["o"].reshape(-1, d).T @ dx1.reshape(-1, d)
        do = dx1 @ p[pre + "wo"].T
        att = c["att"]
        datt = do @ c["v"].transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 2, 1) @ c["q"]
        a2 = c["a"].reshape(-1, d)
        g[pre + "wq"][...] = a2.T @ dq.reshape(-1, d)
        g[pre + "wk"][...] = a2.T @ dk.reshape(-1, d)
        g[pre + "wv"][...] = a2.T @ dv.reshape(-1, d)
        da = dq @ p[pre + "wq"].T + dk @ p[pre + "wk"].T + dv @ p[pre + "wv"].T
        dx = dx1 + _rmsnorm_backward(da, c["a"], c["ra"])
        if l in dhidden:
            dx = dx + dhidden[l]

    np.add.at(g["wte"], trace.ids, dx)
    g["wpe"][:T] = dx.sum(axis=0)
    return grad


def backward_weighted(
    model: ModelState,
    trace: ForwardTrace,
    per_token_loss_grads: Iterable[tuple[int, float]] | np.ndarray,
    targets: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of ``sum_i w_i * log p(s^i | s^{<i})``.

    ``per_token_loss_grads`` is either a list of ``(position, w)`` pairs for a
    single sequence, or a ``(B, T-1)`` array of upstream scalars whose column
    ``j`` is position ``j + 2``.
    """
    B, T = trace.ids.shape
    if isinstance(per_token_loss_grads, np.ndarray):
        w = per_token_loss_grads
        if w.shape != (B, T - 1):
            raise ValueError(f"upstream weights must have shape {(B, T - 1)}")
    else:
        w = np.zeros((B, T - 1))
        for pos, val in per_token_loss_grads:
            _check_position(trace, pos, 0)
            w[0, pos - 2] += val
    return backward(model, trace, dlogits=logprob_upstream(trace, w, targets))


def logprob_upstream(trace: ForwardTrace, w: np.ndarray, targets: np.ndarray | None = None) -> np.ndarray:
    """``d(sum w * log p_target)/d logits`` for a ``(B, T-1)`` upstream array."""
    B, T = trace.ids.shape
    tgt = trace.ids if targets is None else targets
    probs = np.exp(trace.logprobs[:, :-1, :])
    dl = np.zeros_like(trace.logits)
    dl[:, :-1, :] = -w[..., None] * probs
    bi, ti = np.meshgrid(np.arange(B), np.arange(T - 1), indexing="ij")
    dl[bi, ti, tgt[:, 1:]] += w
    return dl


def valid_mask(trace: ForwardTrace) -> np.ndarray:
    """``(B, T-1)`` boolean mask of real (non-padding) predicted positions."""
    T = trace.ids.shape[1]
    return (np.arange(2, T + 1)[None, :] <= trace.lengths[:, None])


def greedy_decode(model: ModelState, prompt: Sequence[int], n_tokens: int) -> list[int]:
    """Greedy continuation of ``prompt`` by ``n_tokens`` tokens."""
    ids = list(prompt)
    for _ in range(n_tokens):
        tr = forward(model, np.array([ids]))
        ids.append(int(np.argmax(tr.logits[0, -1])))
    return ids[len(prompt) :]
