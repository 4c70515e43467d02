"""Baseline vs token-level comparison runs, ablations and their artifacts.

Layout of an experiment directory::

    table.csv            one row per (variant, seed) cell
    summary.csv          mean/std per variant
    runs/<cell>.jsonl    per-epoch training records of each cell
    cells/<cell>/        files owned by one cell (checkpoint, access log)
    plots/*.svg

Targets (dataset + memorising checkpoint) are built once per seed and cached
under ``cache_dir`` keyed by a fingerprint of the settings that shape them.
"""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

from . import schemas
from .datagen import generate, load_dataset, save_dataset
from .lm import ModelConfig, ModelState
from .metrics import evaluate
from .objectives import METHODS, ObjectiveConfig
from .trainer import FinetuneConfig, TrainConfig, UnlearningAborted, finetune_target, unlearn

log = logging.getLogger(__name__)

PREFIXES = {"": "uniform", "T-": "hard", "S-": "soft"}
DEFAULT_VARIANTS = tuple(p + m for m in METHODS for p in PREFIXES)
# SGD step sizes per method at the default budget; RMU's hidden-state loss
# has much larger gradients than the likelihood losses
DEFAULT_LR = {"GA": 0.02, "WGA": 0.02, "NPO": 0.02, "RMU": 0.001}
ABLATION_VALUES = {"r": (0.1, 0.2, 0.4, 0.6), "alpha": (0.9, 0.8, 0.7, 0.6, 0.5, 0.4)}
TABLE_COLUMNS = [
    "variant", "method", "weighting", "seed", "status", "steps", "r", "alpha", "lam",
    "forget_em", "retain_em", "forget_nll", "retain_nll", "kl_drift", "forget_nll_before", "error",
]
METRICS = ("forget_em", "retain_em", "forget_nll", "retain_nll", "kl_drift")


def parse_variant(name: str) -> tuple[str, str]:
    """``"T-GA"`` -> ``("GA", "hard")``; ``"S-"`` is soft, no prefix is the sequence-level baseline."""
    name = name.strip()
    for prefix in ("T-", "S-"):
        if name.upper().startswith(prefix):
            method, weighting = name[2:].upper(), PREFIXES[prefix]
            break
    else:
        method, weighting = name.upper(), "uniform"
    if method not in METHODS:
        raise ValueError(f"unknown variant {name!r}: method must be one of {METHODS}")
    return method, weighting


def variant_name(method: str, weighting: str) -> str:
    inv = {v: k for k, v in PREFIXES.items()}
    if weighting not in inv:
        raise ValueError(f"unknown weighting {weighting!r}")
    return inv[weighting] + method.upper()


@dataclasses.dataclass
class ExperimentSpec:
    variants: list[str] = dataclasses.field(default_factory=lambda: list(DEFAULT_VARIANTS))
    seeds: list[int] = dataclasses.field(default_factory=lambda: [0, 1, 2])
    out: str = "results"
    cache_dir: str | None = None
    workers: int = 1
    # data
    num_entities: int = 40
    qa_per_entity: int = 5
    forget_fraction: float = 0.1
    # model and target fine-tuning
    d_model: int = 32
    d_mlp: int = 64
    n_layers: int = 2
    ft_lr: float = 1e-2
    ft_batch_size: int = 32
    ft_max_epochs: int = 400
    # unlearning
    epochs: int = 8
    batch_size: int = 4
    optimizer: str = "sgd"
    lr: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_LR))
    r: float = 0.2
    alpha: float = 0.7
    tau: float = 0.5
    lam: float = 0.1
    region: str = "answer"
    normalize: str = "sum"
    score_source: str = "current"
    gamma: float = 1.0
    beta: float = 0.1
    rmu_scale: float = 5.0

    def __post_init__(self):
        self.variants = list(self.variants)
        self.seeds = [int(s) for s in self.seeds]
        for v in self.variants:
            parse_variant(v)
        if not self.variants or not self.seeds:
            raise ValueError("need at least one variant and one seed")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        missing = {parse_variant(v)[0] for v in self.variants} - set(self.lr)
        if missing:
            raise ValueError(f"no learning rate for {sorted(missing)}")
        # validates r, alpha, tau and friends
        self.train_config("GA", "hard", 0)

    def train_config(self, method: str, weighting: str, seed: int) -> TrainConfig:
        obj = ObjectiveConfig(method=method, gamma=self.gamma, beta=self.beta, rmu_scale=self.rmu_scale, lam=self.lam, normalize=self.normalize)
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=float(self.lr[method]),
            optimizer=self.optimizer,
            seed=seed,
            weighting=weighting,
            r=self.r,
            alpha=self.alpha,
            tau=self.tau,
            region=self.region,
            score_source=self.score_source,
            sequence_level=weighting == "uniform",
            objective=obj,
        )

    def target_fingerprint(self) -> str:
        keys = ("num_entities", "qa_per_entity", "forget_fraction", "d_model", "d_mlp", "n_layers", "ft_lr", "ft_batch_size", "ft_max_epochs")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment settings {sorted(unknown)}")
        return cls(**d)


# -- targets ----------------------------------------------------------------


def _target_dir(spec: ExperimentSpec, seed: int) -> Path:
    root = Path(spec.cache_dir) if spec.cache_dir else Path(spec.out) / "targets"
    return root / spec.target_fingerprint() / f"seed{seed}"


def build_target(spec: ExperimentSpec, seed: int) -> Path:
    """Dataset and memorising checkpoint for ``seed`` (reused when cached)."""
    d = _target_dir(spec, seed)
    ckpt = d / "target.npz"
    if ckpt.exists() and (d / "data" / "data.jsonl").exists():
        return d
    d.mkdir(parents=True, exist_ok=True)
    ds = generate(spec.num_entities, spec.qa_per_entity, spec.forget_fraction, seed)
    save_dataset(ds, d / "data")
    context = max(s.sequence.T for s in ds.samples)
    cfg = ModelConfig(len(ds.vocab), spec.d_model, spec.d_mlp, spec.n_layers, context)
    ft = FinetuneConfig(max_epochs=spec.ft_max_epochs, batch_size=spec.ft_batch_size, lr=spec.ft_lr, seed=seed)
    model = finetune_target(ModelState.initialize(cfg, seed), ds.samples, ds.vocab.mask_id, ft)
    tmp = d / "target.tmp.npz"
    model.save(tmp)
    tmp.replace(ckpt)
    return d


# -- cells ------------------------------------------------------------------


class AccessLog:
    """Append-only record of the files a cell reads and writes."""

    def __init__(self, path: Path):
        self.path = path
        path.write_text("")

    def note(self, op: str, target) -> Path:
        with open(self.path, "a") as fh:
            fh.write(json.dumps({"op": op, "path": str(Path(target).resolve())}) + "\n")
        return Path(target)

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def cell_id(variant: str, seed: int) -> str:
    return f"{variant}_s{seed}"


def run_cell(spec_dict: dict, variant: str, seed: int, target_dir: str) -> dict:
    """One unlearning run; never raises, failures become a row with ``status``."""
    spec = ExperimentSpec.from_dict(spec_dict)
    method, weighting = parse_variant(variant)
    out = Path(spec.out)
    cid = cell_id(variant, seed)
    cell_dir = out / "cells" / cid
    cell_dir.mkdir(parents=True, exist_ok=True)
    runs_path = out / "runs" / f"{cid}.jsonl"
    runs_path.parent.mkdir(parents=True, exist_ok=True)
    row = {"variant": variant, "method": method, "weighting": weighting, "seed": seed, "status": "ok", "steps": None,
           "r": spec.r if weighting == "hard" else None, "alpha": spec.alpha if weighting != "uniform" else None, "lam": spec.lam}
    row.update({m: None for m in METRICS})
    row["forget_nll_before"] = None
    acc = AccessLog(cell_dir / "access.log")
    report = None
    try:
        tdir = Path(target_dir)
        ds = load_dataset(acc.note("read", tdir / "data"))
        target = ModelState.load(acc.note("read", tdir / "target.npz"))
        cfg = spec.train_config(method, weighting, seed)
        ckpt = acc.note("write", cell_dir / "model.npz")
        try:
            _, report = unlearn(target, ds.forget, ds.retain, cfg, ds.vocab.mask_id, checkpoint=ckpt)
        except UnlearningAborted as exc:
            report = exc.report
            row["status"], row["error"] = "aborted", str(exc)
        first, last = report.records[0], report.final()
        row.update({m: last[m] for m in METRICS})
        row["steps"] = last["step"]
        row["forget_nll_before"] = first["forget_nll"]
    except Exception as exc:  # recorded per cell so the sweep keeps going
        row["status"], row["error"] = "failed", f"{type(exc).__name__}: {exc}"
        log.error("cell %s failed:\n%s", cid, traceback.format_exc())
    recs = [] if report is None else [{"variant": variant, "seed": seed, **r} for r in report.records]
    schemas.validate_records(recs, schemas.RUN_RECORD)
    with open(acc.note("write", runs_path), "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    return row


# -- tables -----------------------------------------------------------------


@dataclasses.dataclass
class ComparisonTable:
    rows: list[dict]

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r["seed"], _variant_order(r["variant"])))

    @property
    def completed(self) -> bool:
        return all(r["status"] == "ok" for r in self.rows)

    def cell(self, variant: str, seed: int) -> dict:
        for r in self.rows:
            if r["variant"] == variant and r["seed"] == seed:
                return r
        raise KeyError((variant, seed))

    @property
    def variants(self) -> list[str]:
        return sorted({r["variant"] for r in self.rows}, key=_variant_order)

    @property
    def seeds(self) -> list[int]:
        return sorted({r["seed"] for r in self.rows})

    def summary(self) -> list[dict]:
        out = []
        for v in self.variants:
            rows = [r for r in self.rows if r["variant"] == v and r["status"] == "ok"]
            rec = {"variant": v, "n": len(rows)}
            for m in METRICS:
                vals = [r[m] for r in rows if r[m] is not None]
                rec[f"{m}_mean"] = float(np.mean(vals)) if vals else None
                rec[f"{m}_std"] = float(np.std(vals)) if vals else None
            out.append(rec)
        return out

    def write(self, out) -> dict:
        out = Path(out)
        paths = {
            "table": schemas.write_csv(out / "table.csv", self.rows, schemas.TABLE_ROW, TABLE_COLUMNS),
            "summary": schemas.write_csv(out / "summary.csv", self.summary(), schemas.SUMMARY_ROW),
        }
        return paths

    @classmethod
    def read(cls, path) -> "ComparisonTable":
        return cls(schemas.read_csv(path, schemas.TABLE_ROW))


def _variant_order(v: str):
    method, weighting = parse_variant(v)
    return (METHODS.index(method), list(PREFIXES.values()).index(weighting))


def direction_report(table: ComparisonTable, methods: Sequence[str] = ("GA", "WGA"), prefix: str = "T-", need: int = 3) -> dict:
    """Per seed: does the token variant forget more and retain more than its baseline?

    Each (method, criterion) pair is a strict inequality on exact match:
    ``forget_em(token) < forget_em(base)`` and ``retain_em(token) > retain_em(base)``.
    A seed passes when at least ``need`` pairs hold.
    """
    seeds = {}
    for seed in table.seeds:
        pairs = {}
        for m in methods:
            try:
                base, tok = table.cell(m, seed), table.cell(prefix + m, seed)
            except KeyError:
                continue
            ok = base["status"] == "ok" and tok["status"] == "ok"
            pairs[f"{m}/forget"] = bool(ok and tok["forget_em"] < base["forget_em"])
            pairs[f"{m}/retain"] = bool(ok and tok["retain_em"] > base["retain_em"])
        wins = sum(pairs.values())
        seeds[seed] = {"pairs": pairs, "wins": wins, "passed": wins >= need}
    return {"seeds": seeds, "passed": bool(seeds) and all(s["passed"] for s in seeds.values())}


def isolation_audit(out) -> list[str]:
    """Violations: a cell touching another cell's files or another seed's target."""
    out = Path(out).resolve()
    problems = []
    for logf in sorted((out / "cells").glob("*/access.log")):
        cid = logf.parent.name
        seed_tag = cid.rsplit("_s", 1)[1]
        own = logf.parent.resolve()
        for rec in AccessLog.read(logf):
            p = Path(rec["path"])
            if rec["op"] == "write":
                if not (p.is_relative_to(own) or p == out / "runs" / f"{cid}.jsonl"):
                    problems.append(f"{cid} wrote {p}")
            elif p.is_relative_to(out / "cells") or p.is_relative_to(out / "runs"):
                problems.append(f"{cid} read {p}")
            elif f"seed{seed_tag}" not in p.parts:
                problems.append(f"{cid} read another seed's target {p}")
    return problems


# -- runners ----------------------------------------------------------------


def _pool(workers: int):
    if workers <= 1:
        return None
    return cf.ProcessPoolExecutor(max_workers=workers)


def _map(pool, fn, arg_lists):
    if pool is None:
        return [fn(*args) for args in arg_lists]
    futures = [pool.submit(fn, *args) for args in arg_lists]
    return [f.result() for f in futures]


def run_experiment(spec: ExperimentSpec) -> ComparisonTable:
    """Build targets, run every (variant, seed) cell, write tables and plots."""
    out = Path(spec.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    pool = _pool(spec.workers)
    try:
        target_dirs = dict(zip(spec.seeds, _map(pool, build_target, [(spec, s) for s in spec.seeds])))
        jobs = [(spec.to_dict(), v, s, str(target_dirs[s])) for s in spec.seeds for v in spec.variants]
        rows = _map(pool, run_cell, jobs)
    finally:
        if pool is not None:
            pool.shutdown()
    table = ComparisonTable(rows)
    table.write(out)
    from .plots import plot_summary, plot_tradeoff

    plot_summary(table, out / "plots" / "summary.svg")
    plot_tradeoff(out / "runs", out / "plots" / "tradeoff.svg")
    return table


def ablation_sweep(spec: ExperimentSpec, axis: str, values: Sequence[float] | None = None) -> dict[float, ComparisonTable]:
    """One experiment per axis value in ``<out>/<axis>=<value>``, plus ``ablation.csv`` and a curve plot."""
    if axis not in ABLATION_VALUES:
        raise ValueError(f"axis must be one of {sorted(ABLATION_VALUES)}")
    values = tuple(ABLATION_VALUES[axis] if values is None else values)
    out = Path(spec.out)
    cache = spec.cache_dir or str(out / "targets")
    tables, rows = {}, []
    for v in values:
        sub = dataclasses.replace(spec, out=str(out / f"{axis}={v:g}"), cache_dir=cache, **{axis: float(v)})
        tables[v] = run_experiment(sub)
        for s in tables[v].summary():
            rows.append({"axis": axis, "value": float(v), "variant": s["variant"], "forget_em_mean": s["forget_em_mean"], "retain_em_mean": s["retain_em_mean"]})
    (out / "plots").mkdir(parents=True, exist_ok=True)
    schemas.write_csv(out / "ablation.csv", rows, schemas.ABLATION_ROW)
    from .plots import plot_ablation

    plot_ablation(rows, axis, out / "plots" / f"ablation_{axis}.svg")
    return tables


def evaluate_checkpoint(checkpoint, data_dir) -> dict:
    """Forget/retain metrics of a saved model on a saved dataset."""
    model = ModelState.load(checkpoint)
    ds = load_dataset(data_dir)
    f = evaluate(model, ds.forget, len(ds.vocab))
    r = evaluate(model, ds.retain, len(ds.vocab))
    return {
        "forget_em": f["exact_match"],
        "forget_nll": f["nll"],
        "retain_em": r["exact_match"],
        "retain_nll": r["nll"],
        "kl_drift": r["kl_drift"],
        "n_forget": f["n"],
        "n_retain": r["n"],
    }

