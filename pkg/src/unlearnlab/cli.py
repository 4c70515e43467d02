"""``unlearnlab`` command line.

Settings come from an optional INI file (``--config``) and are overridden by
flags.  Every subcommand writes into ``--out``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import schemas
from .datagen import generate, load_dataset, save_dataset
from .experiments import (
    ComparisonTable,
    ExperimentSpec,
    ablation_sweep,
    direction_report,
    evaluate_checkpoint,
    isolation_audit,
    parse_variant,
    run_experiment,
    variant_name,
)
from .lm import ModelConfig, ModelState
from .trainer import FinetuneConfig, UnlearningAborted, finetune_target, unlearn

log = logging.getLogger("unlearnlab")

# INI (section, key) -> ExperimentSpec field
CONFIG_KEYS = {
    ("data", "num_entities"): "num_entities",
    ("data", "qa_per_entity"): "qa_per_entity",
    ("data", "forget_fraction"): "forget_fraction",
    ("model", "d_model"): "d_model",
    ("model", "d_mlp"): "d_mlp",
    ("model", "n_layers"): "n_layers",
    ("finetune", "lr"): "ft_lr",
    ("finetune", "batch_size"): "ft_batch_size",
    ("finetune", "max_epochs"): "ft_max_epochs",
    ("unlearn", "epochs"): "epochs",
    ("unlearn", "batch_size"): "batch_size",
    ("unlearn", "optimizer"): "optimizer",
    ("unlearn", "lr"): "lr",
    ("unlearn", "r"): "r",
    ("unlearn", "alpha"): "alpha",
    ("unlearn", "tau"): "tau",
    ("unlearn", "lambda"): "lam",
    ("unlearn", "region"): "region",
    ("unlearn", "normalize"): "normalize",
    ("unlearn", "score_source"): "score_source",
    ("unlearn", "gamma"): "gamma",
    ("unlearn", "beta"): "beta",
    ("unlearn", "rmu_scale"): "rmu_scale",
    ("experiment", "variants"): "variants",
    ("experiment", "seeds"): "seeds",
    ("experiment", "workers"): "workers",
    ("experiment", "cache_dir"): "cache_dir",
}
SNR_KEYS = {"trials": int, "seed": int, "d": int, "k": int}


def _parse_lr(text: str, base: dict) -> dict:
    """``"0.02"`` sets every method; ``"GA:0.02,RMU:0.001"`` sets some."""
    out = dict(base)
    text = text.strip()
    if ":" not in text:
        return {m: float(text) for m in out}
    for part in text.split(","):
        m, v = part.split(":")
        out[m.strip().upper()] = float(v)
    return out


def _convert(field: str, raw: str, current):
    if field == "lr":
        return _parse_lr(raw, current)
    if field == "variants":
        return [v.strip() for v in raw.split(",") if v.strip()]
    if field == "seeds":
        return [int(s) for s in raw.replace(",", " ").split()]
    if field == "cache_dir":
        return raw or None
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path) -> tuple[dict, dict, dict]:
    """Read an INI file into (spec overrides, snr settings, extra keys)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    defaults = ExperimentSpec()
    spec, snr, extra = {}, {}, {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) in CONFIG_KEYS:
                field = CONFIG_KEYS[(section, key)]
                spec[field] = _convert(field, raw, spec.get(field, getattr(defaults, field)))
            elif section == "snr" and key in SNR_KEYS:
                snr[key] = SNR_KEYS[key](raw)
            elif (section, key) in (("unlearn", "method"), ("unlearn", "weighting")):
                extra[key] = raw
            else:
                raise ValueError(f"{path}: unknown setting [{section}] {key}")
    return spec, snr, extra


def build_spec(args) -> ExperimentSpec:
    """Defaults, then the config file, then flags."""
    overrides, _, extra = load_config(args.config) if args.config else ({}, {}, {})
    method, weighting = getattr(args, "method", None), getattr(args, "weighting", None)
    if not (method or weighting) and "variants" not in overrides:
        method, weighting = extra.get("method"), extra.get("weighting")
    flag_map = {"r": "r", "alpha": "alpha", "tau": "tau", "lam": "lam", "epochs": "epochs", "workers": "workers"}
    for flag, field in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[field] = v
    if getattr(args, "lr", None):
        overrides["lr"] = _parse_lr(args.lr, overrides.get("lr", ExperimentSpec().lr))
    if getattr(args, "seeds", None):
        overrides["seeds"] = [int(s) for s in args.seeds.replace(",", " ").split()]
    elif getattr(args, "seed", None) is not None:
        overrides["seeds"] = [args.seed]
    if getattr(args, "variants", None):
        overrides["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    elif method or weighting:
        methods = [m.strip().upper() for m in (method or "GA,WGA,NPO,RMU").split(",")]
        weightings = [w.strip() for w in (weighting or "uniform,hard,soft").split(",")]
        overrides["variants"] = [variant_name(m, w) for m in methods for w in weightings]
    if getattr(args, "out", None):
        overrides["out"] = args.out
    return ExperimentSpec(**{**dataclasses.asdict(ExperimentSpec()), **overrides})


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = build_spec(args)
    ds = generate(spec.num_entities, spec.qa_per_entity, spec.forget_fraction, spec.seeds[0])
    data, vocab = save_dataset(ds, args.out)
    schemas.validate_jsonl(data, schemas.SAMPLE_RECORD)
    print(json.dumps({"data": str(data), "vocab": str(vocab), "samples": len(ds.samples), "forget": len(ds.forget), "retain": len(ds.retain), "vocab_size": len(ds.vocab)}))
    return 0


def cmd_finetune(args) -> int:
    spec = build_spec(args)
    seed = spec.seeds[0]
    ds = load_dataset(args.data)
    cfg = ModelConfig(len(ds.vocab), spec.d_model, spec.d_mlp, spec.n_layers, max(s.sequence.T for s in ds.samples))
    ft = FinetuneConfig(max_epochs=spec.ft_max_epochs, batch_size=spec.ft_batch_size, lr=spec.ft_lr, seed=seed)
    model = finetune_target(ModelState.initialize(cfg, seed), ds.samples, ds.vocab.mask_id, ft)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "target.npz")
    print(json.dumps({"checkpoint": str(out / "target.npz"), **evaluate_checkpoint(out / "target.npz", args.data)}))
    return 0


def cmd_unlearn(args) -> int:
    extra = load_config(args.config)[2] if args.config else {}
    args.method = args.method or extra.get("method") or "GA"
    args.weighting = args.weighting or extra.get("weighting") or "hard"
    spec = build_spec(args)
    if len(spec.variants) != 1:
        raise ValueError("unlearn runs one variant: give a single --method and --weighting")
    method, weighting = parse_variant(spec.variants[0])
    seed = spec.seeds[0]
    ds = load_dataset(args.data)
    target = ModelState.load(args.checkpoint)
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    cfg = spec.train_config(method, weighting, seed)
    status, error = "ok", None
    try:
        _, report = unlearn(target, ds.forget, ds.retain, cfg, ds.vocab.mask_id, checkpoint=out / "model.npz")
    except UnlearningAborted as exc:
        report, status, error = exc.report, "aborted", str(exc)
    name = variant_name(method, weighting)
    recs = [{"variant": name, "seed": seed, **r} for r in report.records]
    schemas.validate_records(recs, schemas.RUN_RECORD)
    with open(out / "runs" / f"{name}_s{seed}.jsonl", "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")
    last = report.final()
    row = {"variant": name, "method": method, "weighting": weighting, "seed": seed, "status": status, "steps": last["step"],
           "r": spec.r if weighting == "hard" else None, "alpha": spec.alpha if weighting != "uniform" else None, "lam": spec.lam,
           "forget_nll_before": report.records[0]["forget_nll"], "error": error or ""}
    row.update({k: last[k] for k in ("forget_em", "retain_em", "forget_nll", "retain_nll", "kl_drift")})
    ComparisonTable([row]).write(out)
    from .plots import plot_tradeoff

    plot_tradeoff(out / "runs", out / "plots" / "tradeoff.svg")
    print(json.dumps(row))
    return 0 if status == "ok" else 1


def cmd_eval(args) -> int:
    metrics = evaluate_checkpoint(args.checkpoint, args.data)
    text = json.dumps(metrics, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    spec = build_spec(args)
    if args.ablate:
        values = [float(v) for v in args.values.split(",")] if args.values else None
        tables = ablation_sweep(spec, args.ablate, values)
        ok = all(t.completed for t in tables.values())
        print(json.dumps({"axis": args.ablate, "values": list(tables), "completed": ok}))
        return 0 if ok else 1
    table = run_experiment(spec)
    report = direction_report(table)
    audit = isolation_audit(spec.out)
    (Path(spec.out) / "direction.json").write_text(json.dumps(report, indent=2) + "\n")
    for s in table.summary():
        print(f"{s['variant']:7s} forget_em={s['forget_em_mean']} retain_em={s['retain_em_mean']} n={s['n']}")
    print(f"direction pattern held on every seed: {report['passed']}")
    if audit:
        print("isolation audit problems:\n  " + "\n  ".join(audit))
    return 0 if table.completed and not audit else 1


def cmd_snr_sim(args) -> int:
    from .plots import plot_snr
    from .snr import SubspaceModel, TokenGradientModel, check_snr_ratio, corollary_slope, noise_bound_grid

    snr = load_config(args.config)[1] if args.config else {}
    trials = args.trials or snr.get("trials", 10_000)
    seed = args.seed if args.seed is not None else snr.get("seed", 0)
    d, k = snr.get("d", 16), snr.get("k", 4)
    rs = [args.r] if args.r is not None else [0.1, 0.2, 0.5]
    rows = []
    for g in noise_bound_grid(rs=rs, trials=trials, seed=seed, d=d, k=k):
        rows.append({"kind": "bound", "T": g["T"], "rho": g["rho"], "r": g["r"], "n_critical": None, "lhs": g["lhs"], "rhs": g["rhs"],
                     "snr_token": None, "snr_seq": None, "ratio": None, "predicted": None, "holds": g["holds"]})
    sub = SubspaceModel.random(d, k, seed)
    for rho in (0.0, 0.05, 0.2):
        rep = check_snr_ratio(TokenGradientModel(sub, 100, tuple(range(2, 7)), 1.0, 1.0, rho), trials, seed)
        rows.append({"kind": "ratio", "T": 100, "rho": rho, "r": None, "n_critical": 5, "lhs": None, "rhs": None,
                     "snr_token": rep.snr_token, "snr_seq": rep.snr_seq, "ratio": rep.ratio, "predicted": rep.predicted, "holds": None})
    slope = corollary_slope(trials=max(1000, trials // 2), seed=seed, subspace=sub)
    for r in slope["rows"]:
        rows.append({"kind": "slope", "T": r["T"], "rho": 0.0, "r": None, "n_critical": 5, "lhs": None, "rhs": None,
                     "snr_token": None, "snr_seq": None, "ratio": r["ratio"], "predicted": r["predicted"], "holds": None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schemas.write_csv(out / "snr.csv", rows, schemas.SNR_ROW)
    plot_snr(rows, out / "plots" / "snr.svg")
    held = all(r["holds"] for r in rows if r["kind"] == "bound")
    print(json.dumps({"bound_cells": sum(r["kind"] == "bound" for r in rows), "bound_held": held, "slope": slope["slope"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnlab", description="Token-level unlearning lab on a tiny transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI settings file (flags win)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")

    def training(sp):
        sp.add_argument("--method", help="GA, WGA, NPO or RMU (comma list for sweep)")
        sp.add_argument("--weighting", help="uniform, hard or soft (comma list for sweep)")
        sp.add_argument("--r", type=float, help="hard-selection ratio")
        sp.add_argument("--alpha", type=float, help="attribution share of the composite score")
        sp.add_argument("--tau", type=float, help="soft-weight temperature")
        sp.add_argument("--lambda", dest="lam", type=float, help="KL retention weight")
        sp.add_argument("--lr", help="step size, or per method as GA:0.02,RMU:0.001")
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("gen-data", help="generate the synthetic QA dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("finetune", help="train the memorising target model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("unlearn", help="run one unlearning variant on a target")
    common(sp)
    training(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_unlearn)

    sp = sub.add_parser("eval", help="forget/retain metrics of a checkpoint")
    common(sp, out_required=False)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="variant x seed comparison, or an r/alpha ablation")
    common(sp)
    training(sp)
    sp.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    sp.add_argument("--variants", help="comma-separated variants such as GA,T-GA,S-GA")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--ablate", choices=["r", "alpha"])
    sp.add_argument("--values", help="comma-separated axis values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("snr-sim", help="Monte Carlo checks of the gradient-noise analysis")
    common(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--r", type=float, help="single selection ratio for the bound grid")
    sp.set_defaults(func=cmd_snr_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
