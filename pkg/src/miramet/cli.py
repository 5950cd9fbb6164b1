"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(non-finite values during training, or a failing self-test check).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, load_config, theory_inputs
from .smoothness import (ConstantsError, convergence_budget, derive_constants,
                         suggested_alpha, suggested_C_beta)
from .trainer import (CheckpointError, NumericalAbort, TrainError, evaluate, eval_seed,
                      load_checkpoint, train)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

METRIC_FIELDS = ["round", "meta_loss", "meta_loss_std", "grad_z_norm", "grad_h_norm",
                 "pop_grad_z_norm", "pop_grad_h_norm", "beta1", "beta2", "Ghat1", "Ghat2", "wall_time"]


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def write_metrics_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for rec in records:
            w.writerow(rec)


def write_eval_jsonl(path: Path, reports) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep) + "\n")


# -------------------------------------------------------------------- train

def cmd_train(args) -> int:
    try:
        exp = load_config(args.config)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    cfg = exp.train
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out or exp.out_dir)
    resume = None
    if args.resume:
        try:
            theta, ck_cfg, state = load_checkpoint(args.resume, with_state=True)
        except FileNotFoundError:
            return _fail(EXIT_CONFIG, f"checkpoint not found: {args.resume}")
        except CheckpointError as exc:
            return _fail(EXIT_CONFIG, str(exc))
        if ck_cfg != cfg:
            return _fail(EXIT_CONFIG, "checkpoint was written with a different configuration")
        if state.round_index >= cfg.R:
            print(f"notice: run in {args.resume} already finished at round {state.round_index}; "
                  "nothing to do")
            return EXIT_OK
        resume = (theta, state)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"cannot create output directory {out}: {exc}")
    (out / "config.toml").write_text(exp.to_toml())
    try:
        theta, metrics, _ = train(cfg, resume=resume, checkpoint_path=out / "checkpoint.json",
                                  checkpoint_every=exp.checkpoint_every)
        final = evaluate(theta, cfg.family, cfg.adaptation, exp.eval_tasks, eval_seed(cfg.seed))
    except (NumericalAbort, ad.NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (TrainError, ConstantsError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    final["round"] = cfg.R
    final["final"] = True
    write_metrics_csv(out / "metrics.csv", metrics.records)
    write_eval_jsonl(out / "eval.jsonl", metrics.evaluations + [final])
    summary = metrics.summary()
    summary.update({"experiment_id": exp.experiment_id, "seed": cfg.seed, "B": cfg.B,
                    "R": cfg.R, "final_evaluation": final})
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"finished {cfg.R} rounds; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- constants

def cmd_constants(args) -> int:
    try:
        exp = load_config(args.config)
        cfg = exp.train
        inputs = cfg.theory or theory_inputs(exp.sections, cfg.family, cfg.adaptation,
                                             cfg.mirror_spec)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    C_beta = cfg.C_beta if cfg.C_beta is not None else suggested_C_beta(inputs.T)
    try:
        const = derive_constants(inputs, C_beta)
    except ConstantsError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    doc = {"schema_version": 1, "constants": const.to_dict()}
    try:
        with_b = derive_constants(inputs, C_beta, batch_size=cfg.B)
        bz, bh = convergence_budget(exp.sections["theory"]["Delta"], cfg.R, cfg.B, with_b)
        doc["constants"] = with_b.to_dict()
        doc["budget"] = {"R": cfg.R, "B": cfg.B, "Delta": exp.sections["theory"]["Delta"],
                         "bound_grad_z": bz, "bound_grad_h": bh}
    except ConstantsError as exc:
        doc["budget"] = {"R": cfg.R, "B": cfg.B, "unavailable": str(exc)}
    rate = {"C_beta": suggested_C_beta(inputs.T)}
    if inputs.K >= 1:
        rate["alpha"] = suggested_alpha(inputs.G_h, inputs.G_ell, inputs.T, inputs.K)
    doc["rate_optimal_setting"] = rate
    print(json.dumps(doc, indent=2, default=lambda v: "inf" if v == math.inf else str(v)))
    return EXIT_OK


# ----------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    from .selftest import run_suite
    results = []
    for suite, label, ok in run_suite(args.suite):
        results.append(ok)
        print(f"{'ok' if ok else 'not ok'} {len(results)} - [{suite}] {label}", flush=True)
    print(f"1..{len(results)}")
    return EXIT_OK if all(results) else EXIT_NUMERIC


# -------------------------------------------------------------------- curve

def cmd_curve(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        return _fail(EXIT_CONFIG, f"run directory not found: {run}")
    rows = []
    if args.what == "per_k":
        path = run / "eval.jsonl"
        if not path.is_file():
            return _fail(EXIT_CONFIG, f"missing {path}")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            return _fail(EXIT_CONFIG, f"{path} has no evaluation records")
        rep = json.loads(lines[-1])
        rows = [(r["k"], r["mean"], r["ci_low"], r["ci_high"]) for r in rep["per_k"]]
    else:
        path = run / "metrics.csv"
        if not path.is_file():
            return _fail(EXIT_CONFIG, f"missing {path}")
        B = 1
        summary = run / "summary.json"
        if summary.is_file():
            B = json.loads(summary.read_text()).get("B", 1)
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                mean, std = float(rec["meta_loss"]), float(rec["meta_loss_std"])
                half = 1.96 * std / math.sqrt(B)
                rows.append((int(rec["round"]), mean, mean - half, mean + half))
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["x", "mean", "ci_low", "ci_high"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    finally:
        if args.output:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="miramet", description="Meta-learned mirror descent")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="run meta-training from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)
    c = sub.add_parser("constants", help="print derived theory constants as JSON")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_constants)
    s = sub.add_parser("selftest", help="run fixed-seed property suites (TAP output)")
    s.add_argument("--suite", choices=["gradients", "convexity", "equivalence", "estimator", "all"],
                   default="all")
    s.set_defaults(func=cmd_selftest)
    v = sub.add_parser("curve", help="emit plot-ready CSV from a run directory")
    v.add_argument("--run", required=True)
    v.add_argument("--what", choices=["per_k", "per_round"], default="per_k")
    v.add_argument("--output")
    v.set_defaults(func=cmd_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (NumericalAbort, ad.NonFiniteError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
