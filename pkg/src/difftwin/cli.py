"""Command-line entry points: run, sweep, train-mlp, fit-siever, oracle.

Exit codes: 0 success, 1 configuration error, 2 runtime error. All
commands are deterministic for a fixed (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DifftwinError
from .facility import FacilityParams, ScenarioSpec
from .facility.probe import magsorter_sweep, siever_speed_sweep, siever_step_response
from .models.io import (
    load_json,
    mlp_from_dict,
    mlp_to_dict,
    save_json,
    siever_fit_to_dict,
)
from .models.mlp import mlp_forward, mlp_train
from .models.siever import fit_splits, fit_step_response
from .oracle import oracle_for_scenario
from .runner import RunConfig, run

SWEEP_HEADER = ["in_fm", "in_nfm", "height", "tp_fm", "fp_fm", "tp_nfm", "fp_nfm"]


def _load_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    scenario_name = args.scenario or doc.get("scenario", "static")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 7))
    duration = args.duration if args.duration is not None else float(doc.get("duration_s", 2400.0))
    spec = ScenarioSpec(
        scenario_name,
        duration_s=duration,
        seed=seed,
        phase_period_s=float(doc.get("phase_period_s", 600.0)),
    )
    out_dir = args.out or doc.get("out", "runs/latest")
    cfg = RunConfig(
        scenario=spec,
        out_dir=out_dir,
        transport=args.transport or doc.get("transport", "memory"),
        optimize=not args.no_optimize and doc.get("optimize", True),
        activation_delay=float(doc.get("activation_delay_s", 300.0)),
        switch_interval=float(doc.get("switch_interval_s", 15.0)),
        initial_speed=float(doc.get("initial_speed", 12.0)),
        initial_height=float(doc.get("initial_height", 14.0)),
        model_seed=int(doc.get("model_seed", 123)),
    )
    if args.mlp:
        cfg.mlp_doc = load_json(args.mlp)
    if args.siever_fit:
        cfg.siever_fit_doc = load_json(args.siever_fit)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_run_config(args)
    result = run(cfg)
    print(f"run complete: {len(result.rows)} windows -> {result.run_path}")
    print(
        "final setpoints: "
        + ", ".join(f"{k}={v:.3f}" for k, v in sorted(result.final_setpoints.items()))
    )
    return 0


def cmd_sweep(args) -> int:
    params = FacilityParams()
    x, y = magsorter_sweep(params, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for xi, yi in zip(x, y):
            writer.writerow([f"{v:.9g}" for v in (*xi, *yi)])
    print(f"sweep dataset: {len(x)} rows -> {args.out}")
    return 0


def _read_sweep(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SWEEP_HEADER:
            raise ConfigError(f"unexpected sweep header {header}")
        rows = [[float(v) for v in row] for row in reader]
    if not rows:
        raise ConfigError(f"sweep dataset {path} is empty")
    data = np.asarray(rows)
    return data[:, :3], data[:, 3:]


def cmd_train_mlp(args) -> int:
    x, y = _read_sweep(args.dataset)
    mlp = mlp_train((x, y), epochs=args.epochs, seed=args.seed, hidden=(16, 16))
    residuals = np.array([mlp_forward(mlp, xi) for xi in x]) - y
    rmse = float(np.sqrt(np.mean(residuals**2)))
    save_json(mlp_to_dict(mlp), args.out)
    print(f"trained network -> {args.out}; dataset RMSE {rmse:.3e} kg/s")
    return 0


def cmd_fit_siever(args) -> int:
    params = FacilityParams()
    responses = siever_step_response(params, seed=args.seed)
    kernels = fit_step_response(responses, step_index=4)
    records = siever_speed_sweep(params, seed=args.seed + 1)
    splits = fit_splits(records)
    save_json(siever_fit_to_dict(kernels, splits, slots=8), args.out)
    for outlet, k in sorted(kernels.items()):
        print(f"outlet {outlet}: dead_time {k.dead_time:.1f}s tau {k.tau:.1f}s")
    print(f"siever fit -> {args.out}")
    return 0


def cmd_oracle(args) -> int:
    params = FacilityParams()
    results = oracle_for_scenario(
        params, args.scenario, speed_step=args.speed_step, height_step=args.height_step
    )
    os.makedirs(args.out, exist_ok=True)
    for res in results:
        path = os.path.join(args.out, f"oracle_{res.phase}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["height", "expected_loss"])
            for h, val in res.height_curve:
                writer.writerow([f"{h:.9g}", f"{val:.9g}"])
        print(
            f"{res.phase}: optimum speed {res.speed:.1f} rpm, height {res.height:.2f} cm, "
            f"expected loss {res.loss:.6f} -> {path}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difftwin",
        description="Decentralized digital-twin demo: run scenarios, fit models, compute oracle optima.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run facility + nodes + loss node")
    p_run.add_argument("--config", help="RunConfig JSON (flags override)")
    p_run.add_argument("--scenario", choices=["static", "dynamic"])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--duration", type=float, help="simulated seconds")
    p_run.add_argument("--transport", choices=["memory", "tcp"])
    p_run.add_argument("--no-optimize", action="store_true")
    p_run.add_argument("--out", help="output directory")
    p_run.add_argument("--mlp", help="trained network JSON")
    p_run.add_argument("--siever-fit", help="siever fit JSON")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="generate the sorter training dataset")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--seed", type=int, default=123)
    p_sweep.set_defaults(func=cmd_sweep)

    p_train = sub.add_parser("train-mlp", help="train the sorter network on a sweep dataset")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=123)
    p_train.add_argument("--epochs", type=int, default=2000)
    p_train.set_defaults(func=cmd_train_mlp)

    p_fit = sub.add_parser("fit-siever", help="fit drum kernels and split curves")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=124)
    p_fit.set_defaults(func=cmd_fit_siever)

    p_oracle = sub.add_parser("oracle", help="grid-search expected-loss optima")
    p_oracle.add_argument("--scenario", choices=["static", "dynamic"], default="static")
    p_oracle.add_argument("--out", default="runs/oracle")
    p_oracle.add_argument("--speed-step", type=float, default=1.0)
    p_oracle.add_argument("--height-step", type=float, default=0.05)
    p_oracle.set_defaults(func=cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DifftwinError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
