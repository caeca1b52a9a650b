"""Batch command-line frontend.

Subcommands: generate | train | cv | search | diagnose | report. Every
run writes a manifest (resolved config + hash + versions) into its output
directory so it can be replayed to byte-identical outputs. Exit codes:
0 success, 2 usage/config error, 3 numerical divergence.

Figure rendering (report and diagnose) writes PNGs alongside the CSV/JSON
outputs; pass --no-figures to skip it. The ZEGNN_THREADS environment
variable caps worker processes for the hyperparameter search.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import baselines  # noqa: F401  (re-exported model kinds)
from . import diagnostics, plots, runio, training
from .data import (DataError, SchemaError, load_dataset, read_schema,
                   write_dataset_csv, write_schema)
from .evaluation import (MODEL_KINDS, PROTOCOL_IN_SAMPLE, PROTOCOL_RANDOM,
                         PROTOCOL_SPATIAL, RunSettings, SearchGrid,
                         hyper_search, run_cv)
from .graph import GraphParameterError, build_knn_graph
from .model import load_checkpoint, save_checkpoint
from .synthetic import (SCENARIO_KINDS, ScenarioSpec, generate_scenario,
                        load_truth, scenario_schema, truth_payload)
from .training import DivergenceError, TrainConfig

_PROTOCOL_FLAGS = {
    "random": PROTOCOL_RANDOM,
    "spatial": PROTOCOL_SPATIAL,
    "in-sample": PROTOCOL_IN_SAMPLE,
}


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("ZEGNN_THREADS", "1")))
    except ValueError:
        return 1


def _make_out_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write_probe.tmp")
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("")
    os.remove(probe)


def _atomic(path, writer) -> None:
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _settings_from_args(args) -> RunSettings:
    return RunSettings(
        graph_k=args.k, k_regimes=args.K_upper,
        lambda_sparse=args.lambda_sparse, lambda_mag=args.lambda_mag,
        gate_hidden=args.gate_hidden, diffusion_steps=args.diffusion_steps,
        lr=args.lr, max_epochs=args.epochs, patience=args.patience,
        val_fraction=args.val_fraction,
    )


def cmd_generate(args) -> int:
    spec = ScenarioSpec(
        kind=args.scenario, seed=args.seed, lattice_side=args.lattice_side,
        jitter_scale=args.jitter_scale, smoothing_k=args.smoothing_k,
        spillover_k=args.spillover_k, rho=args.rho, noise_sd=args.noise_sd,
        eta_scale=args.eta_scale,
    )
    dataset = generate_scenario(spec)
    _make_out_dir(args.out)
    schema = scenario_schema()
    _atomic(os.path.join(args.out, "dataset.csv"),
            lambda p: write_dataset_csv(dataset, schema, p))
    _atomic(os.path.join(args.out, "schema.cfg"),
            lambda p: write_schema(schema, p))
    runio.write_json_atomic(os.path.join(args.out, "truth.json"),
                            truth_payload(spec, dataset.truth))
    config = asdict(spec)
    config["jitter_scale"] = spec.resolved_jitter()
    runio.write_manifest(args.out, "generate", config,
                         thread_cap=_thread_cap())
    print(f"generated {dataset.n} rows -> {args.out}")
    return 0


def cmd_train(args) -> int:
    schema = read_schema(args.schema)
    dataset = load_dataset(args.data, schema)
    _make_out_dir(args.out)
    graph = build_knn_graph(dataset.coords, args.k)
    cfg = TrainConfig(
        lr=args.lr, max_epochs=args.epochs, patience=args.patience,
        lambda_sparse=args.lambda_sparse, lambda_mag=args.lambda_mag,
        val_fraction=args.val_fraction, seed=args.seed,
    )
    result = training.fit(dataset, graph, args.K_upper, cfg,
                          gate_hidden=args.gate_hidden,
                          diffusion_steps=args.diffusion_steps)
    extra = {
        "train_stats": result.stats.to_dict(),
        "graph_k": args.k,
        "best_epoch": result.report.best_epoch,
        "n_epochs": result.report.n_epochs,
        "best_val_mse": result.report.best_val_mse,
    }
    _atomic(os.path.join(args.out, "checkpoint.json"),
            lambda p: save_checkpoint(result.params, p, extra=extra))
    _atomic(os.path.join(args.out, "trace.csv"),
            lambda p: training.write_trace_csv(result.report, p))
    config = {
        "data": args.data, "schema": args.schema, "seed": args.seed,
        "k": args.k, "K_upper": args.K_upper,
        "lambda_sparse": args.lambda_sparse, "lambda_mag": args.lambda_mag,
        "lr": args.lr, "epochs": args.epochs, "patience": args.patience,
        "val_fraction": args.val_fraction, "gate_hidden": args.gate_hidden,
        "diffusion_steps": args.diffusion_steps,
    }
    runio.write_manifest(args.out, "train", config, thread_cap=_thread_cap())
    print(f"fit complete: best epoch {result.report.best_epoch} "
          f"of {result.report.n_epochs} -> {args.out}")
    return 0


def cmd_cv(args) -> int:
    schema = read_schema(args.schema)
    dataset = load_dataset(args.data, schema)
    _make_out_dir(args.out)
    settings = _settings_from_args(args)
    protocol = _PROTOCOL_FLAGS[args.protocol]
    report = run_cv(args.model, dataset, protocol, settings, args.seed,
                    n_folds=args.folds)
    runio.write_json_atomic(os.path.join(args.out, "cv_report.json"),
                            report.to_dict())
    rows = [[fold, float(r2), float(err)]
            for fold, (r2, err) in enumerate(zip(report.fold_r2,
                                                 report.fold_rmse))]
    runio.write_csv_atomic(os.path.join(args.out, "cv_folds.csv"),
                           ["fold", "r2", "rmse"], rows)
    config = {
        "model": args.model, "protocol": protocol, "data": args.data,
        "schema": args.schema, "seed": args.seed, "folds": args.folds,
        "settings": report.settings,
        "fold_assignment": None if report.fold_assignment is None
        else report.fold_assignment.tolist(),
    }
    runio.write_manifest(args.out, "cv", config, thread_cap=_thread_cap())
    if report.mean_r2 is not None:
        print(f"{args.model} {args.protocol}: mean R2 {report.mean_r2:.4f} "
              f"(se {report.se_r2:.4f}) -> {args.out}")
    else:
        print(f"{args.model} in-sample R2 {report.in_sample_r2:.4f} "
              f"-> {args.out}")
    return 0


def _grid_from_args(args) -> SearchGrid:
    if args.grid is not None:
        with open(args.grid, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return SearchGrid(
            k_candidates=tuple(payload.get("k_candidates", (8, 10, 12, 14, 16))),
            k_regimes_candidates=tuple(payload.get("k_regimes_candidates", (3,))),
            lambda_sparse=tuple(payload.get("lambda_sparse", (0.0, 0.001, 0.005))),
            lambda_mag=tuple(payload.get("lambda_mag", (0.001, 0.01))),
        )
    return SearchGrid(
        k_candidates=args.k_candidates,
        k_regimes_candidates=args.k_regimes_candidates,
        lambda_sparse=args.lambda_sparse_candidates,
        lambda_mag=args.lambda_mag_candidates,
    )


def cmd_search(args) -> int:
    schema = read_schema(args.schema)
    dataset = load_dataset(args.data, schema)
    _make_out_dir(args.out)
    grid = _grid_from_args(args)
    base = RunSettings(
        gate_hidden=args.gate_hidden, diffusion_steps=args.diffusion_steps,
        lr=args.lr, max_epochs=args.epochs, patience=args.patience,
        val_fraction=args.val_fraction,
    )
    workers = _thread_cap()
    result = hyper_search(dataset, grid, args.seed, base=base,
                          n_workers=workers)
    header = ["graph_k", "k_regimes", "lambda_sparse", "lambda_mag",
              "mean_spatial_r2", "se_spatial_r2", "mean_spatial_rmse",
              "oof_residual_morans_i", "admissible", "selected"]
    rows = [[row[h] for h in header] for row in result.table]
    runio.write_csv_atomic(os.path.join(args.out, "search_table.csv"),
                           header, rows)
    selected_row = next(r for r in result.table if r["selected"])
    runio.write_json_atomic(os.path.join(args.out, "selected.json"), {
        "settings": asdict(result.selected),
        "mean_spatial_r2": selected_row["mean_spatial_r2"],
        "se_spatial_r2": selected_row["se_spatial_r2"],
    })
    config = {
        "data": args.data, "schema": args.schema, "seed": args.seed,
        "grid": {
            "k_candidates": list(grid.k_candidates),
            "k_regimes_candidates": list(grid.k_regimes_candidates),
            "lambda_sparse": list(grid.lambda_sparse),
            "lambda_mag": list(grid.lambda_mag),
        },
        "base_settings": asdict(base),
    }
    runio.write_manifest(args.out, "search", config, thread_cap=workers)
    print(f"selected k={result.selected.graph_k} "
          f"K={result.selected.k_regimes} "
          f"lambda_sparse={result.selected.lambda_sparse} "
          f"lambda_mag={result.selected.lambda_mag} -> {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    params, extra = load_checkpoint(args.checkpoint)
    schema = read_schema(args.schema)
    dataset = load_dataset(args.data, schema)
    if (dataset.p_burden != params.config.p_burden
            or dataset.p_capacity != params.config.p_capacity):
        raise DataError(
            f"dataset blocks ({dataset.p_burden}, {dataset.p_capacity}) do "
            f"not match checkpoint ({params.config.p_burden}, "
            f"{params.config.p_capacity})")
    if "train_stats" not in extra:
        raise DataError("checkpoint lacks train_stats; re-run train")
    stats = training.TrainStats.from_dict(extra["train_stats"])
    graph = build_knn_graph(dataset.coords, int(extra["graph_k"]))
    _make_out_dir(args.out)

    outputs = training.forward_standardized(params, dataset, graph, stats)
    atlas = diagnostics.sensitivity_fields(params, dataset, graph, stats)
    fd = diagnostics.finite_difference_check(params, dataset, graph, stats,
                                             delta=args.delta, atlas=atlas)
    summary = diagnostics.summary_table(atlas, outputs.h_norm)

    _atomic(os.path.join(args.out, "atlas.csv"),
            lambda p: diagnostics.write_atlas_csv(atlas, dataset.coords, p))
    _atomic(os.path.join(args.out, "summary.csv"),
            lambda p: diagnostics.write_summary_csv(summary, p))
    prob_rows = [[i, k + 1, float(outputs.p[i, k])]
                 for i in range(dataset.n) for k in range(outputs.p.shape[1])]
    runio.write_csv_atomic(os.path.join(args.out, "regime_probs.csv"),
                           ["node_id", "regime", "probability"], prob_rows)
    entropy_rows = [[i, float(dataset.coords[i, 0]),
                     float(dataset.coords[i, 1]), float(outputs.h_norm[i])]
                    for i in range(dataset.n)]
    runio.write_csv_atomic(os.path.join(args.out, "entropy.csv"),
                           ["node_id", "x", "y", "h_norm"], entropy_rows)
    fd_rows = [[name, args.delta, float(fd[name])] for name in atlas.variables]
    runio.write_csv_atomic(os.path.join(args.out, "fd_check.csv"),
                           ["variable", "delta", "correlation"], fd_rows)

    truth = None
    if args.truth is not None:
        truth = load_truth(args.truth)
        matching = diagnostics.gradient_matching(atlas, truth, outputs.h_norm)
        _atomic(os.path.join(args.out, "gradient_matching.csv"),
                lambda p: diagnostics.write_matching_csv(matching, p))

    if not args.no_figures:
        plots.diagnostic_panels(summary, atlas,
                                os.path.join(args.out, "diagnostic_panels.png"))
        plots.sensitivity_maps(atlas, dataset.coords,
                               os.path.join(args.out, "sensitivity_maps.png"))
        plots.regime_maps(dataset.coords, outputs.p, outputs.h_norm,
                          os.path.join(args.out, "regime_maps.png"))

    config = {
        "checkpoint": args.checkpoint, "data": args.data,
        "schema": args.schema, "truth": args.truth, "delta": args.delta,
        "figures": not args.no_figures,
    }
    runio.write_manifest(args.out, "diagnose", config,
                         thread_cap=_thread_cap())
    print(f"diagnostics for {len(atlas.variables)} covariates -> {args.out}")
    return 0


def cmd_report(args) -> int:
    _make_out_dir(args.out)
    by_model: dict[str, dict] = {}
    for run_dir in args.runs:
        path = os.path.join(run_dir, "cv_report.json")
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        row = by_model.setdefault(payload["model"], {"model": payload["model"]})
        proto = payload["protocol"]
        if proto == PROTOCOL_RANDOM:
            row["r2_random_cv"] = payload["mean_r2"]
            row["rmse_random_cv"] = payload["mean_rmse"]
        elif proto == PROTOCOL_SPATIAL:
            row["r2_spatial_cv"] = payload["mean_r2"]
            row["rmse_spatial_cv"] = payload["mean_rmse"]
        if payload.get("in_sample_r2") is not None:
            row["r2_in_sample"] = payload["in_sample_r2"]
            row["rmse_in_sample"] = payload["in_sample_rmse"]
            row["morans_i_in_sample"] = payload["residual_morans_i"]
    order = {kind: i for i, kind in enumerate(MODEL_KINDS)}
    rows = sorted(by_model.values(),
                  key=lambda r: order.get(r["model"], len(order)))
    header = ["model", "r2_in_sample", "r2_random_cv", "r2_spatial_cv",
              "rmse_in_sample", "rmse_random_cv", "rmse_spatial_cv",
              "morans_i_in_sample"]
    table = [[row.get(h) for h in header] for row in rows]
    runio.write_csv_atomic(os.path.join(args.out, "comparison.csv"),
                           header, table)
    if not args.no_figures and rows:
        plots.model_comparison(rows, os.path.join(args.out, "comparison.png"))
    config = {"runs": list(args.runs)}
    runio.write_manifest(args.out, "report", config, thread_cap=_thread_cap())
    print(f"comparison over {len(rows)} models -> {args.out}")
    return 0


def _add_train_flags(parser, lr_default=0.005):
    parser.add_argument("--k", type=int, default=8,
                        help="graph neighborhood size")
    parser.add_argument("--K-upper", type=int, default=3,
                        help="regime upper bound")
    parser.add_argument("--lambda-sparse", type=float, default=0.0)
    parser.add_argument("--lambda-mag", type=float, default=0.001)
    parser.add_argument("--lr", type=float, default=lr_default)
    parser.add_argument("--epochs", type=int, default=800)
    parser.add_argument("--patience", type=int, default=60)
    parser.add_argument("--val-fraction", type=float, default=0.15)
    parser.add_argument("--gate-hidden", type=int, default=64)
    parser.add_argument("--diffusion-steps", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zegnn",
        description="Regime-mixture spatial regression: generate, train, "
                    "evaluate, search, diagnose, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic scenario")
    p.add_argument("--scenario", choices=SCENARIO_KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lattice-side", type=int, default=50)
    p.add_argument("--jitter-scale", type=float, default=None)
    p.add_argument("--smoothing-k", type=int, default=15)
    p.add_argument("--spillover-k", type=int, default=8)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--noise-sd", type=float, default=0.12)
    p.add_argument("--eta-scale", type=float, default=0.3)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the model on a full dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="cross-validate one model")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--protocol", choices=sorted(_PROTOCOL_FLAGS),
                   default="spatial")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("search", help="hyperparameter search (1-SE rule)")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None,
                   help="JSON file with candidate lists")
    p.add_argument("--k-candidates", type=_int_list,
                   default=(8, 10, 12, 14, 16))
    p.add_argument("--k-regimes-candidates", type=_int_list, default=(3,))
    p.add_argument("--lambda-sparse-candidates", type=_float_list,
                   default=(0.0, 0.001, 0.005))
    p.add_argument("--lambda-mag-candidates", type=_float_list,
                   default=(0.001, 0.01))
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--epochs", type=int, default=800)
    p.add_argument("--patience", type=int, default=60)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--gate-hidden", type=int, default=64)
    p.add_argument("--diffusion-steps", type=int, default=1)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("diagnose", help="sensitivity atlas from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--truth", default=None,
                   help="truth JSON for gradient matching")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="combine cv runs into a comparison")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (SchemaError, DataError, GraphParameterError, ValueError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
