"""Cross-validation harness, metrics, hyperparameter search, regime usage.

Two CV protocols are supported: seeded random 5-fold splits and spatially
blocked 5-fold splits built from a 5x5 coordinate grid. Graph models are
trained on a leakage-safe subgraph (every edge touching a held-out node
removed) and standardization moments are always fit on training rows
only. Metrics are computed on the original outcome scale with the
held-out fold's own mean as the R-squared null.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines, training
from .data import SpatialDataset
from .graph import (SpatialGraph, block_partition, build_knn_graph, morans_i,
                    training_subgraph)

PROTOCOL_RANDOM = "random"
PROTOCOL_SPATIAL = "spatial_block"
PROTOCOL_IN_SAMPLE = "in_sample"
PROTOCOLS = (PROTOCOL_RANDOM, PROTOCOL_SPATIAL, PROTOCOL_IN_SAMPLE)

MODEL_KINDS = ("zegnn", "ols", "dnn", "gnn")
MORAN_K = 8  # weights for cross-model residual autocorrelation reporting


class FoldSizeError(ValueError):
    """A fold holds too few held-out rows to score."""


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """1 - SS_res / SS_tot around the mean of y_true; may be negative."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: held-out outcomes are constant")
    return 1.0 - float(np.sum((y_true - y_pred) ** 2)) / ss_tot


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    diff = np.asarray(y_true, dtype=np.float64) - np.asarray(y_pred,
                                                             dtype=np.float64)
    return float(np.sqrt(np.mean(diff ** 2)))


def make_random_folds(n: int, n_folds: int, seed: int) -> np.ndarray:
    """Seeded permutation dealt round-robin into nearly equal folds."""
    rng = np.random.default_rng(seed)
    fold_id = np.empty(n, dtype=np.int64)
    fold_id[rng.permutation(n)] = np.arange(n) % n_folds
    return fold_id


@dataclass(frozen=True)
class RunSettings:
    """One model configuration as evaluated by the harness."""

    graph_k: int | None = None  # None -> 8 for zegnn, 12 for gnn
    k_regimes: int = 3
    lambda_sparse: float = 0.0
    lambda_mag: float = 0.001
    gate_hidden: int = 64
    diffusion_steps: int = 1
    lr: float = 0.005
    max_epochs: int = 800
    patience: int = 60
    val_fraction: float = 0.15
    baseline_lr: float = 0.001
    baseline_epochs: int = 600
    baseline_clip: float = 1.0

    def resolved_graph_k(self, model_kind: str) -> int:
        if self.graph_k is not None:
            return self.graph_k
        return 12 if model_kind == "gnn" else 8

    def train_config(self, seed: int) -> training.TrainConfig:
        return training.TrainConfig(
            lr=self.lr, max_epochs=self.max_epochs, patience=self.patience,
            lambda_sparse=self.lambda_sparse, lambda_mag=self.lambda_mag,
            val_fraction=self.val_fraction, seed=seed,
        )

    def mlp_config(self, seed: int) -> baselines.MlpConfig:
        return baselines.MlpConfig(lr=self.baseline_lr,
                                   epochs=self.baseline_epochs,
                                   clip_norm=self.baseline_clip, seed=seed)


@dataclass
class RegimeUsage:
    """Effective regime counts and modal dominance from gating weights."""

    n_eff_global: float
    n_eff_local: float
    max_dominant_share: float


def _entropy(q: np.ndarray, axis=None) -> np.ndarray:
    from scipy.special import xlogy
    return -xlogy(q, q).sum(axis=axis)


def regime_usage(p: np.ndarray) -> RegimeUsage:
    """Perplexity of the mean weights, mean per-row perplexity, modal share."""
    p = np.asarray(p, dtype=np.float64)
    p_bar = p.mean(axis=0)
    n_eff_global = float(np.exp(_entropy(p_bar)))
    n_eff_local = float(np.mean(np.exp(_entropy(p, axis=1))))
    dominant = np.argmax(p, axis=1)  # ties resolve to the lowest index
    counts = np.bincount(dominant, minlength=p.shape[1])
    return RegimeUsage(n_eff_global=n_eff_global, n_eff_local=n_eff_local,
                       max_dominant_share=float(counts.max() / p.shape[0]))


@dataclass
class FoldAudit:
    """What one fold's training actually touched, for leakage checks."""

    fold: int
    test_ids: np.ndarray
    train_ids: np.ndarray
    stats_row_ids: np.ndarray
    graph_edge_nodes: np.ndarray  # original node ids on training-graph edges


@dataclass
class CvReport:
    model: str
    protocol: str
    seed: int
    settings: dict
    fold_r2: list[float]
    fold_rmse: list[float]
    mean_r2: float | None
    se_r2: float | None
    mean_rmse: float | None
    se_rmse: float | None
    oof_residual_morans_i: float | None
    in_sample_r2: float | None
    in_sample_rmse: float | None
    residual_morans_i: float | None
    regime_usage: RegimeUsage | None
    fold_assignment: np.ndarray | None

    def to_dict(self) -> dict:
        out = {
            "model": self.model, "protocol": self.protocol, "seed": self.seed,
            "settings": self.settings,
            "fold_r2": self.fold_r2, "fold_rmse": self.fold_rmse,
            "mean_r2": self.mean_r2, "se_r2": self.se_r2,
            "mean_rmse": self.mean_rmse, "se_rmse": self.se_rmse,
            "oof_residual_morans_i": self.oof_residual_morans_i,
            "in_sample_r2": self.in_sample_r2,
            "in_sample_rmse": self.in_sample_rmse,
            "residual_morans_i": self.residual_morans_i,
            "regime_usage": None if self.regime_usage is None
            else asdict(self.regime_usage),
            "fold_assignment": None if self.fold_assignment is None
            else self.fold_assignment.tolist(),
        }
        return out


def _fit_predict(model_kind: str, dataset: SpatialDataset,
                 train_ids: np.ndarray, test_ids: np.ndarray,
                 full_graph: SpatialGraph | None, settings: RunSettings,
                 seed: int, audit: list | None, fold: int):
    """Train on the training rows only; predict every row.

    Graph models train on the induced subgraph with test-incident edges
    removed and predict through the full graph afterwards. Returns
    (yhat_all, extras) where extras carries model-specific outputs.
    """
    train_ids = np.sort(np.asarray(train_ids))
    ds_train = dataset.subset(train_ids)
    extras: dict = {}
    edge_nodes = np.empty(0, dtype=np.int64)

    if model_kind == "zegnn":
        g_train = training_subgraph(full_graph, test_ids)
        result = training.fit(ds_train, g_train, settings.k_regimes,
                              settings.train_config(seed),
                              gate_hidden=settings.gate_hidden,
                              diffusion_steps=settings.diffusion_steps)
        yhat = training.predict(result.params, dataset, full_graph,
                                result.stats)
        outputs = training.forward_standardized(result.params, dataset,
                                                full_graph, result.stats)
        extras = {"params": result.params, "stats": result.stats,
                  "report": result.report, "p": outputs.p,
                  "h_norm": outputs.h_norm}
        edge_nodes = train_ids[np.unique(g_train.adjacency.nonzero()[0])]
    elif model_kind == "gnn":
        g_train = training_subgraph(full_graph, test_ids)
        stats = training.TrainStats.fit(ds_train)
        x_train = np.hstack([stats.x_burden.transform(ds_train.x_burden),
                             stats.x_capacity.transform(ds_train.x_capacity)])
        z_train = stats.y.transform(ds_train.y)
        model = baselines.fit_gnn(x_train, z_train, g_train,
                                  settings.mlp_config(seed))
        x_all = np.hstack([stats.x_burden.transform(dataset.x_burden),
                           stats.x_capacity.transform(dataset.x_capacity)])
        yhat = stats.y.inverse(baselines.predict_gnn(model, x_all, full_graph))
        extras = {"model": model, "stats": stats}
        edge_nodes = train_ids[np.unique(g_train.adjacency.nonzero()[0])]
    elif model_kind == "dnn":
        stats = training.TrainStats.fit(ds_train)
        x_train = np.hstack([stats.x_burden.transform(ds_train.x_burden),
                             stats.x_capacity.transform(ds_train.x_capacity)])
        model = baselines.fit_dnn(x_train, stats.y.transform(ds_train.y),
                                  settings.mlp_config(seed))
        x_all = np.hstack([stats.x_burden.transform(dataset.x_burden),
                           stats.x_capacity.transform(dataset.x_capacity)])
        yhat = stats.y.inverse(baselines.predict_dnn(model, x_all))
        extras = {"model": model, "stats": stats}
    elif model_kind == "ols":
        stats = training.TrainStats.fit(ds_train)
        x_train = np.hstack([stats.x_burden.transform(ds_train.x_burden),
                             stats.x_capacity.transform(ds_train.x_capacity)])
        coef = baselines.fit_ols(x_train, stats.y.transform(ds_train.y))
        x_all = np.hstack([stats.x_burden.transform(dataset.x_burden),
                           stats.x_capacity.transform(dataset.x_capacity)])
        yhat = stats.y.inverse(baselines.predict_ols(coef, x_all))
        extras = {"coef": coef, "stats": stats}
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")

    if audit is not None:
        audit.append(FoldAudit(
            fold=fold, test_ids=np.asarray(test_ids, dtype=np.int64),
            train_ids=train_ids, stats_row_ids=train_ids,
            graph_edge_nodes=edge_nodes,
        ))
    return yhat, extras


def run_cv(model_kind: str, dataset: SpatialDataset, protocol: str,
           settings: RunSettings, seed: int, n_folds: int = 5,
           with_refit: bool = True, audit: list | None = None) -> CvReport:
    """Cross-validate one model under one protocol.

    Always refits on the full data at the end (unless with_refit=False)
    for in-sample metrics, residual Moran's I with k=8 weights, and
    regime-usage diagnostics.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if model_kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {model_kind!r}")

    graph_k = settings.resolved_graph_k(model_kind)
    needs_graph = model_kind in ("zegnn", "gnn")
    full_graph = build_knn_graph(dataset.coords, graph_k) if needs_graph else None
    moran_graph = (full_graph if needs_graph and graph_k == MORAN_K
                   else build_knn_graph(dataset.coords, MORAN_K))

    fold_r2: list[float] = []
    fold_rmse: list[float] = []
    fold_assignment = None
    oof_moran = None

    if protocol != PROTOCOL_IN_SAMPLE:
        if protocol == PROTOCOL_RANDOM:
            fold_assignment = make_random_folds(dataset.n, n_folds, seed)
        else:
            fold_assignment = block_partition(dataset.coords, grid=5,
                                              folds=n_folds,
                                              seed=seed).fold_id
        oof = np.empty(dataset.n)
        for fold in range(n_folds):
            test_ids = np.flatnonzero(fold_assignment == fold)
            if test_ids.size < 2:
                raise FoldSizeError(
                    f"fold {fold} holds {test_ids.size} rows; need >= 2")
            train_ids = np.flatnonzero(fold_assignment != fold)
            yhat, _ = _fit_predict(model_kind, dataset, train_ids, test_ids,
                                   full_graph, settings, seed + fold, audit,
                                   fold)
            fold_r2.append(r_squared(dataset.y[test_ids], yhat[test_ids]))
            fold_rmse.append(rmse(dataset.y[test_ids], yhat[test_ids]))
            oof[test_ids] = yhat[test_ids]
        oof_moran = morans_i(dataset.y - oof, moran_graph)

    in_r2 = in_rmse = resid_moran = None
    usage = None
    if with_refit or protocol == PROTOCOL_IN_SAMPLE:
        all_ids = np.arange(dataset.n)
        yhat, extras = _fit_predict(model_kind, dataset, all_ids,
                                    np.empty(0, dtype=np.int64), full_graph,
                                    settings, seed, None, -1)
        in_r2 = r_squared(dataset.y, yhat)
        in_rmse = rmse(dataset.y, yhat)
        resid_moran = morans_i(dataset.y - yhat, moran_graph)
        if model_kind == "zegnn":
            usage = regime_usage(extras["p"])

    def agg(values):
        if not values:
            return None, None
        arr = np.asarray(values)
        se = float(np.std(arr, ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        return float(arr.mean()), se

    mean_r2, se_r2 = agg(fold_r2)
    mean_rmse, se_rmse = agg(fold_rmse)
    return CvReport(
        model=model_kind, protocol=protocol, seed=seed,
        settings={**asdict(settings), "graph_k": graph_k},
        fold_r2=fold_r2, fold_rmse=fold_rmse,
        mean_r2=mean_r2, se_r2=se_r2, mean_rmse=mean_rmse, se_rmse=se_rmse,
        oof_residual_morans_i=oof_moran,
        in_sample_r2=in_r2, in_sample_rmse=in_rmse,
        residual_morans_i=resid_moran, regime_usage=usage,
        fold_assignment=fold_assignment,
    )


@dataclass(frozen=True)
class SearchGrid:
    k_candidates: tuple[int, ...] = (8, 10, 12, 14, 16)
    k_regimes_candidates: tuple[int, ...] = (3,)
    lambda_sparse: tuple[float, ...] = (0.0, 0.001, 0.005)
    lambda_mag: tuple[float, ...] = (0.001, 0.01)

    def __post_init__(self):
        for name in ("k_candidates", "k_regimes_candidates",
                     "lambda_sparse", "lambda_mag"):
            values = getattr(self, name)
            object.__setattr__(self, name, tuple(values))
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if min(self.lambda_sparse) < 0 or min(self.lambda_mag) < 0:
            raise ValueError("penalty weights must be non-negative")

    def points(self):
        return list(itertools.product(self.k_candidates,
                                      self.k_regimes_candidates,
                                      self.lambda_sparse, self.lambda_mag))


@dataclass
class SearchResult:
    selected: RunSettings
    table: list[dict]


def _evaluate_grid_point(args):
    dataset, base, point, seed = args
    k, k_regimes, lam_s, lam_m = point
    settings = replace(base, graph_k=k, k_regimes=k_regimes,
                       lambda_sparse=lam_s, lambda_mag=lam_m)
    report = run_cv("zegnn", dataset, PROTOCOL_SPATIAL, settings, seed,
                    with_refit=False)
    return {
        "graph_k": k, "k_regimes": k_regimes,
        "lambda_sparse": lam_s, "lambda_mag": lam_m,
        "mean_spatial_r2": report.mean_r2, "se_spatial_r2": report.se_r2,
        "mean_spatial_rmse": report.mean_rmse,
        "oof_residual_morans_i": report.oof_residual_morans_i,
    }


def hyper_search(dataset: SpatialDataset, grid: SearchGrid, seed: int,
                 base: RunSettings = RunSettings(),
                 n_workers: int = 1) -> SearchResult:
    """Spatially blocked CV over the grid with 1-SE parsimony selection.

    The admissible set holds every configuration whose mean spatial
    R-squared is within one standard error of the best mean; among those
    the smallest graph k wins, then the smallest total regularization,
    then the smallest regime upper bound.
    """
    points = grid.points()
    jobs = [(dataset, base, point, seed) for point in points]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_evaluate_grid_point, jobs))
    else:
        rows = [_evaluate_grid_point(job) for job in jobs]

    best = max(rows, key=lambda r: r["mean_spatial_r2"])
    threshold = best["mean_spatial_r2"] - best["se_spatial_r2"]
    for row in rows:
        row["admissible"] = bool(row["mean_spatial_r2"] >= threshold)
        row["selected"] = False
    admissible = [r for r in rows if r["admissible"]]
    chosen = min(admissible, key=lambda r: (
        r["graph_k"], r["lambda_sparse"] + r["lambda_mag"], r["k_regimes"],
        r["lambda_sparse"], r["lambda_mag"]))
    chosen["selected"] = True
    selected = replace(base, graph_k=chosen["graph_k"],
                       k_regimes=chosen["k_regimes"],
                       lambda_sparse=chosen["lambda_sparse"],
                       lambda_mag=chosen["lambda_mag"])
    return SearchResult(selected=selected, table=rows)
