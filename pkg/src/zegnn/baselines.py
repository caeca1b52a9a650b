"""Reference models run through the same harness: OLS, DNN, and a GNN.

The three baselines bracket the regime-mixture model: a global linear
map, a nonlinear but non-spatial network, and a spatial message-passing
network with no burden/capacity structure. All of them consume the same
standardized covariates, the same folds, and (for the GNN) the same
leakage-safe subgraphs as the main model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .graph import SpatialGraph
from .model import _glorot
from .training import Adam, DivergenceError, LossParts, clip_by_global_norm

OLS_RIDGE = 1e-10  # stabilizing diagonal for the normal equations


def fit_ols(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Least squares with an intercept, solved by normal equations.

    Returns coefficients with the intercept first. A rank-deficient
    design triggers a warning; the tiny ridge diagonal keeps the solve
    well posed either way.
    """
    x = np.asarray(x, dtype=np.float64)
    design = np.column_stack([np.ones(x.shape[0]), x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        warnings.warn("rank-deficient design; ridge fallback applied",
                      RuntimeWarning, stacklevel=2)
    gram = design.T @ design
    gram[np.diag_indices_from(gram)] += OLS_RIDGE
    return np.linalg.solve(gram, design.T @ np.asarray(z, dtype=np.float64))


def predict_ols(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return coef[0] + x @ coef[1:]


@dataclass(frozen=True)
class MlpConfig:
    """Feed-forward / message-passing baseline settings."""

    hidden: int = 64
    lr: float = 0.001
    epochs: int = 600
    clip_norm: float = 1.0
    seed: int = 0


@dataclass
class MlpModel:
    weights: dict[str, np.ndarray]
    config: MlpConfig
    spatial: bool
    grad_norms: list[float]  # post-clip global norms, one per epoch


def _init_mlp(p_in: int, hidden: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "w1": _glorot(rng, p_in, hidden), "b1": np.zeros(hidden),
        "w2": _glorot(rng, hidden, hidden), "b2": np.zeros(hidden),
        "w3": _glorot(rng, hidden, 1), "b3": np.zeros(1),
    }


def _mlp_forward(weights, x, operator):
    """linear -> relu -> (diffuse) -> linear -> relu -> (diffuse) -> linear."""
    z1 = x @ weights["w1"] + weights["b1"]
    h1 = np.maximum(z1, 0.0)
    a1 = operator @ h1 if operator is not None else h1
    z2 = a1 @ weights["w2"] + weights["b2"]
    h2 = np.maximum(z2, 0.0)
    a2 = operator @ h2 if operator is not None else h2
    pred = (a2 @ weights["w3"] + weights["b3"]).ravel()
    return pred, (z1, a1, z2, a2)


def _mlp_backward(weights, x, cache, d_pred, operator):
    z1, a1, z2, a2 = cache
    d_out = d_pred[:, None]
    grads = {"w3": a2.T @ d_out, "b3": d_out.sum(axis=0)}
    d_a2 = d_out @ weights["w3"].T
    if operator is not None:
        d_a2 = operator.T @ d_a2
    d_z2 = d_a2 * (z2 > 0.0)
    grads["w2"] = a1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_a1 = d_z2 @ weights["w2"].T
    if operator is not None:
        d_a1 = operator.T @ d_a1
    d_z1 = d_a1 * (z1 > 0.0)
    grads["w1"] = x.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return grads


def _train_mlp(x: np.ndarray, z: np.ndarray, cfg: MlpConfig,
               operator) -> MlpModel:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    weights = _init_mlp(x.shape[1], cfg.hidden, cfg.seed)
    optimizer = Adam(weights, lr=cfg.lr)
    norms: list[float] = []
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        pred, cache = _mlp_forward(weights, x, operator)
        resid = pred - z
        mse = float(np.mean(resid ** 2))
        if not np.isfinite(mse):
            raise DivergenceError(epoch, LossParts(mse, mse, 0.0, 0.0))
        grads = _mlp_backward(weights, x, cache, 2.0 / n * resid, operator)
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        norms.append(norm)
        optimizer.step(weights, grads)
    return MlpModel(weights=weights, config=cfg,
                    spatial=operator is not None, grad_norms=norms)


def fit_dnn(x: np.ndarray, z: np.ndarray, cfg: MlpConfig) -> MlpModel:
    """Two 64-unit rectified layers, full-batch Adam, fixed epoch budget."""
    return _train_mlp(x, z, cfg, operator=None)


def predict_dnn(model: MlpModel, x: np.ndarray) -> np.ndarray:
    pred, _ = _mlp_forward(model.weights, np.asarray(x, dtype=np.float64), None)
    return pred


def fit_gnn(x: np.ndarray, z: np.ndarray, graph: SpatialGraph,
            cfg: MlpConfig) -> MlpModel:
    """Message-passing baseline: two mean-aggregation steps between layers.

    Trained on the caller's leakage-safe subgraph; prediction happens on
    whatever graph is passed to `predict_gnn`.
    """
    return _train_mlp(x, z, cfg, operator=graph.diffusion)


def predict_gnn(model: MlpModel, x: np.ndarray,
                graph: SpatialGraph) -> np.ndarray:
    pred, _ = _mlp_forward(model.weights, np.asarray(x, dtype=np.float64),
                           graph.diffusion)
    return pred
