"""End-to-end training: composite loss, Adam updates, early stopping.

The objective is ``mse + lambda_sparse * sparse + lambda_mag * mag`` where
``mse`` is the mean squared error of the standardized prediction over the
gradient rows, ``sparse = -sum_k log(mean_i p_ik + eps)`` is a log barrier
against regime collapse, and ``mag`` penalizes the mean summed squares of
the per-regime burden/capacity outputs.

Training is full batch and deterministic under a fixed seed. A fraction
of the provided rows is held out as an inner validation split (removed
from the gradient set but still evaluated through the same graph each
epoch); training stops once validation MSE has not improved for
``patience`` consecutive epochs and the best-scoring parameters are
restored before anything downstream sees them.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as zmodel
from .data import SpatialDataset, Standardizer
from .graph import SpatialGraph


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, parts: "LossParts"):
        self.epoch = epoch
        self.parts = parts
        super().__init__(
            f"non-finite loss at epoch {epoch}: mse={parts.mse!r} "
            f"sparse={parts.sparse!r} mag={parts.mag!r}"
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    max_epochs: int = 800
    patience: int = 60
    lambda_sparse: float = 0.0
    lambda_mag: float = 0.0
    eps_occupancy: float = 1e-8
    val_fraction: float = 0.15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience >= self.max_epochs and self.max_epochs > 1:
            raise ValueError("patience must be smaller than max_epochs")
        if self.lambda_sparse < 0 or self.lambda_mag < 0:
            raise ValueError("penalty weights must be non-negative")


@dataclass(frozen=True)
class LossParts:
    total: float
    mse: float
    sparse: float
    mag: float


def loss_components(outputs: zmodel.ForwardOutputs, z: np.ndarray,
                    train_ids: np.ndarray, cfg: TrainConfig) -> LossParts:
    """Composite loss restricted to the given rows."""
    ids = np.asarray(train_ids)
    if ids.size == 0:
        raise ValueError("loss requires a non-empty training index set")
    resid = outputs.f[ids] - z[ids]
    mse = float(np.mean(resid ** 2))
    p_bar = outputs.p[ids].mean(axis=0)
    sparse = float(-np.sum(np.log(p_bar + cfg.eps_occupancy)))
    mag = float(np.mean(
        (outputs.e_reg[ids] ** 2 + outputs.s_reg[ids] ** 2).sum(axis=1)))
    total = mse + cfg.lambda_sparse * sparse + cfg.lambda_mag * mag
    return LossParts(total=total, mse=mse, sparse=sparse, mag=mag)


def loss_seeds(outputs: zmodel.ForwardOutputs, z: np.ndarray,
               train_ids: np.ndarray, cfg: TrainConfig) -> zmodel.OutputSeeds:
    """Upstream sensitivities of the composite loss for the backward pass."""
    ids = np.asarray(train_ids)
    n, k = outputs.p.shape
    m = ids.size
    d_f = np.zeros(n)
    d_f[ids] = 2.0 / m * (outputs.f[ids] - z[ids])
    d_p = None
    if cfg.lambda_sparse != 0.0:
        p_bar = outputs.p[ids].mean(axis=0)
        d_p = np.zeros((n, k))
        d_p[ids] = -cfg.lambda_sparse / m / (p_bar + cfg.eps_occupancy)
    d_e_reg = d_s_reg = None
    if cfg.lambda_mag != 0.0:
        d_e_reg = np.zeros((n, k))
        d_s_reg = np.zeros((n, k))
        d_e_reg[ids] = cfg.lambda_mag * 2.0 / m * outputs.e_reg[ids]
        d_s_reg[ids] = cfg.lambda_mag * 2.0 / m * outputs.s_reg[ids]
    return zmodel.OutputSeeds(f=d_f, p=d_p, e_reg=d_e_reg, s_reg=d_s_reg)


class Adam:
    """Full-batch first-order moment optimizer over a dict of arrays."""

    def __init__(self, weights: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}

    def step(self, weights: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            weights[name] -= self.lr * (self.m[name] / b1c) / (
                np.sqrt(self.v[name] / b2c) + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray],
                        max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
        return grads, max_norm
    return grads, total


@dataclass
class TrainStats:
    """Standardization moments fit on training rows only."""

    y: Standardizer
    x_burden: Standardizer
    x_capacity: Standardizer
    coords: Standardizer

    @classmethod
    def fit(cls, dataset: SpatialDataset) -> "TrainStats":
        return cls(
            y=Standardizer.fit(dataset.y),
            x_burden=Standardizer.fit(dataset.x_burden),
            x_capacity=Standardizer.fit(dataset.x_capacity),
            coords=Standardizer.fit(dataset.coords),
        )

    def to_dict(self) -> dict:
        return {name: {"mean": s.mean.tolist(), "sd": s.sd.tolist()}
                for name, s in (("y", self.y), ("x_burden", self.x_burden),
                                ("x_capacity", self.x_capacity),
                                ("coords", self.coords))}

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainStats":
        def make(entry):
            return Standardizer(mean=np.asarray(entry["mean"], dtype=np.float64),
                                sd=np.asarray(entry["sd"], dtype=np.float64))
        return cls(y=make(payload["y"]), x_burden=make(payload["x_burden"]),
                   x_capacity=make(payload["x_capacity"]),
                   coords=make(payload["coords"]))


@dataclass
class TrainReport:
    best_epoch: int
    n_epochs: int
    best_val_mse: float
    best_parts: LossParts
    train_trace: list[LossParts]
    val_trace: list[float]


@dataclass
class FitResult:
    params: zmodel.ZegnnParams
    report: TrainReport
    stats: TrainStats


def inner_split(n: int, val_fraction: float,
                seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (gradient_ids, validation_ids) split of the training rows."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise ValueError("validation split would consume every training row")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(dataset: SpatialDataset, graph: SpatialGraph, k_regimes: int,
        cfg: TrainConfig, gate_hidden: int = 64,
        diffusion_steps: int = 1) -> FitResult:
    """Train on the given rows (the caller passes training-fold data only).

    Standardization moments come from these rows alone. Validation rows
    stay inside the forward graph (their edges are training edges) but
    contribute nothing to the gradient.
    """
    stats = TrainStats.fit(dataset)
    xb = stats.x_burden.transform(dataset.x_burden)
    xc = stats.x_capacity.transform(dataset.x_capacity)
    coords = stats.coords.transform(dataset.coords)
    z = stats.y.transform(dataset.y)

    grad_ids, val_ids = inner_split(dataset.n, cfg.val_fraction, cfg.seed)
    params = zmodel.init_params(dataset.p_burden, dataset.p_capacity,
                                k_regimes, gate_hidden=gate_hidden,
                                seed=cfg.seed,
                                diffusion_steps=diffusion_steps)
    optimizer = Adam(params.weights, lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.adam_eps)

    best_val = np.inf
    best_epoch = 0
    best_weights = None
    best_parts = None
    stall = 0
    train_trace: list[LossParts] = []
    val_trace: list[float] = []

    for epoch in range(1, cfg.max_epochs + 1):
        outputs, cache = zmodel._forward(params, xb, xc, coords, graph)
        parts = loss_components(outputs, z, grad_ids, cfg)
        val_mse = float(np.mean((outputs.f[val_ids] - z[val_ids]) ** 2))
        if not (np.isfinite(parts.total) and np.isfinite(val_mse)):
            raise DivergenceError(epoch, parts)
        train_trace.append(parts)
        val_trace.append(val_mse)

        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_weights = {k: v.copy() for k, v in params.weights.items()}
            best_parts = parts
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break

        seeds = loss_seeds(outputs, z, grad_ids, cfg)
        grads, _ = zmodel._backward(params, cache, graph, seeds)
        optimizer.step(params.weights, grads)

    params.weights = best_weights
    report = TrainReport(best_epoch=best_epoch, n_epochs=len(val_trace),
                         best_val_mse=best_val, best_parts=best_parts,
                         train_trace=train_trace, val_trace=val_trace)
    return FitResult(params=params, report=report, stats=stats)


def predict(params: zmodel.ZegnnParams, dataset: SpatialDataset,
            graph: SpatialGraph, stats: TrainStats) -> np.ndarray:
    """Predictions on the original outcome scale via the stored moments."""
    outputs = zmodel.forward(
        params,
        stats.x_burden.transform(dataset.x_burden),
        stats.x_capacity.transform(dataset.x_capacity),
        stats.coords.transform(dataset.coords),
        graph,
    )
    return stats.y.inverse(outputs.f)


def forward_standardized(params: zmodel.ZegnnParams, dataset: SpatialDataset,
                         graph: SpatialGraph,
                         stats: TrainStats) -> zmodel.ForwardOutputs:
    """Full forward outputs for a dataset under stored standardization."""
    return zmodel.forward(
        params,
        stats.x_burden.transform(dataset.x_burden),
        stats.x_capacity.transform(dataset.x_capacity),
        stats.coords.transform(dataset.coords),
        graph,
    )


def write_trace_csv(report: TrainReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_total", "train_mse", "train_sparse",
                         "train_mag", "val_mse"])
        for i, (parts, val) in enumerate(zip(report.train_trace,
                                             report.val_trace), start=1):
            writer.writerow([i, repr(parts.total), repr(parts.mse),
                             repr(parts.sparse), repr(parts.mag), repr(val)])
