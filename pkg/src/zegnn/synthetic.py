"""Synthetic spatial scenarios with known burden/capacity ground truth.

Three scenarios share one jittered-lattice domain and one recipe for
spatially correlated covariates (neighbor-mean smoothing of white noise)
and differ in how the latent potentials are generated:

* ``global-linear``: one regime, fixed linear burden/capacity laws.
* ``local-linear``: three deterministic regions (upper half, lower-left,
  lower-right) using the three regime laws below.
* ``nonlinear``: three regimes from a Voronoi tessellation of random
  seed points, same three laws.

Regime laws (burden E, capacity S over standardized covariates x1..x5):

* regime 1 (positive slope):  E = 2.6*x1 + 2.2*tanh(2*x2) + 1.8*tanh(2.2*x3)
* regime 2 (sign flip):       E = -2.6*x1 + 2*(x2^2 - 1) + 1.8*tanh(2.2*x3)
* regimes 1 and 2 share       S = 0.8*sin(3*x4) + 0.9*(expit(2*x5) - 0.5)
* regime 3 (interaction):     E = 0.9*x1 + 2.6*x2*x3
                              S = 1.7*sin(3.2*x4) + 1.5*(x5^2 - 1)

The regime-1 burden law is a reconstruction: it is the minimal form whose
free-energy slope in x1 is +2.6 and whose x2 response is 4.4*sech^2(2*x2),
giving the deliberate +2.6 / -2.6 / +0.9 step in dF/dx1 across regimes.
The global-linear coefficients (E = 2.6*x1 + 1.0*x2 + 0.8*x3,
S = 0.6*x4 + 0.5*x5) are likewise a fixed choice recorded in the scenario
config. Ground truth fixes the effective temperature at 1, so
F = E - S and all gradient fields satisfy grad_F = grad_E - grad_S.

The observed outcome adds spatial spillover, a smoothed unobserved field,
and white noise::

    y_i = F_i + rho * (A_tilde F)_i + eta_scale * eta_i + eps_i

with ``A_tilde`` the row-normalized kNN operator, ``eta`` built like a
covariate column, and ``eps ~ Normal(0, noise_sd^2)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .data import GroundTruthFields, RoleSchema, SpatialDataset
from .graph import SpatialGraph, build_knn_graph, nearest_neighbor_ids

GLOBAL_LINEAR = "global-linear"
LOCAL_LINEAR = "local-linear"
NONLINEAR = "nonlinear"
SCENARIO_KINDS = (GLOBAL_LINEAR, LOCAL_LINEAR, NONLINEAR)

N_COVARIATES = 5

# Stream indices into the spawned seed sequence; fixed so per-column
# generation is independent and the whole scenario is bit-reproducible.
_STREAM_JITTER = 0
_STREAM_COVARIATES = 1  # occupies 1..5
_STREAM_VORONOI = 6
_STREAM_ETA = 7
_STREAM_NOISE = 8
_N_STREAMS = 9


@dataclass(frozen=True)
class ScenarioSpec:
    """Configuration of one synthetic scenario."""

    kind: str
    seed: int = 0
    lattice_side: int = 50
    jitter_scale: float | None = None  # None -> 20% of lattice spacing
    smoothing_k: int = 15
    spillover_k: int = 8
    rho: float = 0.1
    noise_sd: float = 0.12
    eta_scale: float = 0.3

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.noise_sd < 0.0:
            raise ValueError("noise_sd must be non-negative")
        if self.lattice_side < 2:
            raise ValueError("lattice_side must be at least 2")

    @property
    def n(self) -> int:
        return self.lattice_side ** 2

    @property
    def spacing(self) -> float:
        return 1.0 / (self.lattice_side - 1)

    def resolved_jitter(self) -> float:
        return 0.2 * self.spacing if self.jitter_scale is None else self.jitter_scale

    def streams(self) -> list[np.random.Generator]:
        children = np.random.SeedSequence(self.seed).spawn(_N_STREAMS)
        return [np.random.default_rng(c) for c in children]


def scenario_schema() -> RoleSchema:
    """Column roles used by the scenario exporter."""
    return RoleSchema(
        outcome="y", coord_x="cx", coord_y="cy",
        burden_cols=("x1", "x2", "x3"), capacity_cols=("x4", "x5"),
        regime_col="regime",
    )


def generate_lattice(spec: ScenarioSpec) -> np.ndarray:
    """Jittered regular lattice over the unit square, (N, 2)."""
    side = spec.lattice_side
    axis = np.linspace(0.0, 1.0, side)
    gx, gy = np.meshgrid(axis, axis)
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    j = spec.resolved_jitter()
    if j > 0:
        rng = spec.streams()[_STREAM_JITTER]
        coords = coords + rng.uniform(-j, j, size=coords.shape)
    return coords


def _smooth_field(raw: np.ndarray, neighbor_ids: np.ndarray) -> np.ndarray:
    """Neighbor-mean smoothing followed by a population z-score."""
    smoothed = raw[neighbor_ids].mean(axis=1)
    return (smoothed - smoothed.mean()) / np.sqrt(np.mean(
        (smoothed - smoothed.mean()) ** 2))


def generate_covariates(coords: np.ndarray, spec: ScenarioSpec) -> np.ndarray:
    """Five spatially correlated standardized covariate fields, (N, 5).

    Each column is white noise averaged over the smoothing_k nearest
    neighbors (the point itself included) and then z-scored. Columns use
    independent seed streams.
    """
    neighbor_ids = nearest_neighbor_ids(coords, spec.smoothing_k,
                                        include_self=True)
    streams = spec.streams()
    columns = []
    for c in range(N_COVARIATES):
        rng = streams[_STREAM_COVARIATES + c]
        columns.append(_smooth_field(rng.standard_normal(coords.shape[0]),
                                     neighbor_ids))
    return np.column_stack(columns)


def assign_regimes(coords: np.ndarray, spec: ScenarioSpec) -> np.ndarray:
    """Regime labels in {1, 2, 3} (all 1 for the global-linear scenario)."""
    n = coords.shape[0]
    if spec.kind == GLOBAL_LINEAR:
        return np.ones(n, dtype=np.int64)
    if spec.kind == LOCAL_LINEAR:
        labels = np.where(coords[:, 1] >= 0.5, 1,
                          np.where(coords[:, 0] < 0.5, 2, 3))
        return labels.astype(np.int64)
    rng = spec.streams()[_STREAM_VORONOI]
    seeds = rng.uniform(0.0, 1.0, size=(3, 2))
    d2 = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64) + 1  # argmin: ties to lowest


def _sech2(x: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(x) ** 2


def compute_potentials(x: np.ndarray, labels: np.ndarray,
                       kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form burden and capacity fields per regime."""
    x1, x2, x3, x4, x5 = (x[:, j] for j in range(N_COVARIATES))
    if kind == GLOBAL_LINEAR:
        e = 2.6 * x1 + 1.0 * x2 + 0.8 * x3
        s = 0.6 * x4 + 0.5 * x5
        return e, s
    e = np.empty(x.shape[0])
    s = np.empty(x.shape[0])
    known = np.isin(labels, (1, 2, 3))
    if not known.all():
        raise ValueError(f"unknown regime label {labels[~known][0]}")
    m1, m2, m3 = labels == 1, labels == 2, labels == 3
    e[m1] = 2.6 * x1[m1] + 2.2 * np.tanh(2.0 * x2[m1]) \
        + 1.8 * np.tanh(2.2 * x3[m1])
    e[m2] = -2.6 * x1[m2] + 2.0 * (x2[m2] ** 2 - 1.0) \
        + 1.8 * np.tanh(2.2 * x3[m2])
    e[m3] = 0.9 * x1[m3] + 2.6 * x2[m3] * x3[m3]
    m12 = m1 | m2
    s[m12] = 0.8 * np.sin(3.0 * x4[m12]) + 0.9 * (expit(2.0 * x5[m12]) - 0.5)
    s[m3] = 1.7 * np.sin(3.2 * x4[m3]) + 1.5 * (x5[m3] ** 2 - 1.0)
    return e, s


def true_gradients(x: np.ndarray, labels: np.ndarray,
                   kind: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic (grad_F, grad_E, grad_S), each (N, 5), on the same laws.

    The x1 column of grad_F is the regime step field {+2.6, -2.6, +0.9}.
    """
    n = x.shape[0]
    x1, x2, x3, x4, x5 = (x[:, j] for j in range(N_COVARIATES))
    ge = np.zeros((n, N_COVARIATES))
    gs = np.zeros((n, N_COVARIATES))
    if kind == GLOBAL_LINEAR:
        ge[:, 0], ge[:, 1], ge[:, 2] = 2.6, 1.0, 0.8
        gs[:, 3], gs[:, 4] = 0.6, 0.5
        return ge - gs, ge, gs
    known = np.isin(labels, (1, 2, 3))
    if not known.all():
        raise ValueError(f"unknown regime label {labels[~known][0]}")
    m1, m2, m3 = labels == 1, labels == 2, labels == 3
    ge[m1, 0] = 2.6
    ge[m1, 1] = 4.4 * _sech2(2.0 * x2[m1])
    ge[m2, 0] = -2.6
    ge[m2, 1] = 4.0 * x2[m2]
    m12 = m1 | m2
    ge[m12, 2] = 3.96 * _sech2(2.2 * x3[m12])
    ge[m3, 0] = 0.9
    ge[m3, 1] = 2.6 * x3[m3]
    ge[m3, 2] = 2.6 * x2[m3]
    sig = expit(2.0 * x5[m12])
    gs[m12, 3] = 2.4 * np.cos(3.0 * x4[m12])
    gs[m12, 4] = 1.8 * sig * (1.0 - sig)
    gs[m3, 3] = 5.44 * np.cos(3.2 * x4[m3])
    gs[m3, 4] = 3.0 * x5[m3]
    return ge - gs, ge, gs


def generate_outcome(e_true: np.ndarray, s_true: np.ndarray,
                     coords: np.ndarray, graph: SpatialGraph,
                     spec: ScenarioSpec) -> np.ndarray:
    """Observed outcome: potential gap + spillover + smooth error + noise.

    Single-pass composition: the spillover term diffuses the already
    computed F field once, it is not a simultaneous fixed point.
    """
    f_true = e_true - s_true
    y = f_true.copy()
    if spec.rho != 0.0:
        y = y + spec.rho * (graph.diffusion @ f_true)
    streams = spec.streams()
    if spec.eta_scale != 0.0:
        neighbor_ids = nearest_neighbor_ids(coords, spec.smoothing_k,
                                            include_self=True)
        eta = _smooth_field(streams[_STREAM_ETA].standard_normal(coords.shape[0]),
                            neighbor_ids)
        y = y + spec.eta_scale * eta
    if spec.noise_sd > 0.0:
        y = y + streams[_STREAM_NOISE].normal(0.0, spec.noise_sd,
                                              size=coords.shape[0])
    return y


def generate_scenario(spec: ScenarioSpec) -> SpatialDataset:
    """Full scenario: covariates, regimes, outcome, and attached truth."""
    coords = generate_lattice(spec)
    x = generate_covariates(coords, spec)
    labels = assign_regimes(coords, spec)
    e_true, s_true = compute_potentials(x, labels, spec.kind)
    grad_f, grad_e, grad_s = true_gradients(x, labels, spec.kind)
    graph = build_knn_graph(coords, spec.spillover_k)
    y = generate_outcome(e_true, s_true, coords, graph, spec)
    truth = GroundTruthFields(
        e_true=e_true, s_true=s_true, f_true=e_true - s_true, regime=labels,
        grad_f=grad_f, grad_e=grad_e, grad_s=grad_s,
    )
    return SpatialDataset(
        coords=coords, x_burden=x[:, :3], x_capacity=x[:, 3:], y=y,
        burden_names=("x1", "x2", "x3"), capacity_names=("x4", "x5"),
        regime_labels=labels, truth=truth,
    )


def truth_payload(spec: ScenarioSpec, truth: GroundTruthFields) -> dict:
    """JSON-serializable truth + generator metadata."""
    cfg = asdict(spec)
    cfg["jitter_scale"] = spec.resolved_jitter()
    return {
        "format": "zegnn-truth",
        "version": 1,
        "scenario": cfg,
        "regime": truth.regime.tolist(),
        "e_true": truth.e_true.tolist(),
        "s_true": truth.s_true.tolist(),
        "f_true": truth.f_true.tolist(),
        "grad_f": truth.grad_f.tolist(),
        "grad_e": truth.grad_e.tolist(),
        "grad_s": truth.grad_s.tolist(),
    }


def load_truth(path) -> GroundTruthFields:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "zegnn-truth":
        raise ValueError(f"{path} is not a truth file")
    return GroundTruthFields(
        e_true=np.asarray(payload["e_true"], dtype=np.float64),
        s_true=np.asarray(payload["s_true"], dtype=np.float64),
        f_true=np.asarray(payload["f_true"], dtype=np.float64),
        regime=np.asarray(payload["regime"], dtype=np.int64),
        grad_f=np.asarray(payload["grad_f"], dtype=np.float64),
        grad_e=np.asarray(payload["grad_e"], dtype=np.float64),
        grad_s=np.asarray(payload["grad_s"], dtype=np.float64),
    )
