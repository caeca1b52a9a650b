"""Gradient-based diagnostics of the fitted burden/capacity decomposition.

For every covariate the atlas holds the local response of the prediction
F and of the mixture-averaged burden and capacity fields to a unit shift
of that covariate's standardized column, evaluated at each observation by
forward-mode differentiation through the whole model (encoders, gating,
its graph diffusion, temperatures, entropy term). All sensitivities are
in standardized-input units.

Summaries: mean-absolute importances per channel, the burden-dominance
ratio, an entropy-weighted core importance that discounts locations with
uncertain regime assignment, a sign-split role-reversal index, and
(when synthetic ground truth is attached) correlation and core
sign-agreement against the generator's analytic gradient fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import model as zmodel
from .data import GroundTruthFields, SpatialDataset
from .graph import SpatialGraph
from .training import TrainStats

CORE_ENTROPY_THRESHOLD = 0.2  # gating entropy below this marks a regime core
RRI_TOL_FRACTION = 0.01       # screen gradients below this fraction of median


class DiagnosticError(RuntimeError):
    """A diagnostic's prerequisite (e.g. attached ground truth) is missing."""


@dataclass
class SensitivityAtlas:
    """Per-location, per-covariate gradient triples of (F, E_mix, S_mix)."""

    variables: tuple[str, ...]
    g_f: np.ndarray
    g_e: np.ndarray
    g_s: np.ndarray


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; NaN when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da @ da) * (db @ db))
    if denom == 0.0:
        return float("nan")
    return float(da @ db / denom)


def _standardized_inputs(dataset: SpatialDataset, stats: TrainStats):
    return (stats.x_burden.transform(dataset.x_burden),
            stats.x_capacity.transform(dataset.x_capacity),
            stats.coords.transform(dataset.coords))


def sensitivity_fields(params: zmodel.ZegnnParams, dataset: SpatialDataset,
                       graph: SpatialGraph,
                       stats: TrainStats) -> SensitivityAtlas:
    """Exact local response fields for every covariate column."""
    xb, xc, coords = _standardized_inputs(dataset, stats)
    n = dataset.n
    variables = dataset.covariate_names
    p = len(variables)
    g_f = np.empty((n, p))
    g_e = np.empty((n, p))
    g_s = np.empty((n, p))
    for j in range(p):
        t_burden = t_capacity = None
        if j < dataset.p_burden:
            t_burden = np.zeros_like(xb)
            t_burden[:, j] = 1.0
        else:
            t_capacity = np.zeros_like(xc)
            t_capacity[:, j - dataset.p_burden] = 1.0
        t_f, t_e, t_s = zmodel.jvp(params, xb, xc, coords, graph,
                                   t_burden=t_burden, t_capacity=t_capacity)
        g_f[:, j] = t_f
        g_e[:, j] = t_e
        g_s[:, j] = t_s
    return SensitivityAtlas(variables=variables, g_f=g_f, g_e=g_e, g_s=g_s)


def finite_difference_check(params: zmodel.ZegnnParams,
                            dataset: SpatialDataset, graph: SpatialGraph,
                            stats: TrainStats, delta: float = 0.1,
                            atlas: SensitivityAtlas | None = None) -> dict:
    """Perturb each standardized column by delta and correlate with the atlas.

    The perturbed field is recomputed through the full forward pass, so
    the comparison covers gating re-evaluation, not just the encoders.
    Zero-variance fields yield NaN (reported missing, never zero).
    """
    if atlas is None:
        atlas = sensitivity_fields(params, dataset, graph, stats)
    xb, xc, coords = _standardized_inputs(dataset, stats)
    base = zmodel.forward(params, xb, xc, coords, graph).f
    correlations = {}
    for j, name in enumerate(atlas.variables):
        xb_j, xc_j = xb, xc
        if j < dataset.p_burden:
            xb_j = xb.copy()
            xb_j[:, j] += delta
        else:
            xc_j = xc.copy()
            xc_j[:, j - dataset.p_burden] += delta
        delta_f = zmodel.forward(params, xb_j, xc_j, coords, graph).f - base
        correlations[name] = pearson(delta_f, atlas.g_f[:, j])
    return correlations


@dataclass
class ImportanceSummary:
    variable: str
    i_f: float
    i_e: float
    i_s: float
    d_e: float            # NaN when both channel importances vanish
    median_abs_g_f: float


def importance_summary(atlas: SensitivityAtlas) -> list[ImportanceSummary]:
    """Mean |gradient| per channel plus the burden-dominance ratio."""
    rows = []
    for j, name in enumerate(atlas.variables):
        i_f = float(np.mean(np.abs(atlas.g_f[:, j])))
        i_e = float(np.mean(np.abs(atlas.g_e[:, j])))
        i_s = float(np.mean(np.abs(atlas.g_s[:, j])))
        d_e = i_e / (i_e + i_s) if (i_e + i_s) > 0 else float("nan")
        rows.append(ImportanceSummary(
            variable=name, i_f=i_f, i_e=i_e, i_s=i_s, d_e=d_e,
            median_abs_g_f=float(np.median(np.abs(atlas.g_f[:, j])))))
    return rows


def core_importance(atlas: SensitivityAtlas, h_norm: np.ndarray) -> np.ndarray:
    """Entropy-weighted importance, weights 1 - H; NaN if all weight vanishes."""
    w = 1.0 - np.asarray(h_norm, dtype=np.float64)
    total = w.sum()
    if total == 0.0:
        return np.full(len(atlas.variables), np.nan)
    return (w[:, None] * np.abs(atlas.g_f)).sum(axis=0) / total


def role_reversal_index(atlas: SensitivityAtlas,
                        tol: float | np.ndarray | None = None) -> np.ndarray:
    """Sign-split score 2*min(q+, q-) among gradients above the screen.

    q+ and q- are the positive/negative fractions of the screened
    entries; a sign-stable variable scores 0 and an even split scores 1.
    The default screen is 1% of each column's median magnitude.
    """
    p = len(atlas.variables)
    abs_g = np.abs(atlas.g_f)
    if tol is None:
        tol = RRI_TOL_FRACTION * np.median(abs_g, axis=0)
    tol = np.broadcast_to(np.asarray(tol, dtype=np.float64), (p,))
    rri = np.zeros(p)
    for j in range(p):
        passing = atlas.g_f[:, j][abs_g[:, j] > tol[j]]
        if passing.size == 0:
            continue
        q_pos = float(np.mean(passing > 0))
        q_neg = float(np.mean(passing < 0))
        rri[j] = 2.0 * min(q_pos, q_neg)
    return rri


@dataclass
class MatchingRow:
    variable: str
    corr_f: float
    corr_e: float
    corr_s: float
    core_sign_agreement: float  # NaN if no core locations
    n_core: int


def gradient_matching(atlas: SensitivityAtlas, truth: GroundTruthFields | None,
                      h_norm: np.ndarray,
                      core_threshold: float = CORE_ENTROPY_THRESHOLD
                      ) -> list[MatchingRow]:
    """Correlate learned response fields with the generator's analytic ones.

    Sign agreement is restricted to regime cores (normalized entropy
    below the threshold), where regime attribution is near-deterministic.
    """
    if truth is None:
        raise DiagnosticError("gradient matching needs attached ground truth")
    core = np.asarray(h_norm) < core_threshold
    rows = []
    for j, name in enumerate(atlas.variables):
        agreement = float("nan")
        if core.any():
            agreement = float(np.mean(
                np.sign(atlas.g_f[core, j]) == np.sign(truth.grad_f[core, j])))
        rows.append(MatchingRow(
            variable=name,
            corr_f=pearson(atlas.g_f[:, j], truth.grad_f[:, j]),
            corr_e=pearson(atlas.g_e[:, j], truth.grad_e[:, j]),
            corr_s=pearson(atlas.g_s[:, j], truth.grad_s[:, j]),
            core_sign_agreement=agreement,
            n_core=int(core.sum())))
    return rows


def summary_table(atlas: SensitivityAtlas, h_norm: np.ndarray) -> list[dict]:
    """One row per variable: importances, dominance, core weight, reversal."""
    rows = importance_summary(atlas)
    i_core = core_importance(atlas, h_norm)
    rri = role_reversal_index(atlas)
    table = []
    for j, row in enumerate(rows):
        table.append({
            "variable": row.variable, "i_f": row.i_f, "i_e": row.i_e,
            "i_s": row.i_s, "d_e": row.d_e, "i_core": float(i_core[j]),
            "rri": float(rri[j]), "median_abs_g_f": row.median_abs_g_f,
        })
    return table


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_atlas_csv(atlas: SensitivityAtlas, coords: np.ndarray, path) -> None:
    """Long-form export for map rendering: one row per (node, variable)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "x", "y", "variable", "g_f", "g_e", "g_s"])
        for j, name in enumerate(atlas.variables):
            for i in range(coords.shape[0]):
                writer.writerow([i, repr(coords[i, 0]), repr(coords[i, 1]),
                                 name, repr(atlas.g_f[i, j]),
                                 repr(atlas.g_e[i, j]), repr(atlas.g_s[i, j])])


def write_summary_csv(table: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["variable", "i_f", "i_e", "i_s", "d_e", "i_core", "rri",
                  "median_abs_g_f"]
        writer.writerow(header)
        for row in table:
            writer.writerow([_fmt(row[k]) for k in header])


def write_matching_csv(rows: list[MatchingRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variable", "corr_f", "corr_e", "corr_s",
                         "core_sign_agreement", "n_core"])
        for row in rows:
            writer.writerow([row.variable, repr(row.corr_f), repr(row.corr_e),
                             repr(row.corr_s), repr(row.core_sign_agreement),
                             row.n_core])
