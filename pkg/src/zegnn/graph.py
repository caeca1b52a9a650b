"""Spatial kNN graphs, diffusion, blocked partitions, and Moran's I.

The graph is the symmetric union of each node's k Euclidean nearest
neighbors (edge i-j when j is among i's k nearest or vice versa), with a
row-normalized diffusion operator used for mean-aggregation message
passing. Neighbor selection is exact and deterministic: distance ties
break toward the smaller node index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist


class GraphParameterError(ValueError):
    """Invalid graph-construction parameter (e.g. k >= N)."""


def nearest_neighbor_ids(coords: np.ndarray, k: int,
                         include_self: bool = False) -> np.ndarray:
    """Exact k-nearest-neighbor indices per node, (N, k).

    Brute-force with a stable sort, so equidistant candidates resolve to
    the smaller index. Works in blocks to bound memory at large N.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    limit = n if include_self else n - 1
    if not 1 <= k <= limit:
        raise GraphParameterError(f"k={k} out of range for {n} nodes")
    out = np.empty((n, k), dtype=np.int64)
    block = max(1, int(2**21 // max(n, 1)))
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = cdist(coords[start:stop], coords, metric="sqeuclidean")
        if not include_self:
            d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:stop] = order[:, :k]
    return out


@dataclass(frozen=True)
class SpatialGraph:
    """Symmetric binary kNN adjacency plus its row-normalized operator."""

    n: int
    k: int
    adjacency: sp.csr_matrix
    degrees: np.ndarray
    diffusion: sp.csr_matrix


def _row_normalized(adjacency: sp.csr_matrix) -> sp.csr_matrix:
    """D^-1 A with isolated nodes given an identity row (self weight 1)."""
    degrees = np.asarray(adjacency.sum(axis=1)).ravel()
    isolated = degrees == 0
    inv = np.zeros_like(degrees, dtype=np.float64)
    inv[~isolated] = 1.0 / degrees[~isolated]
    diffusion = sp.diags(inv) @ adjacency
    if isolated.any():
        ids = np.flatnonzero(isolated)
        eye = sp.coo_matrix(
            (np.ones(ids.size), (ids, ids)), shape=adjacency.shape
        )
        diffusion = diffusion + eye
    return sp.csr_matrix(diffusion)


def build_knn_graph(coords: np.ndarray, k: int) -> SpatialGraph:
    """Union-symmetrized kNN graph on planar coordinates.

    Every node therefore has degree >= k; the diagonal is zero.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise GraphParameterError("coordinates contain non-finite values")
    n = coords.shape[0]
    if k >= n:
        raise GraphParameterError(f"k={k} must be smaller than N={n}")
    neighbors = nearest_neighbor_ids(coords, k, include_self=False)
    rows = np.repeat(np.arange(n), k)
    cols = neighbors.ravel()
    a = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    a = sp.csr_matrix(a.maximum(a.T))  # undirected: edge if either side selects
    a.data = np.ones_like(a.data)
    degrees = np.asarray(a.sum(axis=1)).ravel().astype(np.int64)
    return SpatialGraph(n=n, k=k, adjacency=a, degrees=degrees,
                        diffusion=_row_normalized(a))


def diffuse(graph: SpatialGraph, values: np.ndarray) -> np.ndarray:
    """Apply the row-normalized operator: each row becomes its neighbor mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != graph.n:
        raise ValueError(f"values have {values.shape[0]} rows, graph has {graph.n}")
    if not np.all(np.isfinite(values)):
        raise ValueError("values contain non-finite entries")
    return graph.diffusion @ values


def morans_i(values: np.ndarray, graph: SpatialGraph) -> float:
    """Global Moran's I with binary kNN weights.

    I = (N/W) * sum_ij w_ij (v_i - vbar)(v_j - vbar) / sum_i (v_i - vbar)^2
    with w the 0/1 adjacency and W its total edge-endpoint count.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.shape[0] != graph.n:
        raise ValueError("values length does not match graph size")
    z = v - v.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise ValueError("Moran's I undefined for constant values")
    w_total = float(graph.adjacency.sum())
    num = float(z @ (graph.adjacency @ z))
    return graph.n / w_total * num / denom


@dataclass(frozen=True)
class BlockPartition:
    """5x5 coordinate blocks grouped into folds for spatially blocked CV."""

    block_id: np.ndarray
    fold_id: np.ndarray
    n_blocks: int
    n_folds: int


def _grid_index(values: np.ndarray, lo: float, hi: float, cells: int) -> np.ndarray:
    # Half-open cells [a, b); boundary points go to the higher-index cell,
    # and the last cell is closed so the maximum stays in range.
    if hi == lo:
        return np.zeros(values.shape[0], dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * cells).astype(np.int64)
    return np.clip(idx, 0, cells - 1)


def block_partition(coords: np.ndarray, grid: int = 5, folds: int = 5,
                    seed: int = 0) -> BlockPartition:
    """Equal-width grid blocks over the bounding box, shuffled into folds.

    Blocks are permuted by the seed and dealt round-robin to folds. If a
    fold ends up with no points, the next seed offset is tried (at most
    10 retries) before giving up.
    """
    coords = np.asarray(coords, dtype=np.float64)
    bx = _grid_index(coords[:, 0], coords[:, 0].min(), coords[:, 0].max(), grid)
    by = _grid_index(coords[:, 1], coords[:, 1].min(), coords[:, 1].max(), grid)
    block_id = by * grid + bx
    n_blocks = grid * grid
    for attempt in range(10):
        rng = np.random.default_rng(seed + attempt)
        order = rng.permutation(n_blocks)
        block_to_fold = np.empty(n_blocks, dtype=np.int64)
        block_to_fold[order] = np.arange(n_blocks) % folds
        fold_id = block_to_fold[block_id]
        if np.unique(fold_id).size == folds:
            return BlockPartition(block_id=block_id, fold_id=fold_id,
                                  n_blocks=n_blocks, n_folds=folds)
    raise ValueError(
        f"could not populate all {folds} folds after 10 seed retries"
    )


def training_subgraph(graph: SpatialGraph, test_ids: np.ndarray) -> SpatialGraph:
    """Induced graph on the non-test nodes, dropping every test-incident edge.

    Nodes isolated by the removal keep a row-stochastic diffusion via an
    identity row. Remaining nodes are renumbered in ascending original order.
    """
    test_ids = np.asarray(test_ids, dtype=np.int64)
    mask = np.ones(graph.n, dtype=bool)
    mask[test_ids] = False
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise ValueError("no training nodes remain after removing test set")
    a = sp.csr_matrix(graph.adjacency[keep][:, keep])
    degrees = np.asarray(a.sum(axis=1)).ravel().astype(np.int64)
    return SpatialGraph(n=keep.size, k=graph.k, adjacency=a, degrees=degrees,
                        diffusion=_row_normalized(a))


def edge_list(graph: SpatialGraph) -> np.ndarray:
    """Undirected edges as an (E, 2) array with i < j, sorted."""
    coo = sp.triu(graph.adjacency, k=1).tocoo()
    edges = np.column_stack([coo.row, coo.col])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def write_edge_csv(graph: SpatialGraph, path) -> None:
    edges = edge_list(graph)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("i,j\n")
        for i, j in edges:
            fh.write(f"{i},{j}\n")
