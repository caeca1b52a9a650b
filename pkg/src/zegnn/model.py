"""Regime-mixture free-energy model: forward pass and exact gradients.

Architecture (all dense math in float64 numpy):

* burden channel: one 64-unit rectified hidden layer over the burden
  block, then a linear head giving per-regime burden outputs ``E[i, k]``;
* capacity channel: same structure over the capacity block -> ``S[i, k]``;
* temperatures: an unconstrained vector mapped through a softplus so each
  regime temperature ``T[k]`` stays strictly positive;
* gating: a two-hidden-layer rectified MLP over the concatenated
  standardized covariates and coordinates produces regime logits, which
  are diffused over the row-normalized spatial graph (mean aggregation,
  one step by default) and row-softmaxed into probabilities ``P[i, k]``.

Per-regime free energies ``F_reg = E - T*S`` are combined into the
standardized prediction::

    F_i = sum_k P[i,k] * F_reg[i,k] + T_eff[i] * H[i]

with ``T_eff = P @ T`` and ``H`` the normalized gating entropy
(``-sum_k P log(P + eps) / log K``; identically zero when K = 1).
Mixture-averaged fields ``E_mix = sum_k P*E`` and ``S_mix`` are exposed
for interpretation.

Reverse mode (`backward`) returns exact gradients of any linear
functional of the outputs with respect to every parameter and every
input entry. Forward mode (`jvp`) propagates an input tangent and is what
the sensitivity diagnostics use: the tangent of F along a unit shift of
one covariate column is the model's local response field for that
covariate, including the pathway through the gating diffusion. There is
no general autodiff engine here; both passes are written against this
fixed architecture.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .graph import SpatialGraph

CHANNEL_HIDDEN = 64  # burden/capacity encoder width, fixed by design
ENTROPY_EPS = 1e-12  # stabilizer inside the entropy log

PARAM_NAMES = (
    "enc_burden_w", "enc_burden_b", "head_burden_w", "head_burden_b",
    "enc_capacity_w", "enc_capacity_b", "head_capacity_w", "head_capacity_b",
    "gate_w1", "gate_b1", "gate_w2", "gate_b2", "gate_w3", "gate_b3",
    "tau_raw",
)


@dataclass(frozen=True)
class ModelConfig:
    p_burden: int
    p_capacity: int
    k_regimes: int
    gate_hidden: int = 64
    diffusion_steps: int = 1

    def __post_init__(self):
        if min(self.p_burden, self.p_capacity, self.k_regimes,
               self.gate_hidden) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.diffusion_steps < 0:
            raise ValueError("diffusion_steps must be >= 0")


@dataclass
class ZegnnParams:
    """All learnable weights plus the configuration that shaped them."""

    config: ModelConfig
    seed: int
    weights: dict[str, np.ndarray]

    def copy(self) -> "ZegnnParams":
        return ZegnnParams(config=self.config, seed=self.seed,
                           weights={k: v.copy() for k, v in self.weights.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def positive_transform(tau_raw: np.ndarray) -> np.ndarray:
    """Map unconstrained temperature parameters to the positive domain."""
    return softplus(np.asarray(tau_raw, dtype=np.float64))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(p_burden: int, p_capacity: int, k_regimes: int,
                gate_hidden: int = 64, seed: int = 0,
                diffusion_steps: int = 1) -> ZegnnParams:
    """Fan-based uniform init; temperatures start at exactly 1."""
    config = ModelConfig(p_burden=p_burden, p_capacity=p_capacity,
                         k_regimes=k_regimes, gate_hidden=gate_hidden,
                         diffusion_steps=diffusion_steps)
    rng = np.random.default_rng(seed)
    h, g, k = CHANNEL_HIDDEN, gate_hidden, k_regimes
    p_gate = p_burden + p_capacity + 2
    weights = {
        "enc_burden_w": _glorot(rng, p_burden, h),
        "enc_burden_b": np.zeros(h),
        "head_burden_w": _glorot(rng, h, k),
        "head_burden_b": np.zeros(k),
        "enc_capacity_w": _glorot(rng, p_capacity, h),
        "enc_capacity_b": np.zeros(h),
        "head_capacity_w": _glorot(rng, h, k),
        "head_capacity_b": np.zeros(k),
        "gate_w1": _glorot(rng, p_gate, g),
        "gate_b1": np.zeros(g),
        "gate_w2": _glorot(rng, g, g),
        "gate_b2": np.zeros(g),
        "gate_w3": _glorot(rng, g, k),
        "gate_b3": np.zeros(k),
        "tau_raw": np.full(k, softplus_inverse(1.0)),
    }
    return ZegnnParams(config=config, seed=seed, weights=weights)


@dataclass
class ForwardOutputs:
    """Per-location fields produced by one forward pass."""

    f: np.ndarray        # standardized prediction, (N,)
    e_mix: np.ndarray    # mixture-averaged burden, (N,)
    s_mix: np.ndarray    # mixture-averaged capacity, (N,)
    p: np.ndarray        # regime probabilities, (N, K)
    h_norm: np.ndarray   # normalized gating entropy in [0, 1], (N,)
    e_reg: np.ndarray    # per-regime burden outputs, (N, K)
    s_reg: np.ndarray    # per-regime capacity outputs, (N, K)
    f_reg: np.ndarray    # per-regime free energies E - T*S, (N, K)
    t: np.ndarray        # regime temperatures, (K,)
    t_eff: np.ndarray    # mixture-averaged temperature, (N,)


@dataclass
class OutputSeeds:
    """Upstream sensitivities for `backward`; None means zero."""

    f: np.ndarray | None = None
    e_mix: np.ndarray | None = None
    s_mix: np.ndarray | None = None
    p: np.ndarray | None = None
    h_norm: np.ndarray | None = None
    e_reg: np.ndarray | None = None
    s_reg: np.ndarray | None = None
    f_reg: np.ndarray | None = None
    t: np.ndarray | None = None
    t_eff: np.ndarray | None = None


@dataclass
class InputGrads:
    x_burden: np.ndarray
    x_capacity: np.ndarray
    coords: np.ndarray


def _check_inputs(params, x_burden, x_capacity, coords_std, graph):
    cfg = params.config
    n = x_burden.shape[0]
    if x_burden.shape != (n, cfg.p_burden):
        raise ValueError(f"x_burden shape {x_burden.shape} mismatches config")
    if x_capacity.shape != (n, cfg.p_capacity):
        raise ValueError(f"x_capacity shape {x_capacity.shape} mismatches config")
    if coords_std.shape != (n, 2):
        raise ValueError(f"coords_std shape {coords_std.shape} must be (N, 2)")
    if graph.n != n:
        raise ValueError(f"graph has {graph.n} nodes, inputs have {n}")
    for name, arr in (("x_burden", x_burden), ("x_capacity", x_capacity),
                      ("coords_std", coords_std)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite values")


def _forward(params: ZegnnParams, x_burden, x_capacity, coords_std,
             graph: SpatialGraph):
    cfg = params.config
    w = params.weights
    _check_inputs(params, x_burden, x_capacity, coords_std, graph)
    k = cfg.k_regimes

    zb = x_burden @ w["enc_burden_w"] + w["enc_burden_b"]
    hb = np.maximum(zb, 0.0)
    e_reg = hb @ w["head_burden_w"] + w["head_burden_b"]

    zc = x_capacity @ w["enc_capacity_w"] + w["enc_capacity_b"]
    hc = np.maximum(zc, 0.0)
    s_reg = hc @ w["head_capacity_w"] + w["head_capacity_b"]

    t = positive_transform(w["tau_raw"])
    f_reg = e_reg - t[None, :] * s_reg

    gate_in = np.hstack([x_burden, x_capacity, coords_std])
    zg1 = gate_in @ w["gate_w1"] + w["gate_b1"]
    g1 = np.maximum(zg1, 0.0)
    zg2 = g1 @ w["gate_w2"] + w["gate_b2"]
    g2 = np.maximum(zg2, 0.0)
    logits = g2 @ w["gate_w3"] + w["gate_b3"]
    for _ in range(cfg.diffusion_steps):
        logits = graph.diffusion @ logits

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=1, keepdims=True)

    if k == 1:
        h_norm = np.zeros(p.shape[0])
        log_p_eps = None
    else:
        log_p_eps = np.log(p + ENTROPY_EPS)
        h_norm = -(p * log_p_eps).sum(axis=1) / np.log(k)

    t_eff = p @ t
    e_mix = (p * e_reg).sum(axis=1)
    s_mix = (p * s_reg).sum(axis=1)
    f = (p * f_reg).sum(axis=1) + t_eff * h_norm

    outputs = ForwardOutputs(f=f, e_mix=e_mix, s_mix=s_mix, p=p,
                             h_norm=h_norm, e_reg=e_reg, s_reg=s_reg,
                             f_reg=f_reg, t=t, t_eff=t_eff)
    cache = {
        "x_burden": x_burden, "x_capacity": x_capacity, "gate_in": gate_in,
        "zb": zb, "hb": hb, "zc": zc, "hc": hc,
        "zg1": zg1, "g1": g1, "zg2": zg2, "g2": g2,
        "log_p_eps": log_p_eps, "outputs": outputs,
    }
    return outputs, cache


def forward(params: ZegnnParams, x_burden: np.ndarray, x_capacity: np.ndarray,
            coords_std: np.ndarray, graph: SpatialGraph) -> ForwardOutputs:
    """Run the model on standardized inputs over the given graph."""
    outputs, _ = _forward(params, x_burden, x_capacity, coords_std, graph)
    return outputs


def _zeros_like_seed(seed, shape):
    return np.zeros(shape) if seed is None else np.asarray(seed, dtype=np.float64)


def _backward(params: ZegnnParams, cache: dict, graph: SpatialGraph,
              seeds: OutputSeeds):
    cfg = params.config
    w = params.weights
    out: ForwardOutputs = cache["outputs"]
    n, k = out.p.shape

    d_f = _zeros_like_seed(seeds.f, n)
    d_h = _zeros_like_seed(seeds.h_norm, n)
    d_t_eff = _zeros_like_seed(seeds.t_eff, n)
    d_p = _zeros_like_seed(seeds.p, (n, k))
    d_e_reg = _zeros_like_seed(seeds.e_reg, (n, k))
    d_s_reg = _zeros_like_seed(seeds.s_reg, (n, k))
    d_f_reg = _zeros_like_seed(seeds.f_reg, (n, k))
    d_t = _zeros_like_seed(seeds.t, k)

    # F = sum_k P * F_reg + T_eff * H
    d_p = d_p + d_f[:, None] * out.f_reg
    d_f_reg = d_f_reg + d_f[:, None] * out.p
    d_t_eff = d_t_eff + d_f * out.h_norm
    d_h = d_h + d_f * out.t_eff

    # mixture fields
    if seeds.e_mix is not None:
        d_p = d_p + seeds.e_mix[:, None] * out.e_reg
        d_e_reg = d_e_reg + seeds.e_mix[:, None] * out.p
    if seeds.s_mix is not None:
        d_p = d_p + seeds.s_mix[:, None] * out.s_reg
        d_s_reg = d_s_reg + seeds.s_mix[:, None] * out.p

    # T_eff = P @ T
    d_p = d_p + d_t_eff[:, None] * out.t[None, :]
    d_t = d_t + out.p.T @ d_t_eff

    # H = -(1/log K) sum_k P log(P + eps)
    if k > 1:
        log_p_eps = cache["log_p_eps"]
        d_p = d_p - d_h[:, None] / np.log(k) * (
            log_p_eps + out.p / (out.p + ENTROPY_EPS))

    # F_reg = E_reg - T * S_reg
    d_e_reg = d_e_reg + d_f_reg
    d_s_reg = d_s_reg - d_f_reg * out.t[None, :]
    d_t = d_t - (d_f_reg * out.s_reg).sum(axis=0)

    grads = {}
    grads["tau_raw"] = d_t * expit(w["tau_raw"])

    # softmax rows
    d_logits = out.p * (d_p - (d_p * out.p).sum(axis=1, keepdims=True))
    for _ in range(cfg.diffusion_steps):
        d_logits = graph.diffusion.T @ d_logits

    # gating MLP
    grads["gate_w3"] = cache["g2"].T @ d_logits
    grads["gate_b3"] = d_logits.sum(axis=0)
    d_g2 = d_logits @ w["gate_w3"].T
    d_zg2 = d_g2 * (cache["zg2"] > 0.0)
    grads["gate_w2"] = cache["g1"].T @ d_zg2
    grads["gate_b2"] = d_zg2.sum(axis=0)
    d_g1 = d_zg2 @ w["gate_w2"].T
    d_zg1 = d_g1 * (cache["zg1"] > 0.0)
    grads["gate_w1"] = cache["gate_in"].T @ d_zg1
    grads["gate_b1"] = d_zg1.sum(axis=0)
    d_gate_in = d_zg1 @ w["gate_w1"].T

    # burden channel
    grads["head_burden_w"] = cache["hb"].T @ d_e_reg
    grads["head_burden_b"] = d_e_reg.sum(axis=0)
    d_hb = d_e_reg @ w["head_burden_w"].T
    d_zb = d_hb * (cache["zb"] > 0.0)
    grads["enc_burden_w"] = cache["x_burden"].T @ d_zb
    grads["enc_burden_b"] = d_zb.sum(axis=0)
    d_xb = d_zb @ w["enc_burden_w"].T

    # capacity channel
    grads["head_capacity_w"] = cache["hc"].T @ d_s_reg
    grads["head_capacity_b"] = d_s_reg.sum(axis=0)
    d_hc = d_s_reg @ w["head_capacity_w"].T
    d_zc = d_hc * (cache["zc"] > 0.0)
    grads["enc_capacity_w"] = cache["x_capacity"].T @ d_zc
    grads["enc_capacity_b"] = d_zc.sum(axis=0)
    d_xc = d_zc @ w["enc_capacity_w"].T

    pb, pc = cfg.p_burden, cfg.p_capacity
    d_xb = d_xb + d_gate_in[:, :pb]
    d_xc = d_xc + d_gate_in[:, pb:pb + pc]
    d_coords = d_gate_in[:, pb + pc:]
    input_grads = InputGrads(x_burden=d_xb, x_capacity=d_xc, coords=d_coords)
    return grads, input_grads


def backward(params: ZegnnParams, x_burden: np.ndarray, x_capacity: np.ndarray,
             coords_std: np.ndarray, graph: SpatialGraph,
             seeds: OutputSeeds) -> tuple[dict[str, np.ndarray], InputGrads]:
    """Exact reverse-mode gradients for a linear functional of the outputs.

    `seeds` holds the upstream sensitivity of the scalar objective with
    respect to each output field; the return value is its gradient with
    respect to every parameter array and every input entry.
    """
    _, cache = _forward(params, x_burden, x_capacity, coords_std, graph)
    return _backward(params, cache, graph, seeds)


def jvp(params: ZegnnParams, x_burden, x_capacity, coords_std,
        graph: SpatialGraph, t_burden=None, t_capacity=None, t_coords=None):
    """Forward-mode directional derivatives of (F, E_mix, S_mix).

    Given input tangents (defaulting to zero), returns the exact rate of
    change of the three per-location fields along that input direction,
    matching `forward` re-evaluation in the small-step limit.
    """
    outputs, cache = _forward(params, x_burden, x_capacity, coords_std, graph)
    cfg = params.config
    w = params.weights
    n, k = outputs.p.shape
    tb = np.zeros_like(x_burden) if t_burden is None else t_burden
    tc = np.zeros_like(x_capacity) if t_capacity is None else t_capacity
    tg = np.zeros_like(coords_std) if t_coords is None else t_coords

    t_zb = tb @ w["enc_burden_w"]
    t_hb = t_zb * (cache["zb"] > 0.0)
    t_e_reg = t_hb @ w["head_burden_w"]

    t_zc = tc @ w["enc_capacity_w"]
    t_hc = t_zc * (cache["zc"] > 0.0)
    t_s_reg = t_hc @ w["head_capacity_w"]

    t_f_reg = t_e_reg - outputs.t[None, :] * t_s_reg

    t_gate_in = np.hstack([tb, tc, tg])
    t_zg1 = t_gate_in @ w["gate_w1"]
    t_g1 = t_zg1 * (cache["zg1"] > 0.0)
    t_zg2 = t_g1 @ w["gate_w2"]
    t_g2 = t_zg2 * (cache["zg2"] > 0.0)
    t_logits = t_g2 @ w["gate_w3"]
    for _ in range(cfg.diffusion_steps):
        t_logits = graph.diffusion @ t_logits

    t_p = outputs.p * (t_logits - (outputs.p * t_logits).sum(axis=1,
                                                             keepdims=True))
    if k == 1:
        t_h = np.zeros(n)
    else:
        t_h = -(t_p * (cache["log_p_eps"]
                       + outputs.p / (outputs.p + ENTROPY_EPS))).sum(axis=1) \
            / np.log(k)
    t_t_eff = t_p @ outputs.t
    t_e_mix = (t_p * outputs.e_reg + outputs.p * t_e_reg).sum(axis=1)
    t_s_mix = (t_p * outputs.s_reg + outputs.p * t_s_reg).sum(axis=1)
    t_f = (t_p * outputs.f_reg + outputs.p * t_f_reg).sum(axis=1) \
        + t_t_eff * outputs.h_norm + outputs.t_eff * t_h
    return t_f, t_e_mix, t_s_mix


def config_hash(config: dict) -> str:
    import hashlib
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(params: ZegnnParams, path, extra: dict | None = None) -> None:
    """Versioned JSON checkpoint: config, seed, shapes, raw weight bytes."""
    cfg = {
        "p_burden": params.config.p_burden,
        "p_capacity": params.config.p_capacity,
        "k_regimes": params.config.k_regimes,
        "gate_hidden": params.config.gate_hidden,
        "diffusion_steps": params.config.diffusion_steps,
    }
    payload = {
        "format": "zegnn-checkpoint",
        "version": 1,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": params.seed,
        "shapes": {name: list(params.weights[name].shape)
                   for name in PARAM_NAMES},
        "weights": {
            name: base64.b64encode(
                np.ascontiguousarray(params.weights[name],
                                     dtype="<f8").tobytes()).decode("ascii")
            for name in PARAM_NAMES
        },
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ZegnnParams, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "zegnn-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = payload["config"]
    config = ModelConfig(**cfg)
    weights = {}
    for name in PARAM_NAMES:
        raw = base64.b64decode(payload["weights"][name])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        weights[name] = arr.reshape(payload["shapes"][name]).copy()
    params = ZegnnParams(config=config, seed=payload["seed"], weights=weights)
    return params, payload.get("extra", {})
