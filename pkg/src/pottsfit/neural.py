"""Permutation- and translation-invariant neural energy, plus the hybrid closure energy.

Pipeline per state: per-cell occupancy planes (tagged by cell type) ->
strided linear embedding -> NH layers -> 1x1 head -> sum over cells and
pixels -> residual MLP -> scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_kernels as tk
from .analytic import AnalyticParams, total_energy
from .lattice import DEFAULT_NEIGHBORHOOD, LatticeState


class ArchitectureError(ValueError):
    pass


@dataclass
class NHConfig:
    n_types: int = 3
    embed_stride: int = 3
    dims: list = field(default_factory=lambda: [8, 16, 32, 32])
    pool_rates: list = field(default_factory=lambda: [3, 2, 1, 1])
    head_dim: int = 32
    mlp_layers: int = 2
    kernel_size: int = 3
    include_medium: bool = True

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        self.pool_rates = [int(r) for r in self.pool_rates]
        if len(self.dims) != len(self.pool_rates) or not self.dims:
            raise ArchitectureError("dims and pool_rates must be non-empty and equally long")

    @property
    def downsampling(self) -> int:
        return self.embed_stride * int(np.prod(self.pool_rates))

    def check_lattice(self, height: int, width: int) -> None:
        f = self.downsampling
        if height % f or width % f:
            raise ArchitectureError(
                f"lattice {height}x{width} is not divisible by the cumulative downsampling factor {f}"
            )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


PROFILES = {
    "mnist": dict(embed_stride=3, dims=[8, 16, 32, 32], pool_rates=[3, 2, 1, 1]),
    "bipolar": dict(embed_stride=5, dims=[16, 32, 32, 64, 64, 64], pool_rates=[2, 1, 2, 1, 2, 1]),
    "desk": dict(embed_stride=3, dims=[8, 16], pool_rates=[2, 2]),
}


def nh_config(profile: str = "mnist", **overrides) -> NHConfig:
    kw = dict(PROFILES[profile])
    kw.update(overrides)
    return NHConfig(**kw)


def init_nh_params(cfg: NHConfig, rng: np.random.Generator) -> dict:
    """He fan-in initialization, zero biases."""

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    k = cfg.kernel_size
    p = {
        "embed.weight": he((cfg.dims[0], cfg.n_types, cfg.embed_stride, cfg.embed_stride)),
        "embed.bias": np.zeros(cfg.dims[0]),
    }
    c_in = cfg.dims[0]
    for i, d in enumerate(cfg.dims):
        pre = f"layers.{i}"
        p[f"{pre}.phi.0.weight"] = he((d, c_in, k, k))
        p[f"{pre}.phi.0.bias"] = np.zeros(d)
        p[f"{pre}.phi.1.weight"] = he((d, d, k, k))
        p[f"{pre}.phi.1.bias"] = np.zeros(d)
        p[f"{pre}.psi.0.weight"] = he((d, c_in + d, k, k))
        p[f"{pre}.psi.0.bias"] = np.zeros(d)
        p[f"{pre}.psi.1.weight"] = he((d, d, k, k))
        p[f"{pre}.psi.1.bias"] = np.zeros(d)
        if c_in != d:
            p[f"{pre}.proj.weight"] = he((d, c_in, 1, 1))
        c_in = d
    p["head.weight"] = he((cfg.head_dim, c_in, 1, 1))
    p["head.bias"] = np.zeros(cfg.head_dim)
    for i in range(cfg.mlp_layers):
        p[f"mlp.{i}.weight"] = he((cfg.head_dim, cfg.head_dim))
        p[f"mlp.{i}.bias"] = np.zeros(cfg.head_dim)
    p["out.weight"] = he((1, cfg.head_dim))
    p["out.bias"] = np.zeros(1)
    return p


def canonical_planes(grids: np.ndarray, cell_types: np.ndarray, include_medium: bool = True):
    """Occupancy planes ordered by (type, first occupied site).

    The order does not depend on cell ids, so relabeling cells leaves the
    stacked input (and every downstream sum) bit-identical.
    Returns ``(planes (S, N, H, W), types (S, N))``.
    """
    grids = np.asarray(grids)
    cell_types = np.asarray(cell_types)
    if cell_types.ndim == 1:
        cell_types = np.broadcast_to(cell_types, (grids.shape[0], cell_types.size))
    s, h, w = grids.shape
    start = 0 if include_medium else 1
    n_ids = cell_types.shape[1]
    orders = np.empty((s, n_ids - start), dtype=np.int64)
    for i in range(s):
        first = np.full(n_ids, h * w, dtype=np.int64)
        ids, idx = np.unique(grids[i].ravel(), return_index=True)
        first[ids] = idx
        cand = np.arange(start, n_ids)
        orders[i] = cand[np.lexsort((first[cand], cell_types[i, cand]))]
    planes = (grids[:, None, :, :] == orders[:, :, None, None]).astype(np.float64)
    types = np.take_along_axis(cell_types, orders, axis=1)
    return planes, types


def _embed_forward(planes, types, params, cfg):
    """Linear strided conv where each cell's plane sits in its type's input channel."""
    s, n, h, w = planes.shape
    flat = planes.reshape(s * n, 1, h, w)
    tflat = types.reshape(-1)
    weight = params["embed.weight"]
    ho, wo = h // cfg.embed_stride, w // cfg.embed_stride
    out = np.empty((s * n, weight.shape[0], ho, wo))
    caches = []
    for t in np.unique(tflat):
        sel = np.flatnonzero(tflat == t)
        o, cache = tk.conv2d_forward(flat[sel], weight[:, t:t + 1], params["embed.bias"], cfg.embed_stride)
        out[sel] = o
        caches.append((t, sel, cache))
    return out, caches


def _embed_backward(dout, caches, params, grads):
    dw = np.zeros_like(params["embed.weight"])
    db = np.zeros_like(params["embed.bias"])
    for t, sel, cache in caches:
        _, dwt, dbt = tk.conv2d_backward(dout[sel], cache)
        dw[:, t:t + 1] += dwt
        db += dbt
    tk._accumulate(grads, "embed.weight", dw)
    tk._accumulate(grads, "embed.bias", db)


def nh_layer_forward(hs, params, prefix: str, rate: int, n_states: int = 1):
    """One NH layer on ``hs`` of shape (n_states * n_cells, C, H, W)."""
    sn, c, h, w = hs.shape
    n = sn // n_states
    phi = tk.Tape()
    x = phi.silu(phi.conv(hs, params, prefix + ".phi.0"))
    hp = phi.silu(phi.conv(x, params, prefix + ".phi.1"))
    d = hp.shape[1]
    A = hp.reshape(n_states, n, d, h, w).sum(axis=1)
    A_b = np.broadcast_to(A[:, None], (n_states, n, d, h, w)).reshape(sn, d, h, w)
    cat = np.concatenate([hs, A_b], axis=1)
    psi = tk.Tape()
    x = psi.silu(psi.conv(cat, params, prefix + ".psi.0"))
    o = psi.silu(psi.conv(x, params, prefix + ".psi.1"))
    proj_cache = None
    if prefix + ".proj.weight" in params:
        res, proj_cache = tk.conv2d_forward(hs, params[prefix + ".proj.weight"], None, 1)
    else:
        res = hs
    out, pool_cache = tk.maxpool2d_forward(o + res, rate)
    return out, (phi, psi, proj_cache, pool_cache, n_states, n, c)


def nh_layer(hs, params, prefix: str, rate: int):
    """Single-state NH layer: ``hs`` is (n_cells, C, H, W)."""
    return nh_layer_forward(hs, params, prefix, rate, 1)[0]


def nh_layer_backward(dout, cache, prefix, grads):
    phi, psi, proj_cache, pool_cache, n_states, n, c = cache
    dsum = tk.maxpool2d_backward(dout, pool_cache)
    _, dcat = psi.backward(dsum, grads)
    dhs = dcat[:, :c].copy()
    dA_b = dcat[:, c:]
    sn, d, h, w = dA_b.shape
    dA = dA_b.reshape(n_states, n, d, h, w).sum(axis=1)
    dhp = np.broadcast_to(dA[:, None], (n_states, n, d, h, w)).reshape(sn, d, h, w)
    _, dh_phi = phi.backward(dhp, grads)
    dhs += dh_phi
    if proj_cache is not None:
        dres, dw, _ = tk.conv2d_backward(dsum, proj_cache)
        tk._accumulate(grads, prefix + ".proj.weight", dw)
        dhs += dres
    else:
        dhs += dsum
    return dhs


def nh_forward(grids, cell_types, params, cfg: NHConfig):
    """Energies for a batch of grids sharing one cell-id space. Returns ``(H (S,), cache)``."""
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[None]
    s, h, w = grids.shape
    cfg.check_lattice(h, w)
    ct = np.asarray(cell_types)
    if ct.max() >= cfg.n_types:
        raise ArchitectureError(f"cell type {ct.max()} outside the {cfg.n_types} embedded types")
    planes, types = canonical_planes(grids, ct, cfg.include_medium)
    n = planes.shape[1]
    hs, embed_cache = _embed_forward(planes, types, params, cfg)
    layer_caches = []
    for i, rate in enumerate(cfg.pool_rates):
        hs, lc = nh_layer_forward(hs, params, f"layers.{i}", rate, s)
        layer_caches.append(lc)
    head, head_cache = tk.conv2d_forward(hs, params["head.weight"], params["head.bias"], 1)
    hd = head.shape[1]
    pooled = head.reshape(s, n, hd, head.shape[2], head.shape[3]).sum(axis=(1, 3, 4))
    z = pooled
    mlp_caches = []
    for i in range(cfg.mlp_layers):
        a, lin_cache = tk.linear_forward(z, params[f"mlp.{i}.weight"], params[f"mlp.{i}.bias"])
        act, silu_cache = tk.silu_forward(a)
        mlp_caches.append((lin_cache, silu_cache))
        z = z + act
    out, out_cache = tk.linear_forward(z, params["out.weight"], params["out.bias"])
    cache = (embed_cache, layer_caches, head_cache, head.shape, s, n, mlp_caches, out_cache)
    return out[:, 0], cache


def nh_backward(cache, upstream, params, cfg: NHConfig, grads: dict | None = None) -> dict:
    """Accumulates ``sum_s upstream[s] * dH_s/dtheta`` into ``grads``."""
    grads = {} if grads is None else grads
    embed_cache, layer_caches, head_cache, head_shape, s, n, mlp_caches, out_cache = cache
    dz, dw, db = tk.linear_backward(np.asarray(upstream, dtype=np.float64).reshape(s, 1), out_cache)
    tk._accumulate(grads, "out.weight", dw)
    tk._accumulate(grads, "out.bias", db)
    for i in reversed(range(cfg.mlp_layers)):
        lin_cache, silu_cache = mlp_caches[i]
        da = tk.silu_backward(dz, silu_cache)
        dz_in, dw, db = tk.linear_backward(da, lin_cache)
        tk._accumulate(grads, f"mlp.{i}.weight", dw)
        tk._accumulate(grads, f"mlp.{i}.bias", db)
        dz = dz + dz_in
    sn, hd, hh, ww = head_shape
    dhead = np.broadcast_to(dz[:, None, :, None, None], (s, n, hd, hh, ww)).reshape(head_shape)
    dhs, dw, db = tk.conv2d_backward(dhead, head_cache)
    tk._accumulate(grads, "head.weight", dw)
    tk._accumulate(grads, "head.bias", db)
    for i in reversed(range(len(layer_caches))):
        dhs = nh_layer_backward(dhs, layer_caches[i], f"layers.{i}", grads)
    _embed_backward(dhs, embed_cache, params, grads)
    return grads


def nh_energies(grids, cell_types, params, cfg: NHConfig, chunk: int = 64) -> np.ndarray:
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[None]
    out = np.empty(grids.shape[0])
    for i in range(0, grids.shape[0], chunk):
        out[i:i + chunk] = nh_forward(grids[i:i + chunk], cell_types, params, cfg)[0]
    return out


def nh_energy(state: LatticeState, params: dict, cfg: NHConfig) -> float:
    return float(nh_forward(state.grid[None], state.cell_types, params, cfg)[0][0])


def nh_param_gradient(state: LatticeState, params: dict, cfg: NHConfig) -> dict:
    _, cache = nh_forward(state.grid[None], state.cell_types, params, cfg)
    grads = nh_backward(cache, np.ones(1), params, cfg)
    return {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}


@dataclass
class ClosureParams:
    w_s: float
    w_nn: float
    analytic: AnalyticParams
    neural: dict
    nh: NHConfig


def closure_energy(state: LatticeState, params: ClosureParams, nb=DEFAULT_NEIGHBORHOOD) -> float:
    """``w_s * H_analytic + w_nn * H_neural``."""
    h_s = total_energy(state, params.analytic, nb) if params.w_s != 0 else 0.0
    h_nn = nh_energy(state, params.neural, params.nh) if params.w_nn != 0 else 0.0
    return params.w_s * h_s + params.w_nn * h_nn
