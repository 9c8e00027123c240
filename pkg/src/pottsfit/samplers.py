"""MCMC kernels over lattice states.

* ``metropolis`` -- the sequential CPM kernel: random site, random
  neighbor, copy accepted with ``min(1, exp(-dH/T))``.
* ``approx_pcpm`` -- approximate parallel kernel: ``P`` boundary sites per
  step, each proposal Metropolis-corrected against the previous state,
  accepted copies merged.
* ``gibbs`` -- single-site heat bath over every registered cell id.

Random numbers are always drawn as uniform blocks (three per proposal) from
a numpy ``Generator``; the compiled analytic path and the generic path
consume them identically, so both give the same trajectory for the same
seed. States are advanced in place and returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .analytic import _delta_one
from .lattice import DEFAULT_NEIGHBORHOOD, LatticeState, Neighborhood, boundary_mask, volume_array

KERNELS = ("metropolis", "approx_pcpm", "gibbs")


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    parallel_flips: int = 50
    neighborhood: Neighborhood = DEFAULT_NEIGHBORHOOD
    rng_seed: int = 0
    sequential: bool = False

    def __post_init__(self):
        self.neighborhood = Neighborhood.parse(self.neighborhood)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.parallel_flips < 1:
            raise ValueError("parallel_flips must be >= 1")


@dataclass
class Proposal:
    site: int
    new_cell: int
    delta_h: float


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    """Independent per-chain substreams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(n)]


def acceptance_probability(delta_h, temperature: float):
    return np.minimum(1.0, np.exp(-np.clip(np.asarray(delta_h, dtype=np.float64), 0.0, 700.0 * temperature) / temperature))


# ---------------------------------------------------------------- compiled helpers


@numba.njit(cache=True)
def _neighbor_site(h, w, offsets, site, u):
    """Uniform in-lattice neighbor of ``site`` chosen by ``u`` in [0, 1)."""
    r = site // w
    c = site % w
    n = 0
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w:
            n += 1
    pick = int(u * n)
    i = 0
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w:
            if i == pick:
                return rr * w + cc
            i += 1
    return -1


@numba.njit(cache=True)
def _mismatched_neighbor_value(grid, offsets, site, u):
    """Value of a uniform neighbor from M(site) = neighbors holding another cell; -1 if empty."""
    h, w = grid.shape
    r = site // w
    c = site % w
    v = grid[r, c]
    n = 0
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] != v:
            n += 1
    if n == 0:
        return -1
    pick = int(u * n)
    i = 0
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] != v:
            if i == pick:
                return grid[rr, cc]
            i += 1
    return -1


@numba.njit(cache=True)
def _pcpm_propose(grid, offsets, uniforms, bmask):
    """Sites drawn i.i.d. from the boundary (duplicates dropped, first draw wins) and copy values.

    Returns ``(sites, values, draw_index)``; ``draw_index`` points back into
    ``uniforms`` so the acceptance uniform of each surviving draw is known.
    """
    h, w = grid.shape
    nb_sites = 0
    for r in range(h):
        for c in range(w):
            if bmask[r, c]:
                nb_sites += 1
    bsites = np.empty(nb_sites, dtype=np.int64)
    j = 0
    for r in range(h):
        for c in range(w):
            if bmask[r, c]:
                bsites[j] = r * w + c
                j += 1
    p = uniforms.shape[0]
    sites = np.empty(p, dtype=np.int64)
    values = np.empty(p, dtype=np.int64)
    draw = np.empty(p, dtype=np.int64)
    if nb_sites == 0:
        return sites[:0], values[:0], draw[:0]
    taken = np.zeros(h * w, dtype=np.bool_)
    m = 0
    for i in range(p):
        s = bsites[int(uniforms[i, 0] * nb_sites)]
        if taken[s]:
            continue
        taken[s] = True
        sites[m] = s
        values[m] = _mismatched_neighbor_value(grid, offsets, s, uniforms[i, 1])
        draw[m] = i
        m += 1
    return sites[:m], values[:m], draw[:m]


@numba.njit(cache=True)
def _motion_delta(cen, dirs, lam_dir, vols, w, site, old, new):
    """-lam_dir * (change of centroid . preferred direction) for donor and recipient."""
    if lam_dir == 0.0:
        return 0.0
    r = site // w
    c = site % w
    d = 0.0
    if new != 0 and vols[new] > 0:
        v = vols[new]
        dr = (cen[new, 0] + r) / (v + 1) - cen[new, 0] / v
        dc = (cen[new, 1] + c) / (v + 1) - cen[new, 1] / v
        d += dr * dirs[new, 0] + dc * dirs[new, 1]
    if old != 0 and vols[old] > 1:
        v = vols[old]
        dr = (cen[old, 0] - r) / (v - 1) - cen[old, 0] / v
        dc = (cen[old, 1] - c) / (v - 1) - cen[old, 1] / v
        d += dr * dirs[old, 0] + dc * dirs[old, 1]
    return -lam_dir * d


@numba.njit(cache=True)
def _metropolis_run(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, T, uniforms,
                    cen, dirs, lam_dir):
    h, w = grid.shape
    accepted = 0
    for i in range(uniforms.shape[0]):
        s1 = int(uniforms[i, 0] * h * w)
        s2 = _neighbor_site(h, w, offsets, s1, uniforms[i, 1])
        old = grid[s1 // w, s1 % w]
        new = grid[s2 // w, s2 % w]
        if old == new:
            continue
        dH = _delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, s1, new)
        dH += _motion_delta(cen, dirs, lam_dir, vols, w, s1, old, new)
        if dH <= 0.0 or uniforms[i, 2] < math.exp(-dH / T):
            grid[s1 // w, s1 % w] = new
            vols[old] -= 1.0
            vols[new] += 1.0
            r = s1 // w
            c = s1 % w
            cen[old, 0] -= r
            cen[old, 1] -= c
            cen[new, 0] += r
            cen[new, 1] += c
            accepted += 1
    return accepted


@numba.njit(cache=True)
def _is_boundary(grid, offsets, r, c):
    h, w = grid.shape
    v = grid[r, c]
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] != v:
            return True
    return False


@numba.njit(cache=True)
def _refresh_boundary(grid, bmask, offsets, site):
    """Recompute the boundary flag of ``site`` and its neighbors after it changed value."""
    h, w = grid.shape
    r = site // w
    c = site % w
    bmask[r, c] = _is_boundary(grid, offsets, r, c)
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w:
            bmask[rr, cc] = _is_boundary(grid, offsets, rr, cc)


@numba.njit(cache=True)
def _pcpm_run(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, T, uniforms, sequential):
    """``uniforms`` has shape (steps, P, 3)."""
    h, w = grid.shape
    accepted = 0
    bmask = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            bmask[r, c] = _is_boundary(grid, offsets, r, c)
    for t in range(uniforms.shape[0]):
        sites, values, draw = _pcpm_propose(grid, offsets, uniforms[t], bmask)
        if sequential:
            for m in range(sites.shape[0]):
                s = sites[m]
                new = _mismatched_neighbor_value(grid, offsets, s, uniforms[t, draw[m], 1])
                if new < 0:
                    continue
                old = grid[s // w, s % w]
                dH = _delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, s, new)
                if dH <= 0.0 or uniforms[t, draw[m], 2] < math.exp(-dH / T):
                    grid[s // w, s % w] = new
                    vols[old] -= 1.0
                    vols[new] += 1.0
                    accepted += 1
                    _refresh_boundary(grid, bmask, offsets, s)
            continue
        acc = np.zeros(sites.shape[0], dtype=np.bool_)
        for m in range(sites.shape[0]):
            dH = _delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, sites[m], values[m])
            acc[m] = dH <= 0.0 or uniforms[t, draw[m], 2] < math.exp(-dH / T)
        for m in range(sites.shape[0]):
            if acc[m]:
                s = sites[m]
                old = grid[s // w, s % w]
                grid[s // w, s % w] = values[m]
                vols[old] -= 1.0
                vols[values[m]] += 1.0
                accepted += 1
        for m in range(sites.shape[0]):
            if acc[m]:
                _refresh_boundary(grid, bmask, offsets, sites[m])
    return accepted


@numba.njit(cache=True)
def _gibbs_run(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, T, uniforms):
    h, w = grid.shape
    n_ids = cell_types.shape[0]
    logits = np.empty(n_ids)
    for i in range(uniforms.shape[0]):
        s = int(uniforms[i, 0] * h * w)
        old = grid[s // w, s % w]
        best = 0.0
        for c in range(n_ids):
            logits[c] = -_delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, s, c) / T
            if c == 0 or logits[c] > best:
                best = logits[c]
        total = 0.0
        for c in range(n_ids):
            logits[c] = math.exp(logits[c] - best)
            total += logits[c]
        u = uniforms[i, 1] * total
        new = n_ids - 1
        acc = 0.0
        for c in range(n_ids):
            acc += logits[c]
            if u < acc:
                new = c
                break
        if new != old:
            grid[s // w, s % w] = new
            vols[old] -= 1.0
            vols[new] += 1.0
    return 0


# ---------------------------------------------------------------- public kernels


def _fused(model, state):
    args = model.fused_args(state) if hasattr(model, "fused_args") else None
    return args


def metropolis_steps(state: LatticeState, model, cfg: SamplerConfig, rng, n_steps: int,
                     motion=None) -> int:
    """``n_steps`` sequential CPM attempts; returns the number accepted.

    ``motion=(centroid_sums, directions, strength)`` adds the directed-motion
    bias used only for data generation (analytic models only).
    """
    rng = make_rng(rng)
    nb = Neighborhood.parse(model.nb)
    args = _fused(model, state)
    accepted = 0
    h, w = state.grid.shape
    chunk = max(1, min(n_steps, 1 << 16))
    done = 0
    if args is not None:
        vols = volume_array(state).astype(np.float64)
        if motion is None:
            cen = np.zeros((state.cell_types.size, 2))
            dirs = np.zeros((state.cell_types.size, 2))
            lam_dir = 0.0
        else:
            cen, dirs, lam_dir = motion
        while done < n_steps:
            k = min(chunk, n_steps - done)
            u = rng.random((k, 3))
            accepted += _metropolis_run(state.grid, state.cell_types, vols, *args, nb.offsets,
                                        float(cfg.temperature), u, cen, dirs, float(lam_dir))
            done += k
        return accepted
    if motion is not None:
        raise ValueError("directed motion is only available for analytic models")
    for _ in range(n_steps):
        u = rng.random(3)
        accepted += _generic_metropolis(state, model, cfg, u, nb)
    return accepted


def _generic_metropolis(state, model, cfg, u, nb) -> int:
    h, w = state.grid.shape
    s1 = int(u[0] * h * w)
    s2 = _neighbor_site(h, w, nb.offsets, s1, u[1])
    flat = state.grid.reshape(-1)
    old, new = flat[s1], flat[s2]
    if old == new:
        return 0
    dH = float(model.delta_energies(state, np.array([s1]), np.array([new]))[0])
    if dH <= 0.0 or u[2] < math.exp(-dH / cfg.temperature):
        flat[s1] = new
        return 1
    return 0


def metropolis_step(state: LatticeState, model, cfg: SamplerConfig, rng):
    """One sequential CPM attempt. Returns ``(state, accepted)``."""
    return state, bool(metropolis_steps(state, model, cfg, rng, 1))


def approx_pcpm_step(state: LatticeState, model, cfg: SamplerConfig, uniforms: np.ndarray):
    """One parallel step driven by a (P, 3) uniform block. Returns the proposals and acceptance mask."""
    nb = Neighborhood.parse(model.nb)
    bmask = boundary_mask(state.grid, nb)
    sites, values, draw = _pcpm_propose(state.grid, nb.offsets, uniforms, bmask)
    if sites.size == 0:
        return [], np.zeros(0, dtype=bool)
    flat = state.grid.reshape(-1)
    if cfg.sequential:
        props, acc = [], []
        for m in range(sites.size):
            new = _mismatched_neighbor_value(state.grid, nb.offsets, sites[m], uniforms[draw[m], 1])
            if new < 0:
                continue
            dH = float(model.delta_energies(state, sites[m:m + 1], np.array([new]))[0])
            ok = dH <= 0.0 or uniforms[draw[m], 2] < math.exp(-dH / cfg.temperature)
            if ok:
                flat[sites[m]] = new
            props.append(Proposal(int(sites[m]), int(new), dH))
            acc.append(ok)
        return props, np.array(acc, dtype=bool)
    vols = volume_array(state).astype(np.float64)
    dH = np.asarray(model.delta_energies(state, sites, values, vols), dtype=np.float64)
    if not np.all(np.isfinite(dH)):
        raise FloatingPointError("non-finite energy difference in sampler")
    u = uniforms[draw, 2]
    acc = (dH <= 0.0) | (u < np.exp(-np.clip(dH, 0.0, 700.0 * cfg.temperature) / cfg.temperature))
    flat[sites[acc]] = values[acc]
    return [Proposal(int(s), int(v), float(d)) for s, v, d in zip(sites, values, dH)], acc


def approx_pcpm(model, states, steps: int, flips: int, cfg: SamplerConfig, rngs) -> list:
    """Advance every chain by ``steps`` parallel steps of ``flips`` proposals each."""
    if isinstance(states, LatticeState):
        states = [states]
    if not isinstance(rngs, (list, tuple)):
        rngs = [rngs] if len(states) == 1 else spawn_rngs(rngs, len(states))
    nb = Neighborhood.parse(model.nb)
    for state, rng in zip(states, rngs):
        rng = make_rng(rng)
        if steps <= 0:
            continue
        args = _fused(model, state)
        if args is not None:
            vols = volume_array(state).astype(np.float64)
            u = rng.random((steps, flips, 3))
            _pcpm_run(state.grid, state.cell_types, vols, *args, nb.offsets, float(cfg.temperature),
                      u, bool(cfg.sequential))
        else:
            for _ in range(steps):
                approx_pcpm_step(state, model, cfg, rng.random((flips, 3)))
    return states


def gibbs_steps(state: LatticeState, model, cfg: SamplerConfig, rng, n_steps: int) -> LatticeState:
    rng = make_rng(rng)
    nb = Neighborhood.parse(model.nb)
    args = _fused(model, state)
    if args is not None:
        vols = volume_array(state).astype(np.float64)
        done = 0
        while done < n_steps:
            k = min(1 << 16, n_steps - done)
            _gibbs_run(state.grid, state.cell_types, vols, *args, nb.offsets, float(cfg.temperature),
                       rng.random((k, 2)))
            done += k
        return state
    h, w = state.grid.shape
    ids = np.arange(state.cell_types.size)
    flat = state.grid.reshape(-1)
    for _ in range(n_steps):
        u = rng.random(2)
        s = int(u[0] * h * w)
        dH = np.asarray(model.delta_energies(state, np.full(ids.size, s), ids), dtype=np.float64)
        logits = -dH / cfg.temperature
        p = np.exp(logits - logits.max())
        c = np.cumsum(p)
        flat[s] = min(int(np.searchsorted(c, u[1] * c[-1], side="right")), ids.size - 1)
    return state


def gibbs_step(state: LatticeState, model, cfg: SamplerConfig, rng) -> LatticeState:
    """Resample one uniformly chosen site from its exact conditional."""
    return gibbs_steps(state, model, cfg, rng, 1)


def gibbs_conditional(state: LatticeState, model, site: int, temperature: float) -> np.ndarray:
    """Exact conditional over every registered cell id at ``site``."""
    ids = np.arange(state.cell_types.size)
    dH = np.asarray(model.delta_energies(state, np.full(ids.size, site), ids), dtype=np.float64)
    logits = -dH / temperature
    p = np.exp(logits - logits.max())
    return p / p.sum()


def n_kernel_steps(kernel: str, n_sites: int, sweeps: float, flips: int) -> int:
    """Kernel invocations making up ``sweeps`` Monte Carlo sweeps."""
    total = int(round(n_sites * sweeps))
    if kernel == "approx_pcpm":
        return int(math.ceil(total / flips)) if total > 0 else 0
    return total


def advance(kernel: str, state: LatticeState, model, cfg: SamplerConfig, rng, n: int) -> None:
    if kernel == "metropolis":
        metropolis_steps(state, model, cfg, rng, n)
    elif kernel == "gibbs":
        gibbs_steps(state, model, cfg, rng, n)
    elif kernel == "approx_pcpm":
        approx_pcpm(model, [state], n, cfg.parallel_flips, cfg, [rng])
    else:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def run_chain(kernel: str, x0: LatticeState, sweeps: float, model, cfg: SamplerConfig, rng,
              snapshot_every: int | None = None) -> list[LatticeState]:
    """Trajectory starting at ``x0`` (copied), with a snapshot every ``snapshot_every`` kernel steps.

    ``sweeps`` Monte Carlo sweeps are ``|L| * sweeps`` elementary steps for
    the sequential kernels and ``ceil(|L| * sweeps / P)`` parallel steps for
    ``approx_pcpm``. ``snapshot_every=None`` keeps only the endpoints.
    """
    rng = make_rng(rng)
    state = x0.copy()
    total = n_kernel_steps(kernel, state.n_sites, sweeps, cfg.parallel_flips)
    traj = [state.copy()]
    if total == 0:
        return traj
    every = total if not snapshot_every else int(snapshot_every)
    done = 0
    while done + every <= total:
        advance(kernel, state, model, cfg, rng, every)
        done += every
        traj.append(state.copy())
    if done < total:
        advance(kernel, state, model, cfg, rng, total - done)
        if snapshot_every is None:
            traj.append(state.copy())
    return traj
