"""Contact + volume + external-potential CPM energies, their local deltas and gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .lattice import DEFAULT_NEIGHBORHOOD, LatticeState, Neighborhood, volume_array


class ConfigurationError(ValueError):
    pass


@dataclass
class ContactMatrix:
    J: np.ndarray

    def __post_init__(self):
        self.J = np.array(self.J, dtype=np.float64)
        if self.J.ndim != 2 or self.J.shape[0] != self.J.shape[1]:
            raise ConfigurationError("contact matrix must be square")
        if not np.allclose(self.J, self.J.T, rtol=0, atol=0):
            raise ConfigurationError("contact matrix must be symmetric")

    @property
    def n_types(self) -> int:
        return self.J.shape[0]

    @classmethod
    def from_lower(cls, rows) -> "ContactMatrix":
        """Build from the lower-triangular table layout (row ``a`` lists J[a][0..a])."""
        n = len(rows)
        J = np.zeros((n, n))
        for a, row in enumerate(rows):
            if len(row) != a + 1:
                raise ConfigurationError(f"row {a} of the contact table needs {a + 1} entries")
            for b, v in enumerate(row):
                J[a, b] = J[b, a] = v
        return cls(J)


@dataclass
class VolumeConstraint:
    """``lambda_v * (V - target)**2`` per non-medium cell.

    ``target`` is a single V* shared by every cell or a per-cell-id array
    (index 0, the medium, is ignored).
    """

    lambda_v: float
    target: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.lambda_v < 0:
            raise ConfigurationError("lambda_v must be non-negative")

    def targets(self, n_ids: int) -> np.ndarray:
        if np.ndim(self.target) == 0:
            out = np.full(n_ids, float(self.target))
        else:
            t = np.asarray(self.target, dtype=np.float64)
            if t.size < n_ids:
                raise ConfigurationError(f"missing target volume for cells {t.size}..{n_ids - 1}")
            out = t[:n_ids].copy()
        if not np.all(np.isfinite(out[1:])):
            raise ConfigurationError("target volumes must be finite")
        out[0] = 0.0
        return out


@dataclass
class ExternalPotential:
    """``sum_i coupling[type(i)] * phi[i]`` over all sites."""

    phi: np.ndarray
    coupling: np.ndarray

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.float64)
        self.coupling = np.asarray(self.coupling, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ConfigurationError("phi must be a 2D field")
        if not np.all(np.isfinite(self.phi)):
            raise ConfigurationError("phi must be finite")


@dataclass
class AnalyticParams:
    contact: ContactMatrix
    volume: VolumeConstraint
    potential: ExternalPotential | None = None

    @property
    def n_types(self) -> int:
        return self.contact.n_types

    def kernel_args(self, state: LatticeState):
        """Dense arrays consumed by the compiled kernels."""
        check_types(state, self.contact)
        targets = self.volume.targets(state.cell_types.size)
        phi, mu = potential_arrays(state, self.potential, self.n_types)
        return self.contact.J, float(self.volume.lambda_v), targets, phi, mu


def check_types(state: LatticeState, contact: ContactMatrix) -> None:
    if state.cell_types.max() >= contact.n_types:
        raise ConfigurationError(
            f"state uses type {state.cell_types.max()} but the contact matrix covers {contact.n_types} types"
        )


def potential_arrays(state: LatticeState, potential: ExternalPotential | None, n_types: int):
    if potential is None:
        return np.zeros((1, 1)), np.zeros(n_types)
    if potential.phi.shape != state.grid.shape:
        raise ConfigurationError(f"phi shape {potential.phi.shape} does not match lattice {state.grid.shape}")
    mu = np.zeros(n_types)
    mu[: potential.coupling.size] = potential.coupling[:n_types]
    return potential.phi, mu


def contact_pairs(n_types: int) -> list[tuple[int, int]]:
    """Learnable contact entries: upper triangle without the medium-medium slot."""
    return [(a, b) for a in range(n_types) for b in range(a, n_types) if (a, b) != (0, 0)]


@numba.njit(cache=True)
def _half_offsets(offsets):
    keep = 0
    for k in range(offsets.shape[0]):
        if offsets[k, 0] > 0 or (offsets[k, 0] == 0 and offsets[k, 1] > 0):
            keep += 1
    out = np.empty((keep, 2), dtype=np.int64)
    i = 0
    for k in range(offsets.shape[0]):
        if offsets[k, 0] > 0 or (offsets[k, 0] == 0 and offsets[k, 1] > 0):
            out[i, 0] = offsets[k, 0]
            out[i, 1] = offsets[k, 1]
            i += 1
    return out


@numba.njit(cache=True)
def _pair_counts(grid, cell_types, n_types, offsets):
    """Unordered heterogeneous neighbor pairs, binned by (min type, max type)."""
    h, w = grid.shape
    half = _half_offsets(offsets)
    counts = np.zeros((n_types, n_types))
    for r in range(h):
        for c in range(w):
            a = grid[r, c]
            for k in range(half.shape[0]):
                rr = r + half[k, 0]
                cc = c + half[k, 1]
                if 0 <= rr < h and 0 <= cc < w:
                    b = grid[rr, cc]
                    if a != b:
                        ta = cell_types[a]
                        tb = cell_types[b]
                        if ta <= tb:
                            counts[ta, tb] += 1.0
                        else:
                            counts[tb, ta] += 1.0
    return counts


@numba.njit(cache=True)
def _delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, site, new):
    h, w = grid.shape
    r = site // w
    c = site % w
    old = grid[r, c]
    if old == new:
        return 0.0
    t_old = cell_types[old]
    t_new = cell_types[new]
    d = 0.0
    for k in range(offsets.shape[0]):
        rr = r + offsets[k, 0]
        cc = c + offsets[k, 1]
        if 0 <= rr < h and 0 <= cc < w:
            nb = grid[rr, cc]
            tn = cell_types[nb]
            if nb != new:
                d += J[t_new, tn]
            if nb != old:
                d -= J[t_old, tn]
    if old != 0:
        v = vols[old]
        d += lam * ((v - 1 - targets[old]) ** 2 - (v - targets[old]) ** 2)
    if new != 0:
        v = vols[new]
        d += lam * ((v + 1 - targets[new]) ** 2 - (v - targets[new]) ** 2)
    if phi.shape[0] == h and phi.shape[1] == w:
        d += (mu[t_new] - mu[t_old]) * phi[r, c]
    return d


@numba.njit(cache=True)
def _delta_batch(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, sites, news):
    out = np.empty(sites.shape[0])
    for i in range(sites.shape[0]):
        out[i] = _delta_one(grid, cell_types, vols, J, lam, targets, phi, mu, offsets, sites[i], news[i])
    return out


def contact_energy(state: LatticeState, contact: ContactMatrix, nb=DEFAULT_NEIGHBORHOOD) -> float:
    check_types(state, contact)
    counts = _pair_counts(state.grid, state.cell_types, contact.n_types, Neighborhood.parse(nb).offsets)
    return float((counts * contact.J).sum())


def volume_energy(state: LatticeState, vc: VolumeConstraint) -> float:
    vols = volume_array(state).astype(np.float64)
    targets = vc.targets(state.cell_types.size)
    return float(vc.lambda_v * ((vols[1:] - targets[1:]) ** 2).sum())


def potential_energy(state: LatticeState, ep: ExternalPotential | None) -> float:
    if ep is None:
        return 0.0
    n_types = max(state.n_types, ep.coupling.size)
    phi, mu = potential_arrays(state, ep, n_types)
    return float((mu[state.site_types()] * phi).sum())


def total_energy(state: LatticeState, params: AnalyticParams, nb=DEFAULT_NEIGHBORHOOD) -> float:
    return (
        contact_energy(state, params.contact, nb)
        + volume_energy(state, params.volume)
        + potential_energy(state, params.potential)
    )


def delta_energy(state: LatticeState, site, new_cell: int, params: AnalyticParams,
                 nb=DEFAULT_NEIGHBORHOOD, volumes: np.ndarray | None = None) -> float:
    """Exact H(x') - H(x) for copying ``new_cell`` into ``site`` (flat index or (row, col))."""
    if not isinstance(site, (int, np.integer)):
        site = int(site[0]) * state.width + int(site[1])
    if not 0 <= new_cell < state.cell_types.size:
        raise ConfigurationError(f"cell {new_cell} is not registered")
    J, lam, targets, phi, mu = params.kernel_args(state)
    vols = volume_array(state) if volumes is None else volumes
    return float(_delta_one(state.grid, state.cell_types, vols.astype(np.float64), J, lam, targets,
                            phi, mu, Neighborhood.parse(nb).offsets, int(site), int(new_cell)))


def delta_energies(state: LatticeState, sites, new_cells, params: AnalyticParams,
                   nb=DEFAULT_NEIGHBORHOOD, volumes: np.ndarray | None = None) -> np.ndarray:
    J, lam, targets, phi, mu = params.kernel_args(state)
    vols = volume_array(state) if volumes is None else volumes
    return _delta_batch(state.grid, state.cell_types, vols.astype(np.float64), J, lam, targets, phi, mu,
                        Neighborhood.parse(nb).offsets, np.asarray(sites, dtype=np.int64),
                        np.asarray(new_cells, dtype=np.int64))


def energy_features(state: LatticeState, n_types: int, target, phi: np.ndarray | None,
                    nb=DEFAULT_NEIGHBORHOOD) -> dict:
    """Sufficient statistics: the analytic energy is linear in (J, lambda_v, coupling)."""
    if state.cell_types.max() >= n_types:
        raise ConfigurationError(f"state uses type {state.cell_types.max()} beyond {n_types} types")
    counts = _pair_counts(state.grid, state.cell_types, n_types, Neighborhood.parse(nb).offsets)
    vols = volume_array(state).astype(np.float64)
    targets = VolumeConstraint(0.0, target).targets(state.cell_types.size)
    sq_dev = float(((vols[1:] - targets[1:]) ** 2).sum())
    pot = np.zeros(n_types)
    if phi is not None:
        np.add.at(pot, state.site_types().ravel(), phi.ravel())
    return {"pairs": counts, "sq_dev": sq_dev, "potential": pot}


def param_gradient(state: LatticeState, params: AnalyticParams, nb=DEFAULT_NEIGHBORHOOD,
                   w_s: float = 1.0) -> dict:
    """Gradient of ``w_s * H(state)`` w.r.t. the analytic parameters.

    Keys: ``J`` (upper-triangle vector in :func:`contact_pairs` order),
    ``J_matrix`` (same counts as a symmetric-slot matrix), ``lambda_v``,
    ``coupling`` (per type) and ``w_s`` (the unscaled energy).
    """
    check_types(state, params.contact)
    n = params.n_types
    phi = None
    if params.potential is not None:
        phi, _ = potential_arrays(state, params.potential, n)
    f = energy_features(state, n, params.volume.target, phi, nb)
    pairs = contact_pairs(n)
    H = (f["pairs"] * params.contact.J).sum() + params.volume.lambda_v * f["sq_dev"]
    if params.potential is not None:
        _, mu = potential_arrays(state, params.potential, n)
        H += float(mu @ f["potential"])
    return {
        "J": w_s * np.array([f["pairs"][a, b] for a, b in pairs]),
        "J_matrix": w_s * f["pairs"],
        "lambda_v": w_s * f["sq_dev"],
        "coupling": w_s * f["potential"],
        "w_s": float(H),
    }
