"""Energy models with trainable parameter dicts, shared by the samplers and the trainer.

Every model exposes:

* ``params`` -- ``{name: float64 array}`` of trainable (unconstrained) values
* ``energies(states)`` -- H for a list of states
* ``delta_energies(state, sites, new_cells, volumes)`` -- H(x') - H(x) for
  single-site copies evaluated against the same base state
* ``energy_and_grad(states, coeff)`` -- energies and ``sum_b coeff(H_b) * dH_b/dparams``
"""

from __future__ import annotations

import copy

import numpy as np

from . import analytic as an
from . import neural as nn
from .lattice import DEFAULT_NEIGHBORHOOD, LatticeState, Neighborhood, volume_array


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.maximum(np.asarray(y, dtype=np.float64), 1e-12)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class EnergyModel:
    kind = "base"
    nb: Neighborhood = DEFAULT_NEIGHBORHOOD
    params: dict

    def energy(self, state: LatticeState) -> float:
        return float(self.energies([state])[0])

    def get_flat(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def set_flat(self, values: dict) -> None:
        for k, v in values.items():
            self.params[k][...] = v

    def clone(self) -> "EnergyModel":
        return copy.deepcopy(self)

    def fused_args(self, state):
        """Kernel arrays for the compiled analytic samplers, or None for neural models."""
        return None


class AnalyticModel(EnergyModel):
    """Contact + volume (+ optional external potential) energy.

    Trainable entries: ``J`` (upper triangle without medium-medium, see
    :func:`analytic.contact_pairs`), ``lambda_raw`` (softplus of it is
    lambda_v) and, when a potential field is attached and learnable,
    ``coupling`` for the non-medium types.
    """

    kind = "analytic"

    def __init__(self, n_types: int = 3, target=60.0, J=None, lambda_v: float = 0.5,
                 phi: np.ndarray | None = None, coupling=None, learn_coupling: bool = True,
                 nb=DEFAULT_NEIGHBORHOOD):
        self.n_types = int(n_types)
        self.target = target
        self.nb = Neighborhood.parse(nb)
        self.pairs = an.contact_pairs(self.n_types)
        self.phi = None if phi is None else np.ascontiguousarray(phi, dtype=np.float64)
        self.learn_coupling = bool(learn_coupling and phi is not None)
        if J is None:
            J_vec = np.ones(len(self.pairs))
        else:
            J = np.asarray(J, dtype=np.float64)
            J_vec = np.array([J[a, b] for a, b in self.pairs]) if J.ndim == 2 else J.copy()
        self.params = {"J": J_vec, "lambda_raw": np.array(float(softplus_inv(lambda_v)))}
        mu = np.zeros(self.n_types) if coupling is None else np.asarray(coupling, dtype=np.float64)
        self._fixed_coupling = mu.copy()
        if self.learn_coupling:
            self.params["coupling"] = mu[1:].copy()

    @classmethod
    def from_params(cls, p: an.AnalyticParams, nb=DEFAULT_NEIGHBORHOOD) -> "AnalyticModel":
        phi = coupling = None
        if p.potential is not None:
            phi, coupling = p.potential.phi, p.potential.coupling
        return cls(p.n_types, p.volume.target, p.contact.J, p.volume.lambda_v, phi, coupling,
                   learn_coupling=phi is not None, nb=nb)

    @property
    def lambda_v(self) -> float:
        return float(softplus(self.params["lambda_raw"]))

    def J_matrix(self) -> np.ndarray:
        J = np.zeros((self.n_types, self.n_types))
        for (a, b), v in zip(self.pairs, self.params["J"]):
            J[a, b] = J[b, a] = v
        return J

    def coupling(self) -> np.ndarray:
        mu = self._fixed_coupling.copy()
        if self.learn_coupling:
            mu[1:] = self.params["coupling"]
        return mu

    def to_params(self) -> an.AnalyticParams:
        pot = None if self.phi is None else an.ExternalPotential(self.phi, self.coupling())
        return an.AnalyticParams(an.ContactMatrix(self.J_matrix()), an.VolumeConstraint(self.lambda_v, self.target), pot)

    def named_values(self) -> dict:
        """Interpretable scalars (J entries, lambda_v, couplings)."""
        out = {f"J_{a}{b}": float(v) for (a, b), v in zip(self.pairs, self.params["J"])}
        out["lambda_v"] = self.lambda_v
        if self.phi is not None:
            for t, m in enumerate(self.coupling()):
                if t > 0:
                    out[f"mu_{t}"] = float(m)
        return out

    def fused_args(self, state):
        return self.to_params().kernel_args(state)

    def energies(self, states) -> np.ndarray:
        p = self.to_params()
        return np.array([an.total_energy(s, p, self.nb) for s in states])

    def delta_energies(self, state, sites, new_cells, volumes=None) -> np.ndarray:
        return an.delta_energies(state, sites, new_cells, self.to_params(), self.nb, volumes)

    def features(self, state):
        return an.energy_features(state, self.n_types, self.target, self.phi, self.nb)

    def energy_and_grad(self, states, coeff):
        J = self.J_matrix()
        lam = self.lambda_v
        mu = self.coupling()
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        energies = np.empty(len(states))
        dlam = float(sigmoid(self.params["lambda_raw"]))
        for i, s in enumerate(states):
            f = self.features(s)
            H = float((f["pairs"] * J).sum() + lam * f["sq_dev"] + mu @ f["potential"])
            energies[i] = H
            c = coeff(i, H)
            grads["J"] += c * np.array([f["pairs"][a, b] for a, b in self.pairs])
            grads["lambda_raw"] += c * f["sq_dev"] * dlam
            if self.learn_coupling:
                grads["coupling"] += c * f["potential"][1:]
        return energies, grads


class NeuralModel(EnergyModel):
    kind = "neural"

    def __init__(self, cfg: nn.NHConfig, params: dict | None = None, seed: int = 0,
                 nb=DEFAULT_NEIGHBORHOOD, chunk: int = 32):
        self.cfg = cfg
        self.nb = Neighborhood.parse(nb)
        self.chunk = chunk
        self.params = params if params is not None else nn.init_nh_params(cfg, np.random.default_rng(seed))

    def energies(self, states) -> np.ndarray:
        if not states:
            return np.zeros(0)
        out = np.empty(len(states))
        # group by registered-cell table so each forward batch shares a cell-id space
        groups: dict = {}
        for i, s in enumerate(states):
            groups.setdefault(s.cell_types.tobytes(), []).append(i)
        for idx in groups.values():
            grids = np.stack([states[i].grid for i in idx])
            out[idx] = nn.nh_energies(grids, states[idx[0]].cell_types, self.params, self.cfg, self.chunk)
        return out

    def delta_energies(self, state, sites, new_cells, volumes=None) -> np.ndarray:
        sites = np.asarray(sites, dtype=np.int64)
        grids = np.repeat(state.grid[None], sites.size + 1, axis=0)
        flat = grids.reshape(sites.size + 1, -1)
        flat[np.arange(1, sites.size + 1), sites] = new_cells
        H = nn.nh_energies(grids, state.cell_types, self.params, self.cfg, self.chunk)
        return H[1:] - H[0]

    def energy_and_grad(self, states, coeff):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        energies = np.empty(len(states))
        for start in range(0, len(states), self.chunk):
            batch = states[start:start + self.chunk]
            # one cell-id space per forward call
            idx_groups: dict = {}
            for j, s in enumerate(batch):
                idx_groups.setdefault(s.cell_types.tobytes(), []).append(j)
            for idx in idx_groups.values():
                grids = np.stack([batch[j].grid for j in idx])
                H, cache = nn.nh_forward(grids, batch[idx[0]].cell_types, self.params, self.cfg)
                up = np.array([coeff(start + j, h) for j, h in zip(idx, H)])
                nn.nh_backward(cache, up, self.params, self.cfg, grads)
                energies[[start + j for j in idx]] = H
        return energies, grads


class ClosureModel(EnergyModel):
    """``w_s * analytic + w_nn * neural`` with all parts trained jointly."""

    kind = "closure"

    def __init__(self, analytic: AnalyticModel, neural: NeuralModel, w_s: float = 1.0, w_nn: float = 1.0):
        self.analytic = analytic
        self.neural = neural
        self.nb = analytic.nb
        self.params = {"w_s": np.array(float(w_s)), "w_nn": np.array(float(w_nn))}
        for k, v in analytic.params.items():
            self.params["analytic." + k] = v
        for k, v in neural.params.items():
            self.params["nn." + k] = v

    def __deepcopy__(self, memo):
        a = copy.deepcopy(self.analytic, memo)
        n = copy.deepcopy(self.neural, memo)
        return ClosureModel(a, n, float(self.params["w_s"]), float(self.params["w_nn"]))

    @property
    def w_s(self) -> float:
        return float(self.params["w_s"])

    @property
    def w_nn(self) -> float:
        return float(self.params["w_nn"])

    def to_closure_params(self) -> nn.ClosureParams:
        return nn.ClosureParams(self.w_s, self.w_nn, self.analytic.to_params(), self.neural.params, self.neural.cfg)

    def energies(self, states) -> np.ndarray:
        return self.w_s * self.analytic.energies(states) + self.w_nn * self.neural.energies(states)

    def delta_energies(self, state, sites, new_cells, volumes=None) -> np.ndarray:
        d = self.w_s * self.analytic.delta_energies(state, sites, new_cells, volumes)
        if self.w_nn != 0.0:
            d = d + self.w_nn * self.neural.delta_energies(state, sites, new_cells)
        return d

    def energy_and_grad(self, states, coeff):
        w_s, w_nn = self.w_s, self.w_nn
        h_s = self.analytic.energies(states)
        cs = np.empty(len(states))

        def neural_coeff(i, h):
            cs[i] = coeff(i, w_s * h_s[i] + w_nn * h)
            return w_nn * cs[i]

        h_nn, gn = self.neural.energy_and_grad(states, neural_coeff)
        _, ga = self.analytic.energy_and_grad(states, lambda i, h: w_s * cs[i])
        grads = {"w_s": np.array(float(cs @ h_s)), "w_nn": np.array(float(cs @ h_nn))}
        grads.update({"analytic." + k: v for k, v in ga.items()})
        grads.update({"nn." + k: v for k, v in gn.items()})
        return w_s * h_s + w_nn * h_nn, grads


def volumes_of(state: LatticeState) -> np.ndarray:
    return volume_array(state).astype(np.float64)
