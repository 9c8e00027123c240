"""Estimator front-end: fit Hamiltonians to snapshot collections, score and sample.

>>> est = CellSortHamiltonian(steps=200, random_state=0).fit(states)   # doctest: +SKIP
>>> est.named_params_["J_12"]                                          # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import neural as nn
from .analytic import contact_pairs
from .lattice import LatticeState, Neighborhood
from .models import AnalyticModel, ClosureModel, NeuralModel
from .samplers import SamplerConfig, make_rng, run_chain
from .trainer import TrainConfig, pcd_train

_TRAIN_PARAMS = ("batch_size", "steps", "mc_sweeps", "parallel_flips", "reset_prob", "reg", "ewa_alpha",
                 "lr", "temperature", "sequential")


def check_states(X, n_types: int | None = None) -> list:
    """Validate a non-empty collection of equally sized lattice states."""
    if isinstance(X, LatticeState):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one state")
    bad = [i for i, s in enumerate(X) if not isinstance(s, LatticeState)]
    if bad:
        raise TypeError(f"items {bad[:5]} are not LatticeState instances")
    shape = X[0].grid.shape
    if any(s.grid.shape != shape for s in X):
        raise ValueError("all states must share lattice dimensions")
    if n_types is not None:
        top = max(int(s.cell_types.max()) for s in X)
        if top >= n_types:
            raise ValueError(f"states use type {top}, model covers {n_types} types")
    return X


class _PCDHamiltonian(BaseEstimator):
    """Shared fit / energy / sample plumbing; subclasses build the energy model."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_PARAMS})

    def _n_types(self, X) -> int:
        return self.n_types or max(int(s.cell_types.max()) for s in X) + 1

    def fit(self, X, y=None, callback=None):
        X = check_states(X)
        cfg = self._train_config()
        self.n_types_ = self._n_types(X)
        check_states(X, self.n_types_)
        model = self._build_model(X)
        result = pcd_train(X, model, cfg, seed=self.random_state, callback=callback)
        self.model_ = model
        self.ewa_params_ = result.ewa_params
        self.trace_ = result.trace
        self.lattice_shape_ = X[0].grid.shape
        return self

    def eval_model(self):
        """The fitted model, switched to the averaged parameters when averaging is on."""
        check_is_fitted(self, "model_")
        if self.ewa_alpha > 0 and self.use_ewa:
            m = self.model_.clone()
            m.set_flat(self.ewa_params_)
            return m
        return self.model_

    def energy(self, X) -> np.ndarray:
        X = check_states(X, self.n_types_ if hasattr(self, "n_types_") else None)
        return self.eval_model().energies(X)

    def score_samples(self, X) -> np.ndarray:
        """Unnormalized log-density ``-H(x) / T``."""
        return -self.energy(X) / self.temperature

    def sample(self, X_init, sweeps: float = 1.0, kernel: str = "approx_pcpm", random_state=None,
               snapshot_every: int | None = None):
        """Trajectories started from each state of ``X_init``; returns a list of trajectories."""
        X_init = check_states(X_init, self.n_types_)
        model = self.eval_model()
        cfg = SamplerConfig(temperature=self.temperature, parallel_flips=self.parallel_flips,
                            neighborhood=model.nb, sequential=self.sequential)
        seed = self.random_state if random_state is None else random_state
        rngs = np.random.SeedSequence(seed).spawn(len(X_init))
        return [run_chain(kernel, x, sweeps, model, cfg, make_rng(ss), snapshot_every)
                for x, ss in zip(X_init, rngs)]


class CellSortHamiltonian(_PCDHamiltonian):
    """Contact + volume energy with learnable J (upper triangle) and lambda_v."""

    def __init__(self, n_types=None, target_volume=60.0, init_J=1.0, init_lambda=0.5, neighborhood="moore",
                 batch_size=16, steps=1000, mc_sweeps=1.0, parallel_flips=100, reset_prob=1.0, reg=0.0,
                 ewa_alpha=0.0, lr=1e-3, temperature=1.0, sequential=False, use_ewa=True, random_state=0):
        self.n_types = n_types
        self.target_volume = target_volume
        self.init_J = init_J
        self.init_lambda = init_lambda
        self.neighborhood = neighborhood
        self.batch_size = batch_size
        self.steps = steps
        self.mc_sweeps = mc_sweeps
        self.parallel_flips = parallel_flips
        self.reset_prob = reset_prob
        self.reg = reg
        self.ewa_alpha = ewa_alpha
        self.lr = lr
        self.temperature = temperature
        self.sequential = sequential
        self.use_ewa = use_ewa
        self.random_state = random_state

    def _analytic(self, n_types):
        J = np.full(len(contact_pairs(n_types)), float(self.init_J))
        return AnalyticModel(n_types, self.target_volume, J, self.init_lambda, nb=self.neighborhood)

    def _build_model(self, X):
        return self._analytic(self.n_types_)

    @property
    def named_params_(self) -> dict:
        check_is_fitted(self, "model_")
        return self.eval_model().named_values()

    @property
    def param_vector_(self) -> np.ndarray:
        """Upper-triangle J entries (medium-medium excluded) followed by lambda_v."""
        m = self.eval_model()
        return np.concatenate([m.params["J"], [m.lambda_v]])


class NeuralHamiltonian(_PCDHamiltonian):
    """Permutation-invariant convolutional energy; ``nh`` overrides fields of the named profile."""

    def __init__(self, n_types=None, profile="desk", nh=None, neighborhood="moore",
                 batch_size=16, steps=1000, mc_sweeps=0.5, parallel_flips=50, reset_prob=0.025, reg=5e-4,
                 ewa_alpha=0.99, lr=1e-3, temperature=1.0, sequential=False, use_ewa=True, random_state=0):
        self.n_types = n_types
        self.profile = profile
        self.nh = nh
        self.neighborhood = neighborhood
        self.batch_size = batch_size
        self.steps = steps
        self.mc_sweeps = mc_sweeps
        self.parallel_flips = parallel_flips
        self.reset_prob = reset_prob
        self.reg = reg
        self.ewa_alpha = ewa_alpha
        self.lr = lr
        self.temperature = temperature
        self.sequential = sequential
        self.use_ewa = use_ewa
        self.random_state = random_state

    def _neural(self, X):
        cfg = nn.nh_config(self.profile, n_types=self.n_types_, **(self.nh or {}))
        cfg.check_lattice(*X[0].grid.shape)
        return NeuralModel(cfg, seed=self.random_state, nb=self.neighborhood)

    def _build_model(self, X):
        return self._neural(X)


class ClosureHamiltonian(NeuralHamiltonian):
    """``w_s * cell-sort energy + w_nn * neural energy``, all terms trained jointly."""

    def __init__(self, n_types=None, profile="desk", nh=None, target_volume=60.0, init_J=1.0, init_lambda=0.5,
                 w_s=1.0, w_nn=1.0, neighborhood="moore", batch_size=16, steps=1000, mc_sweeps=0.5,
                 parallel_flips=50, reset_prob=0.025, reg=5e-4, ewa_alpha=0.99, lr=1e-3, temperature=1.0,
                 sequential=False, use_ewa=True, random_state=0):
        super().__init__(n_types=n_types, profile=profile, nh=nh, neighborhood=neighborhood,
                         batch_size=batch_size, steps=steps, mc_sweeps=mc_sweeps, parallel_flips=parallel_flips,
                         reset_prob=reset_prob, reg=reg, ewa_alpha=ewa_alpha, lr=lr, temperature=temperature,
                         sequential=sequential, use_ewa=use_ewa, random_state=random_state)
        self.target_volume = target_volume
        self.init_J = init_J
        self.init_lambda = init_lambda
        self.w_s = w_s
        self.w_nn = w_nn

    def _build_model(self, X):
        analytic = CellSortHamiltonian._analytic(self, self.n_types_)
        return ClosureModel(analytic, self._neural(X), self.w_s, self.w_nn)


ESTIMATORS = {"analytic": CellSortHamiltonian, "neural": NeuralHamiltonian, "closure": ClosureHamiltonian}


def estimator_from_config(cfg: dict):
    """Estimator for a validated run config (``model`` + ``train`` sections)."""
    model = dict(cfg.get("model") or {})
    train = dict(cfg.get("train") or {})
    sc = cfg.get("scenario") or {}
    kind = model.pop("kind", "analytic")
    kw = {k: v for k, v in train.items() if k in _TRAIN_PARAMS}
    kw["random_state"] = int(cfg.get("seed", 0))
    kw["neighborhood"] = Neighborhood.parse(sc.get("neighborhood", "moore")).value
    kw["use_ewa"] = model.get("use_ewa", True)
    if kind in ("analytic", "closure"):
        kw["target_volume"] = float(sc.get("target_volume", 60.0))
        kw["init_J"] = model.get("init_J", 1.0)
        kw["init_lambda"] = model.get("init_lambda", 0.5)
    if kind in ("neural", "closure"):
        kw["profile"] = model.get("nh_profile", "desk")
        kw["nh"] = model.get("nh")
    if kind == "closure":
        kw["w_s"] = model.get("w_s", 1.0)
        kw["w_nn"] = model.get("w_nn", 1.0)
    kw["n_types"] = len(sc.get("counts", [1, 1])) + 1
    return ESTIMATORS[kind](**kw)
