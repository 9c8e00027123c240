"""Persistent contrastive divergence training of energy models."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .lattice import LatticeState
from .samplers import SamplerConfig, approx_pcpm, n_kernel_steps

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    mc_sweeps: float = 1.0
    parallel_flips: int = 100
    reset_prob: float = 1.0
    reg: float = 0.0
    ewa_alpha: float = 0.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    temperature: float = 1.0
    divergence_bound: float = 1e6
    divergence_patience: int = 50
    sequential: bool = False

    def __post_init__(self):
        errors = []
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if not 0.0 <= self.reset_prob <= 1.0:
            errors.append("reset_prob must lie in [0, 1]")
        if self.reg < 0:
            errors.append("reg must be >= 0")
        if not 0.0 <= self.ewa_alpha < 1.0:
            errors.append("ewa_alpha must lie in [0, 1)")
        if self.steps < 0:
            errors.append("steps must be >= 0")
        if self.parallel_flips < 1:
            errors.append("parallel_flips must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class ChainPool:
    """Persistent negative chains, one per batch slot, each with its own random stream."""

    states: list
    rngs: list

    def __len__(self):
        return len(self.states)


@dataclass
class TrainResult:
    params: dict
    ewa_params: dict
    trace: list = field(default_factory=list)


def permute_types(state: LatticeState, rng: np.random.Generator) -> LatticeState:
    """Copy of ``state`` with the type labels shuffled among its cells."""
    types = state.cell_types.copy()
    types[1:] = rng.permutation(types[1:])
    return LatticeState(state.grid.copy(), types)


def loss_and_grad(positives, negatives, model, reg: float = 0.0):
    """Regularized contrastive loss and its parameter gradient.

    ``L = mean_b [H(x+) - H(x-) + reg * (H(x+)^2 + H(x-)^2)]``.
    Returns ``(loss, grads, (H_pos, H_neg))``.
    """
    b = len(positives)
    if b != len(negatives) or b == 0:
        raise ValueError("positive and negative batches must be non-empty and equally sized")

    def coeff(i, h):
        sign = 1.0 if i < b else -1.0
        return (sign + 2.0 * reg * h) / b

    energies, grads = model.energy_and_grad(list(positives) + list(negatives), coeff)
    if not np.all(np.isfinite(energies)):
        bad = np.flatnonzero(~np.isfinite(energies))
        raise TrainingError(f"non-finite energies at batch slots {bad.tolist()}")
    hp, hn = energies[:b], energies[b:]
    loss = float(np.mean(hp - hn + reg * (hp ** 2 + hn ** 2)))
    return loss, grads, (hp, hn)


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        moments = {k: (self.m.get(k), self.v.get(k)) for k in params}
        new_params, moments = adam_update(params, grads, moments, self, self.t)
        for k in params:
            params[k][...] = new_params[k]
            self.m[k], self.v[k] = moments[k]


def adam_update(params: dict, grads: dict, moments: dict, cfg, step: int):
    """Pure Adam step: returns ``(params', moments')`` with ``moments[k] = (m, v)``."""
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m = {}, {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(p)), dtype=np.float64)
        m, v = moments.get(k, (None, None)) if moments else (None, None)
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_p[k] = p - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k] = (m, v)
    return new_p, new_m


def ewa_update(avg: dict, params: dict, alpha: float) -> dict:
    return {k: alpha * avg[k] + (1 - alpha) * params[k] for k in params}


def _named_scalars(model) -> dict:
    if hasattr(model, "named_values"):
        return model.named_values()
    out = {}
    if hasattr(model, "analytic"):
        out = {"w_s": model.w_s, "w_nn": model.w_nn}
        out.update(model.analytic.named_values())
    return out


def init_chains(dataset, batch_size: int, seed_seq: np.random.SeedSequence, data_rng) -> ChainPool:
    rngs = [np.random.Generator(np.random.Philox(s)) for s in seed_seq.spawn(batch_size)]
    idx = data_rng.integers(len(dataset), size=batch_size)
    states = [permute_types(dataset[i], data_rng) for i in idx]
    return ChainPool(states, rngs)


def pcd_train(dataset, model, cfg: TrainConfig, seed=0, callback=None) -> TrainResult:
    """Fit ``model`` in place on ``dataset`` (a list of states of equal size).

    Per step: draw positives with replacement, reset each chain with
    probability ``reset_prob`` to a type-permuted data sample, advance the
    chains by ``mc_sweeps`` sweeps of the parallel kernel, take an Adam step
    on the regularized contrastive loss and update the parameter average.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0].grid.shape
    if any(s.grid.shape != shape for s in dataset):
        raise ValueError("all training states must share lattice dimensions")
    root = np.random.SeedSequence(seed)
    chain_seq, data_seq = root.spawn(2)
    data_rng = np.random.Generator(np.random.Philox(data_seq))
    pool = init_chains(dataset, cfg.batch_size, chain_seq, data_rng)
    scfg = SamplerConfig(temperature=cfg.temperature, parallel_flips=cfg.parallel_flips,
                         neighborhood=model.nb, sequential=cfg.sequential)
    n_par = n_kernel_steps("approx_pcpm", dataset[0].n_sites, cfg.mc_sweeps, cfg.parallel_flips)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    ewa = model.get_flat()
    trace: list = []
    over = 0
    for step in range(1, cfg.steps + 1):
        positives = [dataset[i] for i in data_rng.integers(len(dataset), size=cfg.batch_size)]
        for b in range(cfg.batch_size):
            if data_rng.random() < cfg.reset_prob:
                pool.states[b] = permute_types(dataset[data_rng.integers(len(dataset))], data_rng)
        approx_pcpm(model, pool.states, n_par, cfg.parallel_flips, scfg, pool.rngs)
        try:
            loss, grads, (hp, hn) = loss_and_grad(positives, pool.states, model, cfg.reg)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}", trace) from exc
        opt.step(model.params, grads)
        ewa = ewa_update(ewa, model.params, cfg.ewa_alpha)
        row = {"step": step, "loss": loss, "mean_h_pos": float(hp.mean()), "mean_h_neg": float(hn.mean())}
        row.update(_named_scalars(model))
        trace.append(row)
        if callback is not None:
            callback(row)
        if max(np.abs(hp).max(), np.abs(hn).max()) > cfg.divergence_bound:
            over += 1
            if over >= cfg.divergence_patience:
                raise TrainingDiverged(
                    f"|H| exceeded {cfg.divergence_bound:g} for {over} consecutive steps (step {step})", trace)
        else:
            over = 0
        if step % 100 == 0:
            log.info("step %d loss %.4g H+ %.4g H- %.4g", step, loss, hp.mean(), hn.mean())
    return TrainResult(model.get_flat(), ewa, trace)


def fit_optimal_temperature(learned, truth):
    """Closed-form ``T* = <learned, truth> / <learned, learned>`` and the RMSE of ``T* * learned``."""
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape:
        raise ValueError("parameter vectors differ in length")
    denom = float(learned @ learned)
    if denom == 0.0:
        raise ValueError("optimal temperature undefined for an all-zero parameter vector")
    t_star = float(learned @ truth) / denom
    rmse = float(np.sqrt(np.mean((t_star * learned - truth) ** 2)))
    return t_star, rmse


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

