"""Evaluation metrics: biological indicators, Classifier Score, axial alignment, parameter RMSE."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .lattice import DEFAULT_NEIGHBORHOOD, LatticeState, fragment_count, volume_array
from .trainer import fit_optimal_temperature


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeBounds:
    v_min: float
    v_max: float
    v_mean: float

    def __post_init__(self):
        if not self.v_min <= self.v_mean <= self.v_max:
            raise ValueError("need v_min <= v_mean <= v_max")

    @classmethod
    def from_states(cls, states) -> "VolumeBounds":
        vols = np.concatenate([volume_array(s)[1:] for s in states]).astype(np.float64)
        if vols.size == 0:
            raise ValueError("no cells to measure")
        return cls(float(vols.min()), float(vols.max()), float(vols.mean()))

    def interval(self, slack: float = 0.1):
        return self.v_min - slack * self.v_mean, self.v_max + slack * self.v_mean


def volume_ok(state: LatticeState, bounds: VolumeBounds, slack: float = 0.1) -> bool:
    lo, hi = bounds.interval(slack)
    v = volume_array(state)[1:]
    return bool(np.all((v >= lo) & (v <= hi)))


def biological_indicators(states, bounds: VolumeBounds, nb=DEFAULT_NEIGHBORHOOD,
                          max_fragmented: int = 3, slack: float = 0.1):
    """``(p_volume, p_unfragmented)`` over ``states``."""
    states = list(states)
    if not states:
        raise ValueError("no states given")
    p_vol = np.mean([volume_ok(s, bounds, slack) for s in states])
    p_unf = np.mean([fragment_count(s, nb) <= max_fragmented for s in states])
    return float(p_vol), float(p_unf)


# ---------------------------------------------------------------- Classifier Score


def _kl_rows(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def classifier_score(outputs) -> float:
    """``exp(mean_x KL(p(y|x) || mean_x' p(y|x')))``; ``inf`` if some KL diverges."""
    p = np.asarray(outputs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("expected a non-empty (n_states, n_classes) array")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("rows must be probability vectors")
    marginal = p.mean(axis=0)
    if np.any((marginal == 0) & np.any(p > 0, axis=0)):
        return float("inf")
    return float(np.exp(_kl_rows(p, marginal[None, :]).mean()))


def occupancy_features(state: LatticeState, cell_type: int = 2, size: int = 14) -> np.ndarray:
    """Block-averaged occupancy of one type, flattened to ``size * size`` values."""
    mask = (state.site_types() == cell_type).astype(np.float64)
    h, w = mask.shape
    rows = np.array_split(np.arange(h), size)
    cols = np.array_split(np.arange(w), size)
    return np.array([[mask[np.ix_(r, c)].mean() for c in cols] for r in rows]).ravel()


class NearestCentroidClassifier:
    """Reference classifier over downsampled type occupancy masks.

    Soft assignments come from a softmax over negative squared distances to
    per-class centroids. Not comparable to a trained digit classifier.
    """

    def __init__(self, cell_type: int = 2, size: int = 14, beta: float = 1.0):
        self.cell_type, self.size, self.beta = cell_type, size, beta

    def fit(self, states, labels):
        X = np.stack([occupancy_features(s, self.cell_type, self.size) for s in states])
        labels = np.asarray(labels)
        self.classes_ = np.unique(labels)
        self.centroids_ = np.stack([X[labels == c].mean(axis=0) for c in self.classes_])
        return self

    def fit_images(self, images, size=None):
        """Centroids straight from label images (one image per class)."""
        size = size or self.size
        feats = []
        for img in images:
            m = (np.asarray(img, dtype=np.float64) > 127.5).astype(np.float64)
            rows = np.array_split(np.arange(m.shape[0]), size)
            cols = np.array_split(np.arange(m.shape[1]), size)
            feats.append(np.array([[m[np.ix_(r, c)].mean() for c in cols] for r in rows]).ravel())
        self.classes_ = np.arange(len(feats))
        self.centroids_ = np.stack(feats)
        return self

    def predict_proba(self, states) -> np.ndarray:
        X = np.stack([occupancy_features(s, self.cell_type, self.size) for s in states])
        d = ((X[:, None, :] - self.centroids_[None]) ** 2).sum(-1)
        logits = -self.beta * d
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- axial alignment


@dataclass
class AxialStats:
    frac_var_axis: float
    var_axis: float
    var_orth: float


def principal_axis(coords: np.ndarray) -> np.ndarray:
    """Leading eigenvector of the coordinate covariance, oriented toward +x (then +y)."""
    cov = np.cov(coords.T, bias=True)
    vals, vecs = np.linalg.eigh(cov)
    if coords.shape[0] < 2 or vals[-1] <= 0.0:
        raise DegenerateError("polar pixels have no spatial spread")
    axis = vecs[:, -1]
    # coords are (x, y) = (col, row)
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    return axis


def _xy(mask: np.ndarray) -> np.ndarray:
    rr, cc = np.nonzero(mask)
    return np.stack([cc, rr], axis=1).astype(np.float64)


def axial_alignment(state: LatticeState, polar_type: int, types=None) -> dict:
    """Per-type variance along / across the principal axis of the ``polar_type`` pixels.

    Raises :class:`DegenerateError` when the polar pixels have no spread.
    A type with no pixels maps to ``None``.
    """
    st = state.site_types()
    axis = principal_axis(_xy(st == polar_type))
    orth = np.array([-axis[1], axis[0]])
    if types is None:
        types = [t for t in range(1, state.n_types) if t in state.cell_types[1:]]
    out = {}
    for t in types:
        xy = _xy(st == t)
        if xy.shape[0] == 0:
            out[t] = None
            continue
        xy = xy - xy.mean(axis=0)
        va = float(np.mean((xy @ axis) ** 2))
        vo = float(np.mean((xy @ orth) ** 2))
        tot = va + vo
        out[t] = AxialStats(va / tot if tot > 0 else float("nan"), va, vo)
    return out


def axial_alignment_rmse(sim_states, ref_states, polar_type: int = 2, types=(1, 2)) -> float:
    """RMSE between dataset means of the four variance statistics.

    The statistics are ``var_axis`` and ``var_orth`` of each type in ``types``,
    averaged over the non-degenerate states of each dataset.
    """

    def means(states):
        rows = []
        for s in states:
            try:
                a = axial_alignment(s, polar_type, types)
            except DegenerateError:
                continue
            if any(a[t] is None for t in types):
                continue
            rows.append([v for t in types for v in (a[t].var_axis, a[t].var_orth)])
        if not rows:
            raise DegenerateError("no non-degenerate state")
        return np.mean(rows, axis=0)

    d = means(sim_states) - means(ref_states)
    return float(np.sqrt(np.mean(d ** 2)))


# ---------------------------------------------------------------- parameter recovery


def param_rmse(learned, truth, temperature_mode: str = "T1") -> float:
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape:
        raise ValueError(f"length mismatch: {learned.size} learned vs {truth.size} true parameters")
    mode = temperature_mode.lower()
    if mode == "t1":
        return float(np.sqrt(np.mean((learned - truth) ** 2)))
    if mode == "tstar":
        return fit_optimal_temperature(learned, truth)[1]
    raise ValueError(f"unknown temperature mode {temperature_mode!r} (T1 or TStar)")


# ---------------------------------------------------------------- reports

STATE_COLUMNS = ["index", "n_cells", "fragmented", "volume_ok", "frac_axis_1", "frac_axis_2", "status"]


def state_report(states, bounds: VolumeBounds, nb=DEFAULT_NEIGHBORHOOD, polar_type: int | None = None):
    """One row per state plus a summary row keyed ``index='summary'``."""
    rows = []
    for i, s in enumerate(states):
        row = {"index": i, "n_cells": int((volume_array(s)[1:] > 0).sum()),
               "fragmented": fragment_count(s, nb), "volume_ok": int(volume_ok(s, bounds)),
               "frac_axis_1": "", "frac_axis_2": "", "status": "ok"}
        if polar_type is not None:
            try:
                a = axial_alignment(s, polar_type, (1, 2))
                for t in (1, 2):
                    row[f"frac_axis_{t}"] = "" if a[t] is None else f"{a[t].frac_var_axis:.6f}"
            except DegenerateError:
                row["status"] = "degenerate"
        rows.append(row)
    p_vol, p_unf = biological_indicators(states, bounds, nb)
    rows.append({"index": "summary", "n_cells": "", "fragmented": f"p_unfragmented={p_unf:.6f}",
                 "volume_ok": f"p_volume={p_vol:.6f}", "frac_axis_1": "", "frac_axis_2": "", "status": "ok"})
    return rows


def write_csv(path, rows, columns, header_comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})
