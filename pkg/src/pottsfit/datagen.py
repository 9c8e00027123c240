"""Synthetic snapshot datasets: cell sorting, digit-shaped potentials and bi-polar aggregates."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import analytic as an
from .lattice import LatticeState, Neighborhood, dihedral, volume_array
from .models import AnalyticModel
from .samplers import SamplerConfig, metropolis_steps


class IDXFormatError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    """Ground-truth generation settings for one dataset family.

    ``contact`` uses the lower-triangular table layout: row ``a`` lists
    J[a][0..a] with row 0 the medium.
    """

    width: int = 100
    height: int = 100
    counts: list = field(default_factory=lambda: [25, 25])
    contact: list = field(default_factory=lambda: [[0.0], [0.5, 0.333333], [0.5, 0.2, 0.266667]])
    lambda_v: float = 0.1
    target_volume: float = 60.0
    temperature: float = 1.0
    radius: float = 25.0
    sweeps: float = 200.0
    neighborhood: str = "moore"
    potential: dict | None = None
    motion: dict | None = None

    def __post_init__(self):
        errors = []
        if any(int(c) < 1 for c in self.counts):
            errors.append("cell counts must be >= 1")
        if len(self.contact) != len(self.counts) + 1:
            errors.append(f"contact table needs {len(self.counts) + 1} rows (medium + one per type)")
        if 2 * self.radius > min(self.width, self.height):
            errors.append("init circle does not fit the lattice")
        if errors:
            raise an.ConfigurationError("; ".join(errors))

    @property
    def n_types(self) -> int:
        return len(self.counts) + 1

    @property
    def n_cells(self) -> int:
        return int(sum(self.counts))

    def contact_matrix(self) -> an.ContactMatrix:
        return an.ContactMatrix.from_lower(self.contact)

    def analytic_params(self, phi: np.ndarray | None = None) -> an.AnalyticParams:
        pot = None
        if phi is not None:
            mu = np.zeros(self.n_types)
            for t, m in (self.potential or {}).get("coupling", {}).items():
                mu[int(t)] = float(m)
            pot = an.ExternalPotential(phi, mu)
        return an.AnalyticParams(self.contact_matrix(), an.VolumeConstraint(self.lambda_v, self.target_volume), pot)

    def truth_vector(self) -> np.ndarray:
        """Upper-triangle contact entries (medium-medium excluded) followed by lambda_v."""
        J = self.contact_matrix().J
        return np.array([J[a, b] for a, b in an.contact_pairs(self.n_types)] + [self.lambda_v])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PotentialImage:
    phi: np.ndarray
    provenance: dict


def init_scatter(spec: ScenarioSpec, rng: np.random.Generator) -> LatticeState:
    """Single-pixel cells at distinct random sites inside the centered circle."""
    cy, cx = (spec.height - 1) / 2.0, (spec.width - 1) / 2.0
    rr, cc = np.mgrid[0:spec.height, 0:spec.width]
    inside = np.flatnonzero(((rr - cy) ** 2 + (cc - cx) ** 2 <= spec.radius ** 2).ravel())
    if inside.size < spec.n_cells:
        raise an.ConfigurationError(f"circle holds {inside.size} sites but {spec.n_cells} cells are requested")
    sites = rng.choice(inside, size=spec.n_cells, replace=False)
    grid = np.zeros(spec.height * spec.width, dtype=np.int64)
    grid[sites] = np.arange(1, spec.n_cells + 1)
    types = np.concatenate([[0]] + [np.full(int(c), t + 1) for t, c in enumerate(spec.counts)])
    return LatticeState(grid.reshape(spec.height, spec.width), types)


def _sample_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def _rng(ss):
    return np.random.Generator(np.random.Philox(ss))


def equilibrate(state: LatticeState, params: an.AnalyticParams, spec: ScenarioSpec, rng, motion=None) -> LatticeState:
    model = AnalyticModel.from_params(params, nb=spec.neighborhood)
    cfg = SamplerConfig(temperature=spec.temperature, neighborhood=spec.neighborhood)
    metropolis_steps(state, model, cfg, rng, int(round(spec.sweeps * state.n_sites)), motion=motion)
    return state


def generate_cellsort(spec: ScenarioSpec, n: int, seed=0, phi: np.ndarray | None = None) -> list:
    """``n`` independent equilibrated snapshots of the analytic cell-sorting Hamiltonian."""
    params = spec.analytic_params(phi)
    out = []
    for ss in _sample_seeds(seed, n):
        rng = _rng(ss)
        out.append(equilibrate(init_scatter(spec, rng), params, spec, rng))
    return out


# ---------------------------------------------------------------- IDX / digit potentials


def write_idx(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 2051))
        fh.write(struct.pack(">" + "I" * images.ndim, *images.shape))
        fh.write(images.tobytes())


def load_idx(path) -> np.ndarray:
    """Images from an IDX u8 image container (magic 2051): shape (n, rows, cols)."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise IDXFormatError("truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != 2051:
        raise IDXFormatError(f"bad IDX magic {magic} (expected 2051)")
    n, rows, cols = struct.unpack(">III", data[4:16])
    payload = data[16:]
    if len(payload) != n * rows * cols:
        raise IDXFormatError(f"IDX payload has {len(payload)} bytes, header promises {n * rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols).copy()


_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def synthetic_digit_images() -> tuple[np.ndarray, np.ndarray]:
    """Digit-like 28x28 u8 masks (labels 0..9) drawn from a 5x7 bitmap font."""
    images = np.zeros((10, 28, 28), dtype=np.uint8)
    for d, rows in _GLYPHS.items():
        glyph = np.array([[int(ch) for ch in row] for row in rows], dtype=np.uint8)
        big = np.kron(glyph, np.ones((3, 3), dtype=np.uint8))  # 21 x 15
        images[d, 4:25, 7:22] = big * 255
    return images, np.arange(10)


def bundled_digits() -> np.ndarray:
    ref = resources.files("pottsfit").joinpath("data/digits-synthetic.idx")
    with resources.as_file(ref) as path:
        return load_idx(path)


def euclidean_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Distance from every pixel to the nearest foreground (True) pixel; 0 on foreground."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask has no foreground pixel")
    return ndimage.distance_transform_edt(~mask)


def build_digit_potential(image: np.ndarray, out_dims, source: str = "") -> PotentialImage:
    """Threshold at half brightness, distance-transform, cubic resize, clamp overshoot at 0."""
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 255:
        raise ValueError("intensities must lie in [0, 255]")
    mask = image > 127.5
    if not mask.any():
        raise ValueError("image has no foreground after thresholding")
    edt = euclidean_distance_transform(mask)
    out_h, out_w = out_dims
    phi = ndimage.zoom(edt, (out_h / edt.shape[0], out_w / edt.shape[1]), order=3, mode="nearest", grid_mode=True)
    phi = np.maximum(phi[:out_h, :out_w], 0.0)
    return PotentialImage(phi, {"source": source, "threshold": 127.5,
                                "transform": ["binarize", "edt", "cubic-resize", "clamp0"]})


def generate_mnist(spec: ScenarioSpec, images: np.ndarray, n: int, seed=0):
    """Snapshots whose type-2 cells are pulled into digit shapes; returns ``(states, digit_index)``."""
    rng0 = _rng(np.random.SeedSequence(seed).spawn(1)[0])
    picks = rng0.integers(len(images), size=n)
    potentials = {}
    states = []
    for ss, k in zip(_sample_seeds(seed, n), picks):
        if k not in potentials:
            potentials[k] = build_digit_potential(images[k], (spec.height, spec.width), f"image:{k}").phi
        rng = _rng(ss)
        params = spec.analytic_params(potentials[k])
        states.append(equilibrate(init_scatter(spec, rng), params, spec, rng))
    return states, picks


# ---------------------------------------------------------------- bi-polar aggregates

DEFAULT_MOTION = 500.0


def generate_bipolar(spec: ScenarioSpec, n: int, seed=0, with_poles: bool = False):
    """Aggregates where each type-2 cell drifts toward one of two opposite poles.

    Half of the type-2 cells get the direction ``+d``, the other half ``-d``,
    with a random axis ``d`` per sample; the drift strength is
    ``spec.motion['strength']``. With ``with_poles`` the per-sample
    ``(axis, direction table)`` pairs are returned alongside the states.
    """
    if spec.counts[-1] % 2:
        raise an.ConfigurationError("the polar cell type needs an even count")
    strength = float((spec.motion or {}).get("strength", DEFAULT_MOTION))
    params = spec.analytic_params()
    polar_type = len(spec.counts)
    out, poles = [], []
    for ss in _sample_seeds(seed, n):
        rng = _rng(ss)
        state = init_scatter(spec, rng)
        theta = rng.uniform(0, np.pi)
        axis = np.array([np.sin(theta), np.cos(theta)])
        polar = np.flatnonzero(state.cell_types == polar_type)
        signs = np.ones(polar.size)
        signs[rng.permutation(polar.size)[: polar.size // 2]] = -1.0
        dirs = np.zeros((state.cell_types.size, 2))
        dirs[polar] = signs[:, None] * axis[None, :]
        rr, cc = np.indices(state.grid.shape)
        cen = np.zeros((state.cell_types.size, 2))
        np.add.at(cen[:, 0], state.grid.ravel(), rr.ravel())
        np.add.at(cen[:, 1], state.grid.ravel(), cc.ravel())
        out.append(equilibrate(state, params, spec, rng, motion=(cen, dirs, strength)))
        poles.append((axis, dirs))
    return (out, poles) if with_poles else out


def augment_rotate(state: LatticeState, rng: np.random.Generator) -> LatticeState:
    """One of the 8 exact lattice symmetries, uniformly."""
    return dihedral(state, int(rng.integers(8)))


def mean_cell_volume(states) -> float:
    vols = np.concatenate([volume_array(s)[1:] for s in states])
    return float(vols.mean())


def neighborhood_of(spec: ScenarioSpec) -> Neighborhood:
    return Neighborhood.parse(spec.neighborhood)
