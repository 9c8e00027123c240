"""On-disk formats: snapshots, dataset directories, checkpoints, pixmaps and run configs."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import neural as nn
from .lattice import LatticeState, Neighborhood, boundary_mask
from .models import AnalyticModel, ClosureModel, NeuralModel

MAGIC = b"NCPM"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


class SnapshotError(ValueError):
    pass


class BadMagic(SnapshotError):
    pass


class VersionMismatch(SnapshotError):
    pass


class Truncated(SnapshotError):
    pass


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------- snapshots


def snapshot_bytes(state: LatticeState) -> bytes:
    n_cells = state.cell_types.size - 1
    head = _HEADER.pack(MAGIC, VERSION, state.width, state.height, n_cells, int(state.n_types))
    payload = state.grid.astype("<u4").tobytes()
    ids = np.arange(1, n_cells + 1, dtype="<u4")
    footer = np.stack([ids, state.cell_types[1:].astype("<u4")], axis=1).tobytes()
    return head + payload + footer


def read_snapshot_bytes(data: bytes) -> LatticeState:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("bad magic: not an NCPM snapshot")
    if len(data) < _HEADER.size:
        raise Truncated("snapshot header is truncated")
    _, version, width, height, n_cells, _n_types = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"snapshot version {version}, reader supports {VERSION}")
    need = _HEADER.size + 4 * width * height + 8 * n_cells
    if len(data) < need:
        raise Truncated(f"snapshot holds {len(data)} bytes, header promises {need}")
    if len(data) > need:
        raise SnapshotError(f"{len(data) - need} trailing bytes after the footer")
    off = _HEADER.size
    grid = np.frombuffer(data, dtype="<u4", count=width * height, offset=off).astype(np.int64)
    pairs = np.frombuffer(data, dtype="<u4", count=2 * n_cells, offset=off + 4 * width * height)
    pairs = pairs.reshape(n_cells, 2).astype(np.int64)
    types = np.zeros(n_cells + 1, dtype=np.int64)
    if n_cells:
        if pairs[:, 0].max() > n_cells or pairs[:, 0].min() < 1 or np.unique(pairs[:, 0]).size != n_cells:
            raise SnapshotError("footer cell ids must be exactly 1..num_cells")
        types[pairs[:, 0]] = pairs[:, 1]
    if grid.size and grid.max() > n_cells:
        raise SnapshotError(f"payload references cell {grid.max()} missing from the footer")
    return LatticeState(grid.reshape(height, width), types)


def write_snapshot(path, state: LatticeState) -> None:
    Path(path).write_bytes(snapshot_bytes(state))


def read_snapshot(path) -> LatticeState:
    return read_snapshot_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- dataset directories


def write_dataset(directory, states, manifest: dict) -> Path:
    """Snapshots ``000000.ncpm``... plus ``manifest.json`` (scenario, seed, count, files, extras)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(states):
        name = f"{i:06d}.ncpm"
        write_snapshot(d / name, s)
        names.append(name)
    meta = dict(manifest)
    meta.update({"format": "NCPM", "version": VERSION, "count": len(names), "files": names})
    (d / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    return d


def read_dataset(directory):
    """``(states, manifest)``; a directory without a manifest is read by globbing ``*.ncpm``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    mpath = d / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        files = [d / f for f in manifest["files"]]
    else:
        manifest = {}
        files = sorted(d.glob("*.ncpm"))
    if not files:
        raise FileNotFoundError(f"no snapshots in {d}")
    return [read_snapshot(f) for f in files], manifest


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# ---------------------------------------------------------------- checkpoints


def model_meta(model) -> dict:
    if isinstance(model, ClosureModel):
        return {"kind": "closure", "analytic": model_meta(model.analytic), "neural": model_meta(model.neural)}
    if isinstance(model, NeuralModel):
        return {"kind": "neural", "nh": model.cfg.to_dict(), "nb": model.nb.name.lower()}
    if isinstance(model, AnalyticModel):
        return {"kind": "analytic", "n_types": model.n_types, "target": _jsonable_target(model.target),
                "nb": model.nb.name.lower(), "coupling": model.coupling().tolist(),
                "learn_coupling": model.learn_coupling, "has_phi": model.phi is not None}
    raise TypeError(f"unsupported model {type(model).__name__}")


def _jsonable_target(t):
    return t.tolist() if isinstance(t, np.ndarray) else float(t)


def build_model_from_meta(meta: dict, phi=None):
    kind = meta["kind"]
    if kind == "closure":
        a = build_model_from_meta(meta["analytic"], phi)
        n = build_model_from_meta(meta["neural"])
        return ClosureModel(a, n)
    if kind == "neural":
        cfg = nn.NHConfig(**meta["nh"])
        return NeuralModel(cfg, nb=meta.get("nb", "moore"))
    if kind == "analytic":
        if meta.get("has_phi") and phi is None:
            raise ConfigError(["checkpoint model needs its potential field (phi) to be rebuilt"])
        return AnalyticModel(meta["n_types"], meta["target"], phi=phi, coupling=meta.get("coupling"),
                             learn_coupling=meta.get("learn_coupling", True), nb=meta.get("nb", "moore"))
    raise ConfigError([f"unknown model kind {kind!r}"])


def save_checkpoint(path, model, ewa: dict | None = None, extra: dict | None = None) -> None:
    """Named tensors ``param/<name>`` and ``ewa/<name>`` plus a JSON ``__meta__`` record."""
    arrays = {f"param/{k}": np.asarray(v) for k, v in model.params.items()}
    if ewa is not None:
        arrays.update({f"ewa/{k}": np.asarray(v) for k, v in ewa.items()})
    phi = getattr(model, "phi", None) if not isinstance(model, ClosureModel) else model.analytic.phi
    if phi is not None:
        arrays["phi"] = phi
    meta = {"model": model_meta(model), "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, default=_jsonable).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, which: str = "param"):
    """``(model, meta)`` with the ``param`` or ``ewa`` tensor set loaded."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        phi = z["phi"] if "phi" in z.files else None
        model = build_model_from_meta(meta["model"], phi)
        prefix = f"{which}/"
        tensors = {k[len(prefix):]: z[k] for k in z.files if k.startswith(prefix)}
    if not tensors:
        raise ConfigError([f"checkpoint has no {which!r} tensors"])
    missing = set(model.params) - set(tensors)
    if missing:
        raise ConfigError([f"checkpoint lacks tensor {m!r}" for m in sorted(missing)])
    model.set_flat({k: tensors[k] for k in model.params})
    return model, meta


# ---------------------------------------------------------------- rendering

DEFAULT_PALETTE = [(255, 255, 255), (220, 60, 50), (50, 110, 220), (60, 170, 80), (230, 170, 30), (140, 80, 190)]


def render(state: LatticeState, palette=None, boundaries: bool = True, scale: int = 1,
           nb=Neighborhood.VON_NEUMANN) -> bytes:
    """Binary P6 pixmap colored by cell type, with cell boundaries darkened."""
    palette = DEFAULT_PALETTE if palette is None else palette
    if int(state.cell_types.max()) >= len(palette):
        raise ValueError(f"palette has {len(palette)} colors but the state uses type {state.cell_types.max()}")
    pal = np.asarray(palette, dtype=np.float64)
    img = pal[state.site_types()]
    if boundaries:
        edge = boundary_mask(state.grid, nb) & (state.grid != 0)
        img[edge] *= 0.55
    img = np.round(img).astype(np.uint8)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


# ---------------------------------------------------------------- run configs

SECTION_KEYS = {
    "scenario": {"kind", "width", "height", "counts", "contact", "lambda_v", "target_volume", "temperature",
                 "radius", "sweeps", "neighborhood", "potential", "motion"},
    "data": {"n", "augment", "digits"},
    "model": {"kind", "nh_profile", "nh", "init_J", "init_lambda", "w_s", "w_nn", "use_ewa"},
    "train": None,  # filled from TrainConfig below
    "sample": {"kernel", "sweeps", "snapshot_every", "n_chains", "temperature", "parallel_flips", "init"},
    "evaluate": {"mode", "polar_type", "max_fragmented", "n_samples"},
}
TOP_KEYS = {"name", "extends", "seed", *SECTION_KEYS}
SCENARIO_KINDS = ("cellsort", "mnist", "bipolar")
MODEL_KINDS = ("analytic", "neural", "closure")
EVAL_MODES = ("param-rmse", "bio", "classifier", "axial")
KERNELS = ("metropolis", "approx_pcpm", "gibbs")


def _train_keys():
    from .trainer import TrainConfig
    return {f.name for f in fields(TrainConfig)}


def list_profiles() -> list[str]:
    root = resources.files("pottsfit").joinpath("profiles")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_yaml(text: str, origin: str) -> dict:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{origin}: invalid YAML ({exc})"]) from exc
    if not isinstance(data, dict):
        raise ConfigError([f"{origin}: top level must be a mapping"])
    return data


def _profile_text(name: str) -> str:
    ref = resources.files("pottsfit").joinpath(f"profiles/{name}.yaml")
    if not ref.is_file():
        raise ConfigError([f"unknown profile {name!r}; available: {', '.join(list_profiles())}"])
    return ref.read_text()


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve(data: dict, origin: str, seen=()) -> dict:
    parent = data.pop("extends", None)
    if parent is None:
        return data
    if parent in seen:
        raise ConfigError([f"{origin}: circular 'extends' through {parent!r}"])
    base = _resolve(_read_yaml(_profile_text(parent), parent), parent, (*seen, parent))
    return merge(base, data)


def parse_override(text: str):
    """``section.key=value`` with a YAML-typed value."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} must look like section.key=value"])
    path, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError([f"override {text!r} has an empty key"])
    out: dict = {}
    cur = out
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value
    return out


def load_config(path=None, profile: str | None = None, overrides=(), base_dir=None) -> dict:
    """Merge profile <- config file <- overrides, then validate (every problem reported at once)."""
    cfg: dict = {}
    if profile:
        cfg = _resolve(_read_yaml(_profile_text(profile), profile), profile)
        cfg.setdefault("name", profile)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file {p} not found"])
        data = _resolve(_read_yaml(p.read_text(), str(p)), str(p))
        cfg = merge(cfg, data)
        base_dir = base_dir or p.parent
    for ov in overrides:
        cfg = merge(cfg, ov if isinstance(ov, dict) else parse_override(ov))
    validate_config(cfg, base_dir)
    return cfg


def validate_config(cfg: dict, base_dir=None) -> None:
    errors = []
    keys = dict(SECTION_KEYS, train=_train_keys())
    for k in cfg:
        if k not in TOP_KEYS:
            errors.append(f"unknown top-level key {k!r}")
    for section, allowed in keys.items():
        body = cfg.get(section, {})
        if body is None:
            continue
        if not isinstance(body, dict):
            errors.append(f"section {section!r} must be a mapping")
            continue
        for k in body:
            if k not in allowed:
                errors.append(f"unknown key {section}.{k}")
    sc = cfg.get("scenario") or {}
    if "scenario" not in cfg:
        errors.append("missing section 'scenario'")
    if sc.get("kind", "cellsort") not in SCENARIO_KINDS:
        errors.append(f"scenario.kind must be one of {SCENARIO_KINDS}")
    md = cfg.get("model") or {}
    if md.get("kind", "analytic") not in MODEL_KINDS:
        errors.append(f"model.kind must be one of {MODEL_KINDS}")
    if md.get("nh_profile", "desk") not in nn.PROFILES:
        errors.append(f"model.nh_profile must be one of {sorted(nn.PROFILES)}")
    sm = cfg.get("sample") or {}
    if sm.get("kernel", "approx_pcpm") not in KERNELS:
        errors.append(f"sample.kernel must be one of {KERNELS}")
    ev = cfg.get("evaluate") or {}
    if ev.get("mode", "bio") not in EVAL_MODES:
        errors.append(f"evaluate.mode must be one of {EVAL_MODES}")
    if "seed" in cfg and not isinstance(cfg["seed"], int):
        errors.append("seed must be an integer")
    digits = (cfg.get("data") or {}).get("digits")
    if digits:
        p = Path(digits)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        if not p.is_file():
            errors.append(f"data.digits file {digits} not found")
    nb = sc.get("neighborhood", "moore")
    try:
        Neighborhood.parse(nb)
    except ValueError:
        errors.append(f"scenario.neighborhood {nb!r} is not a neighborhood")
    if errors:
        raise ConfigError(errors)
