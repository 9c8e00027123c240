"""Command-line entry point: ``pottsfit generate | fit | sample | evaluate | render``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from . import datagen as dg
from . import io
from . import metrics as mt
from .estimators import estimator_from_config
from .samplers import SamplerConfig, make_rng, run_chain

log = logging.getLogger("pottsfit")

TRACE_HEADER = ("training trace; one row per optimizer step; loss = mean(H+ - H- + reg*(H+^2 + H-^2)); "
                "mean_h_pos / mean_h_neg are batch-mean energies of data and chain states; "
                "remaining columns are interpretable analytic parameters when present")


class CLIError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="YAML run config (merged over --profile)")
    p.add_argument("--profile", help=f"shipped profile: {', '.join(io.list_profiles())}")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")


def _config(args, extra=None) -> dict:
    if not args.config and not args.profile:
        raise io.ConfigError(["give --config and/or --profile"])
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if extra:
        overrides.append(extra)
    return io.load_config(args.config, args.profile, overrides)


def scenario_spec(cfg: dict) -> dg.ScenarioSpec:
    sc = {k: v for k, v in cfg["scenario"].items() if k != "kind"}
    try:
        return dg.ScenarioSpec(**sc)
    except (TypeError, ValueError) as exc:
        raise io.ConfigError([f"scenario: {exc}"]) from exc


def _digits(cfg: dict) -> np.ndarray:
    path = (cfg.get("data") or {}).get("digits")
    return dg.bundled_digits() if not path else dg.load_idx(path)


def _fresh_dir(path) -> Path:
    """Build outputs in a sibling temp dir; the caller renames it into place on success."""
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise CLIError(f"output directory {out} exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _commit(tmp: Path, out) -> None:
    out = Path(out)
    if out.exists():
        out.rmdir()
    tmp.rename(out)


def _dump_config(cfg: dict, path: Path):
    path.write_text(yaml.safe_dump(json.loads(json.dumps(cfg, default=io._jsonable)), sort_keys=False))


def generate_states(cfg: dict):
    """``(states, extras)`` for the config's scenario."""
    spec = scenario_spec(cfg)
    n = int((cfg.get("data") or {}).get("n", 8))
    seed = int(cfg.get("seed", 0))
    kind = cfg["scenario"].get("kind", "cellsort")
    extras: dict = {}
    if kind == "cellsort":
        states = dg.generate_cellsort(spec, n, seed)
    elif kind == "mnist":
        states, picks = dg.generate_mnist(spec, _digits(cfg), n, seed)
        extras["labels"] = [int(p) for p in picks]
    else:
        states = dg.generate_bipolar(spec, n, seed)
    if (cfg.get("data") or {}).get("augment"):
        rng = make_rng(np.random.SeedSequence(seed).spawn(2)[1])
        states = [dg.augment_rotate(s, rng) for s in states]
    return states, extras


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> None:
    extra = {"data": {"n": args.n}} if args.n is not None else None
    cfg = _config(args, extra)
    tmp = _fresh_dir(args.out)
    try:
        states, extras = generate_states(cfg)
        io.write_dataset(tmp, states, {"scenario": cfg["scenario"], "seed": cfg.get("seed", 0), **extras})
        _dump_config(cfg, tmp / "config.yaml")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, args.out)
    print(f"wrote {len(states)} snapshots to {args.out}")


def _write_trace(path, trace):
    cols = list(trace[0].keys()) if trace else ["step", "loss", "mean_h_pos", "mean_h_neg"]
    mt.write_csv(path, trace, cols, TRACE_HEADER)


def cmd_fit(args) -> None:
    extra = {"train": {"steps": args.steps}} if args.steps is not None else None
    cfg = _config(args, extra)
    states, _ = io.read_dataset(args.data)
    tmp = _fresh_dir(args.out)
    try:
        est = estimator_from_config(cfg)
        est.fit(states)
        io.save_checkpoint(tmp / "checkpoint.npz", est.model_, est.ewa_params_,
                           {"ewa_alpha": est.ewa_alpha, "temperature": est.temperature})
        _write_trace(tmp / "trace.csv", est.trace_)
        _dump_config(cfg, tmp / "config.yaml")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, args.out)
    print(f"fitted {len(est.trace_)} steps; checkpoint in {Path(args.out) / 'checkpoint.npz'}")


def _eval_model(ckpt: str):
    model, meta = io.load_checkpoint(ckpt, "param")
    if meta["extra"].get("ewa_alpha", 0.0) > 0:
        model, meta = io.load_checkpoint(ckpt, "ewa")
    return model, meta


def cmd_sample(args) -> None:
    cfg = _config(args)
    model, meta = _eval_model(args.checkpoint)
    sm = cfg.get("sample") or {}
    n = args.n or int(sm.get("n_chains", 4))
    sweeps = args.sweeps if args.sweeps is not None else float(sm.get("sweeps", 1.0))
    kernel = sm.get("kernel", "approx_pcpm")
    seed = int(cfg.get("seed", 0))
    if sm.get("init", "data") == "data":
        if not args.data:
            raise CLIError("sample.init is 'data': pass --data DIR with initial states")
        pool, _ = io.read_dataset(args.data)
        pick = make_rng(np.random.SeedSequence(seed).spawn(3)[2]).integers(len(pool), size=n)
        inits = [pool[i] for i in pick]
    else:
        spec = scenario_spec(cfg)
        inits = [dg.init_scatter(spec, make_rng(ss)) for ss in np.random.SeedSequence(seed).spawn(n)]
    temp = float(sm.get("temperature", meta["extra"].get("temperature", 1.0)))
    scfg = SamplerConfig(temperature=temp, parallel_flips=int(sm.get("parallel_flips", (cfg.get("train") or {}).get("parallel_flips", 50))),
                         neighborhood=model.nb)
    every = args.snapshot_every or sm.get("snapshot_every")
    tmp = _fresh_dir(args.out)
    try:
        finals = []
        for b, (x0, ss) in enumerate(zip(inits, np.random.SeedSequence(seed + 1).spawn(n))):
            traj = run_chain(kernel, x0, sweeps, model, scfg, make_rng(ss), every)
            finals.append(traj[-1])
            if every:
                io.write_dataset(tmp / f"traj_{b:03d}", traj, {"chain": b, "kernel": kernel, "sweeps": sweeps})
        io.write_dataset(tmp, finals, {"scenario": cfg["scenario"], "seed": seed, "kernel": kernel,
                                       "sweeps": sweeps, "checkpoint": str(args.checkpoint)})
        _dump_config(cfg, tmp / "config.yaml")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, args.out)
    print(f"sampled {n} chains x {sweeps} sweeps into {args.out}")


def _param_rmse_rows(cfg, ckpt):
    model, _ = _eval_model(ckpt)
    analytic = getattr(model, "analytic", model)
    if not hasattr(analytic, "pairs"):
        raise CLIError("param-rmse needs a checkpoint with an analytic term")
    spec = scenario_spec(cfg)
    truth = spec.truth_vector()
    learned = np.concatenate([analytic.params["J"], [analytic.lambda_v]])
    if getattr(model, "analytic", None) is not None:
        learned = learned * model.w_s
    t_star, rmse_star = mt.fit_optimal_temperature(learned, truth)
    names = [f"J_{a}{b}" for a, b in analytic.pairs] + ["lambda_v"]
    rows = [{"name": k, "learned": f"{v:.8g}", "truth": f"{t:.8g}", "scaled": f"{t_star * v:.8g}"}
            for k, v, t in zip(names, learned, truth)]
    rows.append({"name": "rmse_T1", "learned": f"{mt.param_rmse(learned, truth, 'T1'):.8g}"})
    rows.append({"name": "rmse_TStar", "learned": f"{rmse_star:.8g}"})
    rows.append({"name": "T_star", "learned": f"{t_star:.8g}"})
    return rows, ["name", "learned", "truth", "scaled"]


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    mode = args.mode or (cfg.get("evaluate") or {}).get("mode", "bio")
    ev = cfg.get("evaluate") or {}
    out = Path(args.out)
    if mode == "param-rmse":
        if not args.checkpoint:
            raise CLIError("param-rmse needs --checkpoint")
        rows, cols = _param_rmse_rows(cfg, args.checkpoint)
        header = "parameter recovery; RMSE over upper-triangle J (medium-medium excluded) and lambda_v; " \
                 "scaled = T_star * learned"
    else:
        if not args.samples or not args.data:
            raise CLIError(f"{mode} needs --samples DIR and --data DIR (reference dataset)")
        sims, _ = io.read_dataset(args.samples)
        refs, manifest = io.read_dataset(args.data)
        bounds = mt.VolumeBounds.from_states(refs)
        nb = cfg["scenario"].get("neighborhood", "moore")
        if mode == "bio":
            rows = mt.state_report(sims, bounds, nb)
            cols, header = mt.STATE_COLUMNS, "per-state indicators; summary row holds p_volume and p_unfragmented"
        elif mode == "axial":
            pt = int(ev.get("polar_type", 2))
            rows = mt.state_report(sims, bounds, nb, polar_type=pt)
            try:
                rmse = mt.axial_alignment_rmse(sims, refs, pt)
                rows.append({"index": "axial_rmse", "status": f"{rmse:.8g}"})
            except mt.DegenerateError:
                rows.append({"index": "axial_rmse", "status": "degenerate"})
            cols = mt.STATE_COLUMNS
            header = ("axial alignment; frac_axis_t = var_axis/(var_axis+var_orth) for type t about the principal "
                      "axis of the polar type; axial_rmse = RMSE of dataset means of (var_axis, var_orth) for "
                      "types 1 and 2 between samples and reference")
        else:
            clf = mt.NearestCentroidClassifier(cell_type=2).fit_images(_digits(cfg))
            probs = clf.predict_proba(sims)
            cs = mt.classifier_score(probs)
            rows = [{"index": i, "predicted": int(np.argmax(p)), "max_prob": f"{p.max():.6f}"}
                    for i, p in enumerate(probs)]
            rows.append({"index": "summary", "predicted": "", "max_prob": f"classifier_score={cs:.8g}"})
            cols = ["index", "predicted", "max_prob"]
            header = "classifier score with the reference nearest-centroid classifier (not a trained digit model)"
    out.parent.mkdir(parents=True, exist_ok=True)
    mt.write_csv(out, rows, cols, header)
    print(f"wrote {mode} report to {out}")


def cmd_render(args) -> None:
    src = Path(args.input)
    if src.is_dir():
        states, _ = io.read_dataset(src)
        names = [f"{i:06d}.ppm" for i in range(len(states))]
    else:
        states, names = [io.read_snapshot(src)], [src.stem + ".ppm"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, name in zip(states, names):
        (out / name).write_bytes(io.render(s, scale=args.scale, boundaries=not args.no_boundaries))
    print(f"rendered {len(states)} images into {out}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pottsfit", description="Fit and simulate cellular Potts Hamiltonians.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic snapshot dataset")
    _common(g, "dataset directory to create")
    g.add_argument("--n", type=int, help="number of snapshots")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a Hamiltonian to a dataset by contrastive divergence")
    _common(f, "run directory (checkpoint.npz, trace.csv, config.yaml)")
    f.add_argument("--data", required=True, help="dataset directory")
    f.add_argument("--steps", type=int, help="override train.steps")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("sample", help="simulate trajectories from a checkpoint")
    _common(s, "directory for final states (and traj_* subdirectories)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="dataset to draw initial states from")
    s.add_argument("--n", type=int, help="number of chains")
    s.add_argument("--sweeps", type=float, help="Monte Carlo sweeps per chain")
    s.add_argument("--snapshot-every", type=int, help="kernel steps between stored snapshots")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="write a metrics CSV")
    _common(e, "CSV report path")
    e.add_argument("--mode", choices=io.EVAL_MODES)
    e.add_argument("--checkpoint", help="checkpoint (param-rmse)")
    e.add_argument("--samples", help="sampled dataset directory")
    e.add_argument("--data", help="reference dataset directory")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="render snapshots as P6 pixmaps")
    r.add_argument("--input", required=True, help="snapshot file or dataset directory")
    r.add_argument("--out", required=True, help="image directory")
    r.add_argument("--scale", type=int, default=4, help="pixels per lattice site")
    r.add_argument("--no-boundaries", action="store_true", help="skip cell-boundary darkening")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except io.ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CLIError, FileNotFoundError, ValueError, io.SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
