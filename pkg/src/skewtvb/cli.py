"""Command-line entry point: ``skewtvb <experiment> [options]``.

Each run writes one results file (CSV or JSON) and a manifest next to it
(``<out>.manifest.json``) holding the fully resolved configuration, its
digest, the seed, the tool version and timings.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import rng as rngmod
from .distributions import SkewTParams, sample_skew_t
from .experiments import (
    ALGORITHMS,
    EXPERIMENTS,
    ExperimentConfig,
    NoiseHistogram,
    ReplicationError,
    positioning_1d_model,
    run_1d_positioning,
    run_convergence_study,
    run_empirical_noise,
    run_pseudorange,
)
from .statespace import PseudorangeScenario, build_pseudorange_model, simulate, simulate_pseudorange, synthetic_constellation

log = logging.getLogger("skewtvb")

COLUMNS = {
    "simulate": None,  # depends on the model dimensions
    "positioning-1d": ["algorithm", "rmse", "mean", "std", "skewness"],
    "pseudorange": ["algorithm", "replication", "rmse"],
    "convergence": ["algorithm", "delta", "setting", "mean_rmse", "median_rmse", "wall_time_s"],
    "empirical-noise": ["replication", "rmse_stvbf", "rmse_tvbf", "difference_percent"],
}


class ConfigError(ValueError):
    pass


_INT_KEYS = {"seed", "K", "n_mc", "stvbf_iters", "tvbf_iters", "stvbs_iters", "tvbs_iters", "particles"}
_FLOAT_KEYS = {"q", "delta", "nu", "sigma2", "vb_tol", "gate_p", "pos_prior_std", "bias_prior_std"}
_STR_KEYS = {"experiment", "histogram", "scenario"}
_INT_LIST_KEYS = {"iters", "particle_grid"}
_FLOAT_LIST_KEYS = {"deltas"}
_STR_LIST_KEYS = {"algorithms"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_types(raw: dict):
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(known))}")
        if value is None:
            continue
        ok = (
            (key in _INT_KEYS and _is_int(value))
            or (key in _FLOAT_KEYS and _is_num(value))
            or (key in _STR_KEYS and isinstance(value, str))
            or (key in _INT_LIST_KEYS and isinstance(value, list) and all(_is_int(v) for v in value))
            or (key in _FLOAT_LIST_KEYS and isinstance(value, list) and all(_is_num(v) for v in value))
            or (key in _STR_LIST_KEYS and isinstance(value, list) and all(isinstance(v, str) for v in value))
        )
        if not ok:
            raise ConfigError(f"{key}: wrong type {type(value).__name__}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a JSON-like mapping and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_types(raw)
    if "experiment" not in raw:
        raise ConfigError("experiment: required key missing")
    try:
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    tool_version: str
    config: dict
    outputs: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    wall_time_s: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- writers -----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_table(path, columns, rows, fmt="csv", summary=None):
    """Write ``rows`` (sequences ordered like ``columns``) as CSV or JSON."""
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    elif fmt == "json":
        doc = {
            "columns": list(columns),
            "rows": [[_jsonable(v) for v in row] for row in rows],
        }
        if summary is not None:
            doc["summary"] = summary
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


# -- subcommands -------------------------------------------------------------


def _run_simulate(cfg):
    g = rngmod.stream(cfg.seed, 0, rngmod.SIMULATION)
    if cfg.scenario == "positioning-1d":
        model = positioning_1d_model(cfg)
        traj = simulate(model, cfg.K, g)
    else:
        sc = PseudorangeScenario(
            satellites=synthetic_constellation(g.uniform(0.0, 360.0)),
            q=cfg.q, noise=cfg.noise, K=cfg.K,
            bias_prior_std=cfg.bias_prior_std, pos_prior_std=cfg.pos_prior_std,
        )
        model = build_pseudorange_model(sc)
        traj = simulate_pseudorange(sc, model, g)
    cols = ["k"] + [f"x{i + 1}" for i in range(model.n_x)] + [f"y{i + 1}" for i in range(model.n_y)]
    rows = [[k + 1, *traj.states[k], *traj.measurements[k]] for k in range(traj.K)]
    return cols, rows, {"n_x": model.n_x, "n_y": model.n_y}


def _run_1d(cfg, threads):
    stats = run_1d_positioning(cfg, threads)
    rows = [[a, s.rmse, s.mean, s.std, s.skewness] for a, s in stats.items()]
    return COLUMNS["positioning-1d"], rows, {a: dataclasses.asdict(s) for a, s in stats.items()}


def _run_pseudorange(cfg, threads):
    res = run_pseudorange(cfg, threads)
    rows = [[a, r, v] for a in cfg.algorithms for r, v in enumerate(res.rmse[a])]
    summary = {
        "mean_rmse": {a: float(v.mean()) for a, v in res.rmse.items()},
        "difference_percent_quantiles": {a: dataclasses.asdict(q) for a, q in res.summaries.items()},
    }
    return COLUMNS["pseudorange"], rows, summary


def _run_convergence(cfg, threads):
    table = run_convergence_study(cfg, threads=threads)
    cols = COLUMNS["convergence"]
    return cols, [[row[c] for c in cols] for row in table], {}


def _default_histogram(cfg):
    g = rngmod.stream(cfg.seed, 2**32, 0)
    draws = sample_skew_t(SkewTParams(0.0, 1.0, 5.0, 4.0), 100_000, g)
    return NoiseHistogram.from_samples(draws, bins=100)


def _run_empirical(cfg, threads):
    hist = NoiseHistogram.read_csv(cfg.histogram) if cfg.histogram else _default_histogram(cfg)
    res = run_empirical_noise(cfg, hist, threads)
    rows = [
        [r, a, b, d]
        for r, (a, b, d) in enumerate(zip(res.rmse_stvbf, res.rmse_tvbf, res.difference))
    ]
    summary = {
        "win_rate": res.win_rate,
        "difference_histogram": {
            "edges": [float(e) for e in res.hist_edges],
            "counts": [int(c) for c in res.hist_counts],
        },
    }
    return COLUMNS["empirical-noise"], rows, summary


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid list {text!r}") from exc

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skewtvb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="PATH")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
        p.add_argument("--q", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--n-mc", type=int, dest="n_mc")
        p.add_argument("--K", type=int, dest="K")
        p.add_argument("--iters", type=_csv_list(int))
        p.add_argument("--particles", type=_csv_list(int))
        p.add_argument("--algorithms", type=_csv_list(str), help=f"subset of {','.join(ALGORITHMS)}")
        p.add_argument("--histogram", metavar="PATH")
        p.add_argument("--full", action="store_true", help="1000 replications")
        if name == "simulate":
            p.add_argument("--scenario", choices=("positioning-1d", "pseudorange"))
    return parser


def resolve_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"{args.config}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if raw.get("experiment", args.command) != args.command:
            raise ConfigError(f"experiment: config says {raw['experiment']!r} but command is {args.command!r}")
    raw["experiment"] = args.command
    for key in ("seed", "q", "delta", "n_mc", "K", "histogram", "algorithms"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "scenario", None):
        raw["scenario"] = args.scenario
    if args.iters is not None:
        raw["iters"] = args.iters
    if args.particles is not None:
        if args.command == "convergence":
            raw["particle_grid"] = args.particles
        elif len(args.particles) == 1:
            raw["particles"] = args.particles[0]
        else:
            raise ConfigError("particles: give a single count outside the convergence study")
    if args.full:
        raw["n_mc"] = 1000
    return config_from_dict(raw)


RUNNERS = {
    "positioning-1d": _run_1d,
    "pseudorange": _run_pseudorange,
    "convergence": _run_convergence,
    "empirical-noise": _run_empirical,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"skewtvb: config error: {exc}", file=sys.stderr)
        return 2
    threads = args.threads or os.cpu_count() or 1
    out = args.out or f"{args.command}.{args.format}"
    t0 = time.perf_counter()
    try:
        if args.command == "simulate":
            cols, rows, summary = _run_simulate(cfg)
        else:
            cols, rows, summary = RUNNERS[args.command](cfg, threads)
    except ReplicationError as exc:
        print(f"skewtvb: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"skewtvb: {exc}", file=sys.stderr)
        return 1
    elapsed = time.perf_counter() - t0
    inputs = {cfg.histogram: file_digest(cfg.histogram)} if cfg.histogram else {}
    manifest = RunManifest(
        config_digest=config_digest(cfg),
        seed=cfg.seed,
        tool_version=__version__,
        config=cfg.to_dict(),
        outputs=[out],
        inputs=inputs,
        wall_time_s={args.command: elapsed},
        summary=summary,
    )
    try:
        write_table(out, cols, rows, args.format, summary if args.format == "json" else None)
        manifest.write(out + ".manifest.json")
    except OSError as exc:
        print(f"skewtvb: cannot write {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    log.info("%s: wrote %s (%d rows) in %.1f s", args.command, out, len(rows), elapsed)
    return 0


if __name__ == "__main__":
    sys.exit(main())
