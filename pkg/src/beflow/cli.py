"""Command line front end.

Subcommands::

    beflow solve [CONFIG] [--preset NAME] [--set KEY=VALUE ...] [--out DIR]
    beflow metrics CHECKPOINT T_N [--config FILE]
    beflow sweep CHECKPOINT --net {u,v} --coord L,i,j --range LO:HI --grid N

Configurations are flat ``key = value`` files; ``#`` starts a comment.  A
``preset`` key (or ``--preset``) pulls in one of the named experiment
setups first, then the file and ``--set`` values override it.  The fully
resolved configuration is echoed to ``<out>/config.resolved`` and parses back
to the same :class:`RunConfig`.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import loss as L
from .errors import BeflowError, ConfigError, SolverAbort, UsageError
from .metrics_oracle import compute_metrics
from .network import NetworkParams, forward_trace, load_params
from .sampling import RNG_ALGORITHM
from .trainer import (DEFAULT_CHUNK, ENGINES, METRIC_CLOUDS, TERMINATIONS, TrainerConfig, build_samples,
                      default_epochs_init, default_sample_counts, solve)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

# frequency vectors of the reported test problems
KNOWN_FREQUENCIES = {2: (2, 2), 3: (2, 2, 3), 5: (2, 2, 1, 2, 3), 7: (2, 2, 1, 3, 2, 2, 3)}

_FIVE_D = {"d": "5", "n_interior": "100000", "n_boundary": "1000", "epochs_init": "50000", "m_u": "60"}
PRESETS = {
    "landscape_5d": {**_FIVE_D, "n_steps": "1",
                     "sweeps": "u W3,7,45 -1:1 101; u b4,1 -1:1 101; v W3,1,1 -1:1 101; v b4,1 -1:1 101"},
    "table1_5d": {**_FIVE_D, "n_steps": "10"},
    "dims_2d": {"d": "2", "n_interior": "10000", "n_boundary": "400", "epochs_init": "5000", "m_u": "60"},
    "dims_3d": {"d": "3", "n_interior": "100000", "n_boundary": "600", "epochs_init": "5000", "m_u": "60"},
    "dims_5d": {**_FIVE_D, "n_steps": "10"},
    "width_7d_60": {"d": "7", "n_interior": "100000", "n_boundary": "1400", "epochs_init": "50000",
                    "m_u": "60"},
    "width_7d_100": {"d": "7", "n_interior": "100000", "n_boundary": "1400", "epochs_init": "50000",
                     "m_u": "100"},
}

SUMMARY_COLUMNS = ("experiment", "d", "m_u", "t_N", "phi_n_final", "mse", "eps_abs_linf", "eps_rel_l2",
                   "wall_time_s")
SWEEP_COLUMNS = ("value", "loss")


# -- sweep requests ---------------------------------------------------------------

@dataclass(frozen=True)
class Coord:
    """One network entry: ``W<layer>[row, col]`` or ``b<layer>[row]``, 1-based."""

    kind: str
    layer: int
    row: int
    col: int | None = None

    def text(self) -> str:
        idx = [self.layer, self.row] + ([self.col] if self.col is not None else [])
        return self.kind + ",".join(map(str, idx))

    def slug(self) -> str:
        return self.text().replace(",", "_")

    def check(self, d: int, m: int) -> None:
        _probe(d, m).coordinate_index(self.kind, self.layer, self.row, self.col)


def parse_coord(text: str) -> Coord:
    """``"3,7,45"`` or ``"W3,7,45"`` for a weight, ``"4,2"`` or ``"b4,2"`` for a bias."""
    s = text.strip().replace(" ", "")
    kind = None
    if s[:1] in ("W", "w", "b", "B"):
        kind, s = s[0].upper() if s[0] in "Ww" else "b", s[1:]
    try:
        parts = [int(p) for p in s.split(",")]
    except ValueError:
        raise UsageError(f"bad coordinate {text!r}: expected L,i,j or L,i") from None
    if len(parts) == 3 and kind in (None, "W"):
        return Coord("W", *parts)
    if len(parts) == 2 and kind in (None, "b"):
        return Coord("b", parts[0], parts[1])
    raise UsageError(f"bad coordinate {text!r}: weights need L,i,j and biases L,i")


def _probe(d: int, m: int) -> NetworkParams:
    shapes = [(m, d), (m,), (m, m), (m,), (m, m), (m,), (m, m), (m,), (1, m), ()]
    return NetworkParams.from_arrays([np.zeros(s) for s in shapes])


def parse_range(text: str) -> tuple[float, float]:
    lo, sep, hi = text.partition(":")
    try:
        if not sep:
            raise ValueError
        lo, hi = float(lo), float(hi)
    except ValueError:
        raise UsageError(f"bad range {text!r}: expected LO:HI") from None
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise UsageError(f"bad range {text!r}: need finite LO < HI")
    return lo, hi


@dataclass(frozen=True)
class SweepRequest:
    net: str
    coord: Coord
    lo: float
    hi: float
    grid: int

    def text(self) -> str:
        return f"{self.net} {self.coord.text()} {self.lo!r}:{self.hi!r} {self.grid}"


def parse_sweeps(text: str) -> tuple:
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        parts = item.split()
        if len(parts) != 4 or parts[0] not in ("u", "v"):
            raise UsageError(f"bad sweep {item!r}: expected 'u|v COORD LO:HI GRID'")
        lo, hi = parse_range(parts[2])
        grid = int(parts[3])
        if grid < 2:
            raise UsageError(f"bad sweep {item!r}: grid must be >= 2")
        out.append(SweepRequest(parts[0], parse_coord(parts[1]), lo, hi, grid))
    return tuple(out)


# -- configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    trainer: TrainerConfig
    out_dir: str = "runs/default"
    experiment: str = "custom"
    sweeps: tuple = field(default_factory=tuple)
    sweep_step: int = 1


def _int(s):
    return int(s)


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _ints(s):
    vals = tuple(int(v) for v in s.strip().strip("()[]").replace(" ", "").split(",") if v)
    if not vals:
        raise ValueError("empty list")
    return vals


def _choice(options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


# key -> (parser, check or None, description of the check)
KEYS = {
    "experiment": (str.strip, None, ""),
    "out": (str.strip, None, ""),
    "d": (_int, _pos, "> 0"),
    "a": (_ints, lambda v: all(x >= 1 for x in v), "positive integers"),
    "kappa": (_float, _pos, "> 0"),
    "lam": (_float, _pos, "> 0"),
    "dt": (_float, _pos, "> 0"),
    "n_steps": (_int, _nonneg, ">= 0"),
    "T": (_float, _nonneg, ">= 0"),
    "m_u": (_int, _pos, "> 0"),
    "m_v": (_int, _pos, "> 0"),
    "mu_u": (_float, _nonneg, ">= 0"),
    "mu_v": (_float, _nonneg, ">= 0"),
    "n_interior": (_int, _pos, "> 0"),
    "n_boundary": (_int, _pos, "> 0"),
    "epochs_init": (_int, _nonneg, ">= 0"),
    "epochs_dual": (_int, _nonneg, ">= 0"),
    "epochs_primal": (_int, _nonneg, ">= 0"),
    "K_max": (_int, _nonneg, ">= 0"),
    "seed": (_int, _nonneg, ">= 0"),
    "rng": (_choice((RNG_ALGORITHM,)), None, ""),
    "dual_term_mode": (_choice(L.DUAL_MODES), None, ""),
    "deterministic": (_bool, None, ""),
    "resample_per_epoch": (_bool, None, ""),
    "persist_adam_state": (_bool, None, ""),
    "termination": (_choice(TERMINATIONS), None, ""),
    "plateau_window": (_int, _pos, "> 0"),
    "plateau_tol": (_float, _nonneg, ">= 0"),
    "engine": (_choice(ENGINES), None, ""),
    "chunk": (_int, _pos, "> 0"),
    "metric_cadence": (_int, _nonneg, ">= 0"),
    "metrics_cloud": (_choice(METRIC_CLOUDS), None, ""),
    "sweeps": (parse_sweeps, None, ""),
    "sweep_step": (_int, _pos, "> 0"),
}


def read_pairs(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> value`` strings from flat ``key = value`` text."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        pairs[key] = value.strip()
    return pairs


def _convert(key: str, raw: str):
    if key not in KEYS:
        raise ConfigError(key, "unknown key")
    parse, check, what = KEYS[key]
    try:
        value = parse(raw)
    except (ValueError, UsageError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r} ({exc})") from None
    if check is not None and not check(value):
        raise ConfigError(key, f"value {raw!r} out of range (must be {what})")
    return value


def resolve(pairs: dict) -> RunConfig:
    """Build a :class:`RunConfig` from raw strings, applying defaults by dimension."""
    pairs = dict(pairs)
    preset = pairs.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r} (known: {', '.join(PRESETS)})")
        pairs = {**PRESETS[preset], "experiment": preset, **pairs}
    v = {key: _convert(key, raw) for key, raw in pairs.items()}

    d = v.get("d", 2)
    if "a" in v:
        a = v["a"]
    elif d in KNOWN_FREQUENCIES:
        a = KNOWN_FREQUENCIES[d]
    else:
        raise ConfigError("a", f"no default frequency vector for d={d}; set a explicitly")
    if len(a) != d:
        raise ConfigError("a", f"has {len(a)} entries but d={d}")
    try:
        spec = L.ProblemSpec(d, a, lam=v.get("lam", 100.0), dt=v.get("dt", 1e-4), n_steps=v.get("n_steps", 10),
                             kappa=v.get("kappa"), T=v.get("T"))
    except UsageError as exc:
        raise ConfigError("T" if "T" in v and "match" in str(exc) else "spec", str(exc)) from None
    ni, nb = default_sample_counts(d)
    trainer = TrainerConfig(
        spec,
        m_u=v.get("m_u", 60), m_v=v.get("m_v", 30),
        mu_u=v.get("mu_u", 0.03), mu_v=v.get("mu_v", 0.03),
        n_interior=v.get("n_interior", ni), n_boundary=v.get("n_boundary", nb),
        epochs_init=v.get("epochs_init", default_epochs_init(d)),
        epochs_dual=v.get("epochs_dual", 500), epochs_primal=v.get("epochs_primal", 50),
        K_max=v.get("K_max", 200), seed=v.get("seed", 0),
        dual_term_mode=v.get("dual_term_mode", "frozen_v"),
        deterministic=v.get("deterministic", True),
        resample_per_epoch=v.get("resample_per_epoch", False),
        persist_adam_state=v.get("persist_adam_state", False),
        termination=v.get("termination", "iterations"),
        plateau_window=v.get("plateau_window", 10), plateau_tol=v.get("plateau_tol", 1e-3),
        engine=v.get("engine", "batched"), chunk=v.get("chunk", DEFAULT_CHUNK),
        metric_cadence=v.get("metric_cadence", 0), metrics_cloud=v.get("metrics_cloud", "training"),
    )
    sweeps = v.get("sweeps", ())
    for req in sweeps:
        m = trainer.m_u if req.net == "u" else trainer.m_v
        try:
            req.coord.check(d, m)
        except UsageError as exc:
            raise ConfigError("sweeps", str(exc)) from None
    sweep_step = v.get("sweep_step", 1)
    if sweeps and sweep_step > spec.n_steps:
        raise ConfigError("sweep_step", f"{sweep_step} exceeds n_steps={spec.n_steps}")
    name = v.get("experiment", "custom")
    return RunConfig(trainer, out_dir=v.get("out", f"runs/{name}"), experiment=name,
                     sweeps=tuple(sweeps), sweep_step=sweep_step)


def parse_config(path=None, overrides=(), preset=None) -> RunConfig:
    """Parse a config file (optional) plus ``KEY=VALUE`` overrides."""
    pairs = {}
    if preset is not None:
        pairs["preset"] = preset
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        pairs.update(read_pairs(p.read_text(), str(p)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item.strip() or "set", "override must look like KEY=VALUE")
        pairs[key.strip()] = value.strip()
    return resolve(pairs)


def format_config(rc: RunConfig) -> str:
    """Every resolved value, one ``key = value`` line each."""
    t, s = rc.trainer, rc.trainer.spec
    rows = [
        ("experiment", rc.experiment), ("out", rc.out_dir),
        ("d", s.d), ("a", ",".join(map(str, s.a))), ("kappa", repr(s.kappa)), ("lam", repr(s.lam)),
        ("dt", repr(s.dt)), ("n_steps", s.n_steps), ("T", repr(s.T)),
        ("m_u", t.m_u), ("m_v", t.m_v), ("mu_u", repr(t.mu_u)), ("mu_v", repr(t.mu_v)),
        ("n_interior", t.n_interior), ("n_boundary", t.n_boundary),
        ("epochs_init", t.epochs_init), ("epochs_dual", t.epochs_dual), ("epochs_primal", t.epochs_primal),
        ("K_max", t.K_max), ("seed", t.seed), ("rng", RNG_ALGORITHM),
        ("dual_term_mode", t.dual_term_mode), ("deterministic", str(t.deterministic).lower()),
        ("resample_per_epoch", str(t.resample_per_epoch).lower()),
        ("persist_adam_state", str(t.persist_adam_state).lower()),
        ("termination", t.termination), ("plateau_window", t.plateau_window),
        ("plateau_tol", repr(t.plateau_tol)), ("engine", t.engine), ("chunk", t.chunk),
        ("metric_cadence", t.metric_cadence), ("metrics_cloud", t.metrics_cloud),
        ("sweeps", "; ".join(r.text() for r in rc.sweeps)), ("sweep_step", rc.sweep_step),
    ]
    return "".join(f"{k} = {v}\n" for k, v in rows)


def write_resolved(rc: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(format_config(rc))
    return path


# -- subcommands ------------------------------------------------------------------

def run_solve(rc: RunConfig) -> int:
    """Train, write logs, checkpoints, summary and any requested sweeps."""
    out = Path(rc.out_dir)
    write_resolved(rc, out)
    t0 = time.perf_counter()
    try:
        _, tlog = solve(rc.trainer, out)
    except SolverAbort as exc:
        log.error("solver aborted: %s", exc)
        print(f"beflow: solver aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    wall = time.perf_counter() - t0
    last = tlog.step_metrics[-1]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        m = last.metrics
        w.writerow([rc.experiment, rc.trainer.spec.d, rc.trainer.m_u, repr(last.t_n), _fmt(last.phi_n_final),
                    _fmt(m.mse), _fmt(m.eps_abs_linf), _fmt(m.eps_rel_l2), f"{wall:.3f}"])
    for req in rc.sweeps:
        ckpt = out / f"{req.net}_step_{rc.sweep_step}.params"
        path = out / f"sweep_{req.net}_{req.coord.slug()}.csv"
        write_sweep(path, landscape_sweep(ckpt, req.net, req.coord, (req.lo, req.hi), req.grid))
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


def _run_context(checkpoint) -> tuple[Path, int, RunConfig]:
    """Run directory, time step and configuration behind a checkpoint file."""
    p = Path(checkpoint)
    if p.is_dir():
        raise UsageError(f"{p} is a directory; pass a u_step_<n>.params or v_step_<n>.params file")
    match = re.fullmatch(r"[uv]_step_(\d+)(?:_km1)?\.params", p.name)
    if not match:
        raise UsageError(f"{p.name}: expected a file named u_step_<n>.params or v_step_<n>.params")
    resolved = p.parent / "config.resolved"
    if not resolved.is_file():
        raise UsageError(f"{resolved} not found; it is needed to rebuild the sample cloud")
    return p.parent, int(match.group(1)), parse_config(resolved)


def landscape_sweep(checkpoint, net: str, coord: Coord, value_range, grid: int) -> list:
    """``(value, loss)`` rows with one network entry varied over a uniform grid.

    For the primal network the loss is the per-step functional with the
    dual term frozen at the stored ``p_h``; for the dual network it is the
    negated dual ratio at the argument built from the stored ``u^{n,K-1}``
    and ``u^{n-1}``.  Every other weight stays at its checkpointed value and
    the sample cloud is rebuilt from the run's resolved configuration.
    """
    if net not in ("u", "v"):
        raise UsageError(f"net must be 'u' or 'v', got {net!r}")
    if grid < 2:
        raise UsageError("grid must be >= 2")
    lo, hi = value_range
    run, n, rc = _run_context(checkpoint)
    if n < 1:
        raise UsageError("sweeps need a time step n >= 1")
    spec = rc.trainer.spec
    params = load_params(run / f"{net}_step_{n}.params")
    idx = params.coordinate_index(coord.kind, coord.layer, coord.row, coord.col)
    samples = build_samples(rc.trainer)
    u_prev = build_values(run / f"u_step_{n - 1}.params", samples)
    t_n = spec.t(n)
    if net == "u":
        p_h = json.loads((run / f"context_step_{n}.json").read_text())["p_h"]

        def objective(p):
            return L.be_loss_and_grad(p, u_prev, p_h, samples, spec, t_n, need_grad=False)[0].total
    else:
        w_prev = build_values(run / f"u_step_{n}_km1.params", samples)
        q = L.dual_argument_values(w_prev, u_prev, samples, spec, t_n)

        def objective(p):
            return -L.dual_ratio_value(q, p, samples, spec)

    base = params.to_vector()
    rows = []
    for value in np.linspace(lo, hi, grid):
        vec = base.copy()
        vec[idx] = value
        rows.append((float(value), float(objective(params.from_vector(vec)))))
    return rows


def build_values(path: Path, samples) -> np.ndarray:
    return forward_trace(load_params(path), samples.interior).u


def write_sweep(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for value, loss in rows:
            w.writerow([repr(value), repr(loss)])


def run_metrics(checkpoint, t_n: float, config=None, stream=sys.stdout) -> int:
    p = Path(checkpoint)
    rc = parse_config(config) if config is not None else _run_context(p)[2]
    params = load_params(p)
    m = compute_metrics(params, t_n, build_samples(rc.trainer), rc.trainer.spec.a)
    w = csv.writer(stream)
    w.writerow(("t_n", "mse", "eps_abs_linf", "eps_rel_l2"))
    w.writerow([repr(float(t_n)), _fmt(m.mse), _fmt(m.eps_abs_linf), _fmt(m.eps_rel_l2)])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="beflow", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="train over all time steps")
    s.add_argument("config", nargs="?", help="flat key = value configuration file")
    s.add_argument("--preset", choices=sorted(PRESETS), help="start from a named experiment setup")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    s.add_argument("--out", help="output directory (same as the 'out' key)")
    s.add_argument("--dry-run", action="store_true", help="only write config.resolved")

    m = sub.add_parser("metrics", help="error metrics of a primal checkpoint against the exact solution")
    m.add_argument("checkpoint")
    m.add_argument("t_n", type=float)
    m.add_argument("--config", help="configuration to rebuild the sample cloud (default: the run's)")

    w = sub.add_parser("sweep", help="one-dimensional loss landscape over a single weight")
    w.add_argument("checkpoint", help="u_step_<n>.params or v_step_<n>.params inside a run directory")
    w.add_argument("--net", choices=("u", "v"), required=True)
    w.add_argument("--coord", required=True, help="L,i,j for W^L[i,j]; L,i or bL,i for b^L[i] (1-based)")
    w.add_argument("--range", default="-1:1", help="LO:HI (default -1:1)")
    w.add_argument("--grid", type=int, default=101)
    w.add_argument("--out", help="CSV path (default: sweep_<net>_<coord>.csv next to the checkpoint)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "solve":
            overrides = list(args.overrides) + ([f"out={args.out}"] if args.out else [])
            rc = parse_config(args.config, overrides, args.preset)
            if args.dry_run:
                print(write_resolved(rc, Path(rc.out_dir)))
                return EXIT_OK
            return run_solve(rc)
        if args.command == "metrics":
            return run_metrics(args.checkpoint, args.t_n, args.config)
        coord = parse_coord(args.coord)
        rows = landscape_sweep(args.checkpoint, args.net, coord, parse_range(args.range), args.grid)
        out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"sweep_{args.net}_{coord.slug()}.csv"
        write_sweep(out, rows)
        print(out)
        return EXIT_OK
    except BeflowError as exc:
        print(f"beflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"beflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
