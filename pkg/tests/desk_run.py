"""The reduced-scale d = 2 end-to-end run shared by several acceptance checks.

Runs are cached under ``acceptance_runs/<name>`` together with a digest of
the package sources and the configuration, so a finished run is reused only
if neither has changed.  Run this file directly to produce them ahead of
the test session::

    python tests/desk_run.py run_a run_b
"""
from __future__ import annotations

import hashlib
import logging
import re
import sys
import time
from pathlib import Path

import beflow
from beflow.loss import ProblemSpec
from beflow.trainer import TrainerConfig, solve

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / "acceptance_runs"
DIGEST = "source_digest.txt"


def desk_config() -> TrainerConfig:
    spec = ProblemSpec(d=2, a=(2, 2), lam=100.0, dt=1e-4, n_steps=10)
    return TrainerConfig(spec, n_interior=10_000, n_boundary=400, epochs_init=2000, K_max=50,
                         seed=0, deterministic=True)


def digest(config: TrainerConfig) -> str:
    h = hashlib.sha256()
    pkg = Path(beflow.__file__).parent
    # the command-line front end does not take part in a solve
    for path in sorted(p for p in pkg.glob("*.py") if p.name not in ("cli.py", "__init__.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    # function reprs carry a per-process address
    h.update(re.sub(r" at 0x[0-9a-f]+", "", repr(config)).encode())
    return h.hexdigest()


def run_dir(name: str, fresh: bool = False) -> Path:
    """Directory holding a completed desk run, running it first if needed."""
    config = desk_config()
    out = RUNS / name
    key = digest(config)
    marker = out / DIGEST
    if not fresh and marker.exists() and marker.read_text().strip() == key:
        return out
    if marker.exists():
        marker.unlink()
    t0 = time.perf_counter()
    solve(config, out)
    (out / "wall_time_s.txt").write_text(f"{time.perf_counter() - t0:.1f}\n")
    marker.write_text(key + "\n")
    return out


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    names = [a for a in sys.argv[1:] if not a.startswith("--")] or ["run_a"]
    for name in names:
        print(run_dir(name, fresh="--fresh" in sys.argv), flush=True)
