"""The fixed experiment matrix behind the acceptance suite.

Training runs take minutes each, so results are cached as JSON (plus a
parameters-only policy file) under ``results_dir()``. Running this module
fills the cache; the acceptance tests read it and only train what is missing.

    python -m relmm.experiments [--dir DIR] [--only VARIANT ...]
"""
from __future__ import annotations

import argparse
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import evaluation as E

SEEDS = tuple(range(5))
BUDGET = 30_000
EVAL_EVERY = 2500
N_EVAL = 3

MATRIX = (
    E.AblationVariant.STATCURR,
    E.AblationVariant.SINGLE_POLICY,
    E.AblationVariant.NO_UNCERTAINTY,
    E.AblationVariant.RELABEL_OFF,
    E.AblationVariant.RELABEL_ON,
)

GRASP_DISCRETE_ATTEMPTS = 2000
GRASP_CONTINUOUS_ATTEMPTS = 6000
GRASP_EVERY = 50
GRASP_N_EVAL = 100

log = logging.getLogger(__name__)


def results_dir() -> Path:
    env = os.environ.get("RELMM_RESULTS_DIR")
    return Path(env) if env else Path(__file__).resolve().parents[2] / "acceptance_results"


def runs(variant, seeds: Sequence[int] = SEEDS, cache_dir=None) -> List[E.RunResult]:
    return E.run_ablation(variant, BUDGET, seeds, eval_every=EVAL_EVERY, n_eval=N_EVAL,
                          cache_dir=cache_dir or results_dir())


def grasp_curves(variant, seeds: Sequence[int] = SEEDS, cache_dir=None) -> List[E.GraspCurve]:
    v = E.AblationVariant.parse(variant) if isinstance(variant, str) else variant
    attempts = (GRASP_CONTINUOUS_ATTEMPTS if v is E.AblationVariant.CONTINUOUS_GRASP
                else GRASP_DISCRETE_ATTEMPTS)
    return E.cached_grasp_curves(v, attempts, seeds, GRASP_EVERY, GRASP_N_EVAL,
                                 cache_dir=cache_dir or results_dir())


def fill(cache_dir=None, only: Optional[Sequence[str]] = None) -> Dict[str, int]:
    """Train everything missing, seed-major so partial results cover every variant."""
    wanted = {E.AblationVariant.parse(v) for v in only} if only else None
    done: Dict[str, int] = {}
    for v in (E.AblationVariant.DISCRETE_GRASP, E.AblationVariant.CONTINUOUS_GRASP):
        if wanted is None or v in wanted:
            done[v.value] = len(grasp_curves(v, cache_dir=cache_dir))
    for seed in SEEDS:
        for v in MATRIX:
            if wanted is None or v in wanted:
                runs(v, [seed], cache_dir)
                done[v.value] = done.get(v.value, 0) + 1
    return done


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dir", type=Path, default=None)
    ap.add_argument("--only", nargs="*", default=None)
    args = ap.parse_args(argv)
    logging.basicConfig(level=os.environ.get("RELMM_LOG_LEVEL", "INFO"),
                        format="%(asctime)s %(levelname)s %(message)s")
    print(fill(args.dir, args.only))


if __name__ == "__main__":
    main()
