"""Learning-curve plots from metrics CSVs, one SVG per metric.

Each run (``run_id``) gives one curve per metric: train metrics are smoothed
with a trailing window over steps, eval metrics are plotted as recorded. Runs
are then aligned on step and drawn as the mean with a min-max band. Output is
byte-deterministic for identical input.
"""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import persist as P
from .evaluation import CURVE_WINDOW, trailing_mean

TRAIN_METRICS = ("r_g", "r_n", "p_grasp", "grasp_loss", "critic1", "critic2", "actor",
                 "temperature", "alpha")
EVAL_METRICS = ("objects_collected", "percent_failed", "mean_gap")


def _float(s: str) -> float:
    return float(s) if s != "" else float("nan")


def metric_curves(rows: Iterable[Dict[str, str]], window: int = CURVE_WINDOW
                  ) -> Dict[str, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """metric -> run_id -> (steps, values)."""
    by_run: Dict[Tuple[str, str], List[Dict[str, str]]] = defaultdict(list)
    for r in rows:
        if r["event"] in ("train", "eval") and r["step"] != "":
            by_run[(r["event"], r["run_id"])].append(r)
    out: Dict[str, Dict[str, Tuple[np.ndarray, np.ndarray]]] = defaultdict(dict)
    for (event, run), rs in sorted(by_run.items()):
        metrics = TRAIN_METRICS if event == "train" else EVAL_METRICS
        for m in metrics:
            steps = np.array([int(r["step"]) for r in rs])
            vals = np.array([_float(r[m]) for r in rs])
            ok = ~np.isnan(vals)
            if not ok.any():
                continue
            steps, vals = steps[ok], vals[ok]
            if event == "eval":
                # several eval rooms per step: average them
                uniq = np.unique(steps)
                vals = np.array([vals[steps == s].mean() for s in uniq])
                steps = uniq
            else:
                vals = trailing_mean(vals, window)
            out[m][run] = (steps, vals)
    return out


def band(curves: Sequence[Tuple[np.ndarray, np.ndarray]]):
    """Mean, min and max across runs on the union of their steps (linear interpolation)."""
    grid = np.unique(np.concatenate([s for s, _ in curves]))
    ys = np.stack([np.interp(grid, s, v) for s, v in curves])
    return grid, ys.mean(axis=0), ys.min(axis=0), ys.max(axis=0)


def plot_csvs(paths: Sequence[Path], out_dir: Path, window: int = CURVE_WINDOW) -> List[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for p in paths for r in P.read_rows(p)]
    curves = metric_curves(rows, window)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with matplotlib.rc_context({"svg.hashsalt": "relmm", "svg.fonttype": "none"}):
        for metric in sorted(curves):
            runs = curves[metric]
            grid, mean, lo, hi = band(list(runs.values()))
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.fill_between(grid, lo, hi, alpha=0.25, linewidth=0)
            ax.plot(grid, mean, linewidth=1.5)
            ax.set_xlabel("step")
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} ({len(runs)} run{'s' if len(runs) != 1 else ''})")
            fig.tight_layout()
            path = out_dir / f"{metric}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
