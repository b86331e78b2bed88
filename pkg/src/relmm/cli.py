"""Command line: ``relmm train | eval | ablate | plot``.

The commands call the library directly. Errors that come from bad input
(config, checkpoint, arguments) print one line to stderr and exit with 2;
training failures exit with 1 (130 when interrupted) after writing an abort
checkpoint.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import baselines as B
from . import config as C
from . import evaluation as E
from . import orchestrator as O
from . import persist as P
from . import world as W

log = logging.getLogger("relmm")

EXIT_USAGE = 2
EXIT_FAILED = 1
EXIT_INTERRUPTED = 130


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# output directory ownership


class OutputLock:
    """Exclusive ownership of an output directory via ``.lock`` (pid inside)."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            owner = self.path.read_text().strip() or "?"
            if owner.isdigit() and not _alive(int(owner)):
                self.path.unlink()  # stale lock from a killed process
                return self.__enter__()
            raise CliError(f"{self.path.parent} is in use by process {owner}") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# ---------------------------------------------------------------------------
# rows


def record_row(run_id: str, cfg: C.ExperimentConfig, rec: O.TrainRecord) -> dict:
    row = {k: getattr(rec, k) for k in O.RECORD_FIELDS if k in P.COLUMNS}
    row["grasp_attempted"] = int(rec.grasp_attempted)
    row.update(run_id=run_id, variant=variant_name(cfg), seed=cfg.run.seed, event=rec.phase)
    return row


def eval_row(run_id: str, step: Optional[int], report: E.EvalReport) -> dict:
    return {"run_id": run_id, "variant": report.variant, "seed": report.seed, "step": step,
            "event": "eval", "grasp_attempts": report.grasp_attempts,
            "objects_total": report.objects_total, "objects_collected": report.objects_collected,
            "percent_failed": report.percent_failed, "mean_gap": report.mean_gap,
            "horizon": report.horizon}


def variant_name(cfg: C.ExperimentConfig) -> str:
    if cfg.run.policy == "single":
        return "single_policy"
    return {"stationary": "statcurr", "autonomous": "autocurr"}[cfg.run.curriculum]


# ---------------------------------------------------------------------------
# train


def _train_config(args) -> C.ExperimentConfig:
    overrides = dict(C.parse_override(s) for s in args.set)
    for key, val in (("run.seed", args.seed), ("run.curriculum", args.curriculum),
                     ("run.steps", args.steps)):
        if val is not None:
            overrides[key] = val
    if args.config is not None:
        return C.load(args.config, overrides)
    if "run.curriculum" not in overrides:
        overrides["run.curriculum"] = "stationary"
    return C.ExperimentConfig().with_overrides(overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out or f"runs/{variant_name(cfg)}_s{cfg.run.seed}")
    with OutputLock(out):
        state = None
        if args.resume is not None:
            meta, arrays = P.load_container(args.resume)
            if args.config is None:  # the checkpoint carries its own config
                saved = C.from_dict(meta.get("config", {}))
                cfg = saved.with_overrides({"run.steps": cfg.run.steps} if args.steps else {})
            state = O.restore(meta, arrays, cfg)
            log.info("resuming at step %d from %s", state.step, args.resume)
        (out / "config.toml").write_text(cfg.dumps())
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        run_id = out.name
        csv = P.MetricsCSV(out / "metrics.csv", fresh=state is None,
                           truncate_after=None if state is None else state.step)
        seeds = E.eval_seeds(cfg.run.seed, cfg.eval.seeds)

        def save(rs: O.RunState, name: Optional[str] = None) -> Path:
            path = ckdir / (name or f"step_{rs.step:07d}.ckpt")
            P.save_container(path, *O.snapshot(rs))
            _prune(ckdir, args.keep_checkpoints)
            return path

        def on_checkpoint(rs):
            csv.flush()
            save(rs)

        def on_eval(rs):
            for rep in E.evaluate_learners(rs.learners, cfg, seeds, variant_name(cfg)):
                csv.write(**eval_row(run_id, rs.step, rep))

        def on_abort(rs, exc):
            csv.close()
            path = save(rs, f"abort_step_{rs.step:07d}.ckpt")
            log.error("training stopped at step %d (%s); checkpoint %s", rs.step,
                      type(exc).__name__, path)

        hooks = O.Hooks(on_record=lambda rs, rec: csv.write(**record_row(run_id, cfg, rec)),
                        on_checkpoint=on_checkpoint, on_eval=on_eval,
                        eval_every=cfg.eval.every, on_abort=on_abort)
        learners, _ = O.run(cfg, hooks, state)
        csv.close()
        E.save_policies(out / "policy.ckpt", cfg, learners)
    print(out)
    return 0


def _prune(ckdir: Path, keep: int) -> None:
    if keep <= 0:
        return
    steps = sorted(ckdir.glob("step_*.ckpt"))
    for old in steps[:-keep]:
        old.unlink()


# ---------------------------------------------------------------------------
# eval


def _baseline_policy(args, sim: W.SimParams):
    if args.baseline == "rand_all":
        return B.RandAllPolicy(sim)
    if args.baseline == "scripted":
        return B.ScriptedPolicy(sim)
    if args.grasp_checkpoint is None:
        raise CliError("rand_nav needs --grasp-checkpoint (a policy or run checkpoint "
                       "with a trained grasp model)")
    gcfg, learners = E.load_policies(args.grasp_checkpoint)
    if learners.grasp is None:
        raise CliError(f"{args.grasp_checkpoint} has no grasp model")
    return B.RandNavPolicy(learners.grasp, sim, gcfg.eval.gate_threshold)


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.baseline is None):
        raise CliError("give exactly one of --checkpoint or --baseline")
    if args.checkpoint is not None:
        cfg, learners = E.load_policies(args.checkpoint)
        policy, variant = E.policy_for(learners, cfg), variant_name(cfg)
    else:
        cfg = C.ExperimentConfig()
        policy, variant = _baseline_policy(args, cfg.sim_params()), args.baseline
    seeds = E.eval_seeds(args.seed, args.seeds)
    run_id = Path(args.checkpoint).stem if args.checkpoint else args.baseline
    rows = []
    for s in seeds:
        rep = E.evaluate(policy, cfg.room_spec(), cfg.sim_params(), args.horizon, s, variant)
        rows.append(eval_row(run_id, None, rep))
    _write_rows(rows, args.out)
    return 0


def _write_rows(rows: List[dict], out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(P.rows_to_text(rows))
        return
    with P.MetricsCSV(out) as csv_out:
        for r in rows:
            csv_out.write(**r)


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    variant = E.AblationVariant.parse(args.variant)
    base = C.load(args.config) if args.config else None
    results = E.run_ablation(variant, args.budget, range(args.seeds), base,
                             eval_every=args.eval_every, n_eval=args.eval_rooms,
                             cache_dir=args.cache)
    rows = []
    for res in results:
        for p in res.curve:
            rows.append({"run_id": f"{variant.value}_s{res.seed}", "variant": variant.value,
                         "seed": res.seed, "step": p.step, "event": "eval",
                         "objects_collected": p.collected, "percent_failed": p.percent_failed,
                         "mean_gap": p.mean_gap, "horizon": res.final[0].horizon,
                         "objects_total": res.final[0].objects_total})
    _write_rows(rows, args.out)
    diff = (base or C.ExperimentConfig()).diff(E.variant_config(variant, base))
    log.info("config diff for %s: %s", variant.value, diff)
    return 0


# ---------------------------------------------------------------------------
# plot


def cmd_plot(args) -> int:
    from . import plot
    for path in plot.plot_csvs(args.csv, args.out, window=args.window):
        print(path)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relmm", description="Reset-free mobile manipulation workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--curriculum", choices=("stationary", "autonomous"))
    t.add_argument("--steps", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set grasp.beta=0")
    t.add_argument("--resume", type=Path, metavar="CHECKPOINT")
    t.add_argument("--keep-checkpoints", type=int, default=2,
                   help="periodic checkpoints to keep (0 keeps all)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained policy or a baseline")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--baseline", choices=("rand_all", "rand_nav", "scripted"))
    e.add_argument("--grasp-checkpoint", type=Path)
    e.add_argument("--seeds", type=int, default=5, help="number of evaluation rooms")
    e.add_argument("--seed", type=int, default=0, help="which family of rooms")
    e.add_argument("--horizon", type=int, default=250)
    e.add_argument("--out", help="CSV path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train an ablation variant over several seeds")
    a.add_argument("--variant", required=True)
    a.add_argument("--budget", type=int, default=30_000)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--config", type=Path)
    a.add_argument("--eval-every", type=int, default=2500)
    a.add_argument("--eval-rooms", type=int, default=3)
    a.add_argument("--cache", type=Path, help="reuse and store per-seed results here")
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="one SVG per metric from metrics CSVs")
    p.add_argument("--csv", nargs="+", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--window", type=int, default=E.CURVE_WINDOW)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RELMM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (C.ConfigError, P.CheckpointError, CliError, W.ConfigurationError) as exc:
        print(f"relmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"relmm {args.command}: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print(f"relmm {args.command}: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as exc:  # training failures already left a checkpoint behind
        print(f"relmm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
