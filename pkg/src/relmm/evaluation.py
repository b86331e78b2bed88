"""Reset-free evaluation, ablation variants and learning curves.

An evaluation drops the policy into a freshly scattered room and runs a fixed
horizon greedily: no pseudo-resets, successful grasps go into the basket.
Policies only ever see rendered observations.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import config as C
from . import grasp as G
from . import orchestrator as O
from . import persist as P
from . import rng as R
from . import world as W

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    objects_total: int
    objects_collected: int
    steps_between_successes: List[int]
    horizon: int
    seed: int
    variant: str = ""
    grasp_attempts: int = 0

    def __post_init__(self):
        if self.objects_total <= 0:
            raise ValueError("objects_total must be positive")
        if not 0 <= self.objects_collected <= self.objects_total:
            raise ValueError("objects_collected out of range")
        if any(g < 1 for g in self.steps_between_successes):
            raise ValueError("gaps between successes are at least one step")

    @property
    def percent_failed(self) -> float:
        return 100.0 * (self.objects_total - self.objects_collected) / self.objects_total

    @property
    def mean_gap(self) -> Optional[float]:
        s = self.steps_between_successes
        return float(np.mean(s)) if s else None


class EvalPolicy(Protocol):
    """What ``evaluate`` needs from a controller."""

    def nav_action(self, o: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def grasp_action(self, o: np.ndarray, rng: np.random.Generator): ...

    def execute(self, state: W.WorldState, a) -> Tuple[W.WorldState, int]: ...


class ReLMMPolicy:
    """Greedy nav action; grasp when the clamped P[grasp] reaches the threshold."""

    def __init__(self, learners: O.Learners, sim: W.SimParams = W.DEFAULT_SIM,
                 gate_threshold: float = 0.5):
        self.learners = learners
        self.sim = sim
        self.threshold = gate_threshold

    def nav_action(self, o, rng):
        return self.learners.nav.act(o, None, greedy=True)

    def grasp_action(self, o, rng):
        crop = W.crop_grasp(o, self.sim)
        g = self.learners.grasp
        if g.grasp_prob(crop) < self.threshold:
            return None
        return g.sample_action(crop, None, greedy=True)

    def execute(self, state, a):
        return self.learners.grasp.execute(state, a)


class SinglePolicy:
    """Joint (forward, turn, trigger, x, y) policy, greedy."""

    def __init__(self, learners: O.Learners, sim: W.SimParams = W.DEFAULT_SIM):
        self.learners = learners
        self.sim = sim
        self._last = None

    def nav_action(self, o, rng):
        self._last = self.learners.nav.act(o, None, greedy=True)
        return self._last[:2]

    def grasp_action(self, o, rng):
        # the trigger and point come from the same joint action as the move
        a = self._last
        return None if a is None or a[2] <= 0 else a[3:5]

    def execute(self, state, a):
        return W.attempt_grasp_at(state, *G.region_point(self.sim.region, a))


def policy_for(learners: O.Learners, cfg: C.ExperimentConfig) -> EvalPolicy:
    if cfg.run.policy == "single":
        return SinglePolicy(learners, cfg.sim_params())
    return ReLMMPolicy(learners, cfg.sim_params(), cfg.eval.gate_threshold)


def evaluate(policy: EvalPolicy, room: W.RoomSpec = W.RoomSpec(),
             sim: W.SimParams = W.DEFAULT_SIM, horizon: int = 250, seed: int = 0,
             variant: str = "", world: Optional[W.WorldState] = None) -> EvalReport:
    """Run ``horizon`` greedy steps in a fresh room (or ``world``) and count deposits."""
    state = world if world is not None else W.scatter_objects(room, R.stream(seed, "eval"), sim)
    gen = R.stream(seed, "eval_policy")
    total = len(state.status)
    gaps: List[int] = []
    last, attempts = 0, 0
    for t in range(1, horizon + 1):
        o = W.render_nav_obs(state)
        state = W.advance(state, policy.nav_action(o, gen))
        g = policy.grasp_action(W.render_nav_obs(state), gen)
        if g is None:
            continue
        attempts += 1
        state, r = policy.execute(state, g)
        if r == 1:
            state = W.deposit_held(state)
            gaps.append(t - last)
            last = t
    return EvalReport(total, state.count(W.ObjectStatus.COLLECTED), gaps, horizon, seed,
                      variant, attempts)


# ---------------------------------------------------------------------------
# ablation variants


class AblationVariant(str, enum.Enum):
    FULL = "full"
    SINGLE_POLICY = "single_policy"
    PRETRAIN_ONLY = "pretrain_only"
    NO_UNCERTAINTY = "no_uncertainty"
    RELABEL_ON = "relabel_on"
    RELABEL_OFF = "relabel_off"
    AUTOCURR = "autocurr"
    STATCURR = "statcurr"
    DISCRETE_GRASP = "discrete_grasp"
    CONTINUOUS_GRASP = "continuous_grasp"

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise C.ConfigError(f"unknown variant {name!r}; valid variants: {valid}") from None


# each variant is a set of config keys applied on top of the base config
VARIANT_DELTAS: Dict[AblationVariant, Dict[str, object]] = {
    AblationVariant.FULL: {},
    AblationVariant.SINGLE_POLICY: {"run.policy": "single"},
    AblationVariant.PRETRAIN_ONLY: {"grasp.freeze_after_pretrain": True},
    AblationVariant.NO_UNCERTAINTY: {"grasp.beta": 0.0},
    AblationVariant.RELABEL_ON: {"run.curriculum": "autonomous", "nav.relabel": True},
    AblationVariant.RELABEL_OFF: {"run.curriculum": "autonomous", "nav.relabel": False},
    AblationVariant.AUTOCURR: {"run.curriculum": "autonomous", "nav.relabel": True},
    AblationVariant.STATCURR: {"run.curriculum": "stationary", "nav.relabel": False},
    AblationVariant.DISCRETE_GRASP: {"grasp.action_space": "discrete"},
    AblationVariant.CONTINUOUS_GRASP: {"grasp.action_space": "continuous"},
}


def variant_config(variant, base: Optional[C.ExperimentConfig] = None) -> C.ExperimentConfig:
    v = AblationVariant.parse(variant) if isinstance(variant, str) else variant
    return (base or C.ExperimentConfig()).with_overrides(VARIANT_DELTAS[v])


# ---------------------------------------------------------------------------
# learning curves and cached runs

# bump when training or evaluation semantics change; cached results are keyed on it
CACHE_VERSION = 1
CURVE_WINDOW = 250


def eval_seeds(train_seed: int, n: int) -> List[int]:
    """Held-out rooms for one training seed; shared by every variant."""
    return [10_000 * (train_seed + 1) + k for k in range(n)]


def trailing_mean(x: Sequence[float], window: int = CURVE_WINDOW) -> np.ndarray:
    """Mean of the last ``window`` values at every index (shorter at the start)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def success_gaps(r_g: Sequence[int]) -> List[int]:
    """Steps between consecutive successes (the first counted from step 0)."""
    steps = np.flatnonzero(np.asarray(r_g) > 0) + 1
    return np.diff(np.concatenate([[0], steps])).astype(int).tolist()


@dataclass
class CurvePoint:
    step: int
    collected: float          # mean over eval rooms
    percent_failed: float
    mean_gap: Optional[float]


@dataclass
class RunResult:
    variant: str
    seed: int
    budget: int
    final: List[EvalReport]
    curve: List[CurvePoint]
    train_successes: int
    wall_time: float
    policy_path: Optional[str] = None

    @property
    def collected(self) -> float:
        return float(np.mean([r.objects_collected for r in self.final]))

    @property
    def percent_failed(self) -> float:
        return float(np.mean([r.percent_failed for r in self.final]))

    def steps_to(self, threshold: float) -> float:
        """First curve step whose mean collection reaches ``threshold`` (inf if never)."""
        for p in self.curve:
            if p.collected >= threshold:
                return float(p.step)
        return float("inf")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["final"] = [EvalReport(**r) for r in d["final"]]
        d["curve"] = [CurvePoint(**p) for p in d["curve"]]
        return cls(**d)


def evaluate_learners(learners: O.Learners, cfg: C.ExperimentConfig, seeds: Sequence[int],
                      variant: str = "") -> List[EvalReport]:
    pol = policy_for(learners, cfg)
    return [evaluate(pol, cfg.room_spec(), cfg.sim_params(), cfg.eval.horizon, s, variant)
            for s in seeds]


def _curve_point(step: int, reports: Sequence[EvalReport]) -> CurvePoint:
    gaps = [g for r in reports for g in r.steps_between_successes]
    return CurvePoint(step, float(np.mean([r.objects_collected for r in reports])),
                      float(np.mean([r.percent_failed for r in reports])),
                      float(np.mean(gaps)) if gaps else None)


def train_and_evaluate(cfg: C.ExperimentConfig, variant: str = "", eval_every: int = 2500,
                       n_eval: int = 3, hooks: Optional[O.Hooks] = None,
                       policy_path=None) -> RunResult:
    """Train one config, evaluating on held-out rooms every ``eval_every`` steps."""
    seeds = eval_seeds(cfg.run.seed, n_eval)
    curve: List[CurvePoint] = []

    def on_eval(rs: O.RunState) -> None:
        curve.append(_curve_point(rs.step, evaluate_learners(rs.learners, cfg, seeds, variant)))
        log.info("%s seed %d step %d: collected %.2f", variant, cfg.run.seed, rs.step,
                 curve[-1].collected)

    hooks = hooks or O.Hooks()
    hooks.on_eval, hooks.eval_every = on_eval, eval_every
    t0 = time.perf_counter()
    learners, train_log = O.run(cfg, hooks)
    final = evaluate_learners(learners, cfg, seeds, variant)
    if not curve or curve[-1].step != cfg.run.steps:
        curve.append(_curve_point(cfg.run.steps, final))
    if policy_path is not None:
        save_policies(policy_path, cfg, learners)
    successes = int(sum(r.r_g for r in train_log.phase("train")))
    return RunResult(variant, cfg.run.seed, cfg.run.steps, final, curve, successes,
                     time.perf_counter() - t0, None if policy_path is None else str(policy_path))


def cache_key(cfg: C.ExperimentConfig, **extra) -> str:
    blob = json.dumps({"cfg": cfg.to_dict(), "version": CACHE_VERSION, **extra}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_ablation(variant, budget: int = 30_000, seeds: Sequence[int] = range(5),
                 base: Optional[C.ExperimentConfig] = None, eval_every: int = 2500,
                 n_eval: int = 3, cache_dir=None) -> List[RunResult]:
    """Train ``variant`` for ``budget`` steps on every seed; cached per config."""
    v = AblationVariant.parse(variant) if isinstance(variant, str) else variant
    out = []
    for seed in seeds:
        cfg = variant_config(v, base).with_overrides({"run.steps": budget, "run.seed": seed})
        key = cache_key(cfg, eval_every=eval_every, n_eval=n_eval)
        path = policy = None
        if cache_dir is not None:
            d = Path(cache_dir)
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"{v.value}_s{seed}_{key}.json"
            policy = d / f"{v.value}_s{seed}_{key}.policy"
            if path.exists():
                out.append(RunResult.from_json(json.loads(path.read_text())))
                continue
        res = train_and_evaluate(cfg, v.value, eval_every, n_eval, policy_path=policy)
        if path is not None:
            res.policy_path = policy.name
            path.write_text(json.dumps(res.to_json(), indent=1))
        out.append(res)
    return out


# ---------------------------------------------------------------------------
# policy files (parameters only, no buffers or optimiser state)


def save_policies(path, cfg: C.ExperimentConfig, learners: O.Learners) -> None:
    arrays = {k: v for k, v in learners.nav.arrays("nav").items() if ".adam." not in k}
    meta = {"kind": "relmm-policy", "config": cfg.to_dict(), "nav": learners.nav.meta()}
    if learners.grasp is not None:
        arrays.update({k: v for k, v in learners.grasp.arrays("grasp").items() if "adam" not in k})
        meta["grasp"] = learners.grasp.meta()
    P.save_container(path, meta, arrays)


def load_policies(path) -> Tuple[C.ExperimentConfig, O.Learners]:
    """Learners from a policy file or a full training checkpoint."""
    meta, arrays = P.load_container(path)
    if meta.get("kind") == "relmm-run":
        return O.learners_from_checkpoint(meta, arrays)
    if meta.get("kind") != "relmm-policy":
        raise P.CheckpointError(f"{path}: not a policy or run checkpoint")
    cfg = C.from_dict(meta["config"])
    learners = O.build_learners(cfg)
    learners.nav.load(arrays, meta["nav"], "nav")
    if learners.grasp is not None:
        learners.grasp.load(arrays, meta["grasp"], "grasp")
    return cfg, learners


# ---------------------------------------------------------------------------
# stationary grasp learning (discrete vs continuous)


def grasp_eval_worlds(n: int = 100, sim: W.SimParams = W.DEFAULT_SIM) -> List[W.WorldState]:
    """Held-out single-object placements inside the grasp region."""
    return [W.single_object_world(R.stream(k, "grasp_eval"), sim=sim) for k in range(n)]


def greedy_grasp_success(grasp, worlds: Sequence[W.WorldState]) -> float:
    ok = 0
    for s in worlds:
        a = grasp.sample_action(W.render_grasp_obs(s), None, greedy=True)
        ok += grasp.execute(s, a)[1]
    return ok / len(worlds)


@dataclass
class GraspCurve:
    variant: str
    seed: int
    points: List[Tuple[int, float]]  # (attempts, greedy success rate)

    def attempts_to(self, rate: float) -> float:
        for n, r in self.points:
            if r >= rate:
                return float(n)
        return float("inf")


def grasp_learning_curve(cfg: C.ExperimentConfig, attempts: int, every: int = 100,
                         n_eval: int = 100, variant: str = "") -> GraspCurve:
    """Stationary practice only, scored greedily on held-out placements."""
    cfg = cfg.with_overrides({"grasp.n_pt": attempts, "run.steps": 0})
    worlds = grasp_eval_worlds(n_eval, cfg.sim_params())
    pts: List[Tuple[int, float]] = []

    def on_record(rs, rec):
        if rec.phase == "pretrain" and rec.step % every == 0:
            pts.append((rec.step, greedy_grasp_success(rs.learners.grasp, worlds)))

    O.run_relmm(cfg, O.Hooks(on_record=on_record))
    return GraspCurve(variant, cfg.run.seed, pts)


def cached_grasp_curves(variant, attempts: int, seeds: Sequence[int], every: int = 100,
                        n_eval: int = 100, base: Optional[C.ExperimentConfig] = None,
                        cache_dir=None) -> List[GraspCurve]:
    v = AblationVariant.parse(variant) if isinstance(variant, str) else variant
    out = []
    for seed in seeds:
        cfg = variant_config(v, base).with_overrides({"run.seed": seed})
        key = cache_key(cfg, attempts=attempts, every=every, n_eval=n_eval, kind="grasp")
        path = None
        if cache_dir is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            path = Path(cache_dir) / f"grasp_{v.value}_s{seed}_{key}.json"
            if path.exists():
                d = json.loads(path.read_text())
                out.append(GraspCurve(d["variant"], d["seed"], [tuple(p) for p in d["points"]]))
                continue
        curve = grasp_learning_curve(cfg, attempts, every, n_eval, v.value)
        if path is not None:
            path.write_text(json.dumps(asdict(curve)))
        out.append(curve)
    return out
