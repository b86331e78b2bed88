"""Training loops that tie the world, the grasp learner and the navigation policy together.

One main-loop step::

    o_t -> nav action -> move -> render -> gate (fires with prob. P[grasp])
        -> grasp attempts or r_g = 0 -> r_n = r_g - 1 -> store -> SAC update
        -> pseudo-reset if an object is held

The stationary curriculum runs ``n_pt`` practice grasps on a single-object
world first; the autonomous curriculum skips that and replaces the gate's
grasp call with the front-loaded practice loop. A whole run is captured by
``RunState``; ``snapshot``/``restore`` turn it into a checkpoint and back so a
resumed run continues exactly where the original would have.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import config as C
from . import grasp as G
from . import nav as N
from . import rng as R
from . import world as W
from .networks import grasp_input_shape, nav_input_shape

log = logging.getLogger(__name__)

# every stream a run draws from; all are checkpointed
RUN_STREAMS = ("world", "pretrain", "grasp_action", "ensemble_batch", "nav", "nav_update", "gate")

GraspLearner = Union[G.GraspEnsemble, G.ContinuousGrasp]


@dataclass
class Learners:
    grasp: Optional[GraspLearner]
    nav: N.NavPolicy
    grasp_buffer: Optional[G.GraspBuffer]
    nav_buffer: N.NavBuffer


def build_learners(cfg: C.ExperimentConfig) -> Learners:
    seed = cfg.run.seed
    sim = cfg.sim_params()
    sizes = cfg.net_sizes()
    g, n = cfg.grasp, cfg.nav
    single = cfg.run.policy == "single"
    action_dim = 5 if single else 2
    nav = N.NavPolicy(sizes, sim, action_dim=action_dim, gamma=n.gamma, tau=n.tau, lr=n.lr,
                      batch_size=n.batch_size, init_alpha=n.init_alpha, auto_alpha=n.auto_alpha,
                      target_entropy=cfg.target_entropy(action_dim),
                      seed=R.int_seed(seed, "nav_init"))
    nav_buf = N.NavBuffer(n.buffer_capacity, nav_input_shape(sim), action_dim)
    if single:
        return Learners(None, nav, None, nav_buf)
    if g.action_space == "continuous":
        learner: GraspLearner = G.ContinuousGrasp(sizes, sim, seed=R.int_seed(seed, "ensemble_init"),
                                                  lr=g.lr, batch_size=g.batch_size,
                                                  prior_logit=g.prior_logit)
        buf = G.GraspBuffer(g.buffer_capacity, grasp_input_shape(sim), action_shape=(2,))
    else:
        learner = G.GraspEnsemble(g.members, g.alpha, g.beta, sizes, sim,
                                  seed=R.int_seed(seed, "ensemble_init"), lr=g.lr,
                                  batch_size=g.batch_size, bootstrap=g.bootstrap,
                                  prior_logit=g.prior_logit)
        buf = G.GraspBuffer(g.buffer_capacity, grasp_input_shape(sim))
    return Learners(learner, nav, buf, nav_buf)


# ---------------------------------------------------------------------------
# log


@dataclass
class TrainRecord:
    step: int
    phase: str  # "pretrain" (one row per practice grasp) or "train" (one per env step)
    grasp_attempted: bool
    grasp_attempts: int
    r_g: int
    r_n: Optional[float]
    p_grasp: Optional[float]
    dg_size: int
    dn_size: int
    grasp_loss: Optional[float] = None
    critic1: Optional[float] = None
    critic2: Optional[float] = None
    actor: Optional[float] = None
    temperature: Optional[float] = None
    alpha: Optional[float] = None
    wall_time: float = 0.0


RECORD_FIELDS = tuple(f.name for f in fields(TrainRecord))


class TrainLog:
    """Append-only list of records; ``fingerprint`` ignores wall time."""

    def __init__(self, records: Optional[List[TrainRecord]] = None):
        self._records: List[TrainRecord] = list(records or [])

    def append(self, rec: TrainRecord) -> None:
        self._records.append(rec)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TrainRecord]:
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def phase(self, name: str) -> List[TrainRecord]:
        return [r for r in self._records if r.phase == name]

    def column(self, name: str, phase: str = "train") -> np.ndarray:
        vals = [getattr(r, name) for r in self._records if r.phase == phase]
        return np.array([np.nan if v is None else v for v in vals], dtype=np.float64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self._records:
            d = asdict(r)
            d.pop("wall_time")
            h.update(repr(tuple(d.values())).encode())
        return h.hexdigest()

    # checkpoint form: one array per field
    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in RECORD_FIELDS:
            vals = [getattr(r, name) for r in self._records]
            if name == "phase":
                out["log.phase"] = np.array([v == "train" for v in vals], dtype=np.bool_)
            elif name in ("step", "grasp_attempts", "r_g", "dg_size", "dn_size"):
                out[f"log.{name}"] = np.array(vals, dtype=np.int64)
            elif name == "grasp_attempted":
                out[f"log.{name}"] = np.array(vals, dtype=np.bool_)
            else:
                out[f"log.{name}"] = np.array([np.nan if v is None else v for v in vals],
                                              dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "TrainLog":
        n = len(arrays["log.step"])
        recs = []
        for i in range(n):
            d = {}
            for name in RECORD_FIELDS:
                v = arrays[f"log.{name}"][i]
                if name == "phase":
                    d[name] = "train" if v else "pretrain"
                elif v.dtype == np.bool_:
                    d[name] = bool(v)
                elif v.dtype.kind == "i":
                    d[name] = int(v)
                else:
                    d[name] = None if np.isnan(v) and name != "wall_time" else float(v)
            recs.append(TrainRecord(**d))
        return cls(recs)


# ---------------------------------------------------------------------------
# state


@dataclass
class RunState:
    cfg: C.ExperimentConfig
    learners: Learners
    world: W.WorldState
    pre_world: Optional[W.WorldState]
    rngs: Dict[str, np.random.Generator]
    counters: G.CurriculumCounters
    log: TrainLog = field(default_factory=TrainLog)
    step: int = 0
    pretrain_done: int = 0
    pretrain_finished: bool = False
    t0: float = field(default_factory=time.perf_counter)
    wall_offset: float = 0.0

    def wall(self) -> float:
        return self.wall_offset + time.perf_counter() - self.t0


def init_run(cfg: C.ExperimentConfig) -> RunState:
    seed = cfg.run.seed
    sim, room = cfg.sim_params(), cfg.room_spec()
    rngs = {name: R.stream(seed, name) for name in RUN_STREAMS}
    world = W.scatter_objects(room, rngs["world"], sim)
    pre_world = None
    if cfg.run.policy == "decomposed" and cfg.run.curriculum == "stationary":
        pre_world = W.single_object_world(rngs["pretrain"], sim=sim)
    c = cfg.curriculum
    counters = G.CurriculumCounters(n_start=c.n_start, n_stop=c.n_stop, n_max=c.n_max,
                                    n_bt=c.n_bt, n_grasp=cfg.grasp.n_grasp)
    return RunState(cfg, build_learners(cfg), world, pre_world, rngs, counters,
                    pretrain_finished=pre_world is None)


@dataclass
class Hooks:
    """Optional callbacks; all receive the live ``RunState``."""

    on_record: Optional[Callable[[RunState, TrainRecord], None]] = None
    on_checkpoint: Optional[Callable[[RunState], None]] = None
    on_eval: Optional[Callable[[RunState], None]] = None
    eval_every: int = 0
    on_abort: Optional[Callable[[RunState, BaseException], None]] = None
    stop_at: Optional[int] = None  # leave the main loop after this step (simulated interruption)


def gate_decision(ens: GraspLearner, o: np.ndarray, rng: np.random.Generator,
                  sim: W.SimParams = W.DEFAULT_SIM) -> bool:
    """Fire with probability P[grasp] of the aligned crop of nav observation ``o``."""
    return _gate(ens, o, rng, sim)[0]


def _gate(ens, o, rng, sim) -> Tuple[bool, float]:
    p = ens.grasp_prob(W.crop_grasp(o, sim))
    # strict comparison: p = 0 never fires, p = 1 always fires
    return bool(rng.random() < p), p


def _mean_loss(losses: List[np.ndarray]) -> Optional[float]:
    return float(np.mean([np.mean(x) for x in losses])) if losses else None


# ---------------------------------------------------------------------------
# loops


def _emit(rs: RunState, rec: TrainRecord, hooks: Hooks) -> None:
    rs.log.append(rec)
    if hooks.on_record is not None:
        hooks.on_record(rs, rec)


def pretrain(rs: RunState, hooks: Hooks) -> None:
    """Stationary practice: ``n_pt`` grasps at one object, successes dropped back."""
    if rs.pretrain_finished:
        return
    L, g = rs.learners, rs.cfg.grasp

    def on_attempt(r, losses):
        rs.pretrain_done += 1
        _emit(rs, TrainRecord(step=rs.pretrain_done, phase="pretrain", grasp_attempted=True,
                              grasp_attempts=1, r_g=int(r), r_n=None, p_grasp=None,
                              dg_size=len(L.grasp_buffer), dn_size=len(L.nav_buffer),
                              grasp_loss=_mean_loss([losses] if losses is not None else []),
                              wall_time=rs.wall()), hooks)

    ctx = G.GraspContext(rs.rngs["grasp_action"], rs.rngs["ensemble_batch"], on_attempt,
                         recenter=g.recenter)
    remaining = g.n_pt - rs.pretrain_done
    if remaining > 0:
        rs.pre_world, _ = G.train_grasp(L.grasp, L.grasp_buffer, rs.pre_world, remaining, 1, ctx)
    if g.freeze_after_pretrain:
        L.grasp.frozen = True
    rs.pretrain_finished = True
    log.info("pretraining done: %d grasps, %d successes", rs.pretrain_done,
             int(sum(r.r_g for r in rs.log.phase("pretrain"))))
    if hooks.on_checkpoint is not None:
        hooks.on_checkpoint(rs)


def _main_step(rs: RunState, autocurr: bool) -> TrainRecord:
    cfg, L = rs.cfg, rs.learners
    sim = rs.world.sim
    o_t = W.render_nav_obs(rs.world)
    a = L.nav.act(o_t, rs.rngs["nav"])
    rs.world = W.advance(rs.world, a)
    o_mid = W.render_nav_obs(rs.world)
    fire, p = _gate(L.grasp, o_mid, rs.rngs["gate"], sim)
    r_g, attempts, losses = 0, 0, []
    if fire:
        before = L.grasp_buffer.inserted
        ctx = G.GraspContext(rs.rngs["grasp_action"], rs.rngs["ensemble_batch"],
                             lambda r, l: losses.append(l) if l is not None else None)
        if autocurr:
            rs.world, r_g = G.train_grasp_autocurr(L.grasp, L.grasp_buffer, rs.world,
                                                   rs.counters, ctx)
        else:
            rs.world, r_g = G.train_grasp(L.grasp, L.grasp_buffer, rs.world,
                                          cfg.grasp.n_grasp, 0, ctx)
        attempts = L.grasp_buffer.inserted - before
    r_n = N.compute_nav_reward(r_g)
    o_next = W.render_nav_obs(rs.world) if fire else o_mid
    L.nav_buffer.add(o_t, a, r_n, o_next, fire, r_g)
    sac = N.sac_update(L.nav, L.nav_buffer, rs.rngs["nav_update"], L.grasp,
                       relabel=cfg.nav.relabel, sim=sim)
    if rs.world.holding:
        rs.world = W.pseudo_reset(rs.world)
    rs.step += 1
    return TrainRecord(step=rs.step, phase="train", grasp_attempted=fire, grasp_attempts=attempts,
                       r_g=int(r_g), r_n=r_n, p_grasp=p, dg_size=len(L.grasp_buffer),
                       dn_size=len(L.nav_buffer), grasp_loss=_mean_loss(losses),
                       **_sac_fields(sac), wall_time=rs.wall())


def _single_step(rs: RunState) -> TrainRecord:
    """Joint policy: (forward, turn, trigger, grasp x, grasp y)."""
    L = rs.learners
    sim = rs.world.sim
    o_t = W.render_nav_obs(rs.world)
    a = L.nav.act(o_t, rs.rngs["nav"])
    rs.world = W.advance(rs.world, a[:2])
    fire = bool(a[2] > 0)
    r_g = 0
    if fire:
        rs.world, r_g = W.attempt_grasp_at(rs.world, *G.region_point(sim.region, a[3:5]))
    r_n = N.compute_nav_reward(r_g)
    o_next = W.render_nav_obs(rs.world)
    L.nav_buffer.add(o_t, a, r_n, o_next, fire, r_g)
    sac = N.sac_update(L.nav, L.nav_buffer, rs.rngs["nav_update"], sim=sim)
    if rs.world.holding:
        rs.world = W.pseudo_reset(rs.world)
    rs.step += 1
    return TrainRecord(step=rs.step, phase="train", grasp_attempted=fire,
                       grasp_attempts=int(fire), r_g=int(r_g), r_n=r_n, p_grasp=None,
                       dg_size=0, dn_size=len(L.nav_buffer), **_sac_fields(sac),
                       wall_time=rs.wall())


def _sac_fields(sac: Optional[N.SacLosses]) -> dict:
    if sac is None:
        return {}
    return {"critic1": sac.critic1, "critic2": sac.critic2, "actor": sac.actor,
            "temperature": sac.temperature, "alpha": sac.alpha}


def main_loop(rs: RunState, hooks: Hooks) -> None:
    cfg = rs.cfg
    autocurr = cfg.run.curriculum == "autonomous"
    single = cfg.run.policy == "single"
    every = cfg.run.checkpoint_every
    while rs.step < cfg.run.steps:
        if hooks.stop_at is not None and rs.step >= hooks.stop_at:
            return
        rec = _single_step(rs) if single else _main_step(rs, autocurr)
        _emit(rs, rec, hooks)
        if hooks.on_eval is not None and hooks.eval_every and rs.step % hooks.eval_every == 0:
            hooks.on_eval(rs)
        if hooks.on_checkpoint is not None and (rs.step % every == 0 or rs.step == cfg.run.steps):
            hooks.on_checkpoint(rs)


def _run(rs: RunState, hooks: Optional[Hooks]) -> Tuple[Learners, TrainLog]:
    hooks = hooks or Hooks()
    try:
        if rs.cfg.run.policy == "decomposed" and rs.cfg.run.curriculum == "stationary":
            pretrain(rs, hooks)
        main_loop(rs, hooks)
    except BaseException as exc:
        if hooks.on_abort is not None:
            hooks.on_abort(rs, exc)
        raise
    return rs.learners, rs.log


def run_relmm(cfg: C.ExperimentConfig, hooks: Optional[Hooks] = None,
              state: Optional[RunState] = None) -> Tuple[Learners, TrainLog]:
    """Stationary pretraining, then the main loop."""
    if cfg.run.curriculum != "stationary" or cfg.run.policy != "decomposed":
        raise C.ConfigError("run_relmm needs curriculum = stationary and the decomposed policy")
    return _run(state or init_run(cfg), hooks)


def run_relmm_autocurr(cfg: C.ExperimentConfig, hooks: Optional[Hooks] = None,
                       state: Optional[RunState] = None) -> Tuple[Learners, TrainLog]:
    """Main loop only, with front-loaded grasp practice inside the gate."""
    if cfg.run.curriculum != "autonomous" or cfg.run.policy != "decomposed":
        raise C.ConfigError("run_relmm_autocurr needs curriculum = autonomous")
    return _run(state or init_run(cfg), hooks)


def run_single_policy(cfg: C.ExperimentConfig, hooks: Optional[Hooks] = None,
                      state: Optional[RunState] = None) -> Tuple[Learners, TrainLog]:
    if cfg.run.policy != "single":
        raise C.ConfigError("run_single_policy needs run.policy = single")
    return _run(state or init_run(cfg), hooks)


def run(cfg: C.ExperimentConfig, hooks: Optional[Hooks] = None,
        state: Optional[RunState] = None) -> Tuple[Learners, TrainLog]:
    """Dispatch on policy kind and curriculum."""
    if cfg.run.policy == "single":
        return run_single_policy(cfg, hooks, state)
    if cfg.run.curriculum == "autonomous":
        return run_relmm_autocurr(cfg, hooks, state)
    return run_relmm(cfg, hooks, state)


# ---------------------------------------------------------------------------
# checkpoints


def snapshot(rs: RunState) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Everything needed to continue the run bit-exactly: (meta, arrays)."""
    L = rs.learners
    arrays: Dict[str, np.ndarray] = {}
    meta = {
        "kind": "relmm-run",
        "config": rs.cfg.to_dict(),
        "step": rs.step,
        "pretrain_done": rs.pretrain_done,
        "pretrain_finished": rs.pretrain_finished,
        "wall_time": rs.wall(),
        "counters": asdict(rs.counters),
        "rng": {k: R.get_state(g) for k, g in rs.rngs.items()},
        "world": _world_meta(rs.world, "world", arrays),
        "pre_world": None if rs.pre_world is None else _world_meta(rs.pre_world, "pre_world", arrays),
        "nav": L.nav.meta(),
        "nav_buffer_inserted": L.nav_buffer.inserted,
    }
    arrays.update(L.nav.arrays("nav"))
    arrays.update(L.nav_buffer.arrays("nav_buffer"))
    if L.grasp is not None:
        meta["grasp"] = L.grasp.meta()
        meta["grasp_buffer_inserted"] = L.grasp_buffer.inserted
        arrays.update(L.grasp.arrays("grasp"))
        arrays.update(L.grasp_buffer.arrays("grasp_buffer"))
    arrays.update(rs.log.arrays())
    return meta, {k: np.asarray(v) for k, v in arrays.items()}


def _world_meta(state: W.WorldState, name: str, arrays: dict) -> dict:
    arrays[f"{name}.positions"] = state.positions
    arrays[f"{name}.status"] = state.status
    return {"pose": [state.pose.x, state.pose.y, state.pose.heading],
            "rng_state": state.rng_state, "step_count": state.step_count,
            "grasp_count": state.grasp_count}


def _world_from(meta: dict, name: str, arrays: dict, room: W.RoomSpec,
                sim: W.SimParams) -> W.WorldState:
    return W.WorldState(room=room, pose=W.Pose(*meta["pose"]),
                        positions=np.array(arrays[f"{name}.positions"], dtype=np.float64),
                        status=np.array(arrays[f"{name}.status"], dtype=np.int8),
                        rng_state=meta["rng_state"], step_count=meta["step_count"],
                        grasp_count=meta["grasp_count"], sim=sim)


def restore(meta: dict, arrays: Dict[str, np.ndarray],
            cfg: Optional[C.ExperimentConfig] = None) -> RunState:
    """Rebuild a ``RunState`` from ``snapshot`` output.

    ``cfg`` may differ from the saved config only in ``run.steps`` (extending
    or shortening the run); anything else is refused.
    """
    saved = C.from_dict(meta["config"])
    if cfg is None:
        cfg = saved
    else:
        diff = set(saved.diff(cfg)) - {"run.steps"}
        if diff:
            raise C.ConfigError(f"checkpoint config differs in {sorted(diff)}")
    rs = init_run(cfg)
    room, sim = cfg.room_spec(), cfg.sim_params()
    for k, state in meta["rng"].items():
        R.set_state(rs.rngs[k], state)
    rs.world = _world_from(meta["world"], "world", arrays, room, sim)
    if meta["pre_world"] is not None:
        rs.pre_world = _world_from(meta["pre_world"], "pre_world",
                                   arrays, W.RoomSpec(object_count=1), sim)
    rs.counters = G.CurriculumCounters(**meta["counters"])
    rs.step = meta["step"]
    rs.pretrain_done = meta["pretrain_done"]
    rs.pretrain_finished = meta["pretrain_finished"]
    rs.wall_offset = meta["wall_time"]
    L = rs.learners
    L.nav.load(arrays, meta["nav"], "nav")
    L.nav_buffer.load_arrays(arrays, "nav_buffer", meta["nav_buffer_inserted"])
    if L.grasp is not None:
        L.grasp.load(arrays, meta["grasp"], "grasp")
        L.grasp_buffer.load_arrays(arrays, "grasp_buffer", meta["grasp_buffer_inserted"])
    rs.log = TrainLog.from_arrays(arrays)
    return rs


def learners_from_checkpoint(meta: dict, arrays: Dict[str, np.ndarray]) -> Tuple[C.ExperimentConfig, Learners]:
    rs = restore(meta, arrays)
    return rs.cfg, rs.learners
