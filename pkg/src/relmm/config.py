"""Experiment configuration: a strict TOML tree with one key per hyperparameter.

Every section is a frozen dataclass. Unknown keys, missing required keys and
wrongly typed values are errors that name the key and, when it came from a
file, the line it sits on.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple, Union

import tomli
import tomli_w

from . import world as W
from .networks import NetSizes

CURRICULA = ("stationary", "autonomous")
POLICY_KINDS = ("decomposed", "single")
GRASP_SPACES = ("discrete", "continuous")
REQUIRED = ("run.curriculum",)


class ConfigError(ValueError):
    """Bad configuration; ``line`` is set when the offending key came from a file."""

    def __init__(self, msg: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path, self.line = path, line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + msg)


@dataclass(frozen=True)
class RunSection:
    curriculum: str = "stationary"
    seed: int = 0
    steps: int = 30_000
    policy: str = "decomposed"
    checkpoint_every: int = 2_000


@dataclass(frozen=True)
class RoomSection:
    width: float = 3.0
    height: float = 3.0
    object_count: int = 20
    object_radius: float = 0.02
    obstacles: Tuple[Tuple[float, float, float, float], ...] = ()


@dataclass(frozen=True)
class SimSection:
    fov_deg: float = 90.0
    view_range: float = 1.5
    grasp_tolerance: float = W.GRASP_REGION.default_tolerance()
    reset_walk_carry: int = 8
    reset_walk_away: int = 8


@dataclass(frozen=True)
class GraspSection:
    members: int = 6
    alpha: float = 10.0
    beta: float = 10.0
    lr: float = 3e-4
    batch_size: int = 64
    buffer_capacity: int = 100_000
    n_pt: int = 2_000
    n_grasp: int = 2
    bootstrap: bool = False
    prior_logit: float = -4.6
    head: str = "spatial"
    action_space: str = "discrete"
    freeze_after_pretrain: bool = False
    recenter: bool = True


@dataclass(frozen=True)
class CurriculumSection:
    n_start: int = 10
    n_stop: int = 50
    n_max: int = 2_000
    n_bt: int = 300


@dataclass(frozen=True)
class NavSection:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 32
    buffer_capacity: int = 100_000
    init_alpha: float = 1.0
    auto_alpha: bool = True
    target_entropy: Union[str, float] = "auto"
    relabel: bool = False


@dataclass(frozen=True)
class EvalSection:
    horizon: int = 250
    gate_threshold: float = 0.5
    every: int = 0
    seeds: int = 1


SECTIONS = {
    "run": RunSection, "room": RoomSection, "sim": SimSection, "grasp": GraspSection,
    "curriculum": CurriculumSection, "nav": NavSection, "eval": EvalSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    room: RoomSection = field(default_factory=RoomSection)
    sim: SimSection = field(default_factory=SimSection)
    grasp: GraspSection = field(default_factory=GraspSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    nav: NavSection = field(default_factory=NavSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        validate(self)

    # -- derived objects ---------------------------------------------------
    def room_spec(self) -> W.RoomSpec:
        r = self.room
        return W.RoomSpec(width=r.width, height=r.height, obstacles=r.obstacles,
                          object_count=r.object_count, object_radius=r.object_radius)

    def sim_params(self) -> W.SimParams:
        s = self.sim
        return W.SimParams(fov_deg=s.fov_deg, view_range=s.view_range,
                           grasp_tolerance=s.grasp_tolerance,
                           reset_walk=(s.reset_walk_carry, s.reset_walk_away))

    def net_sizes(self) -> NetSizes:
        return NetSizes(grasp_head=self.grasp.head)

    def target_entropy(self, action_dim: int) -> float:
        t = self.nav.target_entropy
        return -float(action_dim) if t == "auto" else float(t)

    # -- (de)serialisation -------------------------------------------------
    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            if name == "room":
                sec["obstacles"] = [list(r) for r in sec["obstacles"]]
            out[name] = sec
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def flat(self) -> Dict[str, Any]:
        return {f"{s}.{k}": v for s, sec in self.to_dict().items() for k, v in sec.items()}

    def diff(self, other: "ExperimentConfig") -> Dict[str, Tuple[Any, Any]]:
        a, b = self.flat(), other.flat()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        tree = self.to_dict()
        for key, value in overrides.items():
            sec, name = _split_key(key)
            tree[sec][name] = value
        return from_dict(tree)


def validate(cfg: ExperimentConfig) -> None:
    run, g, c, n, e = cfg.run, cfg.grasp, cfg.curriculum, cfg.nav, cfg.eval
    if run.curriculum not in CURRICULA:
        raise ConfigError(f"run.curriculum must be one of {CURRICULA}, got {run.curriculum!r}")
    if run.policy not in POLICY_KINDS:
        raise ConfigError(f"run.policy must be one of {POLICY_KINDS}, got {run.policy!r}")
    if g.action_space not in GRASP_SPACES:
        raise ConfigError(f"grasp.action_space must be one of {GRASP_SPACES}")
    if g.head not in ("spatial", "dense"):
        raise ConfigError("grasp.head must be 'spatial' or 'dense'")
    checks = {
        "run.steps": run.steps >= 0, "run.checkpoint_every": run.checkpoint_every > 0,
        "grasp.members": g.members >= 1, "grasp.alpha": g.alpha >= 0, "grasp.beta": g.beta >= 0,
        "grasp.lr": g.lr > 0, "grasp.batch_size": g.batch_size > 0,
        "grasp.buffer_capacity": g.buffer_capacity > 0, "grasp.n_pt": g.n_pt >= 0,
        "grasp.n_grasp": g.n_grasp > 0,
        "curriculum.n_start": c.n_start > 0, "curriculum.n_stop": c.n_stop > 0,
        "curriculum.n_max": c.n_max > 0, "curriculum.n_bt": c.n_bt > 0,
        "nav.gamma": 0 <= n.gamma <= 1, "nav.tau": 0 < n.tau <= 1, "nav.lr": n.lr > 0,
        "nav.batch_size": n.batch_size > 0, "nav.buffer_capacity": n.buffer_capacity > 0,
        "nav.init_alpha": n.init_alpha >= 0,
        "eval.horizon": e.horizon > 0, "eval.gate_threshold": 0 <= e.gate_threshold <= 1,
        "eval.every": e.every >= 0, "eval.seeds": e.seeds > 0,
        "sim.reset_walk_carry": cfg.sim.reset_walk_carry >= 0,
        "sim.reset_walk_away": cfg.sim.reset_walk_away >= 0,
        "sim.grasp_tolerance": cfg.sim.grasp_tolerance > 0,
    }
    for key, ok in checks.items():
        if not ok:
            raise ConfigError(f"{key} out of range")
    if not (isinstance(n.target_entropy, (int, float)) or n.target_entropy == "auto"):
        raise ConfigError("nav.target_entropy must be a number or 'auto'")
    try:
        cfg.room_spec()
        cfg.sim_params()
    except W.ConfigurationError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# parsing


def _split_key(key: str) -> Tuple[str, str]:
    sec, _, name = key.partition(".")
    if sec not in SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r}")
    if name not in {f.name for f in fields(SECTIONS[sec])}:
        raise ConfigError(f"unknown key {key!r}")
    return sec, name


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of the field default."""
    bad = ConfigError(f"{key} has the wrong type ({type(value).__name__})")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        if not math.isfinite(value):
            raise ConfigError(f"{key} must be finite")
        return float(value)
    if key == "nav.target_entropy":
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise bad
        return float(value) if not isinstance(value, str) else value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad
        return value
    if key == "room.obstacles":
        if not isinstance(value, (list, tuple)):
            raise bad
        rects = []
        for r in value:
            if (not isinstance(r, (list, tuple)) or len(r) != 4
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in r)):
                raise ConfigError("room.obstacles entries must be [xmin, ymin, xmax, ymax]")
            rects.append(tuple(float(v) for v in r))
        return tuple(rects)
    raise bad


def from_dict(tree: Mapping[str, Any], path: Optional[str] = None,
              text: Optional[str] = None) -> ExperimentConfig:
    """Build a config from a parsed tree, rejecting unknown and missing keys."""
    def fail(msg, sec=None, key=None):
        line = _locate(text, sec, key) if text is not None else None
        return ConfigError(msg, path, line)

    for key in REQUIRED:
        sec, name = key.split(".")
        if name not in tree.get(sec, {}):
            raise fail(f"missing required key {key!r}", sec)
    sections = {}
    for sec, body in tree.items():
        if sec not in SECTIONS:
            raise fail(f"unknown section [{sec}]", sec)
        if not isinstance(body, Mapping):
            raise fail(f"{sec} must be a table", None, sec)
        cls = SECTIONS[sec]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for name, value in body.items():
            if name not in known:
                raise fail(f"unknown key '{sec}.{name}' (valid keys: {', '.join(sorted(known))})",
                           sec, name)
            try:
                kwargs[name] = _coerce(f"{sec}.{name}", value, getattr(defaults, name))
            except ConfigError as exc:
                raise fail(str(exc), sec, name) from None
        sections[sec] = cls(**kwargs)
    try:
        return ExperimentConfig(**sections)
    except ConfigError as exc:
        key = re.match(r"(\w+)\.(\w+)", str(exc))
        raise fail(str(exc), *(key.groups() if key else (None, None))) from None


def loads(text: str, path: Optional[str] = None,
          overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None) or _decode_line(str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", path, line) from None
    for key, value in (overrides or {}).items():
        sec, name = _split_key(key)
        tree.setdefault(sec, {})[name] = value
    return from_dict(tree, path, text)


def load(path, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    return loads(text, str(p), overrides)


def parse_override(item: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value in TOML syntax (bare words are strings)."""
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    key = key.strip()
    _split_key(key)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _decode_line(msg: str) -> Optional[int]:
    m = re.search(r"line (\d+)", msg)
    return int(m.group(1)) if m else None


def _locate(text: Optional[str], sec: Optional[str], key: Optional[str]) -> Optional[int]:
    """1-based line of ``key`` inside table ``sec`` (or of the table header)."""
    if text is None or sec is None:
        return None
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == sec:
                return i
            continue
        if key is not None and current == sec and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
        if key is not None and current is None and re.match(
                rf"^\s*{re.escape(sec)}\.{re.escape(key)}\s*=", line):
            return i
    return None


def iter_keys() -> Iterable[Tuple[str, Any]]:
    """Every key with its default, in file order."""
    cfg = ExperimentConfig()
    yield from cfg.flat().items()
