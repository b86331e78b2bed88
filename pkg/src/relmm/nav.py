"""Soft actor-critic for the base, rewarded by grasp outcomes.

One conv encoder feeds the actor and both critics. The encoder is trained by
the critic loss only; the actor reads detached features. Target critics sit
on a slowly tracking copy of the encoder, whose features also drive the
next-state action sample in the TD target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import world as W
from .fnapprox import (LOG_STD_MAX, LOG_STD_MIN, Network, OptimizerState, TrainingError, opt_step,
                       squashed_gaussian)
from .grasp import GraspEnsemble, from_uint8, to_uint8
from .networks import (NetSizes, actor_head_layers, critic_head_layers, nav_encoder_layers,
                       nav_input_shape)

def compute_nav_reward(r_g: int) -> float:
    return float(r_g) - 1.0


def relabel_rewards(ens: GraspEnsemble, next_obs: np.ndarray, r_g: np.ndarray,
                    sim: W.SimParams = W.DEFAULT_SIM) -> np.ndarray:
    """Optimistic-success reward for a batch of transitions.

    Transitions with a real success keep reward 0; the rest get the clamped
    max optimistic value of the next observation's grasp crop, minus one.
    """
    r_g = np.asarray(r_g)
    out = np.zeros(len(r_g))
    fail = np.flatnonzero(r_g == 0)
    if fail.size:
        crops = W.crop_grasp(np.asarray(next_obs)[fail], sim)
        g = ens.g_tilde(np.ascontiguousarray(crops))
        out[fail] = np.clip(g.max(axis=-1), 0.0, 1.0) - 1.0
    return out


def relabel_reward(ens: GraspEnsemble, next_obs: np.ndarray, r_g: int,
                   sim: W.SimParams = W.DEFAULT_SIM) -> float:
    return float(relabel_rewards(ens, np.asarray(next_obs)[None], np.array([r_g]), sim)[0])


class NavBuffer:
    """FIFO transitions (o, a, r_n, o', grasp attempted, r_g); images kept as uint8."""

    def __init__(self, capacity: int = 100_000, obs_shape=(3, 32, 32), action_dim: int = 2):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity,) + tuple(obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros((self.capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(self.capacity, dtype=np.float32)
        self.attempted = np.zeros(self.capacity, dtype=bool)
        self.r_g = np.zeros(self.capacity, dtype=np.int8)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, o, a, r_n, o_next, attempted: bool, r_g: int) -> None:
        if r_n not in (-1.0, 0.0):
            raise ValueError(f"stored navigation reward must be -1 or 0, got {r_n}")
        k = self.inserted % self.capacity
        self.obs[k] = to_uint8(o)
        self.next_obs[k] = to_uint8(o_next)
        self.actions[k] = a
        self.rewards[k] = r_n
        self.attempted[k] = attempted
        self.r_g[k] = r_g
        self.inserted += 1

    def sample(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return rng.integers(len(self), size=batch_size)

    def batch(self, idx: np.ndarray) -> Dict[str, np.ndarray]:
        return {"obs": from_uint8(self.obs[idx]), "next_obs": from_uint8(self.next_obs[idx]),
                "actions": self.actions[idx].astype(np.float32),
                "rewards": self.rewards[idx].astype(np.float64), "r_g": self.r_g[idx]}

    _FIELDS = ("obs", "next_obs", "actions", "rewards", "attempted", "r_g")

    def arrays(self, prefix: str) -> dict:
        n = len(self)
        return {f"{prefix}.{f}": getattr(self, f)[:n] for f in self._FIELDS}

    def load_arrays(self, arrays: dict, prefix: str, inserted: int) -> None:
        for f in self._FIELDS:
            src = arrays[f"{prefix}.{f}"]
            getattr(self, f)[:len(src)] = src
        self.inserted = inserted


@dataclass
class SacLosses:
    critic1: float
    critic2: float
    actor: float
    temperature: float
    alpha: float


class NavPolicy:
    """Squashed-Gaussian actor, twin critics with targets, tuned temperature."""

    def __init__(self, sizes: NetSizes = NetSizes(), sim: W.SimParams = W.DEFAULT_SIM,
                 action_dim: int = 2, gamma: float = 0.99, tau: float = 0.005,
                 lr: float = 3e-4, batch_size: int = 32, init_alpha: float = 1.0,
                 auto_alpha: bool = True, target_entropy: Optional[float] = None,
                 seed: int = 0):
        self.action_dim = action_dim
        self.gamma = float(gamma)
        self.tau = float(tau)
        self.batch_size = int(batch_size)
        self.auto_alpha = auto_alpha
        self.target_entropy = -float(action_dim) if target_entropy is None else target_entropy
        init = np.random.default_rng(seed)

        def seed_():
            return int(init.integers(2**31 - 1))

        enc_layers = nav_encoder_layers(sizes)
        self.encoder = Network(nav_input_shape(sim), enc_layers, seed=seed_())
        self.target_encoder = Network(nav_input_shape(sim), enc_layers, seed=0)
        self.target_encoder.copy_params_from(self.encoder)
        feat = self.encoder.output_shape[0]
        self.feature_dim = feat
        self.actor = Network((feat,), actor_head_layers(sizes, action_dim), seed=seed_())
        crit = critic_head_layers(sizes)
        self.q1 = Network((feat + action_dim,), crit, seed=seed_())
        self.q2 = Network((feat + action_dim,), crit, seed=seed_())
        self.q1_target = Network((feat + action_dim,), crit, seed=0)
        self.q2_target = Network((feat + action_dim,), crit, seed=0)
        self.q1_target.copy_params_from(self.q1)
        self.q2_target.copy_params_from(self.q2)
        self.log_alpha = np.array([math.log(init_alpha)]) if init_alpha > 0 else np.array([-np.inf])
        self.opts = {name: OptimizerState(lr=lr) for name in ("encoder", "q1", "q2", "actor", "alpha")}
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # -- acting ------------------------------------------------------------------

    def features(self, obs: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.target_encoder if target else self.encoder
        return net.forward(obs, cache=False)

    def _dist(self, feats: np.ndarray, cache: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = self.actor.forward(feats, cache=cache).astype(np.float64)
        mean, raw = out[:, :self.action_dim], out[:, self.action_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return mean, log_std, inside

    def _sample(self, mean, log_std, eps):
        return squashed_gaussian(mean, log_std, eps)

    def act(self, obs: np.ndarray, rng: Optional[np.random.Generator], greedy: bool = False) -> np.ndarray:
        """Action(s) in [-1, 1]^d for one observation or a batch."""
        o = np.asarray(obs, dtype=np.float32)
        single = o.ndim == 3
        if single:
            o = o[None]
        mean, log_std, _ = self._dist(self.features(o))
        if greedy:
            a = np.tanh(mean)
        else:
            _, a, _ = self._sample(mean, log_std, rng.standard_normal(mean.shape))
        a = np.clip(a, -1.0, 1.0)
        return a[0] if single else a

    # -- learning ------------------------------------------------------------------

    def td_target(self, rewards, next_feats_t, rng) -> np.ndarray:
        mean, log_std, _ = self._dist(next_feats_t)
        _, a_next, logp_next = self._sample(mean, log_std, rng.standard_normal(mean.shape))
        x = np.concatenate([next_feats_t, a_next.astype(np.float32)], axis=1)
        q_next = np.minimum(self.q1_target.forward(x, cache=False)[:, 0],
                            self.q2_target.forward(x, cache=False)[:, 0]).astype(np.float64)
        alpha = self.alpha if np.isfinite(self.log_alpha[0]) else 0.0
        return rewards + self.gamma * (q_next - alpha * logp_next)

    def update(self, batch: Dict[str, np.ndarray], rng: np.random.Generator,
               rewards: Optional[np.ndarray] = None) -> SacLosses:
        """One step each for critics (+encoder), actor and temperature; then targets."""
        obs, next_obs, actions = batch["obs"], batch["next_obs"], batch["actions"]
        r = batch["rewards"] if rewards is None else rewards
        b = len(obs)
        alpha = self.alpha if np.isfinite(self.log_alpha[0]) else 0.0

        y = self.td_target(r, self.features(next_obs, target=True), rng)

        # critics and encoder
        feats = self.encoder.forward(obs)
        x = np.concatenate([feats, actions.astype(np.float32)], axis=1)
        g_feat = np.zeros_like(feats)
        losses = []
        for name, q in (("q1", self.q1), ("q2", self.q2)):
            pred = q.forward(x)[:, 0].astype(np.float64)
            err = pred - y
            losses.append(float(np.mean(err ** 2)))
            gx, grads = q.backward((2.0 * err / b).astype(np.float32)[:, None])
            g_feat += gx[:, :self.feature_dim]
            opt_step(self.opts[name], q.params, grads)
        _, enc_grads = self.encoder.backward(g_feat)
        opt_step(self.opts["encoder"], self.encoder.params, enc_grads)
        if not all(np.isfinite(losses)):
            raise TrainingError("non-finite critic loss")

        # actor on detached features
        mean, log_std, inside = self._dist(feats, cache=True)
        eps = rng.standard_normal(mean.shape)
        u, a, logp = self._sample(mean, log_std, eps)
        std = np.exp(log_std)
        xa = np.concatenate([feats, a.astype(np.float32)], axis=1)
        q1v = self.q1.forward(xa)[:, 0].astype(np.float64)
        q2v = self.q2.forward(xa)[:, 0].astype(np.float64)
        use1 = q1v <= q2v
        qmin = np.where(use1, q1v, q2v)
        ones = np.ones((b, 1), dtype=np.float32)
        ga1, _ = self.q1.backward(ones * use1[:, None])
        ga2, _ = self.q2.backward(ones * (~use1)[:, None])
        dq_da = (ga1 + ga2)[:, self.feature_dim:].astype(np.float64)
        actor_loss = float(np.mean(alpha * logp - qmin))
        if not np.isfinite(actor_loss):
            raise TrainingError("non-finite actor loss")
        one_m_a2 = 1.0 - a ** 2
        d_mean = (alpha * 2.0 * a - dq_da * one_m_a2) / b
        d_logstd = (alpha * (-1.0 + 2.0 * a * std * eps) - dq_da * one_m_a2 * std * eps) / b
        d_logstd = d_logstd * inside
        _, actor_grads = self.actor.backward(
            np.concatenate([d_mean, d_logstd], axis=1).astype(np.float32))
        opt_step(self.opts["actor"], self.actor.params, actor_grads)

        # temperature
        temp_loss = 0.0
        if self.auto_alpha:
            temp_loss = float(-np.mean(self.log_alpha[0] * (logp + self.target_entropy)))
            opt_step(self.opts["alpha"], {"log_alpha": self.log_alpha},
                     {"log_alpha": np.array([-np.mean(logp + self.target_entropy)])})

        self.q1_target.soft_update_from(self.q1, self.tau)
        self.q2_target.soft_update_from(self.q2, self.tau)
        self.target_encoder.soft_update_from(self.encoder, self.tau)
        self.updates += 1
        return SacLosses(losses[0], losses[1], actor_loss, temp_loss, self.alpha)

    # -- persistence ------------------------------------------------------------------

    def _nets(self) -> Dict[str, Network]:
        return {"encoder": self.encoder, "target_encoder": self.target_encoder,
                "actor": self.actor, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def arrays(self, prefix: str = "nav") -> dict:
        out = {f"{prefix}.log_alpha": self.log_alpha}
        for name, net in self._nets().items():
            for k, v in net.params.items():
                out[f"{prefix}.{name}.{k}"] = v
        for name, opt in self.opts.items():
            for k in opt.m:
                out[f"{prefix}.adam.{name}.m.{k}"] = opt.m[k]
                out[f"{prefix}.adam.{name}.v.{k}"] = opt.v[k]
        return out

    def meta(self) -> dict:
        return {"opt_steps": {k: o.step for k, o in self.opts.items()}, "updates": self.updates}

    def load(self, arrays: dict, meta: dict, prefix: str = "nav") -> None:
        self.log_alpha[...] = arrays[f"{prefix}.log_alpha"]
        for name, net in self._nets().items():
            for k in net.params:
                net.params[k][...] = arrays[f"{prefix}.{name}.{k}"]
        for name, opt in self.opts.items():
            opt.m, opt.v = {}, {}
            mp = f"{prefix}.adam.{name}.m."
            for key in arrays:
                if key.startswith(mp):
                    k = key[len(mp):]
                    opt.m[k] = np.array(arrays[key])
                    opt.v[k] = np.array(arrays[f"{prefix}.adam.{name}.v.{k}"])
            opt.step = meta["opt_steps"][name]
        self.updates = meta["updates"]


def sample_nav_action(pol: NavPolicy, obs: np.ndarray, rng: Optional[np.random.Generator],
                      greedy: bool = False) -> np.ndarray:
    return pol.act(obs, rng, greedy)


def sac_update(pol: NavPolicy, buf: NavBuffer, rng: np.random.Generator,
               ens: Optional[GraspEnsemble] = None, relabel: bool = False,
               sim: W.SimParams = W.DEFAULT_SIM) -> Optional[SacLosses]:
    """Sample a batch (relabeling rewards if asked) and update; None if too few records."""
    if len(buf) < pol.batch_size:
        return None
    batch = buf.batch(buf.sample(rng, pol.batch_size))
    rewards = None
    if relabel:
        if ens is None:
            raise ValueError("relabeling needs a grasp ensemble")
        rewards = relabel_rewards(ens, batch["next_obs"], batch["r_g"], sim)
    return pol.update(batch, rng, rewards)
