"""Grasp learning as a contextual bandit over the discrete grasp grid.

An ensemble of success predictors is trained with per-action binary
cross-entropy; exploration samples from a Boltzmann distribution over the
optimistic value ``alpha * mean + beta * std`` of the ensemble, and the same
optimistic value (clamped to [0, 1]) is the probability of attempting a grasp
at all.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import world as W
from .fnapprox import (LOG_STD_MAX, LOG_STD_MIN, Network, OptimizerState, TrainingError, mlp,
                       opt_step, squashed_gaussian, stacked_forward)
from .networks import (SPATIAL_FIELD, SPATIAL_PAD, NetSizes, grasp_encoder_layers, grasp_input_shape,
                       grasp_layers, grasp_logit_order, grasp_net_input_shape)

log = logging.getLogger(__name__)


def to_uint8(obs: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(obs) * 255.0).astype(np.uint8)


def from_uint8(obs: np.ndarray) -> np.ndarray:
    return obs.astype(np.float32) / np.float32(255.0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(z: np.ndarray, r: np.ndarray) -> np.ndarray:
    """-r log s(z) - (1-r) log(1-s(z)), computed stably."""
    return np.logaddexp(0.0, z) - r * z


def optimistic_value(mean, std, alpha: float, beta: float):
    return alpha * np.asarray(mean) + beta * np.asarray(std)


def boltzmann(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def clamp_prob(values) -> float:
    return float(np.clip(np.max(values), 0.0, 1.0))


# ---------------------------------------------------------------------------
# buffer


class GraspBuffer:
    """FIFO store of (grasp observation, action, success) records.

    Observations are kept as uint8 (the renderer quantises to 1/255), actions
    as int cell indices or float points, depending on ``action_shape``.
    """

    def __init__(self, capacity: int = 100_000, obs_shape=(3, 16, 16),
                 action_shape: Tuple[int, ...] = ()):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity,) + tuple(obs_shape), dtype=np.uint8)
        adtype = np.int32 if action_shape == () else np.float32
        self.actions = np.zeros((self.capacity,) + tuple(action_shape), dtype=adtype)
        self.rewards = np.zeros(self.capacity, dtype=np.int8)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, obs, action, reward) -> None:
        k = self.inserted % self.capacity
        self.obs[k] = to_uint8(obs)
        self.actions[k] = action
        self.rewards[k] = int(reward)
        self.inserted += 1

    def batch(self, idx: np.ndarray):
        return from_uint8(self.obs[idx]), self.actions[idx], self.rewards[idx].astype(np.float32)

    def chronological(self) -> np.ndarray:
        """Indices of stored records, oldest first."""
        n = len(self)
        if self.inserted <= self.capacity:
            return np.arange(n)
        start = self.inserted % self.capacity
        return (np.arange(n) + start) % self.capacity

    def arrays(self, prefix: str) -> dict:
        n = len(self)
        return {f"{prefix}.obs": self.obs[:n], f"{prefix}.actions": self.actions[:n],
                f"{prefix}.rewards": self.rewards[:n]}

    def load_arrays(self, arrays: dict, prefix: str, inserted: int) -> None:
        n = len(arrays[f"{prefix}.rewards"])
        self.obs[:n] = arrays[f"{prefix}.obs"]
        self.actions[:n] = arrays[f"{prefix}.actions"]
        self.rewards[:n] = arrays[f"{prefix}.rewards"]
        self.inserted = inserted


# ---------------------------------------------------------------------------
# ensemble


class GraspEnsemble:
    """``M`` independently initialised grasp-success predictors.

    With the spatial head, training evaluates each member only on the input
    patch that determines the taken cell's logit; the patch network shares the
    member's parameter arrays, so this is the same gradient at a fraction of
    the cost.
    """

    def __init__(self, members: int = 6, alpha: float = 10.0, beta: float = 10.0,
                 sizes: NetSizes = NetSizes(), sim: W.SimParams = W.DEFAULT_SIM,
                 seed: int = 0, lr: float = 3e-4, batch_size: int = 64,
                 bootstrap: bool = False, prior_logit: float = -4.6):
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.sim = sim
        self.batch_size = int(batch_size)
        self.bootstrap = bootstrap
        self.frozen = False
        self.n_actions = sim.region.n_actions
        self.spatial = sizes.grasp_head == "spatial"
        init = np.random.default_rng(seed)
        shape = grasp_net_input_shape(sizes, sim)
        layers = grasp_layers(sizes, self.n_actions, prior_logit)
        self.members: List[Network] = [
            Network(shape, layers, seed=int(init.integers(2**31 - 1))) for _ in range(members)]
        self.patch_members: List[Network] = []
        if self.spatial:
            for net in self.members:
                patch = Network((shape[0], SPATIAL_FIELD, SPATIAL_FIELD), layers)
                patch.params = net.params
                self.patch_members.append(patch)
        self.opts = [OptimizerState(lr=lr) for _ in range(members)]
        self.order = grasp_logit_order(sizes, self.n_actions)
        self._mask_seed = int(init.integers(2**31 - 1))
        self._masks: Optional[np.ndarray] = None
        self.updates = 0

    @property
    def size(self) -> int:
        return len(self.members)

    def _batchify(self, o_g) -> Tuple[np.ndarray, bool]:
        o = np.asarray(o_g, dtype=np.float32)
        single = o.ndim == 3
        return (o[None] if single else o), single

    def member_probs(self, o_g) -> np.ndarray:
        """Sigmoid outputs, shape (M, 225) for one observation or (M, B, 225)."""
        o, single = self._batchify(o_g)
        z = stacked_forward(self.members, self._pad(o)).astype(np.float64)
        if self.order is not None:
            z = z[:, :, self.order]
        p = sigmoid(z)
        return p[:, 0] if single else p

    def stats(self, o_g) -> Tuple[np.ndarray, np.ndarray]:
        """Per-action mean and population std of member success probabilities."""
        p = self.member_probs(o_g)
        return p.mean(axis=0), p.std(axis=0)

    def g_tilde(self, o_g) -> np.ndarray:
        mean, std = self.stats(o_g)
        return optimistic_value(mean, std, self.alpha, self.beta)

    def grasp_prob(self, o_g) -> float:
        """Clamped max over cells of the optimistic value."""
        return clamp_prob(self.g_tilde(o_g))

    def raw_grasp_value(self, o_g) -> float:
        return float(np.max(self.g_tilde(o_g)))

    def execute(self, state: W.WorldState, a) -> Tuple[W.WorldState, int]:
        return W.attempt_grasp(state, a)

    def sample_action(self, o_g, rng: np.random.Generator, greedy: bool = False) -> int:
        g = self.g_tilde(o_g)
        if greedy:
            return int(np.argmax(g))  # first maximum wins ties
        return int(rng.choice(self.n_actions, p=boltzmann(g)))

    def _pad(self, o: np.ndarray) -> np.ndarray:
        if not self.spatial:
            return o
        p = SPATIAL_PAD
        out = np.zeros(o.shape[:2] + (o.shape[2] + 2 * p, o.shape[3] + 2 * p), dtype=o.dtype)
        out[:, :, p:-p, p:-p] = o
        return out

    def _logits(self, net: Network, o: np.ndarray, cache: bool = False) -> np.ndarray:
        z = net.forward(self._pad(o), cache=cache).astype(np.float64)
        return z if self.order is None else z[:, self.order]

    def _patches(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """The padded-input patch behind each taken cell's logit."""
        side = int(round(self.n_actions ** 0.5))
        pos = self.order[actions]
        r, c = pos // side, pos % side
        padded = self._pad(obs)
        f = SPATIAL_FIELD
        rows = r[:, None] + np.arange(f)[None, :]
        cols = c[:, None] + np.arange(f)[None, :]
        b = np.arange(len(actions))[:, None, None, None]
        ch = np.arange(obs.shape[1])[None, :, None, None]
        return padded[b, ch, rows[:, None, :, None], cols[:, None, None, :]]

    def _sample_indices(self, k: int, n: int, bs: int, rng: np.random.Generator) -> np.ndarray:
        if not self.bootstrap:
            return rng.integers(n, size=min(bs, n))
        # fixed half-sample per member, one coin per buffer slot
        if self._masks is None:
            self._masks = np.random.default_rng(self._mask_seed).random((0, self.size)) < 0.5
        if len(self._masks) < n:
            extra = np.random.default_rng([self._mask_seed, len(self._masks)]).random(
                (n - len(self._masks), self.size)) < 0.5
            self._masks = np.concatenate([self._masks, extra])
        cand = np.flatnonzero(self._masks[:n, k])
        if cand.size == 0:
            cand = np.arange(n)
        return cand[rng.integers(cand.size, size=min(bs, n))]

    # -- training -----------------------------------------------------------

    def member_loss(self, k: int, obs, actions, rewards) -> float:
        z = self._logits(self.members[k], np.asarray(obs, dtype=np.float32))
        zt = z[np.arange(len(actions)), np.asarray(actions, dtype=np.int64)]
        return float(np.mean(bce_with_logits(zt, rewards)))

    def update(self, buf: GraspBuffer, rng: np.random.Generator,
               batch_size: Optional[int] = None) -> Optional[np.ndarray]:
        """One Adam step per member on its own minibatch; returns member losses.

        Returns None (and logs) on an empty buffer or a frozen ensemble.
        """
        if self.frozen:
            return None
        n = len(buf)
        if n == 0:
            log.warning("grasp update skipped: empty buffer")
            return None
        bs = batch_size or self.batch_size
        losses = np.zeros(self.size)
        for k, (net, opt) in enumerate(zip(self.members, self.opts)):
            idx = self._sample_indices(k, n, bs, rng)
            obs, actions, rewards = buf.batch(idx)
            actions = actions.astype(np.int64)
            b = len(idx)
            if self.spatial:
                trainee = self.patch_members[k]
                zt = trainee.forward(self._patches(obs, actions))[:, 0].astype(np.float64)
            else:
                trainee = net
                zt = net.forward(obs)[np.arange(b), actions].astype(np.float64)
            loss = bce_with_logits(zt, rewards)
            if not np.all(np.isfinite(loss)):
                raise TrainingError(f"non-finite grasp loss in member {k}")
            losses[k] = loss.mean()
            dz = ((sigmoid(zt) - rewards) / b).astype(net.dtype)
            if self.spatial:
                grad = dz[:, None]
            else:
                grad = np.zeros((b, self.n_actions), dtype=net.dtype)
                grad[np.arange(b), actions] = dz
            _, grads = trainee.backward(grad)
            opt_step(opt, net.params, grads)
        self.updates += 1
        return losses

    # -- persistence ----------------------------------------------------------

    def arrays(self, prefix: str = "grasp") -> dict:
        out = {}
        for k, (net, opt) in enumerate(zip(self.members, self.opts)):
            for name, v in net.params.items():
                out[f"{prefix}.{k}.{name}"] = v
                if name in opt.m:
                    out[f"{prefix}.{k}.adam_m.{name}"] = opt.m[name]
                    out[f"{prefix}.{k}.adam_v.{name}"] = opt.v[name]
        return out

    def meta(self) -> dict:
        return {"opt_steps": [o.step for o in self.opts], "updates": self.updates,
                "frozen": self.frozen}

    def load(self, arrays: dict, meta: dict, prefix: str = "grasp") -> None:
        for k, (net, opt) in enumerate(zip(self.members, self.opts)):
            for name in net.params:
                net.params[name][...] = arrays[f"{prefix}.{k}.{name}"]
                mk = f"{prefix}.{k}.adam_m.{name}"
                if mk in arrays:
                    opt.m[name] = arrays[mk].copy()
                    opt.v[name] = arrays[f"{prefix}.{k}.adam_v.{name}"].copy()
            opt.step = meta["opt_steps"][k]
        self.updates = meta["updates"]
        self.frozen = meta.get("frozen", False)

    def param_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for net in self.members:
            for name in sorted(net.params):
                h.update(net.params[name].tobytes())
        return h.hexdigest()


def region_point(region: W.GraspRegion, a) -> Tuple[float, float]:
    """Affine map of ``a`` in [-1, 1]^2 onto the grasp rectangle."""
    (x0, x1), (y0, y1) = region.x_range, region.y_range
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    return (x0 + (a[0] + 1) / 2 * (x1 - x0), y0 + (a[1] + 1) / 2 * (y1 - y0))


class ContinuousGrasp:
    """Grasp point drawn from a squashed Gaussian over the grasp region.

    A critic predicts the success logit of (crop, point) and is trained with
    the same cross-entropy as the discrete ensemble. The actor maximises that
    logit plus an entropy bonus whose weight is tuned toward a target entropy.
    Grasping is a one-step bandit, so there is no bootstrapped target and no
    target network. Actions are stored in [-1, 1]^2 and mapped affinely onto
    the region rectangle.
    """

    def __init__(self, sizes: NetSizes = NetSizes(), sim: W.SimParams = W.DEFAULT_SIM,
                 seed: int = 0, lr: float = 3e-4, batch_size: int = 64,
                 init_alpha: float = 0.1, target_entropy: float = -2.0,
                 prior_logit: float = -4.6):
        self.sim = sim
        self.batch_size = int(batch_size)
        self.target_entropy = float(target_entropy)
        self.frozen = False
        init = np.random.default_rng(seed)

        def seed_():
            return int(init.integers(2**31 - 1))

        self.encoder = Network(grasp_input_shape(sim), grasp_encoder_layers(sizes), seed=seed_())
        feat = self.encoder.output_shape[0]
        self.feature_dim = feat
        self.critic = Network((feat + 2,), mlp(sizes.grasp_dense, 1, out_scale=0.1,
                                               out_bias=prior_logit), seed=seed_())
        self.actor = Network((feat,), mlp(sizes.grasp_dense, 4, out_scale=0.1), seed=seed_())
        self.log_alpha = np.array([np.log(init_alpha)])
        self.opts = {k: OptimizerState(lr=lr) for k in ("encoder", "critic", "actor", "alpha")}
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def to_point(self, a) -> Tuple[float, float]:
        return region_point(self.sim.region, a)

    def execute(self, state: W.WorldState, a) -> Tuple[W.WorldState, int]:
        return W.attempt_grasp_at(state, *self.to_point(a))

    def _dist(self, feats, cache: bool = False):
        out = self.actor.forward(feats, cache=cache).astype(np.float64)
        raw = out[:, 2:]
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return out[:, :2], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), inside

    def _greedy(self, o_g) -> Tuple[np.ndarray, np.ndarray]:
        o = np.asarray(o_g, dtype=np.float32)
        o = o[None] if o.ndim == 3 else o
        f = self.encoder.forward(o, cache=False)
        a = np.tanh(self._dist(f)[0])
        z = self.critic.forward(np.concatenate([f, a.astype(np.float32)], 1), cache=False)
        return a, z[:, 0].astype(np.float64)

    def raw_grasp_value(self, o_g) -> float:
        return float(sigmoid(self._greedy(o_g)[1][0]))

    def grasp_prob(self, o_g) -> float:
        return clamp_prob(self.raw_grasp_value(o_g))

    def sample_action(self, o_g, rng: np.random.Generator, greedy: bool = False) -> np.ndarray:
        if greedy:
            return self._greedy(o_g)[0][0]
        f = self.encoder.forward(np.asarray(o_g, dtype=np.float32)[None], cache=False)
        mean, log_std, _ = self._dist(f)
        _, a, _ = squashed_gaussian(mean, log_std, rng.standard_normal(mean.shape))
        return np.clip(a[0], -1.0, 1.0)

    def update(self, buf: GraspBuffer, rng: np.random.Generator,
               batch_size: Optional[int] = None) -> Optional[np.ndarray]:
        """One critic (+encoder), actor and temperature step; returns [critic loss]."""
        if self.frozen:
            return None
        n = len(buf)
        if n == 0:
            log.warning("grasp update skipped: empty buffer")
            return None
        idx = rng.integers(n, size=min(batch_size or self.batch_size, n))
        obs, actions, rewards = buf.batch(idx)
        b = len(idx)

        feats = self.encoder.forward(obs)
        z = self.critic.forward(np.concatenate([feats, actions.astype(np.float32)], 1))[:, 0]
        z = z.astype(np.float64)
        loss = float(np.mean(bce_with_logits(z, rewards)))
        if not np.isfinite(loss):
            raise TrainingError("non-finite grasp critic loss")
        gx, grads = self.critic.backward(((sigmoid(z) - rewards) / b).astype(np.float32)[:, None])
        opt_step(self.opts["critic"], self.critic.params, grads)
        _, enc_grads = self.encoder.backward(gx[:, :self.feature_dim])
        opt_step(self.opts["encoder"], self.encoder.params, enc_grads)

        alpha = self.alpha
        mean, log_std, inside = self._dist(feats, cache=True)
        eps = rng.standard_normal(mean.shape)
        _, a, logp = squashed_gaussian(mean, log_std, eps)
        std = np.exp(log_std)
        self.critic.forward(np.concatenate([feats, a.astype(np.float32)], 1))
        ga, _ = self.critic.backward(np.ones((b, 1), dtype=np.float32))
        dz_da = ga[:, self.feature_dim:].astype(np.float64)
        one_m_a2 = 1.0 - a ** 2
        d_mean = (alpha * 2.0 * a - dz_da * one_m_a2) / b
        d_logstd = (alpha * (-1.0 + 2.0 * a * std * eps) - dz_da * one_m_a2 * std * eps) / b * inside
        _, actor_grads = self.actor.backward(
            np.concatenate([d_mean, d_logstd], 1).astype(np.float32))
        opt_step(self.opts["actor"], self.actor.params, actor_grads)
        opt_step(self.opts["alpha"], {"log_alpha": self.log_alpha},
                 {"log_alpha": np.array([-np.mean(logp + self.target_entropy)])})
        self.updates += 1
        return np.array([loss])

    # -- persistence --------------------------------------------------------

    def _nets(self):
        return {"encoder": self.encoder, "critic": self.critic, "actor": self.actor}

    def arrays(self, prefix: str = "grasp") -> dict:
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
        return {"opt_steps": {k: o.step for k, o in self.opts.items()},
                "updates": self.updates, "frozen": self.frozen}

    def load(self, arrays: dict, meta: dict, prefix: str = "grasp") -> None:
        self.log_alpha[...] = arrays[f"{prefix}.log_alpha"]
        for name, net in self._nets().items():
            for k in net.params:
                net.params[k][...] = arrays[f"{prefix}.{name}.{k}"]
        for name, opt in self.opts.items():
            mp = f"{prefix}.adam.{name}.m."
            opt.m = {key[len(mp):]: np.array(v) for key, v in arrays.items() if key.startswith(mp)}
            opt.v = {k: np.array(arrays[f"{prefix}.adam.{name}.v.{k}"]) for k in opt.m}
            opt.step = meta["opt_steps"][name]
        self.updates = meta["updates"]
        self.frozen = meta.get("frozen", False)

    def param_digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for net in self._nets().values():
            for name in sorted(net.params):
                h.update(net.params[name].tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# training loops


AttemptHook = Callable[[int, Optional[np.ndarray]], None]


@dataclass
class GraspContext:
    """What the grasp loops need besides the ensemble and buffer."""

    action_rng: np.random.Generator
    batch_rng: np.random.Generator
    on_attempt: Optional[AttemptHook] = None
    recenter: bool = False


def _attempt(ens: GraspEnsemble, buf: GraspBuffer, state: W.WorldState,
             ctx: GraspContext, train: bool) -> Tuple[W.WorldState, int]:
    o = W.render_grasp_obs(state)
    a = ens.sample_action(o, ctx.action_rng)
    state, r = ens.execute(state, a)
    buf.add(o, a, r)
    losses = ens.update(buf, ctx.batch_rng) if train else None
    if ctx.on_attempt is not None:
        ctx.on_attempt(r, losses)
    return state, r


def _drop(state: W.WorldState) -> W.WorldState:
    from . import rng as rngmod
    gen = rngmod.from_state(state.rng_state)
    out = W.drop_in_region(state, gen)
    return replace(out, rng_state=rngmod.get_state(gen))


def train_grasp(ens: GraspEnsemble, buf: GraspBuffer, state: W.WorldState, n: int,
                pt: int, ctx: GraspContext) -> Tuple[W.WorldState, int]:
    """Up to ``n`` grasp attempts, each followed by an ensemble update.

    With ``pt=1`` a success is dropped back at a random point of the grasp
    region and practice continues; with ``pt=0`` the first success returns 1
    and leaves the object held.
    """
    for _ in range(n):
        if ctx.recenter:
            state = W.recenter_if_stuck(state)
        state, r = _attempt(ens, buf, state, ctx, train=True)
        if r == 1 and pt:
            state = _drop(state)
        elif r == 1:
            return state, 1
    return state, 0


@dataclass
class CurriculumCounters:
    n_start: int = 10
    n_stop: int = 50
    n_max: int = 2000
    n_bt: int = 300
    n_grasp: int = 2
    n_since: int = 0
    r_max: int = 0
    attempts: int = 0  # attempts made in the last call


def train_grasp_autocurr(ens: GraspEnsemble, buf: GraspBuffer, state: W.WorldState,
                         counters: CurriculumCounters,
                         ctx: GraspContext) -> Tuple[W.WorldState, int]:
    """Front-loaded grasp practice used when no stationary phase is run."""
    if len(buf) >= counters.n_max:
        before = buf.inserted
        state, r = train_grasp(ens, buf, state, counters.n_grasp, 0, ctx)
        counters.attempts = buf.inserted - before
        counters.r_max = r
        return state, r
    counters.n_since = 0
    counters.r_max = 0
    counters.attempts = 0
    while True:
        state, r = _attempt(ens, buf, state, ctx, train=len(buf) + 1 >= counters.n_bt)
        counters.attempts += 1
        if r == 1:
            counters.n_since = 0
            counters.r_max = 1
        else:
            counters.n_since += 1
        if len(buf) >= counters.n_max:
            break
        if counters.r_max == 1:
            if counters.n_since >= counters.n_stop:
                break
        elif counters.n_since >= counters.n_start:
            break
        if r == 1:
            state = _drop(state)
    return state, counters.r_max
