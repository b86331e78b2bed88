"""Small numpy networks: conv / pooling / dense stacks, backprop and Adam.

Images enter a network in channels-first layout ``(batch, C, H, W)`` and are
moved to channels-last once, internally. A conv is a sum of one matmul per
kernel offset over shifted views of the input, which avoids building an
im2col copy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


class TrainingError(RuntimeError):
    """Raised when a loss, gradient or parameter stops being finite."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    init_scale: float = 1.0
    bias_init: float | None = None


@dataclass(frozen=True)
class AvgPool2D:
    size: int = 2


@dataclass(frozen=True)
class Dense:
    width: int
    # Uniform init bound is ``init_scale / sqrt(fan_in)``.
    init_scale: float = 1.0
    bias_init: float | None = None


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Conv2D | AvgPool2D | Dense | ReLU | Tanh | Flatten


def conv_stack(channels: int, n_conv: int, stride: int, pool: bool,
               dense: Sequence[int]) -> List[LayerSpec]:
    """conv-relu(-pool) x n_conv, flatten, then dense-relu for each width."""
    layers: List[LayerSpec] = []
    for _ in range(n_conv):
        layers += [Conv2D(channels, 3, stride, 1), ReLU()]
        if pool:
            layers.append(AvgPool2D(2))
    layers.append(Flatten())
    for w in dense:
        layers += [Dense(w), ReLU()]
    return layers


def mlp(widths: Sequence[int], out: int, out_scale: float = 1.0,
        out_bias: float | None = None) -> List[LayerSpec]:
    layers: List[LayerSpec] = []
    for w in widths:
        layers += [Dense(w), ReLU()]
    layers.append(Dense(out, init_scale=out_scale, bias_init=out_bias))
    return layers


# ---------------------------------------------------------------------------
# network


def _pad_hw(x: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Zero-pad the two spatial axes starting at ``axis`` (cheaper than np.pad)."""
    shape = list(x.shape)
    shape[axis] += 2 * p
    shape[axis + 1] += 2 * p
    out = np.zeros(shape, dtype=x.dtype)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(p, p + x.shape[axis])
    idx[axis + 1] = slice(p, p + x.shape[axis + 1])
    out[tuple(idx)] = x
    return out


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


class Network:
    """A feed-forward stack with a forward cache for one backward pass.

    ``params`` maps ``"<layer index>.weight"`` / ``"<layer index>.bias"`` to
    arrays. Conv weights are stored as ``(k * k * C_in, C_out)`` matrices whose
    rows follow the im2col column order ``(ki, kj, c)``.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec],
                 seed: int = 0, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self._shapes: List[Tuple[int, ...]] = []
        self._cache: List[object] | None = None
        self._build(np.random.default_rng(seed))

    # shapes are tracked channels-last for image tensors
    def _build(self, rng: np.random.Generator) -> None:
        shape = self.input_shape
        if len(shape) == 3:
            c, h, w = shape
            shape = (h, w, c)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                h, w, c = shape
                fan_in = c * layer.kernel ** 2
                bound = layer.init_scale / np.sqrt(fan_in)
                self.params[f"{i}.weight"] = rng.uniform(
                    -bound, bound, (fan_in, layer.out_channels)).astype(self.dtype)
                if layer.bias_init is None:
                    b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                                    layer.out_channels)
                else:
                    b = np.full(layer.out_channels, layer.bias_init)
                self.params[f"{i}.bias"] = b.astype(self.dtype)
                shape = (_conv_out(h, layer.kernel, layer.stride, layer.padding),
                         _conv_out(w, layer.kernel, layer.stride, layer.padding),
                         layer.out_channels)
            elif isinstance(layer, AvgPool2D):
                h, w, c = shape
                shape = (h // layer.size, w // layer.size, c)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ValueError(f"Dense layer {i} needs a flat input, got {shape}")
                fan_in = shape[0]
                bound = layer.init_scale / np.sqrt(fan_in)
                self.params[f"{i}.weight"] = rng.uniform(
                    -bound, bound, (fan_in, layer.width)).astype(self.dtype)
                if layer.bias_init is None:
                    b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                                    layer.width)
                else:
                    b = np.full(layer.width, layer.bias_init)
                self.params[f"{i}.bias"] = b.astype(self.dtype)
                shape = (layer.width,)
            self._shapes.append(shape)

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self._shapes[-1] if self._shapes else self.input_shape

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input (*, {self.input_shape}), got {x.shape}")
        if x.ndim == 4:
            x = x.transpose(0, 2, 3, 1)
        caches: List[object] = []
        for i, layer in enumerate(self.layers):
            x, c = self._forward_layer(i, layer, x)
            caches.append(c)
        self._cache = caches if cache else None
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Gradients w.r.t. the last cached input and every parameter."""
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        g = np.asarray(grad_out, dtype=self.dtype)
        grads: Dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g = self._backward_layer(i, self.layers[i], g, self._cache[i], grads)
        self._cache = None
        if g.ndim == 4:
            g = g.transpose(0, 3, 1, 2)
        return g, grads

    def _forward_layer(self, i: int, layer: LayerSpec, x: np.ndarray):
        if isinstance(layer, Conv2D):
            k, s, p = layer.kernel, layer.stride, layer.padding
            b, h, w, c = x.shape
            xp = _pad_hw(x, p, 1) if p else x
            ho = _conv_out(h, k, s, p)
            wo = _conv_out(w, k, s, p)
            w3 = self.params[f"{i}.weight"].reshape(k, k, c, -1)
            # shift-and-add: one matmul per kernel offset, no im2col buffer
            y = None
            for a in range(k):
                for d in range(k):
                    part = xp[:, a:a + s * (ho - 1) + 1:s, d:d + s * (wo - 1) + 1:s, :] @ w3[a, d]
                    y = part if y is None else y + part
            y += self.params[f"{i}.bias"]
            return y, (xp, ho, wo)
        if isinstance(layer, AvgPool2D):
            q = layer.size
            b, h, w, c = x.shape
            hq, wq = h // q, w // q
            xc = x[:, :hq * q, :wq * q]
            y = xc.reshape(b, hq, q, wq, q, c).sum(axis=(2, 4)) / (q * q)
            return y, x.shape
        if isinstance(layer, Dense):
            return x @ self.params[f"{i}.weight"] + self.params[f"{i}.bias"], x
        if isinstance(layer, ReLU):
            mask = x > 0
            return x * mask, mask
        if isinstance(layer, Tanh):
            y = np.tanh(x)
            return y, y
        if isinstance(layer, Flatten):
            return x.reshape(x.shape[0], -1), x.shape
        raise TypeError(f"unknown layer {layer!r}")

    def _backward_layer(self, i, layer, g, cache, grads):
        if isinstance(layer, Conv2D):
            xp, ho, wo = cache
            k, s, p = layer.kernel, layer.stride, layer.padding
            c = xp.shape[3]
            w3 = self.params[f"{i}.weight"].reshape(k, k, c, -1)
            g2 = g.reshape(-1, g.shape[-1])
            dw = np.empty_like(w3)
            dxp = np.zeros(xp.shape, dtype=self.dtype)
            for a in range(k):
                for d in range(k):
                    rows = slice(a, a + s * (ho - 1) + 1, s)
                    cols = slice(d, d + s * (wo - 1) + 1, s)
                    dw[a, d] = xp[:, rows, cols, :].reshape(-1, c).T @ g2
                    dxp[:, rows, cols, :] += g @ w3[a, d].T
            grads[f"{i}.weight"] = dw.reshape(k * k * c, -1)
            grads[f"{i}.bias"] = g2.sum(axis=0)
            if p:
                dxp = dxp[:, p:-p, p:-p, :]
            return dxp
        if isinstance(layer, AvgPool2D):
            q = layer.size
            b, h, w, c = cache
            hq, wq = g.shape[1], g.shape[2]
            up = np.repeat(np.repeat(g, q, axis=1), q, axis=2) / (q * q)
            if up.shape[1:3] == (h, w):
                return up
            dx = np.zeros(cache, dtype=self.dtype)
            dx[:, :hq * q, :wq * q] = up
            return dx
        if isinstance(layer, Dense):
            x = cache
            grads[f"{i}.weight"] = x.T @ g
            grads[f"{i}.bias"] = g.sum(axis=0)
            return g @ self.params[f"{i}.weight"].T
        if isinstance(layer, ReLU):
            return g * cache
        if isinstance(layer, Tanh):
            return g * (1.0 - cache ** 2)
        if isinstance(layer, Flatten):
            return g.reshape(cache)
        raise TypeError(f"unknown layer {layer!r}")

    # -- parameter utilities ------------------------------------------------

    def copy_params_from(self, other: "Network") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v

    def soft_update_from(self, other: "Network", tau: float) -> None:
        for k, v in other.params.items():
            p = self.params[k]
            p *= (1.0 - tau)
            p += tau * v


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments keyed like the parameters they track."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(opt: OptimizerState, params: Dict[str, np.ndarray],
             grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """One Adam update, in place. Returns ``params`` for convenience."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    a = opt.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for k, g in grads.items():
        p = params[k]
        if k not in opt.m:
            opt.m[k] = np.zeros_like(p)
            opt.v[k] = np.zeros_like(p)
        m, v = opt.m[k], opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (a * m / (np.sqrt(v) + opt.eps)).astype(p.dtype)
    return params


# ---------------------------------------------------------------------------
# gradient check


def gradient_check(net: Network, x: np.ndarray, n_params: int = 10,
                   h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    The scalar probed is ``sum(forward(x) * proj)`` for a fixed random ``proj``.
    Run on a float64 network; float32 differences are too noisy for 1e-4.
    A probe whose differences at ``h`` and ``h/2`` disagree straddles a ReLU
    kink, where central differences are meaningless; such probes are redrawn.
    """
    rng = np.random.default_rng(seed)
    out = net.forward(x)
    proj = rng.standard_normal(out.shape)
    _, grads = net.backward(proj)

    def f() -> float:
        return float(np.sum(net.forward(x, cache=False) * proj))

    def central(p: np.ndarray, j: int, step: float) -> float:
        old = p[j]
        p[j] = old + step
        fp = f()
        p[j] = old - step
        fm = f()
        p[j] = old
        return (fp - fm) / (2 * step)

    names = sorted(net.params)
    sizes = np.array([net.params[k].size for k in names])
    worst = 0.0
    checked = 0
    for _ in range(20 * n_params):
        if checked == n_params:
            break
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = net.params[k].reshape(-1)
        j = int(rng.integers(p.size))
        num = central(p, j, h)
        half = central(p, j, h / 2)
        if abs(num - half) > 1e-6 * max(abs(num), 1.0):
            continue
        ana = float(grads[k].reshape(-1)[j])
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        worst = max(worst, err)
        checked += 1
    if checked < n_params:
        raise RuntimeError("too many probes straddled kinks")
    return worst


def stacked_forward(nets: Sequence[Network], x: np.ndarray) -> np.ndarray:
    """Inference for same-topology networks on a shared input, members batched.

    Returns shape (len(nets), batch, *output_shape); equals stacking each
    ``net.forward(x, cache=False)`` up to float rounding.
    """
    first = nets[0]
    x = np.asarray(x, dtype=first.dtype)
    if x.shape[1:] != first.input_shape:
        raise ValueError(f"expected input (*, {first.input_shape}), got {x.shape}")
    if x.ndim == 4:
        x = x.transpose(0, 2, 3, 1)
    x = x[None]
    m = len(nets)
    for i, layer in enumerate(first.layers):
        if isinstance(layer, Conv2D):
            k, s, p = layer.kernel, layer.stride, layer.padding
            mx, b, h, w, c = x.shape  # mx is 1 while the input is still shared
            xp = _pad_hw(x, p, 2) if p else x
            ho = _conv_out(h, k, s, p)
            wo = _conv_out(w, k, s, p)
            w3 = np.stack([n.params[f"{i}.weight"] for n in nets]).reshape(m, k, k, c, -1)
            y = None
            for a in range(k):
                for d in range(k):
                    # one (positions, c) @ (c, out) product per member
                    part = xp[:, :, a:a + s * (ho - 1) + 1:s, d:d + s * (wo - 1) + 1:s, :] \
                        .reshape(mx, -1, c) @ w3[:, a, d]
                    y = part if y is None else y + part
            bias = np.stack([n.params[f"{i}.bias"] for n in nets])[:, None, :]
            x = (y + bias).reshape(m, b, ho, wo, -1)
        elif isinstance(layer, AvgPool2D):
            q = layer.size
            mm, b, h, w, c = x.shape
            hq, wq = h // q, w // q
            x = x[:, :, :hq * q, :wq * q].reshape(mm, b, hq, q, wq, q, c).sum(axis=(3, 5)) / (q * q)
        elif isinstance(layer, Dense):
            wts = np.stack([n.params[f"{i}.weight"] for n in nets])
            x = x @ wts + np.stack([n.params[f"{i}.bias"] for n in nets])[:, None, :]
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, Tanh):
            x = np.tanh(x)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], x.shape[1], -1)
        else:
            raise TypeError(f"unknown layer {layer!r}")
    if x.shape[0] != m:
        x = np.broadcast_to(x, (m,) + x.shape[1:])
    return x


# ---------------------------------------------------------------------------
# squashed Gaussian policies

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


def log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2) without cancellation."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_gaussian(mean, log_std, eps):
    """Reparameterised tanh-Gaussian sample: (pre-tanh u, action, log-prob)."""
    u = mean + np.exp(log_std) * eps
    a = np.tanh(u)
    logp = np.sum(-0.5 * eps ** 2 - HALF_LOG_2PI - log_std - log1m_tanh2(u), axis=-1)
    return u, a, logp
