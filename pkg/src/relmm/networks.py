"""Layer recipes for every network in the package.

Widths are desk-scale: the reference topology uses three convs of 64 and
two dense layers of 512, which is far too slow for numpy on a CPU. The
navigation encoder keeps the conv/pool layout at 8-16 channels. The grasp
network defaults to a small fully convolutional head (see ``grasp_layers``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .fnapprox import AvgPool2D, Conv2D, Dense, Flatten, LayerSpec, ReLU, mlp
from .world import DEFAULT_SIM, N_CHANNELS, SimParams


@dataclass(frozen=True)
class NetSizes:
    grasp_channels: int = 16
    grasp_dense: Tuple[int, ...] = (128, 128)
    grasp_head: str = "spatial"
    spatial_channels: int = 4
    spatial_dense: Tuple[int, ...] = (8, 8)
    nav_channels: Tuple[int, int, int] = (8, 16, 16)
    nav_first_stride: int = 2
    nav_dense: Tuple[int, ...] = (128, 128)
    grid: int = DEFAULT_SIM.grid
    crop: int = DEFAULT_SIM.crop

    @property
    def feature_dim(self) -> int:
        side = self.grid
        side = (side + 2 - 3) // self.nav_first_stride + 1
        for _ in range(3):
            side //= 2
        return self.nav_channels[-1] * side * side

    @property
    def grasp_feature_dim(self) -> int:
        side = self.crop
        for _ in range(3):
            side = (side + 2 - 3) // 2 + 1
        return self.grasp_channels * side * side


def nav_input_shape(sim: SimParams = DEFAULT_SIM) -> Tuple[int, int, int]:
    return (N_CHANNELS, sim.grid, sim.grid)


def grasp_input_shape(sim: SimParams = DEFAULT_SIM) -> Tuple[int, int, int]:
    return (N_CHANNELS, sim.crop, sim.crop)


def grasp_encoder_layers(sizes: NetSizes) -> List[LayerSpec]:
    c = sizes.grasp_channels
    return [Conv2D(c, 3, 2, 1), ReLU(), Conv2D(c, 3, 2, 1), ReLU(),
            Conv2D(c, 3, 2, 1), ReLU(), Flatten()]


def grasp_layers(sizes: NetSizes, n_actions: int = 225,
                 prior_logit: float = -4.6) -> List[LayerSpec]:
    """Grasp-success logits over the discrete grid.

    The output bias starts at ``prior_logit`` (sigmoid ~= 0.01) and the output
    weights small, so a fresh ensemble predicts near-certain failure.

    ``grasp_head="dense"`` is strided convs followed by dense layers onto the
    225 cells. ``"spatial"`` keeps full crop resolution, applies the dense
    layers at every location as 1x1 convs and reads one logit per cell from a
    2x2 window, so every grasp outcome trains weights shared by all cells.
    Spatial logits come out in crop order; ``grasp_logit_order`` maps them
    onto cell indices.
    """
    if sizes.grasp_head == "dense":
        return grasp_encoder_layers(sizes) + mlp(sizes.grasp_dense, n_actions,
                                                 out_scale=0.1, out_bias=prior_logit)
    if sizes.grasp_head != "spatial":
        raise ValueError(f"unknown grasp head {sizes.grasp_head!r}")
    side = int(round(n_actions ** 0.5))
    if side * side != n_actions or sizes.crop != side + 1:
        raise ValueError("spatial grasp head needs crop == cells + 1")
    c = sizes.spatial_channels
    # valid convs on an input zero-padded by SPATIAL_PAD, so one logit
    # depends on exactly one SPATIAL_FIELD-square patch of the padded input
    layers: List[LayerSpec] = [Conv2D(c, 3, 1, 0), ReLU(), Conv2D(c, 3, 1, 0), ReLU(),
                               Conv2D(c, 3, 1, 0), ReLU()]
    for w in sizes.spatial_dense:
        layers += [Conv2D(w, 1, 1, 0), ReLU()]
    return layers + [Conv2D(1, 2, 1, 0, init_scale=0.1, bias_init=prior_logit), Flatten()]


SPATIAL_PAD = 3
SPATIAL_FIELD = 8


def grasp_net_input_shape(sizes: NetSizes, sim: SimParams = DEFAULT_SIM) -> Tuple[int, int, int]:
    pad = SPATIAL_PAD if sizes.grasp_head == "spatial" else 0
    return (N_CHANNELS, sim.crop + 2 * pad, sim.crop + 2 * pad)


def grasp_logit_order(sizes: NetSizes, n_actions: int = 225):
    """Index array taking network outputs to cell order (None = identity).

    Crop rows run far to near and columns left to right while cells count up
    along +x then +y, so the spatial map read backwards is the cell order.
    """
    if sizes.grasp_head == "spatial":
        return np.arange(n_actions)[::-1].copy()
    return None


def nav_encoder_layers(sizes: NetSizes) -> List[LayerSpec]:
    c1, c2, c3 = sizes.nav_channels
    return [Conv2D(c1, 3, sizes.nav_first_stride, 1), ReLU(), AvgPool2D(2),
            Conv2D(c2, 3, 1, 1), ReLU(), AvgPool2D(2),
            Conv2D(c3, 3, 1, 1), ReLU(), AvgPool2D(2), Flatten()]


def actor_head_layers(sizes: NetSizes, action_dim: int = 2) -> List[LayerSpec]:
    """Features -> (mean, log_std) for a tanh-squashed Gaussian."""
    return mlp(sizes.nav_dense, 2 * action_dim, out_scale=0.1)


def critic_head_layers(sizes: NetSizes) -> List[LayerSpec]:
    """(features ++ action) -> scalar value."""
    return mlp(sizes.nav_dense, 1)
