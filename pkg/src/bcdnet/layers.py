"""GDN / inverse GDN, squeeze-and-excitation and Leaky ReLU layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BETA_FLOOR = 1e-6
LEAKY_SLOPE = 0.2


@dataclass
class GdnParams:
    """Unconstrained storage for GDN parameters.

    The effective values are ``beta = raw_beta**2 + 1e-6`` and
    ``gamma = raw_gamma**2``, so ``beta >= 1e-6`` and ``gamma >= 0`` hold for
    any raw values reached during training.
    """

    raw_beta: Tensor  # (C,)
    raw_gamma: Tensor  # (C, C)

    @classmethod
    def from_values(cls, beta, gamma, dtype=T.DEFAULT_DTYPE) -> "GdnParams":
        beta = np.asarray(beta, dtype=np.float64)
        gamma = np.asarray(gamma, dtype=np.float64)
        if np.any(beta < BETA_FLOOR) or np.any(gamma < 0):
            raise ValueError("GDN requires beta >= 1e-6 and gamma >= 0")
        return cls(
            Tensor(np.sqrt(beta - BETA_FLOOR).astype(dtype), requires_grad=True),
            Tensor(np.sqrt(gamma).astype(dtype), requires_grad=True),
        )

    @classmethod
    def init(cls, channels: int, dtype=T.DEFAULT_DTYPE) -> "GdnParams":
        # off-diagonal entries start slightly above 0: d(raw**2) vanishes at raw = 0
        eye = np.eye(channels)
        return cls.from_values(np.ones(channels), 0.1 * eye + 1e-3 * (1.0 - eye), dtype)

    @property
    def channels(self) -> int:
        return self.raw_beta.shape[0]

    def beta(self) -> Tensor:
        return T.square(self.raw_beta) + BETA_FLOOR

    def gamma(self) -> Tensor:
        return T.square(self.raw_gamma)


def _norm_pool(x: Tensor, params: GdnParams) -> Tensor:
    if x.shape[1] != params.channels:
        raise ShapeError(f"GDN expects {params.channels} channels, input has shape {x.shape}")
    # beta_i + sum_j gamma_ij x_j^2 as a 1x1 convolution over squared inputs
    return T.sqrt(T.conv2d(T.square(x), params.gamma(), params.beta()))


def gdn(x: Tensor, params: GdnParams) -> Tensor:
    return T.div(x, _norm_pool(x, params))


def igdn(x: Tensor, params: GdnParams) -> Tensor:
    return T.mul(x, _norm_pool(x, params))


@dataclass
class SeParams:
    reduce_w: Tensor  # (C // r, C)
    reduce_b: Tensor  # (C // r,)
    expand_w: Tensor  # (C, C // r)
    expand_b: Tensor  # (C,)

    @classmethod
    def init(cls, channels: int, ratio: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        if channels % ratio:
            raise ValueError(f"SE channels {channels} not divisible by reduction ratio {ratio}")
        hidden = channels // ratio
        s1, s2 = 1.0 / np.sqrt(channels), 1.0 / np.sqrt(hidden)
        return cls(
            Tensor(rng.uniform(-s1, s1, (hidden, channels)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            Tensor(rng.uniform(-s2, s2, (channels, hidden)).astype(dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        )

    @property
    def channels(self) -> int:
        return self.expand_w.shape[0]


def se_scale(x: Tensor, params: SeParams) -> Tensor:
    """Per-channel excitation factors in (0, 1), shape (b, C, 1, 1)."""
    if x.shape[1] != params.channels:
        raise ShapeError(f"SE block expects {params.channels} channels, input has shape {x.shape}")
    squeezed = T.global_avg_pool(x)
    hidden = T.relu(T.conv2d(squeezed, params.reduce_w, params.reduce_b))
    return T.sigmoid(T.conv2d(hidden, params.expand_w, params.expand_b))


def se_block(x: Tensor, params: SeParams) -> Tensor:
    return T.channel_scale(x, se_scale(x, params))


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    return T.leaky_relu(x, alpha)
