"""Tanh-squashed diagonal Gaussian (actions) and diagonal Laplace (subgoals).

All functions work on batches: the last axis is the event dimension and
log-densities are summed over it. Every sampler takes its noise explicitly
so callers own the random streams, and gradients flow to the distribution
parameters through the reparametrization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
# keeps log(1 - tanh^2) finite at saturation
TANH_EPS = 1e-6
ACTION_CLAMP = 1.0 - 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


def _check_dims(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ConfigurationError(f"{what}: event dims differ ({a.shape[-1]} vs {b.shape[-1]})")


@dataclass
class SquashedGaussianParams:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = ad.as_tensor(self.mean)
        self.log_std = ad.clip(ad.as_tensor(self.log_std), LOG_STD_MIN, LOG_STD_MAX)
        _check_dims(self.mean, self.log_std, "SquashedGaussianParams")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class DiagLaplaceParams:
    """Laplace with location ``loc`` and scale ``exp(log_scale)``."""

    loc: Tensor
    log_scale: Tensor

    def __post_init__(self):
        self.loc = ad.as_tensor(self.loc)
        self.log_scale = ad.as_tensor(self.log_scale)
        _check_dims(self.loc, self.log_scale, "DiagLaplaceParams")

    @property
    def scale(self) -> Tensor:
        return ad.exp(self.log_scale)

    @property
    def dim(self) -> int:
        return self.loc.shape[-1]


def presquash_log_prob(params: SquashedGaussianParams, pre) -> Tensor:
    """Log-density of ``tanh(pre)`` written in terms of the pre-squash value."""
    pre = ad.as_tensor(pre)
    z = (pre - params.mean) * ad.exp(-params.log_std)
    gauss = -0.5 * z * z - params.log_std - HALF_LOG_2PI
    action = ad.tanh(pre)
    correction = ad.log(1.0 - action * action + TANH_EPS)
    return ad.tsum(gauss - correction, axis=-1)


def squashed_sample(params: SquashedGaussianParams, noise) -> tuple:
    """Reparametrized draw ``tanh(mean + std * noise)`` and its log-density."""
    noise = ad.as_tensor(noise)
    _check_dims(params.mean, noise, "squashed_sample")
    pre = params.mean + ad.exp(params.log_std) * noise
    # float64 tanh rounds to exactly +-1 beyond |pre| ~ 19
    action = ad.clip(ad.tanh(pre), -ACTION_CLAMP, ACTION_CLAMP)
    return action, presquash_log_prob(params, pre)


def squashed_log_prob(params: SquashedGaussianParams, action) -> Tensor:
    action = ad.as_tensor(action)
    _check_dims(params.mean, action, "squashed_log_prob")
    clamped = np.clip(action.data, -ACTION_CLAMP, ACTION_CLAMP)
    if action.requires_grad:
        action = ad.clip(action, -ACTION_CLAMP, ACTION_CLAMP)
        # d atanh(a)/da = 1 / (1 - a^2)
        pre = _atanh(action)
    else:
        pre = Tensor(np.arctanh(clamped))
    return presquash_log_prob(params, pre)


def _atanh(a: Tensor) -> Tensor:
    return 0.5 * (ad.log(1.0 + a) - ad.log(1.0 - a))


def laplace_log_prob(x, params: DiagLaplaceParams) -> Tensor:
    x = ad.as_tensor(x)
    _check_dims(params.loc, x, "laplace_log_prob")
    dev = ad.absolute(x - params.loc) * ad.exp(-params.log_scale)
    return ad.tsum(-dev - params.log_scale - LOG_2, axis=-1)


def laplace_sample(params: DiagLaplaceParams, uniform_noise) -> Tensor:
    """Inverse-CDF sample; ``uniform_noise`` must lie in (-1/2, 1/2)."""
    u = np.asarray(uniform_noise.data if isinstance(uniform_noise, Tensor) else uniform_noise, dtype=float)
    if u.shape[-1] != params.dim:
        raise ConfigurationError(f"laplace_sample: noise dim {u.shape[-1]} != {params.dim}")
    offset = -np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return params.loc + params.scale * offset
