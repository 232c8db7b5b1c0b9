"""The perturbation policy: a one-hidden-layer tanh network.

Input is ``[z_{t-1}; e_t]``, output is an additive perturbation of the
decoder state with the same dimension as ``z``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .nn import CALLS, ContractError, ParamSet


class ActorParams(ParamSet):
    kind = "actor"

    @property
    def state_dim(self) -> int:
        return self.config.state_dim


@dataclass(frozen=True)
class ActorConfig:
    state_dim: int
    context_dim: int
    hidden: int = 32

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.context_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def actor_init(config: ActorConfig, init_scale: float = 0.001, seed: int = 0, dtype=None) -> ActorParams:
    """Uniform ``[-init_scale, init_scale]`` weights, zero biases."""
    dtype = dtype or ad.default_dtype()
    rng = np.random.default_rng(seed)
    arrays = {
        "W1": rng.uniform(-init_scale, init_scale, (config.input_dim, config.hidden)).astype(dtype),
        "b1": np.zeros(config.hidden, dtype=dtype),
        "W2": rng.uniform(-init_scale, init_scale, (config.hidden, config.state_dim)).astype(dtype),
        "b2": np.zeros(config.state_dim, dtype=dtype),
    }
    return ActorParams(config, arrays)


def actor_act(z_prev, e_t, phi):
    """``a_t = W2 tanh(W1 [z_prev; e_t] + b1) + b2`` for a batch of rows."""
    W1 = phi["W1"]
    zs, es = ad._raw(z_prev).shape, ad._raw(e_t).shape
    if zs[-1] + es[-1] != ad._raw(W1).shape[0] or ad._raw(phi["W2"]).shape[1] != zs[-1]:
        raise ContractError(
            f"actor_act: input dims {zs[-1]} + {es[-1]} do not match actor "
            f"weights {list(ad._raw(W1).shape)} / {list(ad._raw(phi['W2']).shape)}"
        )
    CALLS["actor"] += 1
    h = ad.tanh(ad.add(ad.matmul(ad.concat([z_prev, e_t], axis=-1), W1), phi["b1"]))
    return ad.add(ad.matmul(h, phi["W2"]), phi["b2"])


def actor_act_noisy(z_prev, e_t, phi, sigma: float, rng: np.random.Generator | None):
    """Noisy action ``a_t + sigma * eps``; returns ``(action, eps)``.

    With ``sigma == 0`` no random numbers are drawn and ``eps`` is zero.
    """
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    a = actor_act(z_prev, e_t, phi)
    shape = ad._raw(a).shape
    if sigma == 0:
        return a, np.zeros(shape, dtype=ad._raw(a).dtype)
    eps = rng.standard_normal(shape).astype(ad._raw(a).dtype)
    return ad.add(a, (sigma * eps).astype(eps.dtype)), eps
