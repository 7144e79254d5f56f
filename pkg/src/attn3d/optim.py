"""Adam with decoupled weight decay, and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, **hyper)

    def to_tensors(self) -> dict:
        """Checkpoint entries ``adam.m.<name>``, ``adam.v.<name>`` and ``adam.t``."""
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, **hyper) -> "AdamState":
        m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: x for k, x in tensors.items() if k.startswith("adam.v.")}
        return cls(m, v, int(tensors["adam.t"][0]), **hyper)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One Adam update, applied to ``params`` in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta

    Parameters are visited in sorted name order; each has its own moments, so
    the result does not depend on dict order.
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be > 0, got {lr}")
    if weight_decay < 0:
        raise ParameterError(f"weight decay must be >= 0, got {weight_decay}")
    if set(grads) != set(params):
        raise ShapeError(f"gradient names {sorted(grads)} != parameter names {sorted(params)}")
    if set(state.m) != set(params):
        raise ShapeError(f"optimizer state names {sorted(state.m)} != parameter names {sorted(params)}")
    for name in params:
        if grads[name].shape != params[name].shape or state.m[name].shape != params[name].shape:
            raise ShapeError(f"{name}: parameter {params[name].shape}, gradient {grads[name].shape}, "
                             f"moment {state.m[name].shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in sorted(params):
        theta, g = params[name], grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        step = lr * update
        if weight_decay:
            step += (lr * weight_decay) * theta
        theta -= step
    return params, state


@dataclass
class Schedule:
    """lr(epoch) = initial_lr * decay_factor ** (epoch // decay_period_epochs).

    ``decay_period_epochs = 0`` or ``decay_factor = 1`` turns the step schedule
    off; ``weight_decay = 0`` turns decoupled decay off.
    """

    initial_lr: float = 1e-4
    decay_period_epochs: int = 4
    decay_factor: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.decay_period_epochs < 0 or not 0 < self.decay_factor <= 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid schedule {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(sched: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    if sched.decay_period_epochs == 0:
        return sched.initial_lr
    return sched.initial_lr * sched.decay_factor ** (epoch // sched.decay_period_epochs)

