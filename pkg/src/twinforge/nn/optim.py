"""Training configuration and the adaptive-moment optimizer."""

from dataclasses import asdict, dataclass

import numpy as np

from twinforge.exceptions import DimensionError, ValidationError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    dropout_rate: float = 0.0
    input_noise_sigma: float = 0.05
    seed: int = 0
    moment_decays: tuple = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")
        if self.input_noise_sigma < 0:
            raise ValidationError("input_noise_sigma must be >= 0")
        b1, b2 = self.moment_decays
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValidationError("moment decays must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["moment_decays"] = list(self.moment_decays)
        return d


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def optimize_step(params, grads, state, config):
    """One bias-corrected adaptive-moment update, applied in place.

    ``params`` and ``grads`` are parallel lists of arrays. Returns
    ``(params, state)`` for convenience; ``state`` is mutated too.
    """
    if state is None:
        state = AdamState.zeros_like(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state must align")
    b1, b2 = config.moment_decays
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    lr = config.learning_rate
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, state
