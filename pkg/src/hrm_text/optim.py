"""
Adam-atan2 with decoupled weight decay, and the weight EMA

The atan2 form replaces m / (sqrt(v) + eps) by a * atan2(m, b * sqrt(v)), so
the update is bounded by lr * a * pi/2 and invariant to gradient scale.
"""


from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from hrm_text.errors import ContractError
from hrm_text.errors import NonFiniteError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> 'OptimizerState':
        return cls(
            {name: np.zeros_like(array) for name, array in params.items()},
            {name: np.zeros_like(array) for name, array in params.items()},
        )


@dataclass(frozen=True)
class AdamAtan2:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    a: float = 1.0
    b: float = 1.0
    no_decay: tuple[str, ...] = ('z_l0', 'embed')


def atan2_update(m_hat: np.ndarray, v_hat: np.ndarray, a: float = 1.0, b: float = 1.0) -> np.ndarray:
    return a * np.arctan2(m_hat, b * np.sqrt(v_hat))


def adam_atan2_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    hyper: AdamAtan2
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """
    One bias-corrected Adam-atan2 step

    Returns new parameter arrays and a new state; the inputs are not mutated.
    Parameters without a gradient entry are carried over unchanged.
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f'gradient for unknown parameter "{name}"')
        if grad.shape != params[name].shape:
            raise ContractError(f'gradient shape {grad.shape} for "{name}" of shape {params[name].shape}')
        if not np.isfinite(grad).all():
            raise NonFiniteError(name, 'non-finite gradient')

    step = state.step + 1
    correction1 = 1.0 - hyper.beta1 ** step
    correction2 = 1.0 - hyper.beta2 ** step

    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, grad in grads.items():
        theta = params[name]
        m = hyper.beta1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - hyper.beta1) * grad
        v = hyper.beta2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - hyper.beta2) * grad * grad
        update = atan2_update(m / correction1, v / correction2, hyper.a, hyper.b)

        decay = 0.0 if name in hyper.no_decay else lr * hyper.weight_decay
        new_params[name] = (theta - decay * theta - lr * update).astype(theta.dtype)
        new_m[name], new_v[name] = m, v

    return new_params, OptimizerState(new_m, new_v, step)


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]

    @classmethod
    def of(cls, params: Mapping[str, np.ndarray]) -> 'EmaState':
        return cls({name: np.array(array, dtype=np.float64) for name, array in params.items()})

    def arrays(self, like: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
        if like is None:
            return dict(self.shadow)
        return {name: array.astype(like[name].dtype) for name, array in self.shadow.items()}


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray], decay: float) -> EmaState:
    """
    ema <- decay * ema + (1 - decay) * params, accumulated in float64
    """
    if not 0.0 <= decay <= 1.0:
        raise ContractError(f'EMA decay {decay} outside [0, 1]')
    shadow = {}
    for name, previous in ema.shadow.items():
        current = np.asarray(params[name], dtype=np.float64)
        if current.shape != previous.shape:
            raise ContractError(f'EMA shape {previous.shape} for "{name}" of shape {current.shape}')
        if decay == 1.0:
            shadow[name] = previous
        elif decay == 0.0:
            shadow[name] = current.copy()
        else:
            shadow[name] = decay * previous + (1.0 - decay) * current
    return EmaState(shadow)
