"""Adam over named parameter groups."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, NumericOverflowError
from .scene import normalize_quats


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_step(params: dict, grads: dict, state: OptimizerState, rates: dict,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    Groups missing from ``grads`` are left alone. A group named
    ``rotations`` is renormalized to unit quaternions after the update
    (rows that did not move are left bit-for-bit intact).
    """
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    step = state.step + 1
    for name, grad in grads.items():
        if name not in params:
            raise InvalidParameterError(f"gradient for unknown parameter group {name!r}")
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidParameterError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(f"non-finite gradient in parameter group {name!r}")
        m[name] = beta1 * m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1 ** step)
        v_hat = v[name] / (1 - beta2 ** step)
        delta = rates.get(name, 0.0) * m_hat / (np.sqrt(v_hat) + eps)
        updated = p - delta
        if name == "rotations" and updated.size:
            moved = np.any(delta != 0.0, axis=1, keepdims=True)
            updated = np.where(moved, normalize_quats(updated), p)
        new_params[name] = updated
    return new_params, OptimizerState(m, v, step)
