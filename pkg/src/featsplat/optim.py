"""Adam for plain numpy parameter arrays."""
from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter (same dtype) and mutates ``state``."""
    if param.shape != grad.shape:
        raise ValueError(f"param shape {param.shape} != grad shape {grad.shape}")
    g = np.asarray(grad, dtype=np.float64)
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    new = param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype)


@dataclass
class Adam:
    """Adam over a dict of named arrays, each with its own learning rate."""

    lrs: dict
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, names=None) -> dict:
        out = {}
        for name in names if names is not None else params:
            st = self.states.get(name)
            if st is None or st.m.shape != params[name].shape:
                st = self.states[name] = AdamState.zeros(params[name].shape)
            out[name] = adam_step(params[name], grads[name], st, self.lrs[name])
        return out

    def keep(self, name: str, mask: np.ndarray) -> None:
        """Drop optimizer rows for pruned entries."""
        st = self.states.get(name)
        if st is not None:
            st.m = st.m[mask]
            st.v = st.v[mask]
