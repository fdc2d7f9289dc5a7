"""ADAM for network parameters."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .ama import BETA1, BETA2, EPSILON, adam_transform
from .tensor import Tensor


class Adam:
    """Plain ADAM over a named parameter set.

    Parameter arrays are replaced (never mutated in place) on each step.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = BETA1,
                 beta2: float = BETA2, eps: float = EPSILON):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.u = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        lr = np.float32(self.lr)
        for name, p in self.params.items():
            y, self.m[name], self.u[name], _ = adam_transform(
                grads[name].astype(p.data.dtype), self.m[name], self.u[name], self.t,
                self.beta1, self.beta2, self.eps)
            p.data = p.data - lr * y
        self.t += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"m.{k}": v.copy() for k, v in self.m.items()}
        state.update({f"u.{k}": v.copy() for k, v in self.u.items()})
        state["t"] = np.array(self.t, np.float32)
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], np.float32).reshape(self.m[k].shape)
            self.u[k] = np.array(state[f"u.{k}"], np.float32).reshape(self.u[k].shape)
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
