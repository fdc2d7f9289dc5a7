"""Moving-average estimators of the feature-moment differences.

Two trackers are provided for the per-layer difference vectors:

* MA, the plain exponential moving average, written as one gradient step of
  rate ``alpha`` on ``0.5 * ||v - delta||^2``.
* AMA, the same quadratic tracking loss minimised with ADAM steps instead:
  ``v <- v - alpha * ADAM(v - delta)``.

The mean and variance tracks each keep their own ``v`` and, for AMA, their
own first/second-moment accumulators per layer.  The generator objective then
uses the tracked vectors in place of the minibatch differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .moments import MomentDelta, MomentStats
from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


def _check_widths(name: str, vs: Sequence[np.ndarray], ds: Sequence[np.ndarray]) -> None:
    if len(vs) != len(ds):
        raise ShapeError(name, f"{len(vs)} layers", f"{len(ds)} layers")
    for j, (v, d) in enumerate(zip(vs, ds)):
        if v.shape != d.shape:
            raise ShapeError(f"{name}[{j}]", v.shape, d.shape)


@dataclass(frozen=True)
class MAState:
    v_mean: tuple[np.ndarray, ...]
    v_var: tuple[np.ndarray, ...]
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @classmethod
    def zeros(cls, widths: Sequence[int], alpha: float, covariance: bool = True) -> "MAState":
        return cls(tuple(np.zeros(d, np.float32) for d in widths),
                   tuple(np.zeros(d, np.float32) for d in widths) if covariance else (), alpha)

    @classmethod
    def from_delta(cls, delta: MomentDelta, alpha: float) -> "MAState":
        return cls(tuple(np.array(d, np.float32) for d in delta.mean),
                   tuple(np.array(d, np.float32) for d in delta.var), alpha)


def _sgd_track(v: np.ndarray, delta: np.ndarray, alpha) -> np.ndarray:
    if alpha == 1:
        # full replacement; v - (v - delta) would round when |v| >> |delta|
        return delta.copy()
    # gradient of 0.5 * ||v - delta||^2 is (v - delta)
    return v - alpha * (v - delta)


def ma_update(state: MAState, delta: MomentDelta) -> MAState:
    """One MA step: ``v - alpha * (v - delta)``, i.e. ``(1 - alpha) v + alpha delta``."""
    _check_widths("ma_update mean", state.v_mean, delta.mean)
    _check_widths("ma_update var", state.v_var, delta.var)
    def step(v, d):
        return _sgd_track(v, d.astype(v.dtype), v.dtype.type(state.alpha))

    return replace(state,
                   v_mean=tuple(step(v, d) for v, d in zip(state.v_mean, delta.mean)),
                   v_var=tuple(step(v, d) for v, d in zip(state.v_var, delta.var)))


def adam_transform(x: np.ndarray, m: np.ndarray, u: np.ndarray, t: int,
                   beta1: float = BETA1, beta2: float = BETA2, eps: float = EPSILON):
    """Bias-corrected ADAM direction for gradient ``x``.

    Returns ``(y, m_new, u_new, t_new)`` where ``t_new = t + 1`` and
    ``y = m_hat / (sqrt(u_hat) + eps)``.  Inputs are not modified.
    """
    t_new = t + 1
    m_new = beta1 * m + (1.0 - beta1) * x
    u_new = beta2 * u + (1.0 - beta2) * (x * x)
    m_hat = m_new / (1.0 - beta1 ** t_new)
    u_hat = u_new / (1.0 - beta2 ** t_new)
    y = m_hat / (np.sqrt(u_hat) + eps)
    return y.astype(x.dtype, copy=False), m_new.astype(x.dtype, copy=False), u_new.astype(x.dtype, copy=False), t_new


@dataclass(frozen=True)
class AMAState:
    v_mean: tuple[np.ndarray, ...]
    v_var: tuple[np.ndarray, ...]
    m_mean: tuple[np.ndarray, ...]
    u_mean: tuple[np.ndarray, ...]
    m_var: tuple[np.ndarray, ...]
    u_var: tuple[np.ndarray, ...]
    t: int
    alpha: float
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")

    @classmethod
    def init(cls, v_mean: Sequence[np.ndarray], v_var: Sequence[np.ndarray], alpha: float,
             dtype=np.float32, **constants) -> "AMAState":
        vm = tuple(np.array(v, dtype) for v in v_mean)
        vv = tuple(np.array(v, dtype) for v in v_var)
        zeros = lambda vs: tuple(np.zeros_like(v) for v in vs)  # noqa: E731
        return cls(vm, vv, zeros(vm), zeros(vm), zeros(vv), zeros(vv), 0, alpha, **constants)

    @classmethod
    def zeros(cls, widths: Sequence[int], alpha: float, covariance: bool = True, **constants) -> "AMAState":
        vm = [np.zeros(d, np.float32) for d in widths]
        return cls.init(vm, vm if covariance else [], alpha, **constants)

    @classmethod
    def from_delta(cls, delta: MomentDelta, alpha: float, **constants) -> "AMAState":
        return cls.init(delta.mean, delta.var, alpha, **constants)


def _ama_track(vs, ms, us, ds, t, st: AMAState):
    new_v, new_m, new_u = [], [], []
    for v, m, u, d in zip(vs, ms, us, ds):
        y, m2, u2, _ = adam_transform(v - d.astype(v.dtype), m, u, t, st.beta1, st.beta2, st.eps)
        new_v.append(v - v.dtype.type(st.alpha) * y)
        new_m.append(m2)
        new_u.append(u2)
    return tuple(new_v), tuple(new_m), tuple(new_u)


def ama_update(state: AMAState, delta: MomentDelta) -> AMAState:
    """One AMA step on every layer of both tracks; the step counter advances once."""
    _check_widths("ama_update mean", state.v_mean, delta.mean)
    _check_widths("ama_update var", state.v_var, delta.var)
    vm, mm, um = _ama_track(state.v_mean, state.m_mean, state.u_mean, delta.mean, state.t, state)
    vv, mv, uv = _ama_track(state.v_var, state.m_var, state.u_var, delta.var, state.t, state)
    return replace(state, v_mean=vm, m_mean=mm, u_mean=um, v_var=vv, m_var=mv, u_var=uv, t=state.t + 1)


def surrogate_generator_loss(v_mean: Sequence[np.ndarray], v_var: Sequence[np.ndarray],
                             real: MomentStats, fake: MomentStats,
                             weights: Sequence[float] | None = None) -> Tensor:
    """Sum over layers of ``v_j . (mu_real - mu_fake)`` plus the variance analogue.

    The tracked vectors enter as constants: the gradient with respect to the
    generator is ``-J^T v`` where ``J`` is the Jacobian of the batch moments.
    Pass an empty ``v_var`` for mean-only matching.
    """
    real.check_compatible(fake)
    _check_widths("surrogate mean", list(v_mean), [np.asarray(m) for m in real.mean])
    if v_var:
        _check_widths("surrogate var", list(v_var), [np.asarray(s) for s in real.var])
        if fake.var is None:
            raise ValueError("variance tracking requested but the batch stats carry no variances")
    weights = weights or [1.0] * len(v_mean)
    total: Tensor | None = None
    for j, v in enumerate(v_mean):
        term = T.sum(T.mul(Tensor(v), T.sub(Tensor(real.mean[j]), fake.mean[j])))
        if v_var:
            term = term + T.sum(T.mul(Tensor(v_var[j]), T.sub(Tensor(real.var[j]), fake.var[j])))
        term = term * float(weights[j]) if weights[j] != 1.0 else term
        total = term if total is None else total + term
    return total
