"""Evaluation metrics and online-tracking diagnostics.

* ``mmd_kphi``: squared MMD under the linear kernel of a fixed feature map,
  i.e. the squared distance between mean embeddings.
* ``frechet_distance``: Frechet (Wasserstein-2) distance between Gaussians
  fitted to extractor features.
* ``lap1_loss``: weighted L1 distance between Laplacian pyramids.
* ``run_regret``: cumulative tracking cost and regret of MA / AMA on a
  stream of difference vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ama import AMAState, MAState, ama_update, ma_update
from .errors import ConvergenceError, ShapeError
from .moments import MomentDelta
from .tensor import Tensor

# ---------------------------------------------------------------- MMD with feature maps


class FeatureMap:
    """A deterministic map from a sample to a fixed-width real vector."""

    def __init__(self, fn: Callable[[object], np.ndarray], width: int):
        self.fn = fn
        self.width = width

    def __call__(self, x) -> np.ndarray:
        out = np.asarray(self.fn(x), dtype=np.float64).reshape(-1)
        if out.size != self.width:
            raise ShapeError("feature map", (self.width,), out.shape)
        return out

    @classmethod
    def indicators(cls, domain: Sequence) -> "FeatureMap":
        """One indicator feature per point of a finite domain."""
        index = {x: i for i, x in enumerate(domain)}

        def fn(x):
            v = np.zeros(len(domain))
            v[index[x]] = 1.0
            return v

        return cls(fn, len(domain))

    @classmethod
    def from_extractor(cls, E, M: int | None = None) -> "FeatureMap":
        """Concatenated taps of an extractor applied to a single image."""
        M = E.num_taps if M is None else M
        width = int(sum(E.tap_widths[:M]))

        def fn(x):
            feats = E.extract(Tensor(np.asarray(x)[None]), M)
            return np.concatenate([f.data.reshape(-1) for f in feats])

        return cls(fn, width)


@dataclass
class EmpiricalDistribution:
    support: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.support) != len(self.weights):
            raise ValueError("support and weights differ in length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, samples: Sequence) -> "EmpiricalDistribution":
        return cls(list(samples), np.full(len(samples), 1.0 / len(samples)))

    def mean_embedding(self, phi: FeatureMap) -> np.ndarray:
        emb = np.zeros(phi.width)
        for x, w in zip(self.support, self.weights):
            if w:
                emb += w * phi(x)
        return emb


def mmd_kphi(p: EmpiricalDistribution, q: EmpiricalDistribution, phi: FeatureMap) -> float:
    """``||E_p phi - E_q phi||^2``."""
    d = p.mean_embedding(phi) - q.mean_embedding(phi)
    return float(d @ d)


# ---------------------------------------------------------------- Frechet distance


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ShapeError("covariance", (d, d), self.cov.shape)
        scale = max(1.0, float(np.abs(self.cov).max(initial=0.0)))
        if not np.allclose(self.cov, self.cov.T, atol=1e-8 * scale):
            raise ValueError("covariance is not symmetric")
        if d and np.linalg.eigvalsh(self.cov).min() < -1e-6 * scale:
            raise ValueError("covariance is not positive semidefinite")

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianStats":
        """Mean and (population) covariance of the rows of ``features``."""
        f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
        mu = f.mean(axis=0)
        c = f - mu
        return cls(mu, c.T @ c / len(f))


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    try:
        w, v = np.linalg.eigh((a + a.T) / 2)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"eigendecomposition failed: {e}") from None
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """``trace((A B)^(1/2))`` for PSD A, B via the symmetric form sqrt(A) B sqrt(A)."""
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ConvergenceError("covariance contains non-finite values")
    sa = _sqrt_psd(a)
    m = sa @ b @ sa
    try:
        w = np.linalg.eigvalsh((m + m.T) / 2)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"eigendecomposition failed: {e}") from None
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ShapeError("frechet_distance", a.mean.shape, b.mean.shape)
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    diff = a.mean - b.mean
    fd = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return float(max(fd, 0.0))


# ---------------------------------------------------------------- Laplacian pyramid

BLUR_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def pyramid_depth(height: int, width: int) -> int:
    return int(math.floor(math.log2(min(height, width)))) - 1


def _reflect(i: int, n: int) -> int:
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def blur_matrix(n: int) -> np.ndarray:
    """5-tap binomial blur along one axis with mirror (no edge repeat) borders."""
    b = np.zeros((n, n))
    for i in range(n):
        for k, w in enumerate(BLUR_TAPS):
            b[i, _reflect(i + k - 2, n)] += w
    return b


def down_matrix(n: int) -> np.ndarray:
    return blur_matrix(n)[::2]


def up_matrix(n: int) -> np.ndarray:
    """Zero insertion to length ``n`` followed by a blur with doubled gain."""
    m = (n + 1) // 2
    z = np.zeros((n, m))
    z[2 * np.arange(m), np.arange(m)] = 1.0
    return 2.0 * blur_matrix(n) @ z


def _as_batch(x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1, 1) + x.shape)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    return x


def _along_hw(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    # rows @ x @ cols^T on the last two axes
    dt = x.data.dtype
    return T.matmul(T.matmul(Tensor(rows, dtype=dt), x), Tensor(cols.T, dtype=dt))


def laplacian_pyramid(x) -> list[Tensor]:
    """Band-pass levels ``L^0 .. L^J`` (finest first) of an image batch.

    ``J = floor(log2(min(H, W))) - 1``; the last level is the low-pass residual.
    """
    g = _as_batch(x)
    h, w = g.shape[-2:]
    if min(h, w) < 4:
        raise ShapeError("laplacian_pyramid", "spatial dims >= 4", g.shape)
    levels = []
    for _ in range(pyramid_depth(h, w)):
        h, w = g.shape[-2:]
        low = _along_hw(g, down_matrix(h), down_matrix(w))
        levels.append(g - _along_hw(low, up_matrix(h), up_matrix(w)))
        g = low
    levels.append(g)
    return levels


def lap1_loss(x, y) -> Tensor:
    """``sum_j 2^(-2j) |L^j(x) - L^j(y)|_1``, averaged over the batch."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ShapeError("lap1_loss", x.shape, y.shape)
    total: Tensor | None = None
    for j, (lx, ly) in enumerate(zip(laplacian_pyramid(x), laplacian_pyramid(y))):
        term = T.sum(T.abs(lx - ly)) * (2.0 ** (-2 * j) / x.shape[0])
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------- regret of online trackers


@dataclass
class RegretTracker:
    """Plays ``v_t``, pays ``||v_t - delta_t||^2``, then updates with ``delta_t``."""

    estimator: str
    alpha: float
    v0: np.ndarray
    costs: list[float] = field(default_factory=list)
    deltas: list[np.ndarray] = field(default_factory=list)
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        # 64-bit throughout so cumulative costs can be compared with closed forms
        v0 = np.array(self.v0, np.float64).reshape(-1)
        if self.estimator == "ma":
            self._state = MAState((v0,), (), self.alpha)
        elif self.estimator == "ama":
            self._state = AMAState.init([v0], [], self.alpha, dtype=np.float64)
        else:
            raise ValueError(f"unknown estimator {self.estimator!r}")

    @property
    def v(self) -> np.ndarray:
        return self._state.v_mean[0]

    def observe(self, delta: np.ndarray) -> float:
        delta = np.asarray(delta, np.float64).reshape(-1)
        v = self.v
        diff = v - delta
        cost = float(diff @ diff)
        self.history.append(v.copy())
        self.costs.append(cost)
        self.deltas.append(delta)
        step = ma_update if self.estimator == "ma" else ama_update
        self._state = step(self._state, MomentDelta([delta], []))
        return cost

    @property
    def cumulative_cost(self) -> float:
        return float(math.fsum(self.costs))

    def offline_optimum(self) -> np.ndarray:
        return np.mean(np.asarray(self.deltas, np.float64), axis=0)

    def offline_cost(self, v: np.ndarray | None = None) -> float:
        v = self.offline_optimum() if v is None else np.asarray(v, np.float64)
        d = np.asarray(self.deltas, np.float64) - v
        return float(math.fsum((d * d).sum(axis=1)))

    def regret(self) -> float:
        return self.cumulative_cost - self.offline_cost()


@dataclass
class RegretResult:
    cumulative_cost: float
    offline_cost: float
    regret: float


def run_regret(stream: Sequence[np.ndarray] | np.ndarray, estimators: Sequence[str] = ("ma", "ama"),
               alpha: float = 0.1, v0: np.ndarray | None = None) -> dict[str, RegretResult]:
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim == 1:
        stream = stream[:, None]
    if len(stream) < 1:
        raise ValueError("stream must contain at least one vector")
    v0 = np.zeros(stream.shape[1]) if v0 is None else v0
    out = {}
    for name in estimators:
        tracker = RegretTracker(name, alpha, v0)
        for d in stream:
            tracker.observe(d)
        off = tracker.offline_cost()
        out[name] = RegretResult(tracker.cumulative_cost, off, tracker.cumulative_cost - off)
    return out
