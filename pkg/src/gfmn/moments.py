"""Per-layer feature means and diagonal variances, their differences, and the
mean + variance matching loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import FingerprintMismatch, ShapeError
from .tensor import Tensor


@dataclass
class MomentStats:
    """Feature statistics of one distribution.

    ``mean[j]`` and ``var[j]`` are numpy vectors for precomputed data
    statistics, or graph Tensors when computed on a generated batch.
    ``var`` is ``None`` when only means were requested.
    """

    mean: list
    var: list | None
    count: int
    fingerprint: str

    @property
    def widths(self) -> list[int]:
        return [int(np.prod(np.shape(m.data if isinstance(m, Tensor) else m))) for m in self.mean]

    @property
    def num_layers(self) -> int:
        return len(self.mean)

    def check_compatible(self, other: "MomentStats") -> None:
        if self.fingerprint != other.fingerprint:
            raise FingerprintMismatch(
                f"statistics come from different extractors ({self.fingerprint[:12]} vs {other.fingerprint[:12]})")
        if self.widths != other.widths:
            raise ShapeError("moment widths", self.widths, other.widths)

    def values(self) -> "MomentStats":
        """Detached numpy copy."""
        as_np = lambda xs: [np.array(x.data if isinstance(x, Tensor) else x, np.float32) for x in xs]  # noqa: E731
        return MomentStats(as_np(self.mean), None if self.var is None else as_np(self.var),
                           self.count, self.fingerprint)


@dataclass
class MomentDelta:
    mean: list[np.ndarray]
    var: list[np.ndarray]


def precompute_stats(data: np.ndarray, E, M: int | None = None, chunk: int = 256,
                     covariance: bool = True) -> MomentStats:
    """Mean and variance of every tap over the full dataset.

    The data is streamed in fixed-size chunks in storage order; sums of
    features and squared features are accumulated in 64-bit, so the result
    is independent of memory limits and bit-reproducible.
    """
    data = np.asarray(data, dtype=np.float32)
    if len(data) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    if not getattr(E, "frozen", False):
        raise ValueError("precompute_stats needs a frozen extractor")
    M = E.num_taps if M is None else M
    s1: list[np.ndarray] | None = None
    s2: list[np.ndarray] | None = None
    for start in range(0, len(data), chunk):
        feats = E.extract(Tensor(data[start:start + chunk]), M)
        f64 = [f.data.astype(np.float64) for f in feats]
        part1 = [f.sum(axis=0) for f in f64]
        part2 = [(f * f).sum(axis=0) for f in f64]
        if s1 is None:
            s1, s2 = part1, part2
        else:
            s1 = [a + b for a, b in zip(s1, part1)]
            s2 = [a + b for a, b in zip(s2, part2)]
    n = len(data)
    mean = [a / n for a in s1]
    var = [np.maximum(b / n - m * m, 0.0) for b, m in zip(s2, mean)]
    return MomentStats([m.astype(np.float32) for m in mean],
                       [v.astype(np.float32) for v in var] if covariance else None,
                       n, E.fingerprint(M))


def batch_stats(fake, E, M: int | None = None, covariance: bool = True) -> MomentStats:
    """Differentiable statistics of a generated minibatch."""
    fake = T.as_tensor(fake)
    if covariance and fake.shape[0] < 2:
        raise ValueError("variance matching needs a batch of at least 2 samples")
    M = E.num_taps if M is None else M
    feats = E.extract(fake, M)
    mean = [T.mean(f, axis=0) for f in feats]
    var = [T.variance(f, axis=0) for f in feats] if covariance else None
    return MomentStats(mean, var, fake.shape[0], E.fingerprint(M))


def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)


def delta(real: MomentStats, fake: MomentStats) -> MomentDelta:
    """Per-layer ``mu_real - mu_fake`` and ``sigma_real - sigma_fake`` (numpy)."""
    if real.widths != fake.widths:
        raise ShapeError("delta", real.widths, fake.widths)
    dm = [_np(r) - _np(f) for r, f in zip(real.mean, fake.mean)]
    if real.var is None or fake.var is None:
        dv: list[np.ndarray] = []
    else:
        dv = [_np(r) - _np(f) for r, f in zip(real.var, fake.var)]
    return MomentDelta(dm, dv)


def layer_weights(widths: Sequence[int], normalize: bool = False) -> list[float]:
    """Per-layer loss weights: 1 each, or ``1 / d_j`` when normalising."""
    return [1.0 / d for d in widths] if normalize else [1.0] * len(widths)


def loss_terms(real: MomentStats, fake: MomentStats, weights: Sequence[float] | None = None,
               covariance: bool = True) -> tuple[Tensor, Tensor | None]:
    """Mean term and (optionally) variance term of the matching loss."""
    real.check_compatible(fake)
    weights = list(weights) if weights is not None else [1.0] * real.num_layers
    mean_term: Tensor | None = None
    var_term: Tensor | None = None
    use_var = covariance and real.var is not None and fake.var is not None
    for j in range(real.num_layers):
        w = float(weights[j])
        mt = T.sum(T.square(T.sub(T.as_tensor(real.mean[j]), T.as_tensor(fake.mean[j]))))
        mt = mt * w if w != 1.0 else mt
        mean_term = mt if mean_term is None else mean_term + mt
        if use_var:
            vt = T.sum(T.square(T.sub(T.as_tensor(real.var[j]), T.as_tensor(fake.var[j]))))
            vt = vt * w if w != 1.0 else vt
            var_term = vt if var_term is None else var_term + vt
    return mean_term, var_term


def full_loss(real: MomentStats, fake: MomentStats, weights: Sequence[float] | None = None,
              covariance: bool = True) -> Tensor:
    """``sum_j ||mu_real - mu_fake||^2 + ||sigma_real - sigma_fake||^2``.

    Returns a scalar Tensor that is differentiable whenever ``fake`` holds
    graph tensors.  The variance term is dropped if either side has no
    variances or ``covariance`` is False.
    """
    mean_term, var_term = loss_terms(real, fake, weights, covariance)
    return mean_term if var_term is None else mean_term + var_term
