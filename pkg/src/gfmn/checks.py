"""Finite-difference gradient suite over every layer type and the surrogate loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .ama import surrogate_generator_loss
from .layers import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    FrozenAffine,
    Module,
    ReLU,
    ResBlockUp,
    Sequential,
    Tanh,
    Upsample,
)
from .moments import MomentStats, batch_stats
from .nets import IdentityExtractor
from .tensor import GradReport, Tensor

POINTS = 100
EPSILON = 1e-5


@dataclass
class SuiteResult:
    name: str
    report: GradReport

    def ok(self, tol: float = 1e-3) -> bool:
        return self.report.ok(tol)


def _projected(module: Module, x: Tensor, rng: np.random.Generator):
    """Scalar loss ``sum(module(x) * R)`` with a fixed random ``R``."""
    proj = {}

    def loss():
        y = module(x)
        if "r" not in proj:
            proj["r"] = rng.standard_normal(y.shape)
        return T.sum(T.mul(y, Tensor(proj["r"], dtype=y.data.dtype)))

    return loss


def _layer_case(name: str, build: Callable[[np.random.Generator], Module], input_shape, seed: int,
                points: int) -> SuiteResult:
    rng = np.random.default_rng(seed)
    module = build(rng)
    x = Tensor(rng.standard_normal(input_shape), requires_grad=True, name="input")
    params = {"input": x, **module.trainable_parameters()}
    report = T.grad_check(_projected(module, x, rng), params, epsilon=EPSILON, max_elements=points, seed=seed)
    return SuiteResult(name, report)


def _frozen_affine(rng):
    bn = BatchNorm(3)
    bn._buffers["running_mean"] = rng.standard_normal(3).astype(np.float32)
    bn._buffers["running_var"] = (rng.random(3) + 0.5).astype(np.float32)
    fa = FrozenAffine.from_batchnorm(bn)
    fa.requires_grad_(True)
    return fa


LAYER_CASES = (
    ("dense", lambda r: Dense(8, 10, r), (4, 8)),
    ("conv2d", lambda r: Conv2d(2, 3, 3, 1, 1, r), (2, 2, 5, 5)),
    ("conv2d-strided", lambda r: Conv2d(2, 3, 4, 2, 1, r), (2, 2, 6, 6)),
    ("conv-transpose", lambda r: ConvTranspose2d(3, 2, 4, 2, 1, r), (2, 3, 3, 3)),
    ("batchnorm", lambda r: BatchNorm(3), (5, 3, 3, 3)),
    ("frozen-affine", _frozen_affine, (4, 3, 3, 3)),
    ("relu", lambda r: ReLU(), (4, 25)),
    ("tanh", lambda r: Tanh(), (4, 25)),
    ("upsample", lambda r: Upsample(), (3, 3, 4, 4)),
    ("resblock-up", lambda r: ResBlockUp(2, 3, r), (3, 2, 2, 2)),
)


def surrogate_case(seed: int = 0, points: int = POINTS) -> SuiteResult:
    """Surrogate moment loss through a 2-layer generator and the identity extractor."""
    rng = np.random.default_rng(seed)
    G = Sequential([Dense(3, 10, rng), Tanh(), Dense(10, 6, rng)])
    for p in G.named_parameters().values():
        p.data = p.data * np.float32(10.0)
    E = IdentityExtractor(6)
    z = Tensor(rng.standard_normal((8, 3)).astype(np.float32))
    real = MomentStats([rng.standard_normal(6).astype(np.float32)], [(rng.random(6) + 0.5).astype(np.float32)],
                       100, E.fingerprint(1))
    v_mean = [rng.standard_normal(6).astype(np.float32)]
    v_var = [rng.standard_normal(6).astype(np.float32)]

    def loss():
        fake = batch_stats(G(T.as_tensor(z)), E, 1)
        return surrogate_generator_loss(v_mean, v_var, real, fake)

    params = G.trainable_parameters()
    report = T.grad_check(loss, params, epsilon=EPSILON, max_elements=points, seed=seed)
    return SuiteResult("surrogate-2-layer-generator", report)


def gradient_suite(seed: int = 0, points: int = POINTS) -> list[SuiteResult]:
    results = [_layer_case(name, build, shape, seed + i, points)
               for i, (name, build, shape) in enumerate(LAYER_CASES)]
    results.append(surrogate_case(seed, points))
    return results
