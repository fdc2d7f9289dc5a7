"""Parameterised layers built on :mod:`gfmn.tensor`."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

INIT_STD = 0.02


class Module:
    """Container that tracks parameters, buffers and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def buffer(self, name: str, data: np.ndarray) -> None:
        self._buffers[name] = np.array(data, dtype=np.float32)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | set(self.named_buffers())
        missing = expected - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(name, p.shape, arr.shape)
            p.data = arr.copy()
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for k in self._buffers:
            self._buffers[k] = np.array(state[prefix + k], dtype=np.float32).reshape(self._buffers[k].shape)
        for name, mod in self._modules.items():
            mod._load_buffers(state, f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.named_parameters().values():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, layers: Iterable[Module] = ()):
        super().__init__()
        object.__setattr__(self, "layers", [])
        for layer in layers:
            self.append(layer)

    def append(self, layer: Module) -> None:
        idx = str(len(self.layers))
        self._modules[idx] = layer
        self.layers.append(layer)

    def replace(self, index: int, layer: Module) -> None:
        self._modules[str(index)] = layer
        self.layers[index] = layer

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except ShapeError as e:
                if e.node.startswith("layer "):
                    raise
                raise ShapeError(f"layer {i} ({type(layer).__name__}/{e.node})", e.expected, e.actual) from None
        return x


def _normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) * INIT_STD).astype(np.float32)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.param("weight", _normal(rng, (n_in, n_out)))
        self.has_bias = bias
        if bias:
            self.param("bias", np.zeros(n_out, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError("dense", ("N", self.n_in), x.shape)
        y = x @ self.weight
        return y + self.bias if self.has_bias else y


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, bias: bool = True):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.param("weight", _normal(rng, (cout, cin, kernel, kernel)))
        self.has_bias = bias
        if bias:
            self.param("bias", np.zeros(cout, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError("conv", ("N", self.cin, "H", "W"), x.shape)
        return T.conv2d(x, self.weight, self.bias if self.has_bias else None, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, bias: bool = True, output_padding: int = 0):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.output_padding = output_padding
        self.param("weight", _normal(rng, (cin, cout, kernel, kernel)))
        self.has_bias = bias
        if bias:
            self.param("bias", np.zeros(cout, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError("conv-transpose", ("N", self.cin, "H", "W"), x.shape)
        return T.conv_transpose2d(x, self.weight, self.bias if self.has_bias else None,
                                  self.stride, self.padding, self.output_padding)


class BatchNorm(Module):
    """Batch normalisation with running statistics (momentum 0.1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.param("gamma", np.ones(channels, np.float32))
        self.param("beta", np.zeros(channels, np.float32))
        self.buffer("running_mean", np.zeros(channels))
        self.buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            y, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self._buffers["running_mean"] = ((1 - m) * self._buffers["running_mean"] + m * mu).astype(np.float32)
            self._buffers["running_var"] = ((1 - m) * self._buffers["running_var"] + m * var).astype(np.float32)
            return y
        scale, shift = self.affine()
        return T.channel_affine(x, Tensor(scale), Tensor(shift))

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        rv = self._buffers["running_var"].astype(np.float64)
        scale = self.gamma.data / np.sqrt(rv + self.eps)
        shift = self.beta.data - self._buffers["running_mean"] * scale
        return scale.astype(np.float32), shift.astype(np.float32)


class FrozenAffine(Module):
    """Per-channel scale and shift captured from a trained :class:`BatchNorm`."""

    def __init__(self, scale: np.ndarray, shift: np.ndarray):
        super().__init__()
        self.param("scale", scale, trainable=False)
        self.param("shift", shift, trainable=False)

    @classmethod
    def from_batchnorm(cls, bn: BatchNorm) -> "FrozenAffine":
        return cls(*bn.affine())

    def forward(self, x: Tensor) -> Tensor:
        return T.channel_affine(x, self.scale, self.shift)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Tanh(Module):
    def forward(self, x):
        return T.tanh(x)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)


class Reshape(Module):
    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return T.reshape(x, (x.shape[0],) + self.shape)


class Upsample(Module):
    def forward(self, x):
        return T.upsample2x(x)


class ResBlockUp(Module):
    """Pre-activation residual block that doubles spatial resolution.

    main: BN, ReLU, upsample, 3x3 conv, BN, ReLU, 3x3 conv
    skip: upsample, 1x1 conv
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, batchnorm: bool = True):
        super().__init__()
        self.cin, self.cout = cin, cout
        main: list[Module] = []
        if batchnorm:
            main.append(BatchNorm(cin))
        main += [ReLU(), Upsample(), Conv2d(cin, cout, 3, 1, 1, rng, bias=not batchnorm)]
        if batchnorm:
            main.append(BatchNorm(cout))
        main += [ReLU(), Conv2d(cout, cout, 3, 1, 1, rng)]
        self.main = Sequential(main)
        self.skip = Sequential([Upsample(), Conv2d(cin, cout, 1, 1, 0, rng)])

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError("resblock", ("N", self.cin, "H", "W"), x.shape)
        return self.main(x) + self.skip(x)
