"""Generators, the encoder/feature extractor, and autoencoder pretraining.

Architectures follow the DCGAN-like and residual generators (and a
DCGAN-discriminator-like encoder) with every channel width divided by
``width_divisor`` so they train on a CPU.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, ShapeError
from .layers import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    FrozenAffine,
    Module,
    ReLU,
    ResBlockUp,
    Reshape,
    Sequential,
    Tanh,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

SUPPORTED_SIZES = (8, 16, 28, 32)
DEFAULT_TAPS = {8: 2, 16: 3, 28: 3, 32: 4}
# Full-size widths; the last len(...) entries are used for smaller images.
DCGAN_WIDTHS = (512, 256, 128, 64)
ENCODER_WIDTHS = (64, 128, 256, 512)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | conv-transpose | resblock | activation
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "none"  # none | relu | tanh
    batchnorm: bool = False
    output_padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid layer geometry: {self}")

    def output_size(self, size: int) -> int:
        if self.kind == "conv":
            return T.conv_output_size(size, self.kernel, self.stride, self.padding)
        if self.kind == "conv-transpose":
            return T.conv_transpose_output_size(size, self.kernel, self.stride, self.padding,
                                                self.output_padding)
        if self.kind == "resblock":
            return 2 * size
        return size


def _width(full: int, divisor: int) -> int:
    return max(1, full // divisor)


def _start_size(image_size: int) -> int:
    return 7 if image_size == 28 else 4


@dataclass
class GeneratorConfig:
    kind: str = "dcgan"  # dcgan | resnet | linear
    n_z: int = 100
    image_size: int = 32
    channels: int = 3
    width_divisor: int = 8
    resblocks: int | None = None
    batchnorm: bool = True
    output_dim: int = 2  # linear generator only
    seed: int = 0


class GeneratorNet(Module):
    """Maps latent codes ``(N, n_z)`` to images ``(N, C, H, W)`` in [-1, 1]."""

    def __init__(self, config: GeneratorConfig, specs: list[LayerSpec], body: Sequential):
        super().__init__()
        self.config = config
        self.n_z = config.n_z
        self.specs = specs
        self.body = body
        self.output_shape = (config.channels, config.image_size, config.image_size)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.n_z:
            raise ShapeError("generator input", ("N", self.n_z), z.shape)
        return self.body(z)


class LinearGenerator(Module):
    """``G(z) = z A + b`` for low-dimensional moment-recovery experiments."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.n_z = config.n_z
        self.output_shape = (config.output_dim,)
        rng = np.random.default_rng(config.seed)
        self.param("weight", (rng.standard_normal((config.n_z, config.output_dim)) * 0.02).astype(np.float32))
        self.param("bias", np.zeros(config.output_dim, np.float32))

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.n_z:
            raise ShapeError("generator input", ("N", self.n_z), z.shape)
        return z @ self.weight + self.bias


def generator_specs(config: GeneratorConfig) -> list[LayerSpec]:
    if config.image_size not in SUPPORTED_SIZES:
        raise ConfigError(f"unsupported image size {config.image_size}; supported: {list(SUPPORTED_SIZES)}")
    if config.width_divisor < 1:
        raise ConfigError("width_divisor must be >= 1")
    start = _start_size(config.image_size)
    n_up = int(round(math.log2(config.image_size / start)))
    div, bn = config.width_divisor, config.batchnorm
    if config.kind == "dcgan":
        widths = [_width(w, div) for w in DCGAN_WIDTHS[-(n_up + 1):]]
        specs = [LayerSpec("dense", config.n_z, widths[0] * start * start, activation="relu", batchnorm=bn)]
        for cin, cout in zip(widths, widths[1:]):
            specs.append(LayerSpec("conv-transpose", cin, cout, 4, 2, 1, "relu", bn))
        last = widths[-1]
        specs += [LayerSpec("conv", last, last, 3, 1, 1, "relu", bn),
                  LayerSpec("conv", last, last, 3, 1, 1, "relu", bn),
                  LayerSpec("conv", last, config.channels, 3, 1, 1, "tanh")]
        return specs
    if config.kind == "resnet":
        blocks = config.resblocks if config.resblocks is not None else n_up
        if blocks != n_up:
            raise ConfigError(f"{config.image_size}x{config.image_size} output needs {n_up} resblocks, got {blocks}")
        widths = [_width(64 * 2 ** (n_up - i), div) for i in range(n_up + 1)]
        specs = [LayerSpec("dense", config.n_z, widths[0] * start * start)]
        for cin, cout in zip(widths, widths[1:]):
            specs.append(LayerSpec("resblock", cin, cout, 3, 1, 1, batchnorm=bn))
        specs += [LayerSpec("activation", widths[-1], widths[-1], activation="relu", batchnorm=bn),
                  LayerSpec("conv", widths[-1], config.channels, 3, 1, 1, "tanh")]
        return specs
    raise ConfigError(f"unknown generator kind {config.kind!r}; expected dcgan, resnet or linear")


def _layers_from_spec(spec: LayerSpec, rng: np.random.Generator, start: int) -> list[Module]:
    out: list[Module] = []
    if spec.kind == "dense":
        out.append(Dense(spec.in_channels, spec.out_channels, rng, bias=not spec.batchnorm))
        channels = spec.out_channels // (start * start)
        out.append(Reshape((channels, start, start)))
        norm_ch = channels
    elif spec.kind == "conv":
        out.append(Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding,
                          rng, bias=not spec.batchnorm))
        norm_ch = spec.out_channels
    elif spec.kind == "conv-transpose":
        out.append(ConvTranspose2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                                   spec.padding, rng, bias=not spec.batchnorm,
                                   output_padding=spec.output_padding))
        norm_ch = spec.out_channels
    elif spec.kind == "resblock":
        return [ResBlockUp(spec.in_channels, spec.out_channels, rng, batchnorm=spec.batchnorm)]
    elif spec.kind == "activation":
        norm_ch = spec.out_channels
    else:
        raise ConfigError(f"unknown layer kind {spec.kind!r}")
    if spec.batchnorm:
        out.append(BatchNorm(norm_ch))
    if spec.activation == "relu":
        out.append(ReLU())
    elif spec.activation == "tanh":
        out.append(Tanh())
    return out


def build_generator(config: GeneratorConfig) -> GeneratorNet | LinearGenerator:
    if config.kind == "linear":
        return LinearGenerator(config)
    specs = generator_specs(config)
    rng = np.random.default_rng(config.seed)
    start = _start_size(config.image_size)
    body = Sequential()
    for spec in specs:
        for layer in _layers_from_spec(spec, rng, start):
            body.append(layer)
    return GeneratorNet(config, specs, body)


# ---------------------------------------------------------------- feature extraction


@dataclass
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    latent: int = 128
    width_divisor: int = 8
    taps: int | None = None
    batchnorm: bool = True
    seed: int = 0


class FeatureExtractor(Module):
    """Strided-conv encoder exposing the post-ReLU output of every conv.

    ``extract(x, M)`` returns the first ``M`` taps flattened to ``(N, d_j)``.
    Once frozen, batch normalisation is replaced by fixed per-channel affine
    maps so features of a sample do not depend on the rest of its batch.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.latent < 1:
            raise ConfigError("latent size must be >= 1")
        if config.image_size not in SUPPORTED_SIZES:
            raise ConfigError(f"unsupported image size {config.image_size}; supported: {list(SUPPORTED_SIZES)}")
        self.config = config
        taps = config.taps if config.taps is not None else DEFAULT_TAPS[config.image_size]
        rng = np.random.default_rng(config.seed)
        self.specs: list[LayerSpec] = []
        stages = Sequential()
        cin, size = config.channels, config.image_size
        self.tap_shapes: list[tuple[int, int, int]] = []
        for j in range(taps):
            cout = _width(ENCODER_WIDTHS[min(j, len(ENCODER_WIDTHS) - 1)], config.width_divisor)
            spec = LayerSpec("conv", cin, cout, 4, 2, 1, "relu", config.batchnorm)
            size = spec.output_size(size)
            if size < 1:
                raise ConfigError(f"too many taps ({taps}) for image size {config.image_size}")
            self.specs.append(spec)
            stage = Sequential([Conv2d(cin, cout, 4, 2, 1, rng, bias=not config.batchnorm)])
            if config.batchnorm:
                stage.append(BatchNorm(cout))
            stage.append(ReLU())
            stages.append(stage)
            self.tap_shapes.append((cout, size, size))
            cin = cout
        self.stages = stages
        self.head = Dense(cin * size * size, config.latent, rng)
        self.frozen = False

    @property
    def num_taps(self) -> int:
        return len(self.tap_shapes)

    @property
    def tap_widths(self) -> list[int]:
        return [c * h * w for c, h, w in self.tap_shapes]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.config.channels, self.config.image_size, self.config.image_size)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError("encoder input", ("N",) + self.input_shape, x.shape)

    def taps(self, x: Tensor, M: int | None = None) -> list[Tensor]:
        self._check_input(x)
        M = self.num_taps if M is None else M
        out = []
        h = x
        for stage in self.stages.layers[:M]:
            h = stage(h)
            out.append(h)
        return out

    def extract(self, x: Tensor, M: int | None = None) -> list[Tensor]:
        M = self.num_taps if M is None else M
        if not 1 <= M <= self.num_taps:
            raise ValueError(f"M must lie in [1, {self.num_taps}], got {M}")
        return [T.flatten(t) for t in self.taps(x, M)]

    def encode(self, x: Tensor) -> Tensor:
        return self.head(T.flatten(self.taps(x)[-1]))

    def freeze(self) -> "FeatureExtractor":
        for stage in self.stages:
            for i, layer in enumerate(stage.layers):
                if isinstance(layer, BatchNorm):
                    stage.replace(i, FrozenAffine.from_batchnorm(layer))
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def fingerprint(self, M: int | None = None) -> str:
        return fingerprint(self, self.num_taps if M is None else M)


class IdentityExtractor(Module):
    """Single tap whose features are the flattened input itself."""

    num_taps = 1
    frozen = True

    def __init__(self, width: int | None = None):
        super().__init__()
        self.width = width

    @property
    def tap_widths(self) -> list[int]:
        return [self.width] if self.width is not None else []

    def extract(self, x: Tensor, M: int | None = None) -> list[Tensor]:
        if M not in (None, 1):
            raise ValueError(f"M must be 1 for the identity extractor, got {M}")
        return [T.reshape(x, (x.shape[0], -1))]

    def fingerprint(self, M: int | None = None) -> str:
        return fingerprint(self, 1)


def fingerprint(extractor: Module, M: int) -> str:
    """Hash of the extractor's parameters, buffers, type and tap count."""
    h = hashlib.sha256()
    h.update(type(extractor).__name__.encode())
    h.update(f"M={M}".encode())
    for name, arr in sorted(extractor.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def build_encoder(config: EncoderConfig) -> tuple[FeatureExtractor, GeneratorNet]:
    """Encoder plus a decoder that mirrors the DCGAN-like generator."""
    encoder = FeatureExtractor(config)
    decoder = build_generator(GeneratorConfig(
        kind="dcgan", n_z=config.latent, image_size=config.image_size, channels=config.channels,
        width_divisor=config.width_divisor, batchnorm=config.batchnorm, seed=config.seed + 1))
    return encoder, decoder


def extract_features(E, x, M: int) -> list[Tensor]:
    return E.extract(T.as_tensor(x), M)


# ---------------------------------------------------------------- pretraining


def reconstruction_loss(kind: str) -> Callable[[Tensor, Tensor], Tensor]:
    if kind == "mse":
        return lambda x, y: T.mean(T.square(x - y))
    if kind == "lap1":
        from .metrics import lap1_loss

        return lap1_loss
    raise ConfigError(f"unknown reconstruction loss {kind!r}; expected mse or lap1")


def pretrain_autoencoder(data: np.ndarray, loss_kind: str = "mse", epochs: int = 10, *,
                         config: EncoderConfig | None = None, batch_size: int = 64, lr: float = 1e-3,
                         seed: int = 0, history: list | None = None) -> FeatureExtractor:
    """Train encoder and decoder on ``data`` and return the frozen encoder.

    ``history`` (if given) receives the mean training loss of each epoch.
    """
    from .optim import Adam

    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("data must be a nonempty (N, C, H, W) array")
    loss_fn = reconstruction_loss(loss_kind)
    if config is None:
        config = EncoderConfig(image_size=data.shape[2], channels=data.shape[1], seed=seed)
    encoder, decoder = build_encoder(config)
    params = {**{"enc." + k: v for k, v in encoder.trainable_parameters().items()},
              **{"dec." + k: v for k, v in decoder.trainable_parameters().items()}}
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    last_finite = None
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), batch_size):
            batch = Tensor(data[order[start:start + batch_size]])
            loss = loss_fn(decoder(encoder.encode(batch)), batch)
            value = float(loss)
            if not np.isfinite(value):
                raise DivergenceError(f"autoencoder loss became {value} in epoch {epoch}",
                                      last_finite=last_finite)
            last_finite = value
            opt.step(T.backward(loss, params))
            total += value * len(batch.data)
            count += len(batch.data)
        if history is not None:
            history.append(total / count)
        log.debug("ae epoch %d loss %.6f", epoch, total / count)
    return encoder.freeze()


def reconstruction_error(encoder: FeatureExtractor, decoder: Module, data: np.ndarray, kind: str = "mse") -> float:
    return float(reconstruction_loss(kind)(decoder(encoder.encode(Tensor(data))), Tensor(data)))
