"""Desk-scale architectures.

The first and last layers stay full precision. Downsampling is max-pooling;
residual shortcuts never use a strided 1x1 convolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .autograd.ops import conv_output_size
from .layers import (
    MODES,
    BatchNorm,
    ConfigError,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Module,
    QuantBlock,
    Residual,
    Sequential,
)

ARCHITECTURES = ("lenet_t", "vgg7_t", "resmini_t")
DEFAULT_WIDTH = {"lenet_t": 1.0, "vgg7_t": 0.25, "resmini_t": 1.0}


@dataclass
class ModelConfig:
    arch: str = "lenet_t"
    mode: str = "sttn_2_2"
    width: float | None = None
    num_classes: int = 10
    in_channels: int = 1
    image_size: int = 28
    backward_mode: str = "consistent"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.width is None:
            self.width = DEFAULT_WIDTH[self.arch]
        if self.width <= 0:
            raise ConfigError("width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _ch(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


class Network(Module):
    def __init__(self, config: ModelConfig, layers: list[Module]):
        self.config = config
        self.body = Sequential(*layers)
        for i, (_, block) in enumerate(self.named_quant_blocks()):
            block.name = f"q{i}"

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.config.in_channels, self.config.image_size, self.config.image_size):
            raise ConfigError(
                f"batch shape {x.shape} does not match "
                f"(N, {self.config.in_channels}, {self.config.image_size}, {self.config.image_size})"
            )
        return self.body(x)

    def named_quant_blocks(self) -> list[tuple[str, QuantBlock]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, QuantBlock)]

    def quant_blocks(self) -> list[QuantBlock]:
        return [m for _, m in self.named_quant_blocks()]


def _lenet(cfg: ModelConfig, rng) -> list[Module]:
    c1, c2, f = _ch(16, cfg.width), _ch(32, cfg.width), _ch(256, cfg.width)
    s = conv_output_size(cfg.image_size, 5, 1, 0) // 2
    s = conv_output_size(s, 5, 1, 0) // 2
    q = dict(mode=cfg.mode, backward_mode=cfg.backward_mode, rng=rng)
    return [
        Conv2d(cfg.in_channels, c1, 5, rng=rng),
        MaxPool2d(2),
        QuantBlock(c1, c2, 5, **q),
        MaxPool2d(2),
        Flatten(),
        QuantBlock(c2 * s * s, f, kind="linear", **q),
        Linear(f, cfg.num_classes, rng=rng),
    ]


def _vgg7(cfg: ModelConfig, rng) -> list[Module]:
    c1, c2, c3, f = (_ch(b, cfg.width) for b in (128, 256, 512, 1024))
    q = dict(mode=cfg.mode, backward_mode=cfg.backward_mode, rng=rng, pad=1)
    s = cfg.image_size // 8
    return [
        Conv2d(cfg.in_channels, c1, 3, pad=1, rng=rng),
        QuantBlock(c1, c1, 3, **q),
        MaxPool2d(2),
        QuantBlock(c1, c2, 3, **q),
        QuantBlock(c2, c2, 3, **q),
        MaxPool2d(2),
        QuantBlock(c2, c3, 3, **q),
        QuantBlock(c3, c3, 3, **q),
        MaxPool2d(2),
        Flatten(),
        QuantBlock(c3 * s * s, f, kind="linear", mode=cfg.mode, backward_mode=cfg.backward_mode, rng=rng),
        Linear(f, cfg.num_classes, rng=rng),
    ]


def _resmini(cfg: ModelConfig, rng) -> list[Module]:
    c = _ch(16, cfg.width)
    q = dict(mode=cfg.mode, backward_mode=cfg.backward_mode, rng=rng, pad=1)

    def res(cin, cout):
        return Residual(Sequential(QuantBlock(cin, cout, 3, **q), QuantBlock(cout, cout, 3, **q)), cout)

    return [
        Conv2d(cfg.in_channels, c, 3, pad=1, rng=rng),
        res(c, c),
        res(c, c),
        MaxPool2d(2),
        res(c, 2 * c),
        MaxPool2d(2),
        res(2 * c, 4 * c),
        BatchNorm(4 * c),
        GlobalAvgPool(),
        Linear(4 * c, cfg.num_classes, rng=rng),
    ]


_BUILDERS = {"lenet_t": _lenet, "vgg7_t": _vgg7, "resmini_t": _resmini}


def build_model(config: ModelConfig, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    return Network(config, _BUILDERS[config.arch](config, rng))


def build_block(in_ch: int, out_ch: int, kh: int, kw: int, stride: int, pad: int, mode: str,
                rng: np.random.Generator | None = None, **kwargs) -> QuantBlock:
    if kh != kw:
        raise ConfigError("only square kernels are supported")
    return QuantBlock(in_ch, out_ch, kh, stride, pad, mode=mode, rng=rng, **kwargs)
