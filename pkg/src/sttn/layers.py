"""Modules: full-precision layers and the quantized building block."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autograd import Parameter, Tensor
from .autograd import ops
from .inference.fuse import TernaryKernel, fuse_signs
from .quantizers import (
    BACKWARD_MODES,
    LatentKernelPair,
    sign,
    sttn_weights,
    ternarize_activation,
    twn_quantize,
    twn_weights,
)

MODES = ("float", "sttn_2_2", "sttn_2_32", "twn_baseline")
POST_ACTIVATIONS = ("relu", "none")


class ConfigError(ValueError):
    pass


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Module:
    training = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules():
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mname}.{name}" if mname else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules():
            for name in getattr(mod, "_buffers", ()):
                yield (f"{mname}.{name}" if mname else name), getattr(mod, name)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in expected.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.stride, self.pad)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, np.float32), decay=False) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels, np.float32), decay=False)
        self.beta = Parameter(np.zeros(channels, np.float32), decay=False)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride)


class Flatten(Module):
    def forward(self, x):
        return ops.flatten(x)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ops.global_avg_pool(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


class QuantBlock(Module):
    """BatchNorm -> input quantizer -> (ternary) conv or inner product -> activation.

    The input quantizer is ternarization for ``sttn_2_2``/``twn_baseline``,
    identity for ``sttn_2_32`` and ReLU for the ``float`` reference. In the
    soft-threshold modes the layer holds two latent kernels; both branches
    see the same input and their outputs are summed.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, pad: int = 0,
                 mode: str = "sttn_2_2", kind: str = "conv", post_activation: str = "relu",
                 backward_mode: str = "consistent", rng: np.random.Generator | None = None):
        if mode not in MODES:
            raise ConfigError(f"invalid mode {mode!r}; expected one of {MODES}")
        if kind not in ("conv", "linear"):
            raise ConfigError(f"invalid block kind {kind!r}")
        if post_activation not in POST_ACTIVATIONS:
            raise ConfigError(f"invalid post activation {post_activation!r}")
        if backward_mode not in BACKWARD_MODES:
            raise ConfigError(f"invalid backward mode {backward_mode!r}")
        if in_ch < 1 or out_ch < 1:
            raise ConfigError("channel counts must be >= 1")
        rng = rng or np.random.default_rng()
        self.mode, self.kind = mode, kind
        self.stride, self.pad = stride, pad
        self.post_activation, self.backward_mode = post_activation, backward_mode
        self.name = ""
        shape = (out_ch, in_ch, kernel, kernel) if kind == "conv" else (out_ch, in_ch)
        fan_in = in_ch * kernel * kernel if kind == "conv" else in_ch
        self.bn = BatchNorm(in_ch)
        if mode.startswith("sttn"):
            self.w1 = Parameter(he_normal(rng, shape, fan_in))
            self.w2 = Parameter(he_normal(rng, shape, fan_in))
        else:
            self.weight = Parameter(he_normal(rng, shape, fan_in))

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        return (self.w1 if self.is_pair else self.weight).shape

    @property
    def is_pair(self) -> bool:
        return self.mode.startswith("sttn")

    @property
    def ternary_input(self) -> bool:
        return self.mode in ("sttn_2_2", "twn_baseline")

    @property
    def quantized(self) -> bool:
        return self.mode != "float"

    def _apply(self, x, w):
        if self.kind == "conv":
            return ops.conv2d(x, w, self.stride, self.pad)
        return ops.linear(x, w)

    def quantize_input(self, x: Tensor) -> Tensor:
        if self.mode == "float":
            return ops.relu(x)
        if self.ternary_input:
            return ternarize_activation(x)
        return x

    def forward(self, x):
        h = self.quantize_input(self.bn(x))
        if self.is_pair:
            q1, q2 = sttn_weights(self.w1, self.w2, self.backward_mode)
            if self.kind == "conv":
                y = ops.branch_conv2d(h, (q1, q2), self.stride, self.pad)
            else:
                y = ops.branch_linear(h, (q1, q2))
        elif self.mode == "twn_baseline":
            y = self._apply(h, twn_weights(self.weight))
        else:
            y = self._apply(h, self.weight)
        return ops.relu(y) if self.post_activation == "relu" else y

    def pair(self) -> LatentKernelPair:
        if not self.is_pair:
            raise ConfigError(f"block in mode {self.mode!r} has no latent kernel pair")
        return LatentKernelPair(self.w1.data, self.w2.data)

    def ternary_kernel(self) -> TernaryKernel:
        """The kernel this block runs at inference time, as ``scale * t``."""
        if self.is_pair:
            pair = self.pair()
            return fuse_signs(sign(pair.w1), sign(pair.w2), pair.alpha)
        if self.mode == "twn_baseline":
            res = twn_quantize(self.weight.data, "heuristic")
            return TernaryKernel(res.t, res.alpha)
        raise ConfigError("float block has nothing to fuse")

    def effective_weight(self) -> np.ndarray:
        """Full-precision weight the ternary kernel approximates (w1 + w2 for pairs)."""
        if self.is_pair:
            return self.w1.data.astype(np.float64) + self.w2.data
        return self.weight.data.astype(np.float64)


class Residual(Module):
    """``body(x) + shortcut(x)``; the shortcut zero-pads channels and has no parameters."""

    def __init__(self, body: Sequential, out_ch: int):
        self.body = body
        self.out_ch = out_ch

    def forward(self, x):
        return self.body(x) + ops.pad_channels(x, self.out_ch)
