"""Fused ternary model files and the runtime that executes them.

A trained network is lowered to a flat list of :class:`Op` records. Every
quantized block becomes BatchNorm -> input quantizer -> one ternary
convolution (or inner product) -> ReLU, with the two trained binary kernels
already summed into a single ternary kernel. The byte layout is documented
in ``docs/checkpoint_format.md``.

Before a file is written, the serialized bytes are parsed back and every
quantized block is checked against the two-branch training graph on a
random probe batch. A file that fails the check is never written.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_record, ops
from .inference.bitplane import BitplaneTensor, words_for
from .inference.conv import ternary_conv2d, ternary_linear
from .inference.fuse import PackedKernel
from .layers import (
    BatchNorm,
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
from .models import Network
from .quantizers import ACTIVATION_THRESHOLD, ternarize

MAGIC = b"STTN"
VERSION = 1

TAG_CONV_F32 = 0x01
TAG_LINEAR_F32 = 0x02
TAG_BATCHNORM = 0x03
TAG_TERNARIZE = 0x04
TAG_RELU = 0x05
TAG_TERNARY_CONV = 0x06
TAG_TERNARY_LINEAR = 0x07
TAG_MAXPOOL = 0x08
TAG_FLATTEN = 0x09
TAG_GLOBAL_AVG_POOL = 0x0A
TAG_PUSH = 0x0B
TAG_RESIDUAL_ADD = 0x0C

TAG_NAMES = {
    TAG_CONV_F32: "conv_f32", TAG_LINEAR_F32: "linear_f32", TAG_BATCHNORM: "batchnorm",
    TAG_TERNARIZE: "ternarize", TAG_RELU: "relu", TAG_TERNARY_CONV: "ternary_conv",
    TAG_TERNARY_LINEAR: "ternary_linear", TAG_MAXPOOL: "maxpool", TAG_FLATTEN: "flatten",
    TAG_GLOBAL_AVG_POOL: "global_avg_pool", TAG_PUSH: "push", TAG_RESIDUAL_ADD: "residual_add",
}

PROBE_RTOL = 1e-5


class FormatError(ValueError):
    """The file is not a valid fused model."""


class ExportError(RuntimeError):
    pass


@dataclass(eq=False)
class Op:
    tag: int
    geom: tuple[int, ...] = ()
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    scale: float = 0.0
    threshold: float = ACTIVATION_THRESHOLD
    eps: float = 0.0
    packed: PackedKernel | None = None
    block: str | None = None  # owning quantized block (lowering only; not serialized)

    @property
    def name(self) -> str:
        return TAG_NAMES[self.tag]


# -- lowering ----------------------------------------------------------------------

def _lower_block(block: QuantBlock) -> list[Op]:
    bn = block.bn
    out = [Op(TAG_BATCHNORM, (bn.gamma.shape[0],), {
        "gamma": bn.gamma.data, "beta": bn.beta.data,
        "mean": bn.running_mean, "var": bn.running_var}, eps=ops.BN_EPS)]
    if block.mode == "float":
        raise ExportError(f"block {block.name} is full precision; nothing to fuse")
    if block.ternary_input:
        out.append(Op(TAG_TERNARIZE, threshold=ACTIVATION_THRESHOLD))
    kernel = block.ternary_kernel()
    packed = kernel.packed()
    flag = int(block.ternary_input)
    if block.kind == "conv":
        o, c, kh, kw = kernel.t.shape
        out.append(Op(TAG_TERNARY_CONV, (o, c, kh, kw, block.stride, block.pad, flag),
                      scale=kernel.scale, packed=packed))
    else:
        o, c = kernel.t.shape
        out.append(Op(TAG_TERNARY_LINEAR, (o, c, flag), scale=kernel.scale, packed=packed))
    if block.post_activation == "relu":
        out.append(Op(TAG_RELU))
    for op in out:
        op.block = block.name
    return out


def lower(module: Module) -> list[Op]:
    if isinstance(module, Network):
        return lower(module.body)
    if isinstance(module, Sequential):
        return [op for layer in module for op in lower(layer)]
    if isinstance(module, QuantBlock):
        return _lower_block(module)
    if isinstance(module, Residual):
        return [Op(TAG_PUSH), *lower(module.body), Op(TAG_RESIDUAL_ADD, (module.out_ch,))]
    if isinstance(module, Conv2d):
        o, c, kh, kw = module.weight.shape
        return [Op(TAG_CONV_F32, (o, c, kh, kw, module.stride, module.pad), {"weight": module.weight.data})]
    if isinstance(module, Linear):
        o, c = module.weight.shape
        arrays = {"weight": module.weight.data}
        if module.bias is not None:
            arrays["bias"] = module.bias.data
        return [Op(TAG_LINEAR_F32, (o, c, int(module.bias is not None)), arrays)]
    if isinstance(module, BatchNorm):
        return [Op(TAG_BATCHNORM, (module.gamma.shape[0],), {
            "gamma": module.gamma.data, "beta": module.beta.data,
            "mean": module.running_mean, "var": module.running_var}, eps=ops.BN_EPS)]
    if isinstance(module, MaxPool2d):
        return [Op(TAG_MAXPOOL, (module.kernel, module.stride))]
    if isinstance(module, Flatten):
        return [Op(TAG_FLATTEN)]
    if isinstance(module, GlobalAvgPool):
        return [Op(TAG_GLOBAL_AVG_POOL)]
    raise ExportError(f"cannot export layer of type {type(module).__name__}")


# -- serialization -----------------------------------------------------------------

def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _i32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}i", *vals)


def _payload(op: Op) -> bytes:
    t = op.tag
    if t == TAG_CONV_F32:
        return _i32(*op.geom) + _f32(op.arrays["weight"])
    if t == TAG_LINEAR_F32:
        body = _i32(*op.geom) + _f32(op.arrays["weight"])
        return body + _f32(op.arrays["bias"]) if op.geom[2] else body
    if t == TAG_BATCHNORM:
        a = op.arrays
        return _i32(*op.geom) + struct.pack("<f", op.eps) + b"".join(
            _f32(a[k]) for k in ("gamma", "beta", "mean", "var"))
    if t == TAG_TERNARIZE:
        return struct.pack("<f", op.threshold)
    if t in (TAG_TERNARY_CONV, TAG_TERNARY_LINEAR):
        planes = op.packed.planes
        return (_i32(*op.geom) + struct.pack("<f", op.scale) + _i32(planes.words)
                + np.ascontiguousarray(planes.mask, dtype="<u8").tobytes()
                + np.ascontiguousarray(planes.sign, dtype="<u8").tobytes())
    if t == TAG_MAXPOOL or t == TAG_RESIDUAL_ADD:
        return _i32(*op.geom)
    if t in (TAG_RELU, TAG_FLATTEN, TAG_GLOBAL_AVG_POOL, TAG_PUSH):
        return b""
    raise ExportError(f"unknown op tag {t}")


def serialize(ops_: list[Op], meta: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(ops_))]
    for op in ops_:
        body = _payload(op)
        parts.append(struct.pack("<BI", op.tag, len(body)))
        parts.append(body)
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated at byte offset {self.pos}: need {n} bytes for {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def i32(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}i", self.take(4 * n, what))

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def f32s(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32)

    def u64s(self, n: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * n, what), dtype="<u8").copy()


def _parse_op(r: _Reader, tag: int, size: int) -> Op:
    start = r.pos
    if tag == TAG_CONV_F32:
        g = r.i32(6, "conv geometry")
        op = Op(tag, g, {"weight": r.f32s(int(np.prod(g[:4])), "conv weight").reshape(g[:4])})
    elif tag == TAG_LINEAR_F32:
        g = r.i32(3, "linear geometry")
        arrays = {"weight": r.f32s(g[0] * g[1], "linear weight").reshape(g[0], g[1])}
        if g[2]:
            arrays["bias"] = r.f32s(g[0], "linear bias")
        op = Op(tag, g, arrays)
    elif tag == TAG_BATCHNORM:
        (c,) = r.i32(1, "batchnorm channels")
        eps = r.f32("batchnorm eps")
        op = Op(tag, (c,), {k: r.f32s(c, f"batchnorm {k}") for k in ("gamma", "beta", "mean", "var")}, eps=eps)
    elif tag == TAG_TERNARIZE:
        op = Op(tag, threshold=r.f32("ternarize threshold"))
    elif tag in (TAG_TERNARY_CONV, TAG_TERNARY_LINEAR):
        conv = tag == TAG_TERNARY_CONV
        g = r.i32(7 if conv else 3, "ternary geometry")
        scale = r.f32("ternary scale")
        (wpr,) = r.i32(1, "words per row")
        shape = g[:4] if conv else g[:2]
        length = int(np.prod(shape[1:]))
        if wpr != words_for(length):
            raise FormatError(f"record at byte offset {start}: {wpr} words per row, expected {words_for(length)}")
        mask = r.u64s(shape[0] * wpr, "mask words").reshape(shape[0], wpr)
        sign = r.u64s(shape[0] * wpr, "sign words").reshape(shape[0], wpr)
        op = Op(tag, g, scale=scale, packed=PackedKernel(BitplaneTensor(mask, sign, length), tuple(shape), scale))
    elif tag == TAG_MAXPOOL:
        op = Op(tag, r.i32(2, "maxpool geometry"))
    elif tag == TAG_RESIDUAL_ADD:
        op = Op(tag, r.i32(1, "residual channels"))
    elif tag in (TAG_RELU, TAG_FLATTEN, TAG_GLOBAL_AVG_POOL, TAG_PUSH):
        op = Op(tag)
    else:
        raise FormatError(f"unknown record tag 0x{tag:02x} at byte offset {start - 5}")
    if r.pos - start != size:
        raise FormatError(f"record {TAG_NAMES[tag]} at byte offset {start - 5}: "
                          f"declared {size} payload bytes, parsed {r.pos - start}")
    return op


def deserialize(data: bytes) -> tuple[list[Op], dict]:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic at byte offset 0: expected {MAGIC!r}, found {data[:len(MAGIC)]!r}")
    end = len(data) - 4
    (stored,) = struct.unpack_from("<I", data, end)
    actual = zlib.crc32(data[:end])
    if stored != actual:
        raise FormatError(f"CRC32 mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}")
    r = _Reader(data, end)
    r.take(len(MAGIC), "magic")
    version, meta_len = struct.unpack("<BI", r.take(5, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte offset 4 (expected {VERSION})")
    meta = json.loads(r.take(meta_len, "metadata").decode())
    (count,) = struct.unpack("<I", r.take(4, "record count"))
    out = []
    for _ in range(count):
        tag, size = struct.unpack("<BI", r.take(5, "record header"))
        out.append(_parse_op(r, tag, size))
    if r.pos != end:
        raise FormatError(f"{end - r.pos} trailing bytes at byte offset {r.pos}")
    return out, meta


# -- runtime -----------------------------------------------------------------------

def run_op(op: Op, x: np.ndarray, stack: list[np.ndarray]) -> np.ndarray:
    t = op.tag
    if t == TAG_CONV_F32:
        return ops.conv2d(Tensor(x), Tensor(op.arrays["weight"]), op.geom[4], op.geom[5]).data
    if t == TAG_LINEAR_F32:
        bias = op.arrays.get("bias")
        return ops.linear(Tensor(x), Tensor(op.arrays["weight"]), None if bias is None else Tensor(bias)).data
    if t == TAG_BATCHNORM:
        a = op.arrays
        return ops.batch_norm(Tensor(x), Tensor(a["gamma"]), Tensor(a["beta"]), a["mean"], a["var"],
                              training=False, eps=op.eps).data
    if t == TAG_TERNARIZE:
        return ternarize(x, op.threshold)
    if t == TAG_RELU:
        return ops.relu(Tensor(x)).data
    if t == TAG_TERNARY_CONV:
        stride, pad, ternary_in = op.geom[4:7]
        if ternary_in:
            return ternary_conv2d(x, op.packed, stride, pad).out
        return ops.conv2d(Tensor(x), Tensor(dense_kernel(op)), stride, pad).data
    if t == TAG_TERNARY_LINEAR:
        if op.geom[2]:
            return ternary_linear(x, op.packed).out
        return ops.linear(Tensor(x), Tensor(dense_kernel(op))).data
    if t == TAG_MAXPOOL:
        return ops.max_pool2d(Tensor(x), op.geom[0], op.geom[1]).data
    if t == TAG_FLATTEN:
        return x.reshape(x.shape[0], -1)
    if t == TAG_GLOBAL_AVG_POOL:
        return ops.global_avg_pool(Tensor(x)).data
    if t == TAG_PUSH:
        stack.append(x)
        return x
    if t == TAG_RESIDUAL_ADD:
        if not stack:
            raise FormatError("residual_add without a matching push")
        return x + ops.pad_channels(Tensor(stack.pop()), op.geom[0]).data
    raise FormatError(f"unknown op tag {t}")


def dense_kernel(op: Op) -> np.ndarray:
    from .inference.bitplane import decode

    t = decode(op.packed.planes).reshape(op.packed.shape)
    return np.float32(op.scale) * t.astype(np.float32)


class TernaryModel:
    """A loaded fused model; ``forward`` takes normalized (N, C, H, W) float32 input."""

    def __init__(self, ops_: list[Op], meta: dict):
        self.ops, self.meta = ops_, meta

    @classmethod
    def load(cls, path: str | Path) -> "TernaryModel":
        return cls(*deserialize(Path(path).read_bytes()))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        m = self.meta["model"]
        return (m["in_channels"], m["image_size"], m["image_size"])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise FormatError(f"input shape {x.shape} does not match model input (N, {self.input_shape})")
        stack: list[np.ndarray] = []
        with no_record():
            for op in self.ops:
                x = run_op(op, x, stack)
        return x

    __call__ = forward


# -- export ------------------------------------------------------------------------

@dataclass
class LayerCheck:
    name: str
    max_abs_dev: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_abs_dev <= self.tolerance


@dataclass
class ExportReport:
    layers: list[LayerCheck]
    logits_max_dev: float
    nbytes: int

    @property
    def worst(self) -> LayerCheck:
        return max(self.layers, key=lambda c: c.max_abs_dev / c.tolerance)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.layers)


def verify_fusion(model: Network, lowered: list[Op], parsed: list[Op], probe: np.ndarray,
                  rtol: float = PROBE_RTOL) -> ExportReport:
    """Compare each fused block with its two-branch training-graph block on identical inputs.

    The tolerance for a block is ``rtol * max(1, max|reference|)``.
    """
    by_name = {b.name: b for b in model.quant_blocks()}
    model.eval()
    checks: list[LayerCheck] = []
    stack: list[np.ndarray] = []
    x = probe.astype(np.float32)
    current, block_in = None, None
    with no_record():
        for i, (low, op) in enumerate(zip(lowered, parsed)):
            if low.block != current:
                current, block_in = low.block, x
            x = run_op(op, x, stack)
            nxt = lowered[i + 1].block if i + 1 < len(lowered) else None
            if low.block is not None and nxt != low.block:
                ref = by_name[low.block](Tensor(block_in)).data
                dev = float(np.max(np.abs(ref.astype(np.float64) - x)))
                checks.append(LayerCheck(low.block, dev, rtol * max(1.0, float(np.max(np.abs(ref))))))
        ref_logits = model(Tensor(probe.astype(np.float32))).data
    return ExportReport(checks, float(np.max(np.abs(ref_logits - x))), 0)


def export_model(model: Network, path: str | Path, probe_size: int = 8, seed: int = 0,
                 rtol: float = PROBE_RTOL, extra_meta: dict | None = None) -> ExportReport:
    """Fuse, pack, verify and write ``model``. Raises :class:`ExportError` without writing on failure."""
    if not model.quant_blocks() or all(not b.quantized for b in model.quant_blocks()):
        raise ExportError("float-mode model: nothing to fuse")
    model.eval()
    lowered = lower(model)
    meta = {"model": model.config.to_dict(), "format": "sttn-fused", **(extra_meta or {})}
    blob = serialize(lowered, meta)
    parsed, _ = deserialize(blob)
    c, h, w = model.config.in_channels, model.config.image_size, model.config.image_size
    probe = np.random.default_rng(seed).standard_normal((probe_size, c, h, w)).astype(np.float32)
    report = verify_fusion(model, lowered, parsed, probe, rtol)
    if not report.ok:
        worst = report.worst
        raise ExportError(
            f"fusion check failed: worst layer {worst.name} deviates by {worst.max_abs_dev:.3g} "
            f"(tolerance {worst.tolerance:.3g}); nothing written"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    report.nbytes = len(blob)
    return report


def is_fused_model(path: str | Path) -> bool:
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + 4)
    return head[:len(MAGIC)] == MAGIC and head[len(MAGIC):len(MAGIC) + 4] != b"CKPT"
