"""Dense tensors and a reverse-mode gradient tape.

Operations are recorded on the innermost active :class:`Tape`. Every
primitive (and every quantizer) goes through :func:`register_custom`, so the
built-in ops and user-supplied custom nodes share one contract: a forward
function on numpy arrays and a backward function that receives the upstream
gradient of each forward output, in order, and returns one gradient (or
``None``) per input.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Any, Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_tape_stack: list["Tape"] = []
_default_dtype = np.float32
_check_finite = True


class AutogradError(RuntimeError):
    pass


class NonFiniteError(AutogradError):
    pass


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (float64 for gradient checks)."""
    global _default_dtype
    old, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


def set_finite_check(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """An N-d float array with identity, optionally tracked by a tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar, implemented in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks it for weight decay."""

    def __init__(self, data, decay: bool = True, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.decay = decay


@dataclass
class CustomNode:
    """A forward/backward pair plus whatever the forward stashes on ``ctx``.

    ``forward(ctx, *arrays, **kwargs)`` returns an array or a tuple of arrays.
    ``backward(ctx, *upstream)`` returns one gradient per input (``None`` for
    inputs that receive nothing).
    """

    forward: Callable[..., Any]
    backward: Callable[..., Any]
    ctx: SimpleNamespace = field(default_factory=SimpleNamespace)
    name: str = "custom"


@dataclass
class _Record:
    node: CustomNode
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]


class Tape:
    """Ordered log of the differentiable operations run inside ``with Tape():``."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    @property
    def nodes(self) -> list[_Record]:
        return self.records

    def gradient(self, loss: Tensor, sources: Iterable[Tensor] | None = None) -> "GradMap":
        return backward_pass(self, loss, sources)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextmanager
def no_record():
    """Run operations without recording them on any tape."""
    saved = list(_tape_stack)
    _tape_stack.clear()
    try:
        yield
    finally:
        _tape_stack.extend(saved)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def register_custom(node: CustomNode, *inputs, **kwargs) -> Tensor | tuple[Tensor, ...]:
    """Run ``node.forward`` eagerly and append its backward rule to the active tape."""
    if node.forward is None or node.backward is None:
        raise AutogradError(f"node {node.name!r} needs both forward and backward handles")
    tensors = tuple(_as_tensor(x) for x in inputs)
    node.ctx.needs_input_grad = tuple(t.requires_grad for t in tensors)
    result = node.forward(node.ctx, *(t.data for t in tensors), **kwargs)
    multi = isinstance(result, tuple)
    arrays = result if multi else (result,)
    track = any(t.requires_grad for t in tensors)
    outputs = tuple(Tensor(a, requires_grad=track) for a in arrays)
    if _check_finite:
        for out in outputs:
            if not np.all(np.isfinite(out.data)):
                raise NonFiniteError(f"non-finite values produced by {node.name!r}")
    tape = active_tape()
    if tape is not None and track:
        tape.records.append(_Record(node, tensors, outputs))
    return outputs if multi else outputs[0]


class Function:
    """Subclass with static ``forward``/``backward`` and call ``apply``."""

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, *grads):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        node = CustomNode(cls.forward, cls.backward, SimpleNamespace(), cls.__name__)
        return register_custom(node, *inputs, **kwargs)


class GradMap(dict):
    """Gradients keyed by tensor id; also indexable by the tensor itself."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.id
        return super().get(key, default)


def backward_pass(tape: Tape, loss: Tensor, sources: Iterable[Tensor] | None = None) -> GradMap:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns gradients (numpy arrays) for every requires_grad input seen on the
    tape plus any extra ``sources``; tensors the loss does not reach get zeros.
    """
    if loss.size != 1:
        raise AutogradError(f"loss must be a scalar, got shape {loss.shape}")

    producer: dict[int, int] = {}
    for idx, rec in enumerate(tape.records):
        for out in rec.outputs:
            producer[out.id] = idx
    for idx, rec in enumerate(tape.records):
        for inp in rec.inputs:
            if producer.get(inp.id, -1) >= idx:
                raise AutogradError(f"cycle in tape at node {idx} ({rec.node.name})")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        upstream = [grads.get(out.id) for out in rec.outputs]
        if all(g is None for g in upstream):
            continue
        upstream = [np.zeros_like(o.data) if g is None else g for g, o in zip(upstream, rec.outputs)]
        result = rec.node.backward(rec.node.ctx, *upstream)
        if not isinstance(result, tuple):
            result = (result,)
        if len(result) != len(rec.inputs):
            raise AutogradError(
                f"backward of {rec.node.name!r} returned {len(result)} gradients "
                f"for {len(rec.inputs)} inputs"
            )
        for inp, g in zip(rec.inputs, result):
            if g is None or not inp.requires_grad:
                continue
            g = np.asarray(g, dtype=inp.dtype)
            if g.shape != inp.shape:
                raise AutogradError(
                    f"backward of {rec.node.name!r} produced gradient {g.shape} for input {inp.shape}"
                )
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + g
            else:
                grads[inp.id] = g

    out = GradMap()
    wanted: dict[int, Tensor] = {}
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad:
                wanted[inp.id] = inp
    for src in sources or ():
        wanted[src.id] = src
    for tid, t in wanted.items():
        out[tid] = grads.get(tid, np.zeros_like(t.data))
    return out


def grad(loss: Tensor, tape: Tape, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Convenience wrapper returning gradients in the order of ``params``."""
    g = backward_pass(tape, loss, params)
    return [g[p] for p in params]
