"""Dense tensors, a reverse-mode tape, and a finite-difference gradient checker.

Every differentiable quantity in the pipeline is a :class:`Tensor` backed by a
NumPy array. Operations executed while a :class:`Tape` is active are recorded
in execution order; :meth:`Tensor.backward` replays that record in reverse.

Outside an active tape, operations are plain NumPy evaluations and their
results carry no gradient linkage.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
import threading
import warnings
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DegenerateInputWarning", "DegeneratePointError",
    "TensorFormatError", "TruncatedDataError", "precision", "default_dtype", "no_grad",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "reshape", "concat",
    "take", "expand", "softmax", "l2_normalize", "mean", "reduce_sum", "relu",
    "layer_norm", "squared_euclidean", "cosine_similarity", "log", "exp", "row_mask",
    "grad_check", "write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
]

MAGIC = b"UCDT"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateInputWarning(RuntimeWarning):
    """A zero vector was normalized; the result was mapped to zero."""


class DegeneratePointError(ArithmeticError):
    """The checked function is not finite at a perturbed point."""


class TensorFormatError(ValueError):
    """Serialized tensor header has the wrong magic bytes or version."""


class TruncatedDataError(OSError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class _Node:
    __slots__ = ("op", "inputs", "output", "backward", "index", "tape")

    def __init__(self, op, inputs, output, backward, index, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.index = index
        self.tape = tape


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; tapes are thread-local and may nest.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.last_backward_order: list[int] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into ``grad`` of every reachable trainable leaf.

        Gradients accumulate across calls until :meth:`zero_grad`.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        node = self._node
        if node is None:
            warnings.warn("backward() on a tensor with no recorded history; nothing to do",
                          RuntimeWarning, stacklevel=2)
            return
        tape = node.tape
        pending = {id(self): np.ones_like(self.data)}
        order = []
        for n in reversed(tape.nodes[: node.index + 1]):
            g = pending.pop(id(n.output), None)
            if g is None:
                continue
            order.append(n.index)
            for inp, gi in zip(n.inputs, n.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
        tape.last_backward_order = order

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a Python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer, list, np.ndarray)):
            return take(self, index)
        raise TypeError("Tensor indexing supports integer or integer-array row selection only")


def _fail_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(out_data)
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            node = _Node(op, inputs, out, backward, len(tape.nodes), tape)
            tape.nodes.append(node)
            out._node = node
    return out


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_kind(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_kind(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_kind(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    # strict inequality: subgradient 0 at the kink
    return _record("relu", np.where(keep, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: (g * keep,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def row_mask(a: Tensor, keep) -> Tensor:
    """Zero the rows of ``a`` where ``keep`` is false; other rows pass through unchanged."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape[:1]:
        raise ShapeError(f"row_mask: mask shape {keep.shape} does not match rows of {a.shape}")
    k = keep.reshape((-1,) + (1,) * (a.ndim - 1))
    out = np.where(k, a.data, a.data.dtype.type(0))
    return _record("row_mask", out, (a,), lambda g: (np.where(k, g, 0),))


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., k) @ (k, m)`` or batched ``(B, n, k) @ (B, k, m)``."""
    if b.ndim == 2 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        k, m = b.shape

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb

        return _record("matmul", a.data @ b.data, (a, b), backward)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]:

        def backward(g):
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

        return _record("bmm", a.data @ b.data, (a, b), backward)
    raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def take(a: Tensor, index) -> Tensor:
    """Gather rows (axis 0) by integer index; the index array's shape is prepended."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for shape {a.shape}")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", a.data[idx], (a,), backward)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition (an explicit broadcast)."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _record("expand", out, (a,), lambda g: (g.sum(axis=axis),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _record("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return _record("sum", a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# normalizations and similarities (all act on the last axis)


def softmax(a: Tensor, keep=None) -> Tensor:
    """Row-wise softmax over the last axis.

    With ``keep`` (boolean, same shape), entries where ``keep`` is false are
    excluded from the support and receive exactly zero probability.
    """
    x = a.data
    if keep is None:
        z = np.exp(x - x.max(axis=-1, keepdims=True))
    else:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {keep.shape} != input shape {x.shape}")
        if not keep.any(axis=-1).all():
            raise ShapeError("softmax: a row has every entry masked")
        mx = np.where(keep, x, -np.inf).max(axis=-1, keepdims=True)
        z = np.where(keep, np.exp(np.where(keep, x - mx, 0)), 0).astype(x.dtype)
    p = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _record("softmax", p, (a,), backward)


def _safe_norm(x: np.ndarray, what: str) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        warnings.warn(f"{what}: zero vector encountered; result mapped to zero",
                      DegenerateInputWarning, stacklevel=3)
    return n


def l2_normalize(a: Tensor) -> Tensor:
    n = _safe_norm(a.data, "l2_normalize")
    zero = n == 0
    safe = np.where(zero, 1, n)
    out = np.where(zero, 0, a.data / safe).astype(a.data.dtype)

    def backward(g):
        return (np.where(zero, 0, (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe),)

    return _record("l2_normalize", out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for input {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _record("layer_norm", out.astype(x.dtype), (a, gamma, beta), backward)


def squared_euclidean(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"squared_euclidean: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def backward(g):
        gd = 2 * diff * g[..., None]
        return gd, -gd

    return _record("squared_euclidean", (diff * diff).sum(axis=-1), (a, b), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = _safe_norm(a.data, "cosine_similarity")
    nb = _safe_norm(b.data, "cosine_similarity")
    zero = (na == 0) | (nb == 0)
    na_s, nb_s = np.where(zero, 1, na), np.where(zero, 1, nb)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = np.where(zero, 0, dot / (na_s * nb_s))

    def backward(g):
        g = g[..., None]
        ga = np.where(zero, 0, g * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s)))
        gb = np.where(zero, 0, g * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s)))
        return ga, gb

    return _record("cosine_similarity", cos[..., 0].astype(a.data.dtype), (a, b), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], points: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``fn(*points)`` must return a scalar tensor. The points are upcast to 64-bit
    for the duration of the check and restored afterwards; ``fn`` may also read
    them by closure (they are perturbed in place).
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    points = list(points)
    saved = [(p.data, p.requires_grad, p.grad) for p in points]
    worst = 0.0
    try:
        with precision(np.float64):
            for p in points:
                p.data = np.array(p.data, dtype=np.float64)
                p.requires_grad = True
                p.grad = None
            with Tape():
                out = fn(*points)
                out.backward()
            analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in points]
            with no_grad():
                for p, a in zip(points, analytic):
                    flat = p.data.reshape(-1)
                    a = a.reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + step
                        f_plus = float(fn(*points).data)
                        flat[i] = orig - step
                        f_minus = float(fn(*points).data)
                        flat[i] = orig
                        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                            raise DegeneratePointError(
                                f"function not finite near coordinate {i} of a point with shape {p.shape}")
                        numeric = (f_plus - f_minus) / (2 * step)
                        err = abs(a[i] - numeric) / max(1.0, abs(a[i]), abs(numeric))
                        worst = max(worst, err)
    finally:
        for p, (data, rg, grad) in zip(points, saved):
            p.data, p.requires_grad, p.grad = data, rg, grad
    return worst


# ---------------------------------------------------------------------------
# serialization: "UCDT" | u32 version | u32 rank | u64 dims... | float32 LE payload


def write_tensor(stream, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    stream.write(MAGIC)
    stream.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(stream, n: int, what: str) -> bytes:
    offset = stream.tell()
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedDataError(f"truncated {what}: wanted {n} bytes, got {len(buf)}",
                                 offset + len(buf))
    return buf


def read_tensor(stream) -> Tensor:
    offset = stream.tell()
    magic = _read_exact(stream, 4, "tensor magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r} at byte offset {offset}")
    version, rank = struct.unpack("<II", _read_exact(stream, 8, "tensor header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version} at byte offset {offset}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "tensor dims"))
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(stream, 4 * count, "tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Tensor._wrap(arr)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))
