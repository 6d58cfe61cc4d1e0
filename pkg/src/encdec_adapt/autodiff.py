"""Dense float tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package goes through :func:`primitive`.
A primitive runs its numpy forward rule and, when a :class:`Tape` is active and
any operand requires a gradient, appends an entry to that tape. :func:`backward`
walks the entries in reverse.

Broadcasting is restricted to leading-batch dimensions: for elementwise binary
primitives the shapes must be equal or the shorter one must equal the trailing
dimensions of the longer one. ``matmul`` accepts either equal leading dimensions
or a 2-D right operand shared across the batch.

Reductions use numpy's pairwise summation over contiguous data. Inside
:func:`deterministic` the BLAS thread pool is pinned to one thread so matmul
reduction order is fixed as well.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError, TapeError

_TAPES: list["Tape"] = []
_CHECK_FINITE = False
_DETERMINISTIC = False


class Tensor:
    """An immutable float32/float64 array with an optional gradient flag."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; every path still goes through a primitive.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)


@dataclass
class TapeEntry:
    kind: str
    operands: tuple[Tensor, ...]
    attrs: dict[str, Any]
    result: Tensor
    ctx: Any


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so every operand produced on the
    tape precedes its consumers. Use as a context manager to make it active.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)
        self._produced.add(id(entry.result))

    def replay(self) -> bool:
        """Re-run every forward rule and report whether all outputs match bit-exactly."""
        for e in self.entries:
            out, _ = _PRIMS[e.kind].forward(*(o.data for o in e.operands), **e.attrs)
            out = np.asarray(out, dtype=e.result.dtype)
            if out.shape != e.result.shape or out.tobytes() != e.result.data.tobytes():
                return False
        return True


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Raise ContractError whenever a primitive produces NaN or Inf."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


@contextlib.contextmanager
def deterministic() -> Iterator[None]:
    """Pin BLAS to a single thread so matmul reductions run in a fixed order."""
    global _DETERMINISTIC
    from threadpoolctl import threadpool_limits

    prev, _DETERMINISTIC = _DETERMINISTIC, True
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield
    finally:
        _DETERMINISTIC = prev


def is_deterministic() -> bool:
    return _DETERMINISTIC


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    kind: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]
    check: Callable[..., None] | None = None


_PRIMS: dict[str, Primitive] = {}


def register(kind: str, forward, backward, check=None) -> None:
    _PRIMS[kind] = Primitive(kind, forward, backward, check)


def primitive_kinds() -> list[str]:
    return sorted(_PRIMS)


def primitive(kind: str, *operands: Tensor, **attrs: Any) -> Tensor:
    """Apply a registered primitive and record it on the active tape if needed."""
    try:
        prim = _PRIMS[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    arrays = [o.data for o in operands]
    if prim.check is not None:
        prim.check(*arrays, **attrs)
    out, ctx = prim.forward(*arrays, **attrs)
    result = Tensor._wrap(np.asarray(out))
    if _CHECK_FINITE and not np.all(np.isfinite(result.data)):
        raise ContractError(f"{kind} produced non-finite values")
    tape = active_tape()
    if tape is not None and any(o.requires_grad for o in operands):
        result.requires_grad = True
        tape.record(TapeEntry(kind, tuple(operands), attrs, result, ctx))
    return result


def backward(
    tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None
) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from leaf tensor to gradient. With ``wrt`` given, exactly
    those tensors are keys and any not reached by the loss get zeros. Without
    it, every requires-grad leaf that appears on the tape is a key.
    """
    if loss.ndim != 0:
        raise ContractError(f"loss must be 0-dimensional, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for e in reversed(tape.entries):
        g = grads.pop(id(e.result), None)
        if g is None:
            continue
        in_grads = _PRIMS[e.kind].backward(e.ctx, g, *(o.data for o in e.operands), **e.attrs)
        for op, og in zip(e.operands, in_grads):
            if og is None or not op.requires_grad:
                continue
            key = id(op)
            if not tape.owns(op):
                leaves[key] = op
            prev = grads.get(key)
            grads[key] = og if prev is None else prev + og
    if wrt is None:
        return {t: Tensor._wrap(np.asarray(grads[k], dtype=t.dtype)) for k, t in leaves.items()}
    out: dict[Tensor, Tensor] = {}
    for t in wrt:
        g = grads.get(id(t))
        arr = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype)
        out[t] = Tensor._wrap(arr)
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _leading_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    short, long_ = (a, b) if a.ndim < b.ndim else (b, a)
    if short.ndim < long_.ndim and long_.shape[long_.ndim - short.ndim :] == short.shape:
        return
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# primitive rules


def _matmul_check(a, b):
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    ok = ok and (b.ndim == 2 or a.shape[:-2] == b.shape[:-2])
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")


def _matmul_bwd(ctx, g, a, b):
    ga = g @ _swap(b)
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        gb = a.reshape(-1, k).T @ g.reshape(-1, n)
    else:
        gb = _swap(a) @ g
    return ga, gb


register("matmul", lambda a, b: (a @ b, None), _matmul_bwd, _matmul_check)

register(
    "add",
    lambda a, b: (a + b, None),
    lambda ctx, g, a, b: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    lambda a, b: _leading_broadcast("add", a, b),
)

register(
    "mul",
    lambda a, b: (a * b, None),
    lambda ctx, g, a, b: (_reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)),
    lambda a, b: _leading_broadcast("mul", a, b),
)


def _scale_fwd(x, c):
    return x * np.asarray(c, dtype=x.dtype), None


register("scale", _scale_fwd, lambda ctx, g, x, c: (g * np.asarray(c, dtype=g.dtype),))


def _softmax_fwd(x, mask=None):
    if mask is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=-1, keepdims=True), None
    xm = np.where(mask, x, -np.inf)
    m = xm.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0).astype(x.dtype)
    e = np.exp(xm - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s == 0, 1.0, s).astype(x.dtype), None


def _softmax_bwd(ctx, g, x, mask=None):
    p, _ = _softmax_fwd(x, mask)
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


register("softmax", _softmax_fwd, _softmax_bwd)


def _log_softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(ctx, g, x):
    y, _ = _log_softmax_fwd(x)
    return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def _rmsnorm_check(x, gamma, eps=1e-6):
    if gamma.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm: shapes {x.shape} and {gamma.shape} do not conform")


def _rmsnorm_fwd(x, gamma, eps=1e-6):
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + np.asarray(eps, dtype=x.dtype))
    xhat = x * r
    return xhat * gamma, (r, xhat)


def _rmsnorm_bwd(ctx, g, x, gamma, eps=1e-6):
    r, xhat = ctx
    gxhat = g * gamma
    gx = r * (gxhat - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, _reduce_to(g * xhat, gamma.shape)


register("rmsnorm", _rmsnorm_fwd, _rmsnorm_bwd, _rmsnorm_check)

_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(t, g, x):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


register("gelu", _gelu_fwd, _gelu_bwd)


def _embedding_check(table, ids):
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}) for table {table.shape}")


def _embedding_bwd(ctx, g, table, ids):
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


register("embedding", lambda table, ids: (table[ids], None), _embedding_bwd, _embedding_check)


def _transpose_check(x, axes):
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")


register(
    "transpose",
    lambda x, axes: (np.ascontiguousarray(np.transpose(x, axes)), None),
    lambda ctx, g, x, axes: (np.transpose(g, np.argsort(axes)),),
    _transpose_check,
)


def _reshape_check(x, shape):
    if math.prod(shape) != x.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")


register(
    "reshape",
    lambda x, shape: (x.reshape(shape), None),
    lambda ctx, g, x, shape: (g.reshape(x.shape),),
    _reshape_check,
)


def _expand_back(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _count(x, axis):
    if axis is None:
        return x.size
    axes = (axis,) if isinstance(axis, int) else axis
    return math.prod(x.shape[a] for a in axes)


register(
    "sum",
    lambda x, axis=None, keepdims=False: (np.asarray(x.sum(axis=axis, keepdims=keepdims)), None),
    lambda ctx, g, x, axis=None, keepdims=False: (_expand_back(g, x, axis, keepdims).copy(),),
)
register(
    "mean",
    lambda x, axis=None, keepdims=False: (np.asarray(x.mean(axis=axis, keepdims=keepdims)), None),
    lambda ctx, g, x, axis=None, keepdims=False: (
        _expand_back(g, x, axis, keepdims) / np.asarray(_count(x, axis), dtype=x.dtype),
    ),
)
register("log", lambda x: (np.log(x), None), lambda ctx, g, x: (g / x,))
register("exp", lambda x: (np.exp(x), None), lambda ctx, g, x: (g * np.exp(x),))


def _concat_check(*xs, axis=0):
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.ndim
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {x.shape} do not conform")


def _concat_bwd(ctx, g, *xs, axis=0):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


register("concat", lambda *xs, axis=0: (np.concatenate(xs, axis=axis), None), _concat_bwd, _concat_check)


def _slice_bwd(ctx, g, x, index):
    gx = np.zeros_like(x)
    gx[index] = g
    return (gx,)


register("slice", lambda x, index: (np.ascontiguousarray(x[index]), None), _slice_bwd)


def _gather_check(x, idx):
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather: shapes {x.shape} and {idx.shape} do not conform")


def _gather_bwd(ctx, g, x, idx):
    v = x.shape[-1]
    gx = np.zeros((int(np.prod(x.shape[:-1])), v), dtype=x.dtype)
    rows = np.arange(gx.shape[0])[:, None]
    np.add.at(gx, (rows, idx.reshape(gx.shape[0], -1)), g.reshape(gx.shape[0], -1))
    return (gx.reshape(x.shape),)


register("gather", lambda x, idx: (np.take_along_axis(x, idx, axis=-1), None), _gather_bwd, _gather_check)


def _rope_check(x, cos, sin):
    if x.shape[-1] % 2:
        raise ShapeError(f"rope: last dimension must be even, got {x.shape}")


def _rope_fwd(x, cos, sin):
    x0, x1 = x[..., 0::2], x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = x0 * cos - x1 * sin
    y[..., 1::2] = x0 * sin + x1 * cos
    return y, None


def _rope_bwd(ctx, g, x, cos, sin):
    g0, g1 = g[..., 0::2], g[..., 1::2]
    gx = np.empty_like(g)
    gx[..., 0::2] = g0 * cos + g1 * sin
    gx[..., 1::2] = g1 * cos - g0 * sin
    return (gx,)


register("rope", _rope_fwd, _rope_bwd, _rope_check)


# ---------------------------------------------------------------------------
# public wrappers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return primitive("matmul", a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return primitive("mul", a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return primitive("scale", x, c=float(c))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, numpy-broadcastable) marks allowed entries."""
    return primitive("softmax", x, mask=mask)


def log_softmax(x: Tensor) -> Tensor:
    return primitive("log_softmax", x)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    return primitive("rmsnorm", x, gamma, eps=float(eps))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    return primitive("gelu", x)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return primitive("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return primitive("transpose", x, axes=tuple(axes))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return primitive("reshape", x, shape=tuple(int(s) for s in shape))


def sum_(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return primitive("sum", x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    return primitive("mean", x, axis=axis, keepdims=keepdims)


def log(x: Tensor) -> Tensor:
    return primitive("log", x)


def exp(x: Tensor) -> Tensor:
    return primitive("exp", x)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return primitive("concat", *xs, axis=axis)


def slice_(x: Tensor, index: Any) -> Tensor:
    return primitive("slice", x, index=index)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """``take_along_axis`` on the last axis."""
    return primitive("gather", x, idx=np.asarray(idx, dtype=np.int64))


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by the angles encoded in ``cos``/``sin``."""
    return primitive("rope", x, cos=cos, sin=sin)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    function: Callable[..., Tensor],
    inputs: Sequence[Any],
    epsilon: float = 1e-3,
    order: int | str = "auto",
) -> float:
    """Compare tape gradients with central differences, both in float64.

    ``order=2`` is the plain stencil ``(f(x+h) - f(x-h)) / 2h``; ``order=4``
    uses ``(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h``. ``"auto"``
    starts with the 2-point estimate and upgrades an element to the 4-point
    one whenever the two-point estimate disagrees with the analytic value by
    more than 1e-5 relative, which keeps whole-model checks cheap.

    Returns:
        max over every input element of
        ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if order not in (2, 4, "auto"):
        raise ContractError("order must be 2, 4 or 'auto'")
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    with Tape() as tape:
        ts = [Tensor(x, requires_grad=True) for x in xs]
        out = function(*ts)
    if not isinstance(out, Tensor) or out.ndim != 0:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    if tape.owns(out):
        analytic = [g.data for g in backward(tape, out, wrt=ts).values()]
    else:
        analytic = [np.zeros_like(x) for x in xs]

    def f(i: int, j: int, delta: float) -> float:
        args = list(xs)
        x = xs[i].copy()
        x.flat[j] += delta
        args[i] = x
        return function(*(Tensor._wrap(a) for a in args)).item()

    worst = 0.0
    for i, x in enumerate(xs):
        for j in range(x.size):
            h = epsilon
            ana = float(analytic[i].flat[j])
            d1 = f(i, j, h) - f(i, j, -h)
            num = d1 / (2.0 * h)
            err = _rel_err(ana, num)
            if order == 4 or (order == "auto" and err > 1e-5):
                num = (8.0 * d1 - (f(i, j, 2 * h) - f(i, j, -2 * h))) / (12.0 * h)
                err = _rel_err(ana, num)
            worst = max(worst, err)
    return worst
