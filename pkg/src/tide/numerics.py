"""Dense float64 tensors with define-by-run reverse-mode gradients.

Every differentiable operation is a registered :class:`Primitive`.  A graph is
recorded only when at least one input requires a gradient, so the same model
code serves both the trainable path and the frozen/inference path.
"""
from __future__ import annotations

import contextlib
import io
import struct
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

__all__ = [
    "DimensionError",
    "UnsupportedOpError",
    "Tensor",
    "ParamSet",
    "Primitive",
    "PRIMITIVES",
    "FDReport",
    "tensor",
    "grad",
    "value_and_grad",
    "finite_diff_check",
    "corrupted",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "total",
    "square",
    "exp",
    "tanh",
    "gelu",
    "softplus",
    "softmax_rows",
    "sign",
    "gather",
    "sq_norm",
    "to_bytes",
    "from_bytes",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UnsupportedOpError(TypeError):
    """A non-differentiable primitive sits on a path that needs a gradient."""


class Tensor:
    """Immutable float64 array node.

    ``parents``/``prim`` are set only for nodes recorded in a gradient graph.
    """

    __slots__ = ("data", "requires_grad", "parents", "prim", "aux")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        prim: "Primitive | None" = None,
        aux: dict | None = None,
    ):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.prim = prim
        self.aux = aux

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __float__(self) -> float:
        return float(self.data)

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
            raise UnsupportedOpError("division by a Tensor is not a registered primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


ArrayLike = Union[Tensor, np.ndarray, float, int]


def tensor(x: ArrayLike, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x if not requires_grad else Tensor(x.data, requires_grad=True)
    return Tensor(x, requires_grad=requires_grad)


def _arr(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Primitive:
    """A named operation with a forward map and a vector-Jacobian product.

    ``vjp(g, out, *inputs)`` returns one cotangent per input.  ``vjp=None``
    marks the primitive as non-differentiable.
    """

    def __init__(self, name: str, forward: Callable, vjp: Callable | None):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __call__(self, *args: ArrayLike) -> Tensor:
        arrays = [_arr(a) for a in args]
        out = self.forward(*arrays)
        if any(isinstance(a, Tensor) and a.requires_grad for a in args):
            parents = tuple(a if isinstance(a, Tensor) else Tensor(a) for a in args)
            return Tensor(out, requires_grad=True, parents=parents, prim=self)
        return Tensor(out)

    def __repr__(self) -> str:
        return f"Primitive({self.name!r})"


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward: Callable, vjp: Callable | None) -> Primitive:
    prim = Primitive(name, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


def _elementwise_shapes(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from exc


def _add_fwd(a, b):
    _elementwise_shapes(a, b)
    return a + b


def _sub_fwd(a, b):
    _elementwise_shapes(a, b)
    return a - b


def _mul_fwd(a, b):
    _elementwise_shapes(a, b)
    return a * b


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def _transpose_fwd(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects rank 2, got {a.shape}")
    return a.T


def _softmax_fwd(a):
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects rank 2, got {a.shape}")
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _softmax_vjp(g, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a**3)))


def _gelu_vjp(g, out, a):
    u = _GELU_C * (a + 0.044715 * a**3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
    return (g * (0.5 * (1.0 + th) + 0.5 * a * (1.0 - th**2) * du),)


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


add = _register("add", _add_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
sub = _register("sub", _sub_fwd, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
mul = _register(
    "mul", _mul_fwd, lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
)
neg = _register("neg", np.negative, lambda g, out, a: (-g,))
matmul = _register("matmul", _matmul_fwd, lambda g, out, a, b: (g @ b.T, a.T @ g))
transpose = _register("transpose", _transpose_fwd, lambda g, out, a: (g.T,))
total = _register("sum", lambda a: np.asarray(a.sum()), lambda g, out, a: (np.full(a.shape, g),))
square = _register("square", np.square, lambda g, out, a: (2.0 * a * g,))
exp = _register("exp", np.exp, lambda g, out, a: (g * out,))
tanh = _register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out**2),))
gelu = _register("gelu", _gelu_fwd, _gelu_vjp)
softplus = _register("softplus", lambda a: np.logaddexp(0.0, a), lambda g, out, a: (g * _sigmoid(a),))
softmax_rows = _register("softmax_rows", _softmax_fwd, _softmax_vjp)
sign = _register("sign", np.sign, None)


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    """Row-major reshape (the target shape is a static argument, not an input)."""
    shape = tuple(shape)
    src = _arr(a).shape
    if int(np.prod(shape)) != int(np.prod(src)):
        raise DimensionError(f"cannot reshape {src} to {shape}")
    prim = PRIMITIVES["reshape"]
    out = _arr(a).reshape(shape)
    if isinstance(a, Tensor) and a.requires_grad:
        return Tensor(out, requires_grad=True, parents=(a,), prim=prim)
    return Tensor(out)


_register("reshape", None, lambda g, out, a: (g.reshape(a.shape),))


def gather(a: ArrayLike, index: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    """``a.ravel()[index].reshape(shape)`` with a static integer index."""
    src = _arr(a)
    out = src.ravel()[index].reshape(shape)
    if isinstance(a, Tensor) and a.requires_grad:
        return Tensor(out, requires_grad=True, parents=(a,), prim=PRIMITIVES["gather"], aux={"index": index})
    return Tensor(out)


def _gather_vjp(g, out, a, index):
    acc = np.zeros(a.size)
    np.add.at(acc, index, g.ravel())
    return (acc.reshape(a.shape),)


_register("gather", None, _gather_vjp)


def sq_norm(a: ArrayLike) -> Tensor:
    """Sum of squared entries."""
    return total(square(a))


# ---------------------------------------------------------------- gradients


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Cotangents of ``root`` for every graph node, keyed by ``id(node)``."""
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar output, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        if node.prim is None:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        if node.prim.vjp is None:
            raise UnsupportedOpError(f"primitive {node.prim.name!r} is not differentiable")
        parent_arrays = [p.data for p in node.parents]
        cotangents = node.prim.vjp(g, node.data, *parent_arrays, **(node.aux or {}))
        for p, c in zip(node.parents, cotangents):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + c
            else:
                grads[id(p)] = np.asarray(c, dtype=np.float64)
        del grads[id(node)]
    return grads


class ParamSet(Mapping):
    """Named tensors with a per-entry frozen flag."""

    def __init__(self, params: Mapping[str, ArrayLike], frozen: Iterable[str] = ()):
        self._params = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}
        frozen = frozenset(frozen)
        unknown = frozen - self._params.keys()
        if unknown:
            raise KeyError(f"frozen names not in parameter set: {sorted(unknown)}")
        self._frozen = frozen

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{'*' if k in self._frozen else ''}:{v.shape}" for k, v in self._params.items())
        return f"ParamSet({body})"

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    @property
    def frozen_names(self) -> frozenset[str]:
        return self._frozen

    @property
    def trainable_names(self) -> list[str]:
        return [k for k in self._params if k not in self._frozen]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def replace(self, updates: Mapping[str, ArrayLike]) -> "ParamSet":
        """New set with some values swapped; frozen entries may not be replaced."""
        hit = set(updates) & self._frozen
        if hit:
            raise ValueError(f"refusing to update frozen parameters: {sorted(hit)}")
        merged = dict(self._params)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = Tensor(_arr(v))
        return ParamSet(merged, self._frozen)

    def frozen_copy(self) -> "ParamSet":
        """Deep, value-equal copy with every entry frozen."""
        return ParamSet({k: Tensor(v.data.copy()) for k, v in self._params.items()}, self._params.keys())

    def num_params(self, trainable_only: bool = False) -> int:
        names = self.trainable_names if trainable_only else list(self._params)
        return int(sum(self._params[k].data.size for k in names))

    def equals(self, other: "ParamSet") -> bool:
        return (
            self.keys() == other.keys()
            and self._frozen == other._frozen
            and all(np.array_equal(self[k].data, other[k].data) for k in self)
        )


def _leaves(p: ParamSet) -> tuple[ParamSet, dict[str, Tensor]]:
    leaves = {k: Tensor(p[k].data, requires_grad=True) for k in p.trainable_names}
    merged = {k: leaves.get(k, p[k]) for k in p}
    return ParamSet(merged, p.frozen_names), leaves


def value_and_grad(f: Callable[[ParamSet], ArrayLike], p: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``f(p)`` and its gradient with respect to every non-frozen entry."""
    live, leaves = _leaves(p)
    out = f(live)
    out_t = out if isinstance(out, Tensor) else Tensor(out)
    if out_t.data.size != 1:
        raise DimensionError(f"f must be scalar-valued, got shape {out_t.shape}")
    if out_t.requires_grad:
        cot = backward(out_t)
    else:
        cot = {}
    result = {}
    for k, leaf in leaves.items():
        g = cot.get(id(leaf))
        result[k] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    return float(out_t.data), result


def grad(f: Callable[[ParamSet], ArrayLike], p: ParamSet) -> dict[str, np.ndarray]:
    return value_and_grad(f, p)[1]


@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    worst: tuple[str, int] | None = None
    n_coords: int = 0


def finite_diff_check(
    f: Callable[[ParamSet], ArrayLike],
    p: ParamSet,
    eps: float = 1e-5,
    tol: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> FDReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if analytic is None:
        analytic = grad(f, p)
    worst_err, worst_at, count = 0.0, None, 0
    for name in p.trainable_names:
        base = p[name].data
        ana = analytic[name].ravel()
        for i in range(base.size):
            bumped = base.copy().ravel()
            bumped[i] += eps
            f_plus = float(_arr(f(p.replace({name: bumped.reshape(base.shape)}))))
            bumped[i] -= 2 * eps
            f_minus = float(_arr(f(p.replace({name: bumped.reshape(base.shape)}))))
            num = (f_plus - f_minus) / (2 * eps)
            err = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8)
            count += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (name, i)
    return FDReport(float(worst_err), bool(worst_err <= tol), worst_at, count)


@contextlib.contextmanager
def corrupted(name: str, factor: float = 1.5):
    """Temporarily scale a primitive's vector-Jacobian product (self-test hook)."""
    prim = PRIMITIVES[name]
    original = prim.vjp
    if original is None:
        raise UnsupportedOpError(f"primitive {name!r} has no gradient to corrupt")
    prim.vjp = lambda g, out, *xs, **aux: tuple(factor * c for c in original(g, out, *xs, **aux))
    try:
        yield prim
    finally:
        prim.vjp = original


# ---------------------------------------------------------------- .ten I/O


def to_bytes(a: ArrayLike) -> bytes:
    arr = np.asarray(_arr(a), dtype="<f8", order="C")  # ascontiguousarray would promote rank 0
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def read_tensor(fh: BinaryIO) -> np.ndarray:
    raw = fh.read(4)
    if len(raw) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise EOFError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", raw)
    n = int(np.prod(shape, dtype=np.int64))
    body = fh.read(8 * n)
    if len(body) != 8 * n:
        raise EOFError("truncated tensor data")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def write_tensor(fh: BinaryIO, a: ArrayLike) -> None:
    fh.write(to_bytes(a))


def from_bytes(buf: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(buf))


def save_tensor(path, a: ArrayLike) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, a)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
