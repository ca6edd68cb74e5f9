"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: every operation on a Tensor records its parents
and a backward rule, and backward() walks the recorded graph once,
accumulating gradients into leaves created with requires_grad=True. Frozen
leaves (model weights that must not train, batch data) never receive a
gradient buffer.

Every primitive validates its output. NaN or Inf anywhere, forward or
backward, raises NonFiniteError naming the offending primitive. All values
are float64; reductions use numpy's deterministic shape-fixed order, so two
evaluations of the same graph on the same inputs are bit-identical in a
single-threaded process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "maximum_const",
    "power_const",
    "clip",
    "tsum",
    "tmean",
    "softmax_last",
    "concat",
    "reshape",
    "swapaxes",
    "backward",
    "ParamSet",
    "eval_with_grads",
    "finite_diff_check",
    "ParamCheck",
    "GradCheckReport",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str, context: str = ""):
        self.op = op
        msg = f"non-finite value produced by primitive '{op}'"
        if context:
            msg = f"{msg} ({context})"
        super().__init__(msg)


def _check_finite(arr: np.ndarray, op: str, context: str = "") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, context)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting introduced or stretched."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One node of the computation graph wrapping a float64 ndarray.

    Leaves are built directly (or via constant/parameter); interior nodes
    come out of the primitives below. Only leaves with requires_grad=True
    own a persistent .grad buffer; gradients of interior nodes are transient
    to a single backward() call.
    """

    __slots__ = ("value", "requires_grad", "grad", "op", "_parents", "_backward")

    # ndarray <op> Tensor must dispatch to the reflected methods below, not
    # to numpy's elementwise object broadcasting
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward=None):
        self.value = _check_finite(np.asarray(value, dtype=np.float64), op)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward
        if self.requires_grad and not parents:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power_const(self, exponent)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def swapaxes(self, ax1: int, ax2: int):
        return swapaxes(self, ax1, ax2)

    def clip(self, lo: float, hi: float):
        return clip(self, lo, hi)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def maximum(self, c: float):
        return maximum_const(self, c)


def constant(value) -> Tensor:
    """Leaf that never receives gradients."""
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    """Leaf with an allocated gradient buffer."""
    return Tensor(value, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(value, op: str, parents: tuple, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        # constants flow through without keeping graph structure alive
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")
    out = a.value + b.value

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")
    out = a.value - b.value

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")
    out = a.value * b.value

    def bwd(g):
        return ((a, _unbroadcast(g * b.value, a.shape)),
                (b, _unbroadcast(g * a.value, b.shape)))

    return _node(out, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def bwd(g):
        ga = g / b.value
        gb = -g * out / b.value
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _node(out, "div", (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        return ((a, -g),)

    return _node(-a.value, "neg", (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dimensions do not broadcast, {a.shape} vs {b.shape}") from None
    out = a.value @ b.value

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _node(out, "matmul", (a, b), bwd)


def _unary(a, op: str, value: np.ndarray, local) -> Tensor:
    def bwd(g):
        return ((a, g * local()),)

    return _node(value, op, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _unary(a, "tanh", out, lambda: 1.0 - out * out)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # stable in both tails; never overflows
    z = np.exp(-np.abs(a.value))
    out = np.where(a.value >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _unary(a, "sigmoid", out, lambda: out * (1.0 - out))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.value, 0.0)
    return _unary(a, "relu", out, lambda: (a.value > 0).astype(np.float64))


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _unary(a, "exp", out, lambda: out)


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _unary(a, "log", out, lambda: 1.0 / a.value)


def maximum_const(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    out = np.maximum(a.value, c)
    # subgradient 0 at the tie x == c
    return _unary(a, "maximum_const", out, lambda: (a.value > c).astype(np.float64))


def power_const(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(a.value, p)

    def local():
        if p == 0.0:
            return np.zeros_like(a.value)
        if p == 1.0:
            return np.ones_like(a.value)
        with np.errstate(invalid="ignore", divide="ignore"):
            return p * np.power(a.value, p - 1.0)

    return _unary(a, "power_const", out, local)


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ValueError(f"clip: lo must be below hi, got {lo} and {hi}")
    out = np.clip(a.value, lo, hi)
    return _unary(a, "clip", out,
                  lambda: ((a.value >= lo) & (a.value <= hi)).astype(np.float64))


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        return ((a, _expand_reduced(g, a.shape, axes, keepdims)),)

    return _node(out, "sum", (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _normalize_axes(axis, a.ndim)
    out = a.value.mean(axis=axes, keepdims=keepdims)
    if axes is None:
        count = a.size
    else:
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        return ((a, _expand_reduced(g / count, a.shape, axes, keepdims)),)

    return _node(out, "mean", (a,), bwd)


def softmax_last(a) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((a, (g - inner) * out),)

    return _node(out, "softmax", (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    out = np.concatenate([t.value for t in tensors], axis=axis)
    ax = axis % out.ndim
    sizes = [t.shape[ax] for t in tensors]

    def bwd(g):
        grads = []
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(offset, offset + n)
            grads.append((t, g[tuple(idx)]))
            offset += n
        return tuple(grads)

    return _node(out, "concat", tensors, bwd)


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.value[idx]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return ((a, full),)

    return _node(out, "slice", (a,), bwd)


def reshape(a, *shape) -> Tensor:
    a = _wrap(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.value.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return _node(out, "reshape", (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    out = np.swapaxes(a.value, ax1, ax2)

    def bwd(g):
        return ((a, np.swapaxes(g, ax1, ax2)),)

    return _node(out, "swapaxes", (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(out: Tensor) -> float:
    """Run reverse-mode accumulation from a scalar node; returns its value.

    Gradients land in the .grad buffers of requires_grad leaves (+=, callers
    zero buffers between evaluations). Interior gradients are transient.
    """
    if out.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {out.shape}")
    if not out.requires_grad:
        return float(out.value)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # requires_grad leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            _check_finite(pg, node.op, "backward")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return float(out.value)


# ---------------------------------------------------------------------------
# parameter sets and the evaluation entry point


class ParamSet:
    """Named trainable tensors, one gradient buffer per parameter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads_populated = False

    def add(self, name: str, value) -> Tensor:
        t = parameter(value)
        return self.adopt(name, t)

    def adopt(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing leaf under this set (shared across sets)."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad or tensor._parents:
            raise ValueError(f"parameter {name!r} must be a requires_grad leaf")
        self._params[name] = tensor
        return tensor

    def names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0
        self.grads_populated = False


def eval_with_grads(computation, params: ParamSet, *inputs) -> float:
    """Evaluate computation(params, *inputs) and write gradients into params.

    The computation must return a scalar Tensor. Gradient buffers are zeroed
    first, so each call yields exactly d loss / d param.
    """
    params.zero_grads()
    out = computation(params, *inputs)
    if not isinstance(out, Tensor):
        raise TypeError("computation must return a Tensor")
    loss = backward(out)
    params.grads_populated = True
    return loss


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: int | None
    n_checked: int
    n_negligible: int
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    h: float = 0.0
    tol: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def format(self) -> str:
        lines = [f"finite-difference check  h={self.h:g}  tol={self.tol:g}"]
        for c in self.checks:
            status = "ok  " if c.passed else "FAIL"
            worst = "-" if c.worst_index is None else str(c.worst_index)
            lines.append(
                f"  {status} {c.name:<24} max_rel_err={c.max_rel_err:.3e}"
                f" worst_entry={worst} checked={c.n_checked} negligible={c.n_negligible}"
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"  overall max_rel_err={self.max_rel_err:.3e} -> {verdict}")
        return "\n".join(lines)


def finite_diff_check(computation, params: ParamSet, inputs=(), *, h: float = 1e-5,
                      tol: float = 1e-6, floor: float = 1e-6,
                      analytic: dict[str, np.ndarray] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences, per entry.

    For each scalar parameter entry the symmetric difference
    (f(x+h) - f(x-h)) / 2h is compared to the analytic gradient; entries
    where both magnitudes fall below `floor` are counted as negligible and
    skipped (the difference quotient carries no signal there). `analytic`
    overrides the freshly computed gradients, which lets callers check a
    gradient they obtained elsewhere.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        eval_with_grads(computation, params, *inputs)
        analytic = {name: params.grad(name).copy() for name in params.names()}

    def loss_at() -> float:
        out = computation(params, *inputs)
        if out.value.size != 1:
            raise ValueError("computation must return a scalar")
        return float(out.value)

    report = GradCheckReport(h=h, tol=tol)
    for name in params.names():
        values = params.value(name).reshape(-1)
        an = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        if an.shape != values.shape:
            raise ValueError(f"analytic gradient for {name!r} has wrong size")
        max_rel = 0.0
        worst = None
        negligible = 0
        for i in range(values.size):
            saved = values[i]
            values[i] = saved + h
            lo_plus = loss_at()
            values[i] = saved - h
            lo_minus = loss_at()
            values[i] = saved
            numeric = (lo_plus - lo_minus) / (2.0 * h)
            scale = max(abs(an[i]), abs(numeric))
            if scale < floor:
                negligible += 1
                continue
            rel = abs(an[i] - numeric) / scale
            if rel > max_rel:
                max_rel = rel
                worst = i
        report.checks.append(ParamCheck(
            name=name,
            max_rel_err=max_rel,
            worst_index=worst,
            n_checked=values.size,
            n_negligible=negligible,
            passed=max_rel < tol,
        ))
    return report
