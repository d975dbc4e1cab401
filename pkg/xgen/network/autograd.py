"""
Reverse-mode differentiation over numpy arrays.

Every op builds an output Tensor holding its inputs (`_prev`), a name
(`_op`) and a closure that pushes the output gradient back to the inputs.
`Tape` orders the graph topologically and runs the closures in reverse.

All values are float64. With XGEN_DEBUG_NAN set every op checks its output
and raises NonFiniteError naming the op.
"""

import contextlib
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from xgen.config.errors import DegenerateDirectionError, NonFiniteError, XGenError
from xgen.config.settings import RuntimeSettings

_DEBUG_NAN = RuntimeSettings().debug_nan
_GRAD_ENABLED = True


def set_debug_nan(enabled: bool) -> None:
    global _DEBUG_NAN
    _DEBUG_NAN = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False, _prev: Tuple["Tensor", ...] = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._prev = _prev
        self._op = _op
        self._backward: Callable[[], None] = lambda: None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        Tape.from_output(self).backward(grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str) -> Tensor:
    if _DEBUG_NAN and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}'")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=track, _prev=tuple(inputs) if track else (), _op=op)


class Tape:
    """Topologically ordered operation records ending at one output"""

    def __init__(self, records: List[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        output = self.records[-1]
        if grad is None:
            if output.data.size != 1:
                raise XGenError("backward without a gradient needs a scalar output")
            grad = np.ones_like(output.data)
        grad = np.asarray(grad, dtype=np.float64)
        if not output._prev:
            output._accumulate(grad)
            return
        # intermediate gradients are rebuilt per pass; leaves accumulate
        for node in self.records:
            if node._prev:
                node.grad = None
        output.grad = grad.copy()
        for node in reversed(self.records):
            if node.grad is not None:
                node._backward()


# ============================================================================
# Elementwise and reductions
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, (a, b), "add")

    def _backward():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,), "neg")
    out._backward = lambda: a._accumulate(-out.grad)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, (a, b), "mul")

    def _backward():
        a._accumulate(out.grad * b.data)
        b._accumulate(out.grad * a.data)

    out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data / b.data, (a, b), "div")

    def _backward():
        a._accumulate(out.grad / b.data)
        b._accumulate(-out.grad * a.data / (b.data * b.data))

    out._backward = _backward
    return out


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data), (a,), "exp")
    out._backward = lambda: a._accumulate(out.grad * out.data)
    return out


def log1p_exp_neg_abs(a: Tensor) -> Tensor:
    """log(1 + exp(-|x|)), the stable tail of softplus"""
    e = np.exp(-np.abs(a.data))
    out = _result(np.log1p(e), (a,), "log1p_exp_neg_abs")
    out._backward = lambda: a._accumulate(out.grad * (-np.sign(a.data) * e / (1.0 + e)))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = _result(np.sqrt(a.data), (a,), "sqrt")
    out._backward = lambda: a._accumulate(out.grad * 0.5 / out.data)
    return out


def sin(a: Tensor) -> Tensor:
    out = _result(np.sin(a.data), (a,), "sin")
    out._backward = lambda: a._accumulate(out.grad * np.cos(a.data))
    return out


def cos(a: Tensor) -> Tensor:
    out = _result(np.cos(a.data), (a,), "cos")
    out._backward = lambda: a._accumulate(-out.grad * np.sin(a.data))
    return out


def abs_(a: Tensor) -> Tensor:
    out = _result(np.abs(a.data), (a,), "abs")
    out._backward = lambda: a._accumulate(out.grad * np.sign(a.data))
    return out


def relu(a: Tensor) -> Tensor:
    """max(x, 0)"""
    out = _result(np.maximum(a.data, 0.0), (a,), "relu")
    out._backward = lambda: a._accumulate(out.grad * (a.data > 0))
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    out = _result(np.where(a.data > 0, a.data, slope * a.data), (a,), "leaky_relu")
    out._backward = lambda: a._accumulate(out.grad * np.where(a.data > 0, 1.0, slope))
    return out


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    out = _result(np.clip(a.data, low, high), (a,), "clamp")
    out._backward = lambda: a._accumulate(out.grad * ((a.data > low) & (a.data < high)))
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def _backward():
        grad = out.grad
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        a._accumulate(np.broadcast_to(grad, a.data.shape))

    out._backward = _backward
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


# ============================================================================
# Shape and indexing
# ============================================================================

def getitem(a: Tensor, index) -> Tensor:
    out = _result(a.data[index], (a,), "getitem")

    def _backward():
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, out.grad)
        a._accumulate(grad)

    out._backward = _backward
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda: a._accumulate(out.grad.reshape(a.data.shape))
    return out


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """a[index] along axis 0; the backward pass scatters with np.add.at"""
    index = np.asarray(index, dtype=np.int64)
    out = _result(a.data[index], (a,), "gather_rows")

    def _backward():
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, out.grad)
        a._accumulate(grad)

    out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    bounds = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def _backward():
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t._accumulate(np.take(out.grad, np.arange(lo, hi), axis=axis))

    out._backward = _backward
    return out


# ============================================================================
# Linear algebra
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data @ b.data, (a, b), "matmul")

    def _backward():
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)

    out._backward = _backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product, shape (N,)"""
    return sum_(mul(a, b), axis=1)


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(np.cross(a.data, b.data), (a, b), "cross")

    def _backward():
        # d(a x b) . g = (b x g) . da + (g x a) . db
        a._accumulate(np.cross(b.data, out.grad))
        b._accumulate(np.cross(out.grad, a.data))

    out._backward = _backward
    return out


def norm_rows(a: Tensor) -> Tensor:
    return sqrt(sum_(mul(a, a), axis=1))


def normalize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    length = norm_rows(a)
    if np.any(length.data < eps):
        raise DegenerateDirectionError("cannot normalise a (near) zero-length row")
    return div(a, reshape(length, (-1, 1)))


# ============================================================================
# Sparse voxel ops
# ============================================================================

Rulebook = List[Tuple[int, np.ndarray, np.ndarray]]


def sparse_conv(x: Tensor, weight: Tensor, rulebook: Rulebook, out_rows: int, bias: Optional[Tensor] = None) -> Tensor:
    """
    out[o] = sum_k x[i] @ weight[k] over rulebook entries (k, o_rows, i_rows).
    Within one kernel offset every output and input row appears at most once.
    """
    if x.data.ndim != 2 or weight.data.ndim != 3 or weight.data.shape[1] != x.data.shape[1]:
        raise XGenError(f"sparse_conv shape mismatch: features {x.shape}, kernel {weight.shape}")
    result = np.zeros((out_rows, weight.data.shape[2]))
    for k, o, i in rulebook:
        result[o] += x.data[i] @ weight.data[k]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        result += bias.data
    out = _result(result, inputs, "sparse_conv")

    def _backward():
        if x.requires_grad:
            grad_x = np.zeros_like(x.data)
            for k, o, i in rulebook:
                grad_x[i] += out.grad[o] @ weight.data[k].T
            x._accumulate(grad_x)
        if weight.requires_grad:
            grad_w = np.zeros_like(weight.data)
            for k, o, i in rulebook:
                grad_w[k] += x.data[i].T @ out.grad[o]
            weight._accumulate(grad_w)
        if bias is not None:
            bias._accumulate(out.grad.sum(axis=0))

    out._backward = _backward
    return out


def trilinear(x: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    out[m] = sum_c weights[m, c] * x[index[m, c]]; index -1 contributes zero.
    """
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    effective = np.where(valid, weights, 0.0)
    out = _result(np.einsum("mc,mcf->mf", effective, x.data[safe]), (x,), "trilinear")

    def _backward():
        grad = np.zeros_like(x.data)
        contribution = effective[:, :, None] * out.grad[:, None, :]
        np.add.at(grad, safe[valid], contribution[valid])
        x._accumulate(grad)

    out._backward = _backward
    return out


# ============================================================================
# Losses
# ============================================================================

def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits: max(x, 0) - x*y + log(1 + exp(-|x|))"""
    labels = np.asarray(labels, dtype=np.float64)
    x = logits.data
    e = np.exp(-np.abs(x))
    values = np.maximum(x, 0.0) - x * labels + np.log1p(e)
    out = _result(np.asarray(values.mean()), (logits,), "bce_with_logits")

    def _backward():
        sigmoid = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        logits._accumulate(out.grad * (sigmoid - labels) / x.size)

    out._backward = _backward
    return out


# ============================================================================
# Gradient checking
# ============================================================================

def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    directions: int = 100,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """
    Largest relative difference between the analytic directional derivative
    and a central finite difference, over random parameter directions.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        direction = {name: rng.standard_normal(p.data.shape) for name, p in params.items()}
        scale = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {name: d / scale for name, d in direction.items()}
        expected = sum(float(np.sum(analytic[name] * direction[name])) for name in params)

        originals = {name: p.data.copy() for name, p in params.items()}
        with no_grad():
            for name, p in params.items():
                p.data = originals[name] + step * direction[name]
            upper = loss_fn().item()
            for name, p in params.items():
                p.data = originals[name] - step * direction[name]
            lower = loss_fn().item()
        for name, p in params.items():
            p.data = originals[name]

        numeric = (upper - lower) / (2.0 * step)
        denominator = max(abs(expected), abs(numeric), 1e-6)
        worst = max(worst, abs(expected - numeric) / denominator)
    return worst


def collect(tensors: Iterable[Tensor]) -> List[Tensor]:
    return [t for t in tensors if t.requires_grad]
