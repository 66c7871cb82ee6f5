"""
Explanation Lab - Reverse-Mode Autodiff
Small numpy tape-free autodiff engine. Every vector-Jacobian product is itself
written in Variable operations, so a backward pass run with
``create_graph=True`` can be differentiated again (double backpropagation).
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import logsumexp as _np_logsumexp

ArrayLike = Union["Variable", np.ndarray, float, int]
VjpFn = Callable[["Variable"], "Variable"]

_state = threading.local()

# softplus switches to the asymptotic branch above this beta * z
SOFTPLUS_THRESHOLD = 30.0


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(enabled: bool) -> Iterator[None]:
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context manager that stops graph recording in the current thread"""
    return set_grad_enabled(False)


class Variable:
    """A float64 array plus the edges needed to backpropagate through it"""

    __array_ufunc__ = None
    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, parents: Tuple[Tuple["Variable", VjpFn], ...] = (), requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.requires_grad = requires_grad or bool(parents)

    # -- array protocol -----------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Variable":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Variable({self.value!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    # -- operators ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Variable":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Variable":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Variable":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Variable":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Variable":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Variable":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Variable":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Variable":
        return div(other, self)

    def __neg__(self) -> "Variable":
        return neg(self)

    def __pow__(self, exponent: int) -> "Variable":
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def __matmul__(self, other: ArrayLike) -> "Variable":
        return matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Variable":
        return matmul(other, self)

    def __getitem__(self, index) -> "Variable":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Variable":
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Variable":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Variable":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_variable(value: ArrayLike) -> Variable:
    return value if isinstance(value, Variable) else Variable(value)


def _node(value: np.ndarray, parents: Sequence[Tuple[Variable, VjpFn]]) -> Variable:
    if not is_grad_enabled():
        return Variable(value)
    live = tuple((parent, fn) for parent, fn in parents if parent.requires_grad)
    return Variable(value, live)


# -- broadcasting -------------------------------------------------------------------

def sum_to(x: Variable, shape: Tuple[int, ...]) -> Variable:
    """Sum ``x`` down to ``shape`` (inverse of numpy broadcasting)"""
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    value = x.value.sum(axis=axes, keepdims=True)
    if lead:
        value = value.reshape(value.shape[lead:])
    value = value.reshape(shape)
    source_shape = x.shape
    return _node(value, [(x, lambda g: broadcast_to(g, source_shape))])


def broadcast_to(x: Variable, shape: Tuple[int, ...]) -> Variable:
    if x.shape == tuple(shape):
        return x
    source_shape = x.shape
    value = np.broadcast_to(x.value, shape).copy()
    return _node(value, [(x, lambda g: sum_to(g, source_shape))])


# -- elementwise arithmetic ------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _node(a.value + b.value, [
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(g, b.shape)),
    ])


def sub(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _node(a.value - b.value, [
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(neg(g), b.shape)),
    ])


def mul(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _node(a.value * b.value, [
        (a, lambda g: sum_to(mul(g, b), a.shape)),
        (b, lambda g: sum_to(mul(g, a), b.shape)),
    ])


def div(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = as_variable(a), as_variable(b)
    return _node(a.value / b.value, [
        (a, lambda g: sum_to(div(g, b), a.shape)),
        (b, lambda g: sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)),
    ])


def neg(a: ArrayLike) -> Variable:
    a = as_variable(a)
    return _node(-a.value, [(a, neg)])


def exp(a: ArrayLike) -> Variable:
    a = as_variable(a)
    out = Variable(np.exp(a.value))
    # the vjp reuses the output, so attach the edge after creating it
    if is_grad_enabled() and a.requires_grad:
        out.parents = ((a, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def log(a: ArrayLike) -> Variable:
    a = as_variable(a)
    return _node(np.log(a.value), [(a, lambda g: div(g, a))])


def vabs(a: ArrayLike) -> Variable:
    a = as_variable(a)
    sign = np.sign(a.value)
    return _node(np.abs(a.value), [(a, lambda g: mul(g, sign))])


def relu(a: ArrayLike) -> Variable:
    """max(a, 0); the derivative at exactly 0 is 0"""
    a = as_variable(a)
    mask = (a.value > 0).astype(np.float64)
    return _node(a.value * mask, [(a, lambda g: mul(g, mask))])


def sigmoid(a: ArrayLike, beta: float = 1.0) -> Variable:
    """sigma_beta(a) = 1 / (1 + exp(-beta * a))"""
    a = as_variable(a)
    s_value = expit(beta * a.value)
    out = Variable(s_value)
    if is_grad_enabled() and a.requires_grad:
        # d/da sigma_beta = beta * s * (1 - s)
        out.parents = ((a, lambda g: mul(g, mul(beta, mul(out, sub(1.0, out))))),)
        out.requires_grad = True
    return out


def softplus_value(z: np.ndarray, beta: float) -> np.ndarray:
    """(1/beta) log(1 + exp(beta z)) with the overflow-safe large-argument branch"""
    bz = beta * z
    large = bz > SOFTPLUS_THRESHOLD
    safe_small = np.minimum(bz, SOFTPLUS_THRESHOLD)
    safe_large = np.maximum(bz, SOFTPLUS_THRESHOLD)
    small_branch = np.log1p(np.exp(safe_small)) / beta
    large_branch = z + np.log1p(np.exp(-safe_large)) / beta
    return np.where(large, large_branch, small_branch)


def softplus(a: ArrayLike, beta: float = 1.0) -> Variable:
    a = as_variable(a)
    return _node(softplus_value(a.value, beta), [(a, lambda g: mul(g, sigmoid(a, beta)))])


# -- linear algebra ----------------------------------------------------------------------

def _outer(u: Variable, v: Variable) -> Variable:
    return mul(reshape(u, (-1, 1)), reshape(v, (1, -1)))


def matmul(a: ArrayLike, b: ArrayLike) -> Variable:
    a, b = as_variable(a), as_variable(b)
    value = a.value @ b.value
    if a.ndim == 2 and b.ndim == 2:
        grads = (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g))
    elif a.ndim == 2 and b.ndim == 1:
        grads = (lambda g: _outer(g, b), lambda g: matmul(transpose(a), g))
    elif a.ndim == 1 and b.ndim == 2:
        grads = (lambda g: matmul(b, g), lambda g: _outer(a, g))
    elif a.ndim == 1 and b.ndim == 1:
        grads = (lambda g: mul(g, b), lambda g: mul(g, a))
    else:
        raise ValueError(f"matmul supports 1-D and 2-D operands, got {a.shape} @ {b.shape}")
    return _node(value, [(a, grads[0]), (b, grads[1])])


def transpose(a: ArrayLike) -> Variable:
    a = as_variable(a)
    return _node(a.value.T, [(a, transpose)])


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Variable:
    a = as_variable(a)
    source_shape = a.shape
    return _node(a.value.reshape(shape), [(a, lambda g: reshape(g, source_shape))])


def vsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    source_shape = a.shape
    kept_shape = np.sum(a.value, axis=axis, keepdims=True).shape

    def vjp(g: Variable) -> Variable:
        return broadcast_to(reshape(g, kept_shape), source_shape)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), [(a, vjp)])


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(vsum(a, axis=axis, keepdims=keepdims), float(count))


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Variable:
    a = as_variable(a)
    out_keep = Variable(_np_logsumexp(a.value, axis=axis, keepdims=True))
    value = out_keep.value if keepdims else np.squeeze(out_keep.value, axis=axis)
    source_shape = a.shape
    kept_shape = out_keep.shape

    def vjp(g: Variable) -> Variable:
        # softmax weights recomputed from the input so the vjp stays differentiable
        weights = exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))
        return mul(broadcast_to(reshape(g, kept_shape), source_shape), weights)

    return _node(value, [(a, vjp)])


def getitem(a: ArrayLike, index) -> Variable:
    a = as_variable(a)
    source_shape = a.shape
    return _node(a.value[index], [(a, lambda g: scatter(g, index, source_shape))])


def scatter(g: ArrayLike, index, shape: Tuple[int, ...]) -> Variable:
    """Zeros of ``shape`` with ``g`` added at ``index``; adjoint of getitem"""
    g = as_variable(g)
    value = np.zeros(shape)
    # basic indexing only, so no index repeats
    value[index] += g.value
    return _node(value, [(g, lambda u: getitem(u, index))])


# -- backward pass ---------------------------------------------------------------------------

def _topological_order(root: Variable) -> List[Variable]:
    order: List[Variable] = []
    visited = set()
    stack: List[Tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(output: Variable, inputs: Sequence[Variable], grad_output: Optional[ArrayLike] = None,
         create_graph: bool = False) -> List[Variable]:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    ``grad_output`` defaults to ones and is required to be given for non-scalar
    outputs. With ``create_graph=True`` the returned gradients are themselves
    differentiable. Inputs that ``output`` does not depend on get zeros.
    """
    if grad_output is None:
        if output.value.size != 1:
            raise ValueError(f"grad_output required for non-scalar output of shape {output.shape}")
        grad_output = np.ones(output.shape)
    seed = as_variable(grad_output)
    if seed.shape != output.shape:
        raise ValueError(f"grad_output shape {seed.shape} does not match output shape {output.shape}")

    grads: Dict[int, Variable] = {id(output): seed}
    with set_grad_enabled(create_graph):
        for node in reversed(_topological_order(output)):
            upstream = grads.get(id(node))
            if upstream is None:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(upstream)
                existing = grads.get(id(parent))
                grads[id(parent)] = contribution if existing is None else add(existing, contribution)

    results = []
    for variable in inputs:
        found = grads.get(id(variable))
        results.append(found if found is not None else Variable(np.zeros(variable.shape)))
    return results
