"""
Tensor Engine with Reverse-Mode Automatic Differentiation

Dense numpy-backed tensors plus the handful of differentiable operations the
transformer forward/backward pass needs:
- matmul, transpose, elementwise add/mul, scale
- relu, row-wise softmax (optionally masked), row-wise log-softmax
- gather (embedding lookup, Toeplitz materialization), sum, mean
- RMS normalization and token cross-entropy

The graph is rebuilt on every forward pass. Every tensor gets a creation id,
so sorting a traced graph by id gives a topological order.
"""

import contextlib
import itertools
import logging
import threading
import weakref
from dataclasses import dataclass

import numpy as np

import config
from exceptions import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

_state = threading.local()
_node_ids = itertools.count()


def grad_enabled():
    """Whether new ops record their inputs for backward"""
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without building a graph (inference, probes, benchmarks)"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class AllocationCounter:
    """Live and peak bytes of tensor data created while tracking is on"""

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self.total_bytes = 0
        self.allocations = 0
        self._lock = threading.Lock()

    def allocate(self, nbytes):
        with self._lock:
            self.current_bytes += nbytes
            self.total_bytes += nbytes
            self.allocations += 1
            self.peak_bytes = max(self.peak_bytes, self.current_bytes)

    def release(self, nbytes):
        with self._lock:
            self.current_bytes -= nbytes


@contextlib.contextmanager
def track_allocations():
    """
    Count tensor allocations made inside the block

    Yields:
        AllocationCounter: peak_bytes holds the largest live total seen
    """
    counter = AllocationCounter()
    previous = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = previous


def resolve_dtype(dtype):
    """Map 'float32' / 'float64' / numpy dtypes to a numpy dtype"""
    if dtype is None:
        return np.dtype(config.TRAIN_DTYPE)
    return np.dtype(dtype)


class Tensor:
    """
    Dense real-valued array with an optional gradient accumulator

    Args:
        data: array-like values; integer input is promoted to float64
        requires_grad (bool): leaf receives a gradient in backward
        dtype: optional float dtype to cast to
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.id = next(_node_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

        counter = getattr(_state, "counter", None)
        if counter is not None:
            counter.allocate(arr.nbytes)
            weakref.finalize(self, counter.release, arr.nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"


def _as_tensor(value, dtype):
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _result(data, parents, backward, op):
    """Wrap an op result and, when needed, hook it into the graph"""
    if config.CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    needs_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the operand shape"""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcasts_into(small, big):
    if len(small) > len(big):
        return False
    return all(s == b or s == 1 for s, b in zip(reversed(small), reversed(big)))


@dataclass
class OpRecord:
    """One node of a traced graph"""
    node_id: int
    op: str
    input_ids: tuple
    output: Tensor


class ComputeGraph:
    """
    Ordered op records reachable from an output

    Insertion (creation) order is a topological order: an op's inputs always
    exist before its output.
    """

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self._ids = {record.node_id for record in self.nodes}

    @classmethod
    def trace(cls, output):
        """Collect every tensor that output depends on"""
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.id in seen:
                continue
            seen[t.id] = t
            stack.extend(t._parents)
        ordered = sorted(seen.values(), key=lambda t: t.id)
        return cls(OpRecord(t.id, t._op, tuple(p.id for p in t._parents), t) for t in ordered)

    def __contains__(self, tensor):
        return tensor.id in self._ids

    def __len__(self):
        return len(self.nodes)

    def leaves(self):
        """Leaf tensors that will receive gradients"""
        return [r.output for r in self.nodes if not r.input_ids and r.output.requires_grad]


def backward(loss, graph=None):
    """
    Reverse-mode sweep from a scalar loss

    Gradients accumulate into ``grad`` of every requires_grad leaf.

    Args:
        loss (Tensor): scalar (one element) output
        graph (ComputeGraph): optional pre-traced graph containing loss
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if graph is None:
        graph = ComputeGraph.trace(loss)
    elif loss not in graph:
        raise ContractError("loss is not part of the given graph")

    grads = {loss.id: np.ones_like(loss.data)}
    for record in reversed(graph.nodes):
        t = record.output
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t.is_leaf:
            if t.requires_grad:
                g = g.astype(t.dtype, copy=False)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


# Ops

def matmul(a, b):
    """
    Matrix product, optionally batched over a leading axis

    Args:
        a (Tensor): [m x k] or [batch x m x k]
        b (Tensor): [k x p] or [batch x k x p]
    """
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError("matmul needs 2-D or batched 3-D operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError("matmul batch sizes differ", a.shape, b.shape)

    def _backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                k, p = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


def transpose(x):
    """Swap the last two axes"""
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes", x.shape)

    def _backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(np.swapaxes(x.data, -1, -2), (x,), _backward, "transpose")


def elementwise(a, b, kind):
    """
    Entry-wise add or multiply

    Shapes must match, except that one operand may broadcast into the other
    along leading or size-1 axes (a vector against matrix rows, a matrix
    against a batch of matrices).

    Args:
        a, b (Tensor): operands
        kind (str): 'add' or 'mul'
    """
    if kind not in ("add", "mul"):
        raise ContractError(f"unknown elementwise kind: {kind}")
    if a.shape != b.shape:
        if not (_broadcasts_into(b.shape, a.shape) or _broadcasts_into(a.shape, b.shape)):
            raise DimensionError(f"elementwise {kind} shapes differ", a.shape, b.shape)

    if kind == "add":
        def _backward(g):
            return g, g

        return _result(a.data + b.data, (a, b), _backward, "add")

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), _backward, "mul")


def add(a, b):
    return elementwise(a, b, "add")


def mul(a, b):
    return elementwise(a, b, "mul")


def scale(x, factor):
    """Multiply by a constant"""

    def _backward(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), _backward, "scale")


def relu(x):
    """max(0, x); the subgradient at 0 is 0"""
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), _backward, "relu")


def softmax_rows(x, mask=None):
    """
    Softmax over the last axis with per-row max subtraction

    Args:
        x (Tensor): logits, rows along the last axis
        mask: optional boolean array broadcastable to x; False cells get
            probability exactly 0 and are left out of the normalization
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows input contains NaN or Inf")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax mask leaves a row with no kept entries")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), _backward, "softmax_rows")


def log_softmax_rows(x):
    """log(softmax) over the last axis"""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax_rows input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), _backward, "log_softmax_rows")


def gather(x, index):
    """
    Fancy-index x; backward scatter-adds into the gathered cells

    ``gather(values, idx_matrix)`` builds a Toeplitz matrix from a flat
    offset vector, ``gather(table, ids)`` is an embedding lookup.
    """
    try:
        out = x.data[index]
    except IndexError as e:
        raise DimensionError(f"gather index out of range ({e})", x.shape) from e

    def _backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, index, g)
        return (buf,)

    return _result(np.array(out, copy=True), (x,), _backward, "gather")


def sum(x):  # noqa: A001 - mirrors the numpy name
    """Sum of all entries as a scalar tensor"""

    def _backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward, "sum")


def mean(x):
    """Mean of all entries as a scalar tensor"""
    n = x.size

    def _backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), _backward, "mean")


def rms_norm(x, gain, eps=1e-6):
    """
    Root-mean-square scaling over the last axis with a learnable gain

    Args:
        x (Tensor): [..., d]
        gain (Tensor): [d]
    """
    if gain.shape != (x.shape[-1],):
        raise DimensionError("rms_norm gain must match the last axis", x.shape, gain.shape)
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def _backward(g):
        dxhat = g * gain.data
        gx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain

    return _result(xhat * gain.data, (x, gain), _backward, "rms_norm")


def cross_entropy(logits, targets):
    """
    Mean token cross-entropy computed from log-softmax

    Args:
        logits (Tensor): [..., labels]
        targets: integer array matching the leading shape of logits
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError("targets must match the logits' leading shape", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise DimensionError("target label outside the logit range", logits.shape)
    logp = log_softmax_rows(logits)
    index = tuple(np.indices(targets.shape)) + (targets,)
    return scale(mean(gather(logp, index)), -1.0)


# Finite-difference checking

def numerical_gradient(fn, inputs, wrt, h=None):
    """
    Central differences of a scalar function w.r.t. one input

    Args:
        fn: callable taking the list of inputs and returning a scalar Tensor
        inputs (list[Tensor]): function inputs, perturbed in place and restored
        wrt (int): index of the input to differentiate
        h (float): step size
    """
    h = config.GRADCHECK_STEP if h is None else h
    target = inputs[wrt]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(fn(inputs).item())
            flat[i] = original - h
            minus = float(fn(inputs).item())
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def gradient_check(fn, inputs, h=None):
    """
    Compare autodiff against central differences

    Args:
        fn: callable taking the list of inputs and returning a scalar Tensor
        inputs (list[Tensor]): float64 tensors; those with requires_grad are checked
    Returns:
        dict: input index -> relative error ||g_ad - g_fd|| / (||g_ad|| + ||g_fd||)
    """
    for t in inputs:
        t.zero_grad()
    backward(fn(inputs))
    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numerical_gradient(fn, inputs, i, h=h)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        errors[i] = 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)
    return errors
