"""Dense float64 tensors with reverse-mode automatic differentiation.

A thread-local tape records every primitive applied to a tensor that
requires gradients; ``backward`` replays the tape in reverse. The feature
set is intentionally small: row-major dense storage, no views, and the
only broadcasting allowed is a row vector added over matrix rows (plus
python-float scalars, folded into the op as constants).
"""

import math
import threading

import numpy as np

# Floor applied to log and division inputs so saturated probabilities do
# not produce -inf / nan in focal and KL terms.
EPS = 1e-12


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class _Node:
    """One tape record: operation kind, inputs, output, backward rule."""

    __slots__ = ("kind", "inputs", "out", "bwd")

    def __init__(self, kind, inputs, out, bwd):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of primitive applications (a topological order)."""

    def __init__(self):
        self.nodes = []

    def record(self, kind, inputs, out, bwd):
        node = _Node(kind, inputs, out, bwd)
        self.nodes.append(node)
        return node

    def __len__(self):
        return len(self.nodes)


_LOCAL = threading.local()


def active_tape():
    tape = getattr(_LOCAL, "tape", None)
    if tape is None:
        tape = Tape()
        _LOCAL.tape = tape
    return tape


def reset_tape():
    """Drop all recorded nodes for this thread (start of a fresh step)."""
    _LOCAL.tape = Tape()


class Tensor:
    """Row-major float64 tensor, optionally tracked on the tape."""

    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self):
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant_like(self, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant_like(t, value):
    return Tensor(np.full(t.values.shape, float(value)))


def _result(kind, out_values, inputs, bwd):
    out = Tensor(out_values)
    if any(i.requires_grad or i.node is not None for i in inputs):
        out.requires_grad = True
        out.node = active_tape().record(kind, inputs, out, bwd)
    return out


def _require_same_shape(kind, a, b):
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{kind}: shape {a.values.shape} vs {b.values.shape}")


# -- elementwise primitives ---------------------------------------------

def add(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _result("add_const", a.values + float(b), (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("add", a, b)
    return _result("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("sub", a, b)
    return _result("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b):
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    """Elementwise division; denominator magnitude floored at EPS."""
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("div", a, b)
    bv = np.where(np.abs(b.values) < EPS, np.where(b.values < 0, -EPS, EPS), b.values)
    out = a.values / bv
    return _result("div", out, (a, b), lambda g: (g / bv, -g * a.values / (bv * bv)))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result("scale", a.values * c, (a,), lambda g: (g * c,))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("maximum", a, b)
    pick_a = a.values >= b.values  # ties route to the first argument
    out = np.where(pick_a, a.values, b.values)
    return _result("maximum", out, (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("minimum", a, b)
    pick_a = a.values <= b.values
    out = np.where(pick_a, a.values, b.values)
    return _result("minimum", out, (a, b),
                   lambda g: (g * pick_a, g * ~pick_a))


def sigmoid(a):
    a = as_tensor(a)
    # Stable in both tails.
    v = a.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_lastdim(a):
    """Softmax over the last dimension."""
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (a,), bwd)


def log(a):
    a = as_tensor(a)
    clamped = np.maximum(a.values, EPS)
    return _result("log", np.log(clamped), (a,), lambda g: (g / clamped,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result("exp", out, (a,), lambda g: (g * out,))


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0
    return _result("relu", a.values * mask, (a,), lambda g: (g * mask,))


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.values)
    return _result("abs", np.abs(a.values), (a,), lambda g: (g * s,))


def square(a):
    a = as_tensor(a)
    return _result("square", a.values * a.values, (a,),
                   lambda g: (2.0 * g * a.values,))


def pow_const(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    base = np.maximum(a.values, EPS) if e != round(e) or e < 0 else a.values
    out = base ** e
    return _result("pow", out, (a,),
                   lambda g: (g * e * np.maximum(base, EPS) ** (e - 1.0),))


# -- reductions / structure ----------------------------------------------

def tsum(a):
    a = as_tensor(a)
    shape = a.values.shape
    return _result("sum", np.array(a.values.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy() if np.ndim(g) == 0
                              else np.full(shape, float(g)),))


def tmean(a):
    a = as_tensor(a)
    n = a.values.size
    return scale(tsum(a), 1.0 / n) if n else Tensor(np.array(0.0))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: {a.values.shape} @ {b.values.shape}")
    av, bv = a.values, b.values
    return _result("matmul", av @ bv, (a, b),
                   lambda g: (g @ bv.T, av.T @ g))


def add_rowvec(a, v):
    """Broadcast-add a length-n vector over the rows of an (m, n) matrix."""
    a, v = as_tensor(a), as_tensor(v)
    if a.values.ndim != 2 or v.values.ndim != 1 or a.values.shape[1] != v.values.shape[0]:
        raise ShapeError(f"add_rowvec: {a.values.shape} + {v.values.shape}")
    return _result("add_rowvec", a.values + v.values[None, :], (a, v),
                   lambda g: (g, g.sum(axis=0)))


def transpose(a):
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _result("transpose", a.values.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.values.shape
    out = a.values.reshape(shape).copy()
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def gather_rows(a, indices):
    """Select rows of a 2-D tensor by index; backward scatters with accumulation."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = a.values[idx].copy()

    def bwd(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, idx, g)
        return (acc,)

    return _result("gather_rows", out, (a,), bwd)


def take_flat(a, flat_indices, out_shape):
    """Gather arbitrary elements by flat index into a new shape.

    Covers patch extraction (im2col), column slicing, and permutations.
    """
    a = as_tensor(a)
    idx = np.asarray(flat_indices, dtype=np.intp).reshape(-1)
    out = a.values.reshape(-1)[idx].reshape(out_shape).copy()

    def bwd(g):
        acc = np.zeros(a.values.size)
        np.add.at(acc, idx, g.reshape(-1))
        return (acc.reshape(a.values.shape),)

    return _result("take_flat", out, (a,), bwd)


def concat_rows(tensors):
    """Stack 1-D tensors (or concat 2-D row blocks) along axis 0."""
    ts = [as_tensor(t) for t in tensors]
    arrs = [t.values if t.values.ndim == 2 else t.values[None, :] for t in ts]
    widths = {a.shape[1] for a in arrs}
    if len(widths) != 1:
        raise ShapeError("concat_rows: mismatched widths")
    heights = [a.shape[0] for a in arrs]
    out = np.concatenate(arrs, axis=0)

    def bwd(g):
        grads, at = [], 0
        for t, h in zip(ts, heights):
            piece = g[at:at + h]
            grads.append(piece if t.values.ndim == 2 else piece[0])
            at += h
        return tuple(grads)

    return _result("concat_rows", out, ts, bwd)


# -- reverse pass ----------------------------------------------------------

def backward(root):
    """Populate ``grad`` on every requires_grad leaf with d(root)/d(leaf).

    ``root`` must be a scalar. Repeated calls without zeroing accumulate.
    """
    root = as_tensor(root)
    if root.values.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            seed = np.ones_like(root.values)
            root.grad = seed if root.grad is None else root.grad + seed
            return
        raise ValueError("backward root is not connected to the tape")

    tape = active_tape()
    pending = {id(root): np.ones_like(root.values)}
    by_id = {id(root): root}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.bwd(g)):
            if gi is None:
                continue
            if inp.node is not None:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    by_id[key] = inp
            elif inp.requires_grad:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def finite_difference_check(f, x, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; every coordinate of ``x`` is
    perturbed by ``±step``. Non-finite evaluations report as failure (inf).
    """
    reset_tape()
    leaf = Tensor(np.asarray(x, dtype=np.float64).copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)).copy()
    reset_tape()

    base = np.asarray(x, dtype=np.float64)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            pert = flat.copy()
            pert[i] += sign * step
            val = f(Tensor(pert.reshape(base.shape))).item()
            reset_tape()
            if not math.isfinite(val):
                return math.inf
            num_flat[i] += sign * val / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
