"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

The engine is define-by-run: every training step builds a fresh Tape,
records forward ops on it, and backward() walks the records in reverse.
Ops are batched numpy calls with closed-form backward rules, which keeps
the per-step op count low enough for pure-Python training loops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

EPS_LOG = 1e-12          # lower clamp for log arguments
ONE_MINUS = 1.0 - 1e-7   # upper clamp for log(1 - p)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


def _as_array(values):
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    return arr


class Tape:
    """Ordered record of forward ops; parents always precede children."""

    def __init__(self):
        self._parents = []   # per node: tuple of parent node ids
        self._backs = []     # per node: callable(grad) -> tuple of parent grads
        self._leaves = []    # (node_id, Tensor) for requires_grad leaves
        self._consumed = False

    def __len__(self):
        return len(self._parents)

    def _push(self, parents, back):
        self._parents.append(parents)
        self._backs.append(back)
        return len(self._parents) - 1

    def leaf(self, values, requires_grad=True):
        t = Tensor(values, tape=self if requires_grad else None,
                   requires_grad=requires_grad)
        if requires_grad:
            t.node = self._push((), None)
            self._leaves.append((t.node, t))
        return t

    def backward(self, loss: "Tensor"):
        """Populate .grad on every requires_grad leaf of this tape."""
        if self._consumed:
            raise TapeStateError("backward() already ran on this tape")
        if loss.tape is not self:
            raise TapeStateError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        grads = [None] * len(self._parents)
        grads[loss.node] = np.ones_like(loss.data)
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            back = self._backs[nid]
            if back is None:
                continue
            pgrads = back(g)
            for pid, pg in zip(self._parents[nid], pgrads):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
            grads[nid] = None  # free early
        for nid, t in self._leaves:
            g = grads[nid]
            t.grad = np.zeros_like(t.data) if g is None else g


class Tensor:
    """Dense row-major float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node", "requires_grad", "grad")

    def __init__(self, values, tape=None, requires_grad=False):
        self.data = _as_array(values)
        self.tape = tape
        self.node = None
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={'yes' if self.tape else 'no'})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values)


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise TapeStateError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _record(tape, out_data, parent_tensors, back) -> Tensor:
    out = Tensor(out_data)
    if tape is not None:
        parents = tuple(t.node for t in parent_tensors)
        out.tape = tape
        out.node = tape._push(parents, back)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to the given operand shape (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    tape = _tape_of(a, b)
    out = a.data + b.data

    def back(g):
        return (_unbroadcast(g, a.data.shape) if a.node is not None else None,
                _unbroadcast(g, b.data.shape) if b.node is not None else None)

    return _record(tape, out, (a, b), back)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    tape = _tape_of(a, b)
    out = a.data - b.data

    def back(g):
        return (_unbroadcast(g, a.data.shape) if a.node is not None else None,
                _unbroadcast(-g, b.data.shape) if b.node is not None else None)

    return _record(tape, out, (a, b), back)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    tape = _tape_of(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.node is not None else None,
                _unbroadcast(g * ad, bd.shape) if b.node is not None else None)

    return _record(tape, out, (a, b), back)


def neg(a):
    a = _coerce(a)
    return _record(a.tape, -a.data, (a,), lambda g: (-g,))


def scale(a, s: float):
    a = _coerce(a)
    s = float(s)
    return _record(a.tape, a.data * s, (a,), lambda g: (g * s,))


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    tape = _tape_of(a, b)
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = gb = None
        if a.node is not None:
            if ad.ndim == 2 and bd.ndim == 2:
                ga = g @ bd.T
            elif ad.ndim == 1 and bd.ndim == 2:
                ga = bd @ g
            elif ad.ndim == 2 and bd.ndim == 1:
                ga = np.outer(g, bd)
            else:
                ga = g * bd
        if b.node is not None:
            if bd.ndim == 2 and ad.ndim == 2:
                gb = ad.T @ g
            elif bd.ndim == 2 and ad.ndim == 1:
                gb = np.outer(ad, g)
            elif bd.ndim == 1 and ad.ndim == 2:
                gb = ad.T @ g
            else:
                gb = g * ad
        return (ga, gb)

    return _record(tape, out, (a, b), back)


def relu(a):
    a = _coerce(a)
    mask = a.data > 0.0
    return _record(a.tape, np.where(mask, a.data, 0.0), (a,),
                   lambda g: (np.where(mask, g, 0.0),))


def sigmoid(a):
    a = _coerce(a)
    out = expit(a.data)

    def back(g):
        return (g * out * (1.0 - out),)

    return _record(a.tape, out, (a,), back)


def exp(a):
    a = _coerce(a)
    out = np.exp(a.data)
    return _record(a.tape, out, (a,), lambda g: (g * out,))


def log(a):
    """Natural log with the argument clamped to >= 1e-12."""
    a = _coerce(a)
    clamped = np.maximum(a.data, EPS_LOG)
    out = np.log(clamped)
    active = a.data >= EPS_LOG

    def back(g):
        return (np.where(active, g / clamped, 0.0),)

    return _record(a.tape, out, (a,), back)


def log1m_clamped(a):
    """log(1 - a) with a clamped to <= 1 - 1e-7 (singular at 1)."""
    a = _coerce(a)
    clamped = np.minimum(a.data, ONE_MINUS)
    out = np.log1p(-clamped)
    active = a.data <= ONE_MINUS

    def back(g):
        return (np.where(active, -g / (1.0 - clamped), 0.0),)

    return _record(a.tape, out, (a,), back)


def softplus(a):
    """log(1 + e^x), overflow-safe."""
    a = _coerce(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = expit(ad)
    return _record(a.tape, out, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# reductions / shaping


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(a.tape, out, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [_coerce(t) for t in tensors]
    tape = _tape_of(*tensors)
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.node is not None else None
                     for p, t in zip(parts, tensors))

    return _record(tape, out, tensors, back)


def transpose(a):
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _record(a.tape, np.ascontiguousarray(a.data.T), (a,),
                   lambda g: (g.T,))


def reshape(a, shape):
    a = _coerce(a)
    old = a.data.shape
    return _record(a.tape, a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# softmax family


def softmax_t(a, tau: float, axis=-1):
    """Tempered softmax with max-subtraction; rows sum to 1."""
    if tau <= 0.0:
        raise DomainError(f"temperature must be positive, got {tau}")
    a = _coerce(a)
    z = a.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out / tau,)

    return _record(a.tape, out, (a,), back)


def log_softmax(a, axis=-1):
    a = _coerce(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(a.tape, out, (a,), back)


# ---------------------------------------------------------------------------
# gathers (embedding lookups and per-row index selection)


def gather_rows(table, idx):
    """Select rows of a 2-D table; idx may be any integer array shape."""
    table = _coerce(table)
    idx = np.asarray(idx)
    out = table.data[idx]
    shape = table.data.shape

    def back(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record(table.tape, out, (table,), back)


def take_per_row(a, idx):
    """a: (N, S); idx: (N, k) -> (N, k), gathering along axis 1."""
    a = _coerce(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=1)
    shape = a.data.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, (np.arange(shape[0])[:, None], idx), g)
        return (ga,)

    return _record(a.tape, out, (a,), back)


def add_constant(a, c):
    """Add a non-differentiable numpy array (e.g. noise, masks)."""
    a = _coerce(a)
    return _record(a.tape, a.data + np.asarray(c, dtype=np.float64), (a,),
                   lambda g: (g,))


def dropout(a, p: float, rng, training: bool):
    if not training or p <= 0.0:
        return a
    a = _coerce(a)
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable leaves (raw float64 arrays between steps)."""

    def __init__(self):
        self._params = {}

    def add(self, name: str, values) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        self._params[name] = _as_array(values)
        return self._params[name]

    def __getitem__(self, name) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name, values):
        arr = _as_array(values)
        if name in self._params and self._params[name].shape != arr.shape:
            raise ShapeError(
                f"shape change for {name}: {self._params[name].shape} -> {arr.shape}")
        self._params[name] = arr

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def leaves(self, tape: Tape) -> dict:
        return {name: tape.leaf(arr) for name, arr in self._params.items()}

    def sgd_step(self, leaves: dict, lr: float):
        """Fixed-step gradient descent using grads populated by backward()."""
        for name, leaf in leaves.items():
            if leaf.grad is None:
                raise TapeStateError(f"no gradient for {name}; run backward first")
            self._params[name] = self._params[name] - lr * leaf.grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, arr in self._params.items():
            out.add(name, arr.copy())
        return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradient.

    f takes a Tensor leaf and returns a scalar Tensor on the leaf's tape.
    """
    if not (1e-7 <= h <= 1e-3):
        raise DomainError(f"step h={h} outside [1e-7, 1e-3]")
    tape = Tape()
    leaf = tape.leaf(np.asarray(x, dtype=np.float64).copy())
    loss = f(leaf)
    tape.backward(loss)
    analytic = leaf.grad.reshape(-1)

    base = np.asarray(x, dtype=np.float64).copy()
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tape().leaf(base)).item()
        flat[i] = orig - h
        fm = f(Tape().leaf(base)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite forward value at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
