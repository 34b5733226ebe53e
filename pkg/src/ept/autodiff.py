"""Tape-based reverse-mode differentiation over numpy arrays.

Only parameters registered with :meth:`Tape.param` are differentiated.
Constants (plain arrays, or ``Var`` objects without a tape) never receive a
gradient, and an op whose inputs are all constant is evaluated eagerly without
being recorded, so frozen weights cost nothing in the backward pass.

Example::

    tape = Tape()
    w = tape.param("w", np.ones((2, 2)))
    loss = (w * w).sum() * 0.5
    grads = tape.backward(loss)      # {"w": array of ones}
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, ProbeError, ShapeError


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Var:
    """An array value, optionally tracked on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape=None, node=None):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", tracked" if self.requires_grad else ""
        return f"Var(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Append-only record of differentiable operations.

    Nodes are stored in creation order, so every node's inputs precede it and
    a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} already registered")
        v = self._push("param", (), None, np.asarray(value, dtype=np.float64))
        self.params[name] = v
        return v

    def _push(self, op, inputs, backward, value) -> Var:
        self.nodes.append(_Node(op, inputs, backward))
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` for every registered parameter."""
        if not isinstance(loss, Var) or loss.value.size != 1:
            shape = getattr(loss, "shape", None)
            raise ContractError(f"backward needs a scalar (1x1) loss, got shape {shape}")
        grads: list = [None] * len(self.nodes)
        if loss.node is not None:
            if loss.tape is not self:
                raise ContractError("loss was recorded on a different tape")
            grads[loss.node] = np.ones_like(loss.value)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            needs = tuple(j is not None for j in node.inputs)
            for j, gj in zip(node.inputs, node.backward(g, needs)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for name, v in self.params.items():
            g = grads[v.node]
            out[name] = np.zeros_like(v.value) if g is None else g
        return out


# -- recording helpers ---------------------------------------------------------


def lift(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _record(op: str, value, inputs, backward: Callable) -> Var:
    tape = None
    for v in inputs:
        if v.tape is not None and v.node is not None:
            if tape is not None and v.tape is not tape:
                raise ContractError(f"{op}: inputs recorded on different tapes")
            tape = v.tape
    if tape is None:
        return Var(value)
    refs = tuple(v.node if v.tape is tape else None for v in inputs)
    return tape._push(op, refs, backward, value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def contains_var(obj) -> bool:
    if isinstance(obj, Var):
        return True
    if isinstance(obj, (list, tuple)):
        return any(contains_var(o) for o in obj)
    if isinstance(obj, dict):
        return any(contains_var(o) for o in obj.values())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return any(contains_var(getattr(obj, f.name)) for f in dataclasses.fields(obj))
    return False


def unwrap(obj):
    if isinstance(obj, Var):
        return obj.value
    if isinstance(obj, tuple):
        return tuple(unwrap(o) for o in obj)
    if isinstance(obj, list):
        return [unwrap(o) for o in obj]
    return obj


def differentiable(fn):
    """Let ``fn`` take plain arrays or ``Var`` inputs.

    With no ``Var`` anywhere in the arguments the result is unwrapped back to
    plain arrays, so the same function serves eager evaluation and training.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if contains_var(args) or contains_var(kwargs):
            return out
        return unwrap(out)

    return wrapper


# -- primitive ops -------------------------------------------------------------


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", a.value + b.value, (a, b), bw)


def neg(a) -> Var:
    a = lift(a)
    return _record("neg", -a.value, (a,), lambda g, needs: (-g,))


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value

    def bw(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return _record("mul", av * bv, (a, b), bw)


def matmul(a, b) -> Var:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", av @ bv, (a, b), bw)


def relu(a) -> Var:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = lift(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g, needs: (g * mask,))


def exp(a) -> Var:
    a = lift(a)
    y = np.exp(a.value)
    return _record("exp", y, (a,), lambda g, needs: (g * y,))


def softmax(a, axis=-1) -> Var:
    a = lift(a)
    z = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        # vector-Jacobian product; the Jacobian itself is never formed
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), bw)


def log_softmax(a, axis=-1) -> Var:
    a = lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g, needs):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), bw)


def sum_(a, axis=None, keepdims=False) -> Var:
    a = lift(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Var:
    a = lift(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = lift(a)
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def transpose(a, axes=None) -> Var:
    """Reverse all axes, or permute by ``axes``; for n-d inputs the default swaps the last two."""
    a = lift(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.value, axes), (a,),
                   lambda g, needs: (np.transpose(g, inv),))


def getitem(a, idx) -> Var:
    a = lift(a)
    shape = a.shape

    def bw(g, needs):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("getitem", a.value[idx], (a,), bw)


def concat(parts, axis=0) -> Var:
    parts = [lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([p.value for p in parts], axis=axis), tuple(parts), bw)


def broadcast_to(a, shape) -> Var:
    a = lift(a)
    old = a.shape
    return _record("broadcast", np.broadcast_to(a.value, shape).copy(), (a,),
                   lambda g, needs: (_unbroadcast(g, old),))


def embedding(table, ids) -> Var:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    table = lift(table)
    ids = np.asarray(ids)
    shape = table.shape

    def bw(g, needs):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _record("embedding", table.value[ids], (table,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = lift(x), lift(gain), lift(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def bw(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggain = _unbroadcast(g * xhat, gv.shape)
        if needs[2]:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _record("layer_norm", xhat * gv + bias.value, (x, gain, bias), bw)


def cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax(logits)."""
    logits = lift(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    lv = logits.value.reshape(-1, logits.shape[-1])
    if lv.shape[0] != labels.shape[0]:
        raise ShapeError(f"{lv.shape[0]} logit rows for {labels.shape[0]} labels")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    n = len(labels)
    loss = -logp[rows, labels].mean()

    def bw(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((g.reshape(()) / n * d).reshape(logits.shape),)

    return _record("cross_entropy", np.array([[loss]]), (logits,), bw)


# -- finite-difference oracle --------------------------------------------------


@dataclasses.dataclass
class ParamCheck:
    name: str
    max_abs: float
    max_rel: float
    worst_index: tuple | None
    checked: int
    skipped: list = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class GradReport:
    tol: float
    h: float
    params: dict = dataclasses.field(default_factory=dict)

    @property
    def max_rel(self) -> float:
        return max((p.max_rel for p in self.params.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def to_text(self) -> str:
        lines = [f"gradcheck h={self.h:g} tol={self.tol:g} "
                 f"result={'PASS' if self.passed else 'FAIL'}"]
        for p in self.params.values():
            status = "ok" if p.max_rel < self.tol else "FAIL"
            lines.append(
                f"param={p.name} shape_entries={p.checked} max_abs={p.max_abs:.3e} "
                f"max_rel={p.max_rel:.3e} worst={p.worst_index} skipped={len(p.skipped)} {status}")
            for idx in p.skipped:
                lines.append(f"  skipped {p.name}{list(idx)} (within 2h of a kink)")
        return "\n".join(lines)


def _scalar(out) -> float:
    v = out.value if isinstance(out, Var) else out
    v = np.asarray(v, dtype=np.float64)
    if v.size != 1:
        raise ContractError(f"objective must be scalar, got shape {v.shape}")
    return float(v.reshape(()))


def tape_gradients(f: Callable, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    tracked = {k: tape.param(k, v) for k, v in params.items()}
    return tape.backward(lift(f(tracked)))


def grad_check(f: Callable, params: Mapping[str, np.ndarray], h: float = 1e-5,
               tol: float = 1e-4, grads: Mapping[str, np.ndarray] | None = None) -> GradReport:
    """Compare tape gradients of ``f`` against central differences, entry by entry.

    ``f`` maps a dict of named arrays (or tracked ``Var``s) to a scalar. Pass
    ``grads`` to check externally supplied gradients instead of the tape's.
    Entries that fail are re-probed at ``2h``; when the second differences show
    a slope discontinuity (a ReLU kink within ``2h``) the entry is reported as
    skipped rather than failed.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if grads is None:
        grads = tape_gradients(f, base)
    report = GradReport(tol=tol, h=h)

    def probe(name, idx, delta):
        trial = dict(base)
        arr = base[name].copy()
        arr[idx] += delta
        trial[name] = arr
        val = _scalar(f(trial))
        if not np.isfinite(val):
            raise ProbeError(f"non-finite objective probing {name}{list(idx)} at {delta:+g}",
                             param=name, index=idx)
        return val

    f0 = None
    for name, value in base.items():
        g = np.asarray(grads[name], dtype=np.float64)
        check = ParamCheck(name, 0.0, 0.0, None, 0)
        for idx in itertools.product(*(range(n) for n in value.shape)):
            fp, fm = probe(name, idx, h), probe(name, idx, -h)
            fd = (fp - fm) / (2 * h)
            a = g[idx]
            rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-8)
            if rel >= tol:
                if f0 is None:
                    f0 = _scalar(f(base))
                fp2, fm2 = probe(name, idx, 2 * h), probe(name, idx, -2 * h)
                d1 = fp - 2 * f0 + fm
                d2 = fp2 - 2 * f0 + fm2
                if abs(d2 - 4 * d1) > 1e-11 * (1.0 + abs(f0)):
                    check.skipped.append(idx)
                    continue
            check.checked += 1
            if abs(a - fd) > check.max_abs:
                check.max_abs = abs(a - fd)
            if rel > check.max_rel:
                check.max_rel, check.worst_index = rel, idx
        report.params[name] = check
    return report
