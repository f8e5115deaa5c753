"""Tape-based reverse-mode automatic differentiation over numpy float arrays.

Every backward rule is written with the same differentiable ops used in the
forward pass.  With ``create_graph=True`` the backward sweep therefore appends
ordinary nodes to the tape, and the gradients it returns can be differentiated
again.  That is the whole second-order mechanism: no symbolic Hessians.

Arithmetic is float64.  ``numpy.longdouble`` inputs are carried through
unchanged, which the finite-difference oracles use to push their rounding
floor below the tolerances they check.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np

_FLOAT_TYPES = (np.float64, np.longdouble)


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Node:
    __slots__ = ("kind", "inputs", "vjp", "out")

    def __init__(self, kind: str, inputs: tuple, vjp: Callable | None):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.out = None


class Tape:
    """Append-only record of operations.

    Node inputs always refer to earlier nodes, so node ids are already a
    topological order.  With ``retain_graph=False`` the first first-order
    backward pass releases the saved values.
    """

    def __init__(self, retain_graph: bool = True):
        self.nodes: list[Node] = []
        self.retain_graph = retain_graph
        self.released = False

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        if self.released:
            raise AutodiffError("tape was released by a previous backward pass")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        data = value.data if isinstance(value, Tensor) else _to_array(value)
        node = Node("leaf", (), None)
        out = Tensor._wrap(data, self, self._append(node))
        node.out = out
        return out

    def watch(self, params):
        """Return leaf copies of ``params`` (a tensor or a name->tensor map) on this tape."""
        if isinstance(params, Mapping):
            return type(params)({k: self.leaf(v) for k, v in params.items()})
        return self.leaf(params)

    def release(self) -> None:
        for node in self.nodes:
            node.inputs = ()
            node.out = None
        self.released = True

    def fingerprint(self) -> list[tuple[str, tuple[int, ...], bytes]]:
        """(kind, input ids, output bytes) per node; used to compare tapes bit for bit."""
        rows = []
        for node in self.nodes:
            ids = tuple(-1 if t.node is None else t.node for t in node.inputs)
            rows.append((node.kind, ids, node.out.data.tobytes() if node.out is not None else b""))
        return rows


def _to_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("non-finite values in tensor input")
    return arr


class Tensor:
    __slots__ = ("data", "tape", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data):
        self.data = _to_array(data)
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, data: np.ndarray, tape: Tape | None = None, node: int | None = None) -> Tensor:
        t = object.__new__(cls)
        t.data = data
        t.tape = tape
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, c: power(self, c)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    return Tensor._wrap(arr)


def _make(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise AutodiffError(f"{kind}: inputs live on different tapes")
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind}: non-finite result")
    if tape is None:
        return Tensor._wrap(out)
    node = Node(kind, inputs, vjp)
    res = Tensor._wrap(out, tape, tape._append(node))
    node.out = res
    return res


def _broadcast_shape(kind: str, *tensors: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {[t.shape for t in tensors]}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def vjp(g, ins, out, needs):
        return (sum_to(g, ins[0].shape) if needs[0] else None,
                sum_to(g, ins[1].shape) if needs[1] else None)

    return _make("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, ins, out, needs):
        return (sum_to(g, ins[0].shape) if needs[0] else None,
                sum_to(neg(g), ins[1].shape) if needs[1] else None)

    return _make("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, ins, out, needs):
        x, y = ins
        return (sum_to(mul(g, y), x.shape) if needs[0] else None,
                sum_to(mul(g, x), y.shape) if needs[1] else None)

    return _make("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)

    def vjp(g, ins, out, needs):
        x, y = ins
        ga = sum_to(div(g, y), x.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, out), y)), y.shape) if needs[1] else None
        return ga, gb

    return _make("div", (a, b), a.data / b.data, vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", (a,), -a.data, lambda g, ins, out, needs: (neg(g),))


def power(a, c: float) -> Tensor:
    a = _lift(a)
    if isinstance(c, Tensor):
        raise AutodiffError("power: exponent must be a constant")
    c = float(c)

    def vjp(g, ins, out, needs):
        if c == 1.0:
            return (g,)
        if c == 2.0:
            return (mul(g, mul(ins[0], 2.0)),)
        return (mul(g, mul(power(ins[0], c - 1.0), c)),)

    return _make("pow", (a,), _pow(a.data, c), vjp)


def _pow(x: np.ndarray, c: float) -> np.ndarray:
    if c == 2.0:
        return x * x
    if c == 3.0:
        return x * x * x
    if c == 0.5:
        return np.sqrt(x)
    if c == -0.5:
        return 1.0 / np.sqrt(x)
    return x ** c


def exp(a) -> Tensor:
    a = _lift(a)
    return _make("exp", (a,), np.exp(a.data), lambda g, ins, out, needs: (mul(g, out),))


def log(a) -> Tensor:
    a = _lift(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _make("log", (a,), np.log(a.data), lambda g, ins, out, needs: (div(g, ins[0]),))


def tanh(a) -> Tensor:
    a = _lift(a)
    return _make("tanh", (a,), np.tanh(a.data),
                 lambda g, ins, out, needs: (mul(g, sub(1.0, mul(out, out))),))


def sqrt(a) -> Tensor:
    a = _lift(a)
    return _make("sqrt", (a,), np.sqrt(a.data),
                 lambda g, ins, out, needs: (div(mul(g, 0.5), out),))


# ---------------------------------------------------------------- shape ops

def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and a.shape[i + lead] != 1)
    out = a.data.sum(axis=axes, keepdims=True)
    out = out.reshape(shape)
    src_shape = a.shape
    return _make("sum_to", (a,), out, lambda g, ins, o, needs: (broadcast_to(g, src_shape),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src_shape = a.shape
    return _make("broadcast", (a,), out, lambda g, ins, o, needs: (sum_to(g, src_shape),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _make("reshape", (a,), out, lambda g, ins, o, needs: (reshape(g, src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", (a,), np.transpose(a.data, axes),
                 lambda g, ins, o, needs: (transpose(g, inv),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * a.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(src))

    def vjp(g, ins, o, needs):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    total = sum_(a, axis, keepdims)
    count = a.size // max(total.size, 1) if a.size else 1
    return mul(total, 1.0 / count)


def scale(a, c: float) -> Tensor:
    return mul(a, float(c))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}") from None

    def vjp(g, ins, out, needs):
        x, y = ins
        ga = gb = None
        if needs[0]:
            ga = sum_to(matmul(g, y.swapaxes(-1, -2)), x.shape)
        if needs[1]:
            if y.ndim == 2 and x.ndim > 2:
                # fold batch dims so the weight gradient is a single 2-D product
                k, n = y.shape
                gb = matmul(reshape(x, (-1, k)).swapaxes(-1, -2), reshape(g, (-1, n)))
            else:
                gb = sum_to(matmul(x.swapaxes(-1, -2), g), y.shape)
        return ga, gb

    return _make("matmul", (a, b), a.data @ b.data, vjp)


# ---------------------------------------------------------------- indexing

def take_rows(table, idx) -> Tensor:
    """Embedding gather: ``table[idx]`` for a 2-D table and integer ids."""
    table = _lift(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: ids out of range for table {table.shape}")
    n_rows = table.shape[0]
    return _make("gather", (table,), table.data[idx],
                 lambda g, ins, o, needs: (scatter_rows(g, idx, n_rows),))


def scatter_rows(src, idx, n_rows: int) -> Tensor:
    """Adjoint of take_rows: add each row of ``src`` into row ``idx`` of a zero table."""
    src = _lift(src)
    width = src.shape[-1]
    out = np.zeros((n_rows, width), dtype=src.dtype)
    np.add.at(out, idx.reshape(-1), src.data.reshape(-1, width))
    return _make("scatter", (src,), out, lambda g, ins, o, needs: (take_rows(g, idx),))


def take_last(x, idx) -> Tensor:
    """``x[..., idx[...]]``: pick one entry per row along the last axis."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: index shape {idx.shape} does not match {x.shape[:-1]}")
    width = x.shape[-1]
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    return _make("pick", (x,), out, lambda g, ins, o, needs: (put_last(g, idx, width),))


def put_last(src, idx, width: int) -> Tensor:
    """Adjoint of take_last."""
    src = _lift(src)
    out = np.zeros(src.shape + (width,), dtype=src.dtype)
    np.put_along_axis(out, idx[..., None], src.data[..., None], axis=-1)
    return _make("put", (src,), out, lambda g, ins, o, needs: (take_last(g, idx),))


# ---------------------------------------------------------------- normalisers

def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable bool) marks allowed entries."""
    x = _lift(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, ins, y, needs):
        inner = sum_(mul(g, y), axis=-1, keepdims=True)
        return (mul(y, sub(g, inner)),)

    return _make("softmax", (x,), out, vjp)


def log_softmax(x) -> Tensor:
    x = _lift(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g, ins, y, needs):
        return (sub(g, mul(exp(y), sum_(g, axis=-1, keepdims=True))),)

    return _make("log_softmax", (x,), out, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(mul(xc, power(add(var, eps), -0.5)), gain), bias)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = _lift(x)
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), _GELU_C)
    return mul(mul(x, 0.5), add(tanh(inner), 1.0))


def masked_cross_entropy(logits, targets, mask) -> Tensor:
    """Mean cross-entropy over positions where ``mask`` is true."""
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"masked_cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise AutodiffError("masked_cross_entropy: mask selects no positions")
    picked = take_last(log_softmax(logits), targets)
    weights = mask.astype(logits.dtype) / count
    return neg(sum_(mul(picked, weights)))


# ---------------------------------------------------------------- backward

class Gradients(dict):
    """name -> gradient tensor; ``unreachable`` names got zero-filled gradients."""

    def __init__(self, *args, unreachable=(), **kw):
        super().__init__(*args, **kw)
        self.unreachable = set(unreachable)


def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Gradient of scalar ``loss`` w.r.t. ``wrt`` (a tensor, a sequence or a name->tensor map).

    With ``create_graph`` the returned gradients are tape nodes and can be
    differentiated again.  Parameters that do not influence ``loss`` get zero
    gradients and are listed in ``Gradients.unreachable``.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("loss must be a Tensor")
    if loss.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")

    if isinstance(wrt, Tensor):
        return grad(loss, {"_": wrt}, create_graph)["_"]
    if not isinstance(wrt, Mapping):
        res = grad(loss, {i: t for i, t in enumerate(wrt)}, create_graph)
        return [res[i] for i in range(len(wrt))]

    found = _backward(loss, wrt, create_graph)
    out = Gradients()
    for name, t in wrt.items():
        g = found.get(t.node) if (t.node is not None and t.tape is loss.tape) else None
        if g is None:
            out.unreachable.add(name)
            g = Tensor._wrap(np.zeros_like(t.data))
        elif g.shape != t.shape:
            g = broadcast_to(g, t.shape)
        out[name] = g
    return out


def _backward(loss: Tensor, wrt: Mapping[Any, Tensor], create_graph: bool) -> dict[int, Tensor]:
    tape = loss.tape
    if tape is None or loss.node is None:
        return {}
    if tape.released:
        raise AutodiffError("tape was released by a previous backward pass")
    targets = {t.node for t in wrt.values() if t.node is not None and t.tape is tape}
    targets = {i for i in targets if i <= loss.node}
    if not targets:
        return {}
    lo, hi = min(targets), loss.node
    nodes = tape.nodes

    # nodes whose value depends on some target; only those need cotangents
    live = bytearray(hi + 1)
    for i in range(lo, hi + 1):
        if i in targets:
            live[i] = 1
            continue
        for t in nodes[i].inputs:
            j = t.node
            if j is not None and j >= lo and live[j]:
                live[i] = 1
                break
    if not live[hi]:
        return {}

    seed = np.ones_like(loss.data)
    cot: dict[int, Tensor] = {hi: Tensor._wrap(seed)}
    found: dict[int, Tensor] = {}
    for i in range(hi, lo - 1, -1):
        g = cot.pop(i, None)
        if g is None:
            continue
        if i in targets:
            found[i] = g
        node = nodes[i]
        if node.vjp is None:
            continue
        ins = node.inputs
        needs = tuple(t.node is not None and t.node >= lo and bool(live[t.node]) for t in ins)
        if not any(needs):
            continue
        if create_graph:
            grads = node.vjp(g, ins, node.out, needs)
        else:
            grads = node.vjp(g.detach(), tuple(t.detach() for t in ins), node.out.detach(), needs)
        for t, gi, need in zip(ins, grads, needs):
            if not need or gi is None:
                continue
            j = t.node
            prev = cot.get(j)
            cot[j] = gi if prev is None else add(prev, gi)
    if not create_graph and not tape.retain_graph:
        tape.release()
    return found


def numeric_gradient(f: Callable[[Mapping[str, Tensor]], Any], at: Mapping[str, Any], h: float = 1e-5, *,
                     dtype=np.float64, richardson: bool = False, ensemble: int = 0,
                     only: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``at``.

    ``dtype`` sets the precision ``f`` is evaluated in.  ``richardson`` combines
    steps h and h/2 to cancel the O(h^2) truncation term.  With ``ensemble=E``
    the perturbed tensor is passed with a leading axis of up to E stacked
    copies and ``f`` must return one value per copy.  ``only`` restricts the
    differenced elements (flat indices per name); the rest are left NaN.
    """
    if h <= 0:
        raise AutodiffError("finite differences need h > 0")
    point = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=dtype) for k, v in at.items()}
    wrapped = {k: Tensor._wrap(v) for k, v in point.items()}

    def evaluate(name, values) -> np.ndarray:
        args = dict(wrapped)
        args[name] = Tensor._wrap(values)
        out = f(args)
        val = np.asarray(out.data if isinstance(out, Tensor) else out)
        if not np.isfinite(val).all():
            raise NonFiniteError("finite differences: f is not finite")
        return val.astype(dtype)

    out: dict[str, np.ndarray] = {}
    for name, base in point.items():
        res = np.full(base.size, np.nan)
        idx = np.arange(base.size) if only is None else np.asarray(only.get(name, ()), dtype=np.int64)
        chunk = max(ensemble, 1)
        for start in range(0, idx.size, chunk):
            sel = idx[start:start + chunk]

            def central(step) -> np.ndarray:
                if ensemble:
                    stack = np.repeat(base.reshape(1, -1), 2 * sel.size, axis=0)
                    rows = np.arange(sel.size)
                    stack[rows, sel] += step
                    stack[rows + sel.size, sel] -= step
                    width = stack[rows, sel] - stack[rows + sel.size, sel]
                    vals = evaluate(name, stack.reshape((2 * sel.size,) + base.shape)).reshape(-1)
                    return (vals[:sel.size] - vals[sel.size:]) / width
                d = np.empty(sel.size, dtype=dtype)
                flat = base.reshape(-1)
                for r, j in enumerate(sel):
                    orig = flat[j]
                    flat[j] = hi = orig + step
                    up = evaluate(name, base).reshape(())
                    flat[j] = lo = orig - step
                    down = evaluate(name, base).reshape(())
                    flat[j] = orig
                    d[r] = (up - down) / (hi - lo)
                return d

            step = dtype(h)
            d = central(step)
            if richardson:
                d = (4 * central(step / 2) - d) / 3
            res[sel] = d.astype(np.float64)
        out[name] = res.reshape(base.shape)
    return out


def _data(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def max_relative_error(analytic: Mapping[str, Any], numeric: Mapping[str, np.ndarray]) -> float:
    """max |a - b| / max(|a|, |b|, 1e-12) over every element."""
    worst = 0.0
    for name, b in numeric.items():
        a = _data(analytic[name]).reshape(b.shape)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def finite_difference_check(f: Callable[[Mapping[str, Tensor]], Any], at: Mapping[str, Any], h: float = 1e-5, *,
                            analytic: Mapping[str, Any] | None = None, ensemble: int = 0,
                            richardson_below: float = 0.0, richardson_step: float = 1e-3,
                            extended_below: float = 0.0) -> float:
    """Max relative error between ``grad`` and central differences of ``f`` at ``at``.

    The analytic side comes from the tape unless given.  Every element is
    differenced in float64 with step ``h``.  Rounding in ``f`` leaves an
    absolute noise floor (around 1e-10 at h=1e-5) that swamps a tight relative
    comparison on small entries, so two optional refinements redo them with
    Richardson extrapolation at the larger ``richardson_step``: entries below
    ``richardson_below`` in float64 (floor near 1e-12), entries below
    ``extended_below`` in extended precision (floor near 1e-15).
    Entries where both sides are exactly zero are left alone.
    """
    if analytic is None:
        tape = Tape()
        watched = {k: tape.leaf(v) for k, v in at.items()}
        loss = f(watched)
        if not isinstance(loss, Tensor):
            raise AutodiffError("f must return a Tensor when the analytic gradient is taken from the tape")
        analytic = grad(loss, watched)
    numeric = numeric_gradient(f, at, h, ensemble=ensemble)
    for below, dtype in ((richardson_below, np.float64), (extended_below, np.longdouble)):
        if below <= 0:
            continue
        weak = {k: np.flatnonzero((np.abs(v) < below) & ~((v == 0) & (_data(analytic[k]).reshape(v.shape) == 0)))
                for k, v in numeric.items()}
        if not any(w.size for w in weak.values()):
            continue
        fine = numeric_gradient(f, at, richardson_step, dtype=dtype, richardson=True, ensemble=ensemble, only=weak)
        for k, w in weak.items():
            numeric[k].reshape(-1)[w] = fine[k].reshape(-1)[w]
    return max_relative_error(analytic, numeric)
