"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the library is carried by :class:`Tensor`, a thin wrapper
around a row-major ``numpy.ndarray``. Operations build an implicit DAG of
nodes; ``backward`` walks the graph in reverse topological order and
accumulates gradients into the ``requires_grad`` leaves exactly once per
call (repeated calls accumulate further, by design).

Spatial convention used throughout: a feature map has shape (W, H, C) and
its flattened location index is ``i = h * W + w`` (image rows outer, columns
inner). Visualization dumps use the same order.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div_scalar",
    "matmul",
    "broadcast_add_col",
    "outer",
    "softmax",
    "tanh_map",
    "sigmoid",
    "relu",
    "log_map",
    "hadamard",
    "mean_pool_spatial",
    "flatten_spatial",
    "unflatten_spatial",
    "sum_all",
    "concat",
    "take_row",
    "pick",
    "backward",
    "finite_diff_check",
]

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (forward only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{flag}{tag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _is_scalar(t):
    return t.data.ndim == 0


def _reduce_to_scalar(g):
    return np.asarray(g.sum(), dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    """Elementwise sum; one operand may be a 0-d scalar tensor."""
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to_scalar(g) if _is_scalar(a) and g.ndim > 0 else g
        if b.requires_grad:
            gb = _reduce_to_scalar(g) if _is_scalar(b) and g.ndim > 0 else g
        return ga, gb

    return _from_op(out, (a, b), vjp)


def neg(a):
    return _from_op(-a.data, (a,), lambda g: (-g,))


def div_scalar(a, s):
    """Divide by a plain float. True division, so div_scalar(x, x) is exactly 1."""
    s = float(s)
    if s == 0.0:
        raise DomainError("div_scalar: division by zero")
    return _from_op(a.data / s, (a,), lambda g: (g / s,))


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    """Elementwise product; one operand may be a 0-d scalar tensor."""
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * b.data
            if _is_scalar(a) and ga.ndim > 0:
                ga = _reduce_to_scalar(ga)
        if b.requires_grad:
            gb = g * a.data
            if _is_scalar(b) and gb.ndim > 0:
                gb = _reduce_to_scalar(gb)
        return ga, gb

    return _from_op(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix / vector product for rank combinations (2,2), (2,1), (1,2), (1,1)."""
    ra, rb = a.data.ndim, b.data.ndim
    if ra not in (1, 2) or rb not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if ra == 2 and rb == 2:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.T @ g
        elif ra == 2 and rb == 1:
            if a.requires_grad:
                ga = np.outer(g, b.data)
            if b.requires_grad:
                gb = a.data.T @ g
        elif ra == 1 and rb == 2:
            if a.requires_grad:
                ga = b.data @ g
            if b.requires_grad:
                gb = np.outer(a.data, g)
        else:  # dot product
            if a.requires_grad:
                ga = g * b.data
            if b.requires_grad:
                gb = g * a.data
        return ga, gb

    return _from_op(out, (a, b), vjp)


def broadcast_add_col(m, v):
    """Add vector ``v`` to every column of matrix ``m`` (out[i,j] = m[i,j] + v[i])."""
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise DimensionError(f"broadcast_add_col: need matrix and vector, got {m.shape}, {v.shape}")
    if m.shape[0] != v.shape[0]:
        raise DimensionError(f"broadcast_add_col: {m.shape} rows != vector length {v.shape}")
    out = m.data + v.data[:, None]

    def vjp(g):
        gm = g if m.requires_grad else None
        gv = g.sum(axis=1) if v.requires_grad else None
        return gm, gv

    return _from_op(out, (m, v), vjp)


def outer(u, v):
    """Outer product of two vectors: out[i,j] = u[i] * v[j]."""
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise DimensionError(f"outer: both inputs must be rank-1, got {u.shape}, {v.shape}")
    out = np.outer(u.data, v.data)

    def vjp(g):
        gu = g @ v.data if u.requires_grad else None
        gv = u.data @ g if v.requires_grad else None
        return gu, gv

    return _from_op(out, (u, v), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(z):
    """Max-subtracted softmax over a rank-1 tensor.

    Entries whose quotient underflows to zero are clamped to the smallest
    positive subnormal, keeping the output inside (0, 1] for inputs as far
    as 1400 apart while moving the sum by far less than 1e-12.
    """
    if z.data.ndim != 1:
        raise DimensionError(f"softmax: expected a vector, got shape {z.shape}")
    if z.size == 0:
        raise DomainError("softmax: empty input")
    e = np.exp(z.data - z.data.max())
    y = e / e.sum()
    y[y == 0.0] = np.nextafter(0.0, 1.0)

    def vjp(g):
        return (y * (g - np.dot(g, y)),)

    return _from_op(y, (z,), vjp)


def tanh_map(t):
    y = np.tanh(t.data)
    return _from_op(y, (t,), lambda g: (g * (1.0 - y * y),))


def sigmoid(t):
    y = 1.0 / (1.0 + np.exp(-t.data))
    return _from_op(y, (t,), lambda g: (g * y * (1.0 - y),))


def relu(t):
    y = np.maximum(t.data, 0.0)
    return _from_op(y, (t,), lambda g: (g * (t.data > 0.0),))


def log_map(t):
    """Elementwise natural log; domain is strictly positive entries."""
    return _from_op(np.log(t.data), (t,), lambda g: (g / t.data,))


# ---------------------------------------------------------------------------
# feature-map ops (maps are rank-3, shape (W, H, C); location index h*W + w)


def hadamard(a, b, axis=None):
    """Elementwise product; ``b`` may be a weight vector broadcast over one axis.

    For rank-3 ``a`` of shape (W, H, C) and rank-1 ``b``:
      axis="spatial"  multiplies location (w, h) by b[h*W + w]  (len m = W*H)
      axis="channel"  multiplies channel c by b[c]              (len C)
    When m == C the axis must be given explicitly.
    """
    if a.shape == b.shape:
        return mul(a, b)
    if a.data.ndim != 3 or b.data.ndim != 1:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} are not compatible")
    w, h, c = a.shape
    m = w * h
    if axis is None:
        if m == c:
            raise UsageError("hadamard: spatial and channel extents coincide; pass axis explicitly")
        if b.shape[0] == m:
            axis = "spatial"
        elif b.shape[0] == c:
            axis = "channel"
        else:
            raise DimensionError(f"hadamard: vector length {b.shape[0]} matches neither m={m} nor C={c}")
    if axis == "spatial":
        if b.shape[0] != m:
            raise DimensionError(f"hadamard: spatial vector length {b.shape[0]} != m={m}")
        factor = b.data.reshape(h, w).T[:, :, None]  # factor[w, h, 0] = b[h*W + w]

        def vjp(g):
            ga = g * factor if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = (g * a.data).sum(axis=2).T.reshape(m)
            return ga, gb

        return _from_op(a.data * factor, (a, b), vjp)
    if axis == "channel":
        if b.shape[0] != c:
            raise DimensionError(f"hadamard: channel vector length {b.shape[0]} != C={c}")
        factor = b.data[None, None, :]

        def vjp(g):
            ga = g * factor if a.requires_grad else None
            gb = (g * a.data).sum(axis=(0, 1)) if b.requires_grad else None
            return ga, gb

        return _from_op(a.data * factor, (a, b), vjp)
    raise UsageError(f"hadamard: unknown axis {axis!r}")


def mean_pool_spatial(v):
    """Mean over the W*H locations of each channel of a (W, H, C) map."""
    if v.data.ndim != 3:
        raise DimensionError(f"mean_pool_spatial: expected rank 3, got shape {v.shape}")
    w, h, _ = v.shape
    scale = 1.0 / (w * h)
    out = v.data.mean(axis=(0, 1))

    def vjp(g):
        return (np.broadcast_to(g * scale, v.shape),)

    return _from_op(out, (v,), vjp)


def flatten_spatial(v):
    """Reshape a (W, H, C) map to (C, m): column i = fiber at location i = h*W + w."""
    if v.data.ndim != 3:
        raise DimensionError(f"flatten_spatial: expected rank 3, got shape {v.shape}")
    w, h, c = v.shape
    out = v.data.transpose(1, 0, 2).reshape(h * w, c).T

    def vjp(g):
        return (g.T.reshape(h, w, c).transpose(1, 0, 2),)

    return _from_op(out, (v,), vjp)


def unflatten_spatial(f, width, height):
    """Inverse of :func:`flatten_spatial` for a (C, m) matrix."""
    if f.data.ndim != 2:
        raise DimensionError(f"unflatten_spatial: expected rank 2, got shape {f.shape}")
    c, m = f.shape
    if m != width * height:
        raise DimensionError(f"unflatten_spatial: {m} locations cannot fill {width}x{height}")
    out = f.data.T.reshape(height, width, c).transpose(1, 0, 2)

    def vjp(g):
        return (g.transpose(1, 0, 2).reshape(height * width, c).T,)

    return _from_op(out, (f,), vjp)


# ---------------------------------------------------------------------------
# reductions, indexing, assembly


def sum_all(t):
    out = np.asarray(t.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, t.shape),)

    return _from_op(out, (t,), vjp)


def concat(parts):
    """Concatenate rank-1 tensors into one vector."""
    parts = list(parts)
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError(f"concat: expected vectors, got shape {p.shape}")
    out = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + [p.size for p in parts])

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _from_op(out, tuple(parts), vjp)


def take_row(m, i):
    """Row ``i`` of a matrix, differentiable w.r.t. the matrix."""
    if m.data.ndim != 2:
        raise DimensionError(f"take_row: expected matrix, got shape {m.shape}")
    if not 0 <= i < m.shape[0]:
        raise DimensionError(f"take_row: row {i} out of range for {m.shape}")
    out = m.data[i].copy()

    def vjp(g):
        gm = np.zeros_like(m.data)
        gm[i] = g
        return (gm,)

    return _from_op(out, (m,), vjp)


def pick(v, i):
    """Entry ``i`` of a vector as a 0-d tensor."""
    if v.data.ndim != 1:
        raise DimensionError(f"pick: expected vector, got shape {v.shape}")
    if not 0 <= i < v.shape[0]:
        raise DimensionError(f"pick: index {i} out of range for {v.shape}")
    out = np.asarray(v.data[i])

    def vjp(g):
        gv = np.zeros_like(v.data)
        gv[i] = g
        return (gv,)

    return _from_op(out, (v,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, into=None):
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf under ``loss``.

    By default gradients accumulate into each leaf's ``.grad`` buffer
    (repeated calls without ``zero_grad`` keep adding). When ``into`` is a
    dict the leaves' buffers are left untouched and gradients accumulate
    into ``into[leaf]`` instead, which keeps concurrent backward passes over
    shared parameters thread-confined.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return into
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                held = grads.get(key)
                grads[key] = pg if held is None else held + pg
        else:
            if into is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            else:
                held = into.get(node)
                into[node] = np.array(g, dtype=np.float64) if held is None else held + g
    return into


def finite_diff_check(f, params, eps=1e-5):
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must rebuild its graph from the given parameter tensors on every
    call. Returns ``(max_relative_error, (param_index, flat_index))``; the
    relative error at a coordinate is 0 when both gradients are below 1e-12
    in magnitude, and ``inf`` when a perturbed evaluation is non-finite.
    """
    if eps <= 0:
        raise DomainError("finite_diff_check: eps must be positive")
    for p in params:
        p.zero_grad()
    backward(f())
    worst = 0.0
    worst_at = None
    for pi, p in enumerate(params):
        tape = np.zeros_like(p.data) if p.grad is None else p.grad
        tape_flat = tape.reshape(-1)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            with no_grad(), np.errstate(all="ignore"):
                flat[j] = saved + eps
                hi = float(f().data)
                flat[j] = saved - eps
                lo = float(f().data)
            flat[j] = saved
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return float("inf"), (pi, j)
            numeric = (hi - lo) / (2.0 * eps)
            analytic = tape_flat[j]
            scale = max(abs(numeric), abs(analytic))
            err = 0.0 if scale < 1e-12 else abs(numeric - analytic) / scale
            if err > worst:
                worst = err
                worst_at = (pi, j)
    return worst, worst_at
