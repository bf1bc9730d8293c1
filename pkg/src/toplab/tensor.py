"""Dense tensors with reverse-mode autodiff.

Small and auditable by design: a Tensor wraps a row-major numpy array
(f32 or f64) and each op appends one node to the trace. backward() on a
scalar walks the trace once in reverse topological order. There is no
broadcasting except scalar operands; every op checks shapes and dtypes
at the boundary and fails fast on mismatch.

Non-finite values are rejected at op boundaries. The only place -inf is
legal is inside target score vectors, which never enter the trace; see
softmax_with_neg_inf for the single conversion point.
"""

from __future__ import annotations

import numpy as np

DTYPES = (np.float32, np.float64)

# Toggled off only in benchmarks; training keeps it on so a NaN/Inf is
# caught at the op that produced it.
_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes or dtypes violate an op contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class EmptySupportError(ValueError):
    """A score vector had no finite entry."""


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    return np.ascontiguousarray(arr)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=np.float32, requires_grad=False):
        self.data = _as_array(data, dtype)
        if self.data.dtype.type not in DTYPES:
            raise ShapeError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

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
        return self.data.dtype.type

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse pass from a scalar; visits each trace node exactly once."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.__name__}, grad={self.requires_grad})"


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _track(parents) -> bool:
    return any(p.requires_grad or p._parents for p in parents)


def _node(data, parents, backward_fn) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _track(parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.data.dtype}")
    return dt


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=False)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., k] @ b[k, n]; leading axes of a are treated as batch rows."""
    _same_dtype(a, b)
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError(f"matmul expects a[..., k] and b[k, n], got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            b._accumulate(a2.T @ g2)

    return _node(out, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul a[..., m, k] @ b[..., k, n] with identical leading axes."""
    _same_dtype(a, b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"bmm leading axes disagree: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad or b._parents:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g if a.shape == g.shape else g.sum().reshape(a.shape))
        if b.requires_grad or b._parents:
            b._accumulate(g if b.shape == g.shape else g.sum().reshape(b.shape))

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul shapes disagree: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g * b.data
            a._accumulate(ga if a.shape == ga.shape else ga.sum().reshape(a.shape))
        if b.requires_grad or b._parents:
            gb = g * a.data
            b._accumulate(gb if b.shape == gb.shape else gb.sum().reshape(b.shape))

    return _node(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype(s)
    out = x.data * s

    def backward(g):
        x._accumulate(g * s)

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(x.data.reshape(shape))

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.ascontiguousarray(np.transpose(g, inv)))

    return _node(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; ids >= V are clamped to 0 (padded positions are masked downstream)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    safe = np.minimum(ids, table.shape[0] - 1)
    out = table.data[safe]

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, safe.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(acc)

    return _node(out, (table,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _node(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gain * x / sqrt(mean(x^2, last) + eps); gain has shape (last_dim,)."""
    _same_dtype(x, gain)
    n = x.shape[-1]
    if gain.shape != (n,):
        raise ShapeError(f"gain shape {gain.shape} != ({n},)")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = np.sqrt(ms + x.dtype(eps))
    xhat = x.data / r
    out = xhat * gain.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if x.requires_grad or x._parents:
            u = g * gain.data
            dot = np.mean(u * xhat, axis=-1, keepdims=True)
            x._accumulate((u - xhat * dot) / r)

    return _node(out, (x, gain), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs of x[..., T, d] by per-position angles; cos/sin are (T, d/2)."""
    t, d = x.shape[-2], x.shape[-1]
    if d % 2 != 0 or cos.shape != (t, d // 2) or sin.shape != (t, d // 2):
        raise ShapeError(f"rope tables {cos.shape} incompatible with input {x.shape}")
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        x._accumulate(dx)

    return _node(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    m = np.max(x.data, axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        x._accumulate(g - soft * np.sum(g, axis=-1, keepdims=True))

    return _node(out, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to mask==True; masked entries are exactly 0.

    The mask is broadcast against x (trailing-dim alignment for the causal
    (T, T) case). Every row must keep at least one allowed entry.
    """
    allowed = np.broadcast_to(mask, x.shape)
    if not allowed.any(axis=-1).all():
        raise EmptySupportError("masked_softmax row with empty support")
    neg = np.where(allowed, x.data, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.exp(np.where(allowed, x.data - m, x.dtype(0)))
    e = np.where(allowed, e, x.dtype(0))
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        x._accumulate(out * (g - dot))

    return _node(out, (x,), backward)


def stack(tensors, axis: int) -> Tensor:
    dt = _same_dtype(*tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack operands must share a shape")
    out = np.ascontiguousarray(np.stack([t.data for t in tensors], axis=axis))

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(tensors, parts):
            if t.requires_grad or t._parents:
                t._accumulate(np.ascontiguousarray(gp))

    return _node(out, tuple(tensors), backward)


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = x.dtype(1.0 / x.size)

    def backward(g):
        x._accumulate(np.full_like(x.data, g * inv))

    return _node(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        x._accumulate(np.full_like(x.data, g))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# score-vector utilities (outside the differentiable trace)


def softmax_with_neg_inf(scores: np.ndarray) -> np.ndarray:
    """Distribution over the finite support of a score vector; -inf maps to exactly 0.

    Raises EmptySupportError when no entry is finite. Used to turn target
    score vectors into soft label distributions; never part of the trace.
    """
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    if not finite.any():
        raise EmptySupportError("all entries are -inf")
    m = np.max(scores[finite])
    e = np.where(finite, np.exp(np.where(finite, scores, 0.0) - m), 0.0)
    return e / e.sum()


def softmax_rows_with_neg_inf(scores: np.ndarray, out_dtype=np.float64) -> np.ndarray:
    """Row-wise softmax_with_neg_inf over a (..., V) array.

    Rows with no finite entry come back all-zero; callers must mask them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    any_finite = finite.any(axis=-1, keepdims=True)
    m = np.max(np.where(finite, scores, -np.inf), axis=-1, keepdims=True)
    m = np.where(any_finite, m, 0.0)
    e = np.where(finite, np.exp(np.where(finite, scores, 0.0) - m), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(any_finite, denom, 1.0)
    return (e / denom).astype(out_dtype)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    def __init__(self):
        self.per_param: dict[str, float] = {}
        self.worst_param: str | None = None
        self.worst_coord: tuple | None = None
        self.max_rel_error = 0.0
        self.failures: list[str] = []

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error <= self.tol

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"worst={self.worst_param}{self.worst_coord}, failures={self.failures})")


def finite_difference_check(f, params: dict[str, Tensor], h: float = 1e-5,
                            tol: float = 1e-4, max_coords_per_param: int | None = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar f(params) against central differences.

    Central differences in f64 with step h; rel error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6). When a tensor
    is large, max_coords_per_param caps the checked coordinates with a
    seeded subsample.
    """
    report = GradCheckReport()
    report.tol = tol
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ShapeError(f"finite_difference_check requires f64 params, {name} is {p.dtype}")
        p.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        report.failures.append("loss non-finite at base point")
        return report
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f(params).item()
            flat[c] = orig - h
            fm = f(params).item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"non-finite f at {name}[{c}]")
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = name
                report.worst_coord = np.unravel_index(c, p.shape)
        report.per_param[name] = worst
    return report
