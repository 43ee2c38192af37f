"""Tensor algebra with reverse-mode automatic differentiation.

A small tape-based autodiff engine over numpy arrays. Each operation
records its inputs and a backward closure on the output tensor; calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every tensor that
requires them. Gradients accumulate across calls until the caller clears
them.

Broadcasting is deliberately restricted to (matrix + row-vector) and
(tensor + scalar) so every backward rule stays auditable. The default
element type is float64; training code switches to float32 through
``precision`` / ``set_default_dtype``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = np.dtype(np.float64)
_tape_enabled = True


def resolve_dtype(spec):
    """Map 'f32'/'f64' or a numpy dtype to a canonical numpy dtype."""
    if isinstance(spec, str):
        if spec not in DTYPES:
            raise ContractError(f"unknown precision {spec!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[spec])
    dt = np.dtype(spec)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def set_default_dtype(spec):
    global _default_dtype
    _default_dtype = resolve_dtype(spec)


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(spec):
    """Temporarily switch the default element type ('f32' or 'f64')."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = resolve_dtype(spec)
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forward results come back as constants."""
    global _tape_enabled
    old = _tape_enabled
    _tape_enabled = False
    try:
        yield
    finally:
        _tape_enabled = old


class Tensor:
    """n-dimensional array participating in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
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
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A constant tensor sharing this tensor's data."""
        return _const(self.data)

    def backward(self):
        backward(self)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def _accum_rows(self, index, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if isinstance(index, np.ndarray):
            np.add.at(self.grad, index, g)
        else:
            self.grad[index] += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _op(data, parents, backward_fn):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = True
    t._parents = parents
    t._backward = backward_fn
    return t


def _const(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    return t


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _live(*tensors):
    return _tape_enabled and any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data + b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

        return _op(out, (a, b), backward_fn)
    if b.ndim == 0:
        out = a.data + b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum())

        return _op(out, (a, b), backward_fn)
    if a.ndim == 0:
        return add(b, a)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = a.data + b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))

        return _op(out, (a, b), backward_fn)
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return add(b, a)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a, b):
    return add(a, neg(as_tensor(b)))


def neg(a):
    a = as_tensor(a)
    out = -a.data
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a):
        a._accum(-g)

    return _op(out, (a,), backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = a.data * b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)

        return _op(out, (a, b), backward_fn)
    if b.ndim == 0:
        out = a.data * b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum((g * a.data).sum())

        return _op(out, (a, b), backward_fn)
    if a.ndim == 0:
        return mul(b, a)
    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 0:
        raise ShapeError(f"division only supports scalar divisors, got shape {b.shape}")
    out = a.data / b.data
    if not _live(a, b):
        return _const(out)

    def backward_fn(g, a=a, b=b):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-(g * a.data).sum() / (b.data * b.data))

    return _op(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
        out = a.data @ b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return _op(out, (a, b), backward_fn)
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
        out = a.data @ b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(b.data @ g)
            if b.requires_grad:
                b._accum(np.outer(a.data, g))

        return _op(out, (a, b), backward_fn)
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
        out = a.data @ b.data
        if not _live(a, b):
            return _const(out)

        def backward_fn(g, a=a, b=b):
            if a.requires_grad:
                a._accum(np.outer(g, b.data))
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return _op(out, (a, b), backward_fn)
    if a.ndim == 1 and b.ndim == 1:
        return dot(a, b)
    raise ShapeError(f"matmul does not support shapes {a.shape} and {b.shape}")


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = np.asarray(a.data @ b.data)
    if not _live(a, b):
        return _const(out)

    def backward_fn(g, a=a, b=b):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _op(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def tsum(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a):
        a._accum(np.broadcast_to(g, a.shape))

    return _op(out, (a,), backward_fn)


def mean(a):
    a = as_tensor(a)
    out = np.asarray(a.data.mean())
    if not _live(a):
        return _const(out)

    n = a.size

    def backward_fn(g, a=a, n=n):
        a._accum(np.broadcast_to(g / n, a.shape))

    return _op(out, (a,), backward_fn)


def mean_rows(a):
    """Column-wise mean of a matrix: [T, d] -> [d]."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {a.shape}")
    out = a.data.mean(axis=0)
    if not _live(a):
        return _const(out)

    n = a.shape[0]

    def backward_fn(g, a=a, n=n):
        a._accum(np.broadcast_to(g / n, a.shape))

    return _op(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, out=out):
        a._accum(g * (1.0 - out * out))

    return _op(out, (a,), backward_fn)


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, out=out):
        a._accum(g * out * (1.0 - out))

    return _op(out, (a,), backward_fn)


def softmax(v):
    """Numerically stable softmax of a vector (max-subtraction)."""
    v = as_tensor(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax expects a nonempty vector, got shape {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    out = e / e.sum()
    if not _live(v):
        return _const(out)

    def backward_fn(g, v=v, out=out):
        v._accum(out * (g - g @ out))

    return _op(out, (v,), backward_fn)


def layer_norm(v, eps=1e-5):
    """Parameter-free layer normalization of a vector."""
    v = as_tensor(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"layer_norm expects a nonempty vector, got shape {v.shape}")
    mu = v.data.mean()
    centered = v.data - mu
    var = (centered * centered).mean()
    inv = 1.0 / math.sqrt(var + eps)
    out = centered * inv
    if not _live(v):
        return _const(out)

    def backward_fn(g, v=v, out=out, inv=inv):
        v._accum(inv * (g - g.mean() - out * (g * out).mean()))

    return _op(out, (v,), backward_fn)


# ---------------------------------------------------------------------------
# similarity and losses

COSINE_EPS = 1e-8


def cosine_similarity(u, v, eps=COSINE_EPS):
    """u.v / (max(|u|, eps) * max(|v|, eps)); zero vectors yield 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    du = max(nu, eps)
    dv = max(nv, eps)
    c = float(u.data @ v.data) / (du * dv)
    out = np.asarray(c, dtype=u.data.dtype)
    if not _live(u, v):
        return _const(out)

    def backward_fn(g, u=u, v=v, nu=nu, nv=nv, du=du, dv=dv, c=c, eps=eps):
        scale = float(g) / (du * dv)
        if u.requires_grad:
            gu = scale * v.data
            if nu > eps:
                gu = gu - float(g) * c * u.data / (nu * nu)
            u._accum(gu)
        if v.requires_grad:
            gv = scale * u.data
            if nv > eps:
                gv = gv - float(g) * c * v.data / (nv * nv)
            v._accum(gv)

    return _op(out, (u, v), backward_fn)


def normalize_rows(a, eps=COSINE_EPS):
    """Scale each row of a matrix to unit norm (rows below eps are divided by eps)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.linalg.norm(a.data, axis=1)
    denom = np.maximum(norms, eps)
    out = a.data / denom[:, None]
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, out=out, norms=norms, denom=denom, eps=eps):
        dots = np.where(norms > eps, (g * out).sum(axis=1), 0.0)
        a._accum((g - dots[:, None] * out) / denom[:, None])

    return _op(out, (a,), backward_fn)


def mse(a, b):
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse expects identical shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean())
    if not _live(a, b):
        return _const(out)

    n = a.size

    def backward_fn(g, a=a, b=b, diff=diff, n=n):
        scaled = (2.0 / n) * g * diff
        if a.requires_grad:
            a._accum(scaled)
        if b.requires_grad:
            b._accum(-scaled)

    return _op(out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# structural ops


def concat(vs):
    vs = [as_tensor(v) for v in vs]
    if not vs:
        raise ContractError("concat of zero vectors")
    for v in vs:
        if v.ndim != 1:
            raise ShapeError(f"concat expects vectors, got shape {v.shape}")
    out = np.concatenate([v.data for v in vs])
    if not _live(*vs):
        return _const(out)

    sizes = [v.size for v in vs]

    def backward_fn(g, vs=vs, sizes=sizes):
        off = 0
        for v, n in zip(vs, sizes):
            if v.requires_grad:
                v._accum(g[off:off + n])
            off += n

    return _op(out, tuple(vs), backward_fn)


def stack_rows(vs):
    vs = [as_tensor(v) for v in vs]
    if not vs:
        raise ContractError("stack_rows of zero vectors")
    for v in vs:
        if v.ndim != 1 or v.shape != vs[0].shape:
            raise ShapeError("stack_rows expects equal-length vectors")
    out = np.stack([v.data for v in vs])
    if not _live(*vs):
        return _const(out)

    def backward_fn(g, vs=vs):
        for i, v in enumerate(vs):
            if v.requires_grad:
                v._accum(g[i])

    return _op(out, tuple(vs), backward_fn)


def index_row(a, i):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"index_row expects a matrix, got shape {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise ContractError(f"row index {i} out of range for {a.shape[0]} rows")
    out = a.data[i]
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, i=i):
        a._accum_rows(i, g)

    return _op(out, (a,), backward_fn)


def slice_rows(a, start, stop):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"slice_rows expects a matrix, got shape {a.shape}")
    out = a.data[start:stop]
    if out.shape[0] == 0:
        raise ContractError(f"empty row slice [{start}:{stop}] of {a.shape[0]} rows")
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, start=start, stop=stop):
        a._accum_rows(slice(start, stop), g)

    return _op(out, (a,), backward_fn)


def gather_rows(a, ids):
    """Row lookup by integer ids (embedding gather); repeated ids accumulate."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat id list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        bad = int(idx[(idx < 0) | (idx >= a.shape[0])][0])
        raise ContractError(f"id {bad} out of range for table with {a.shape[0]} rows")
    out = a.data[idx]
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a, idx=idx):
        a._accum_rows(idx, g)

    return _op(out, (a,), backward_fn)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = a.data.T
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a):
        a._accum(g.T)

    return _op(out, (a,), backward_fn)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if not _live(a):
        return _const(out)

    def backward_fn(g, a=a):
        a._accum(g.reshape(a.shape))

    return _op(out, (a,), backward_fn)


def repeat_rows(a, counts):
    """Repeat row i of a matrix counts[i] times, order preserved."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"repeat_rows expects a matrix, got shape {a.shape}")
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (a.shape[0],):
        raise ShapeError(f"need one count per row: {counts.shape} vs {a.shape[0]} rows")
    if counts.size and counts.min() < 1:
        raise ContractError(f"row repeat counts must be >= 1, got {int(counts.min())}")
    out = np.repeat(a.data, counts, axis=0)
    if not _live(a):
        return _const(out)

    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def backward_fn(g, a=a, offsets=offsets):
        a._accum(np.add.reduceat(g, offsets, axis=0))

    return _op(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# backward traversal


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    Visits each recorded node exactly once (iterative post-order, so deep
    recurrences do not hit the recursion limit). Grads accumulate across
    calls; callers zero them between steps.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if (p._parents or p.requires_grad) and id(p) not in visited:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ContractError("adam step on parameter with no gradient")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, point, eps=1e-5, max_coords=None, rng=None, details=None):
    """Max relative error between backward's gradient and central differences.

    ``f`` maps the parameter tensor to a scalar Tensor and must read
    ``point.data`` live on each call. Requires float64: finite differences
    are unreliable in float32. When ``max_coords`` is given, a random
    subset of coordinates is probed instead of the full sweep. Passing a
    dict as ``details`` fills it with the worst coordinate and the two
    derivative estimates there.
    """
    if point.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 parameter tensor")
    point.grad = None
    out = f(point)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check expects f to return a scalar Tensor")
    if not np.isfinite(out.data):
        raise NumericError("f returned a non-finite value at the base point")
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    flat = point.data.reshape(-1)
    aflat = analytic.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = float(f(point).data)
        flat[i] = orig - eps
        with no_grad():
            fm = float(f(point).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"f returned a non-finite value while perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = aflat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
            if details is not None:
                details.update(coord=int(i), analytic=float(a), numeric=float(numeric))
    return worst
