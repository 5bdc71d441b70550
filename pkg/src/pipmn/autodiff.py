"""Small dense-tensor engine with reverse-mode differentiation.

Only the operations the PIPMN model needs are provided. Every op builds an
output :class:`Tensor` that remembers its parents and a closure mapping the
output gradient to one gradient per parent; :func:`backward` replays those
closures in reverse topological order.

Compute precision defaults to float32. Verification code switches to float64
with :func:`precision`::

    with precision(np.float64):
        ...
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the compute dtype of newly created tensors."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float array (rank <= 3) with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        arr = np.array(data, dtype=_DTYPE, order="C")
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported (max 3)")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values produced by {_op or 'constructor'}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    # convenience arithmetic used by tests and losses
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tensor_sum(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named trainable tensor."""

    def __init__(self, name, data, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, grad_fn, op):
    """Create the output of an op.

    ``grad_fn(g)`` receives the output gradient and returns one array (or None)
    per parent, in order.
    """
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=grad_fn if needs else None, _op=op)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is released afterwards; calling this twice on the same loss
    raises ``RuntimeError``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def tensor_sum(x):
    x = as_tensor(x)
    return make_op(x.data.sum(), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def linear(x, w, b=None):
    """``y[..., j] = sum_i x[..., i] * w[i, j] + b[j]``."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    fin, fout = w.shape

    def grad_fn(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, fin).T @ g.reshape(-1, fout)
        gb = g.reshape(-1, fout).sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_op(y, parents, grad_fn, "linear")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis with biased variance."""
    x = as_tensor(x)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma.data + beta.data

    def grad_fn(g):
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gh = g * gamma.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return make_op(y, (x, gamma, beta), grad_fn, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_op(y, (x,), grad_fn, "gelu")


def depthwise_conv1d(x, k, b):
    """Per-channel 3-tap convolution along the last axis, zero padding 1.

    ``x`` is (B, D, L), ``k`` is (D, 3), ``b`` is (D,).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"depthwise_conv1d expects (B, D, L), got {x.shape}")
    _, d, length = x.shape
    if k.shape != (d, 3) or b.shape != (d,):
        raise ShapeError(f"depthwise_conv1d: kernel {k.shape}/bias {b.shape} for {d} channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1)))
    y = b.data[None, :, None] + sum(xp[:, :, j:j + length] * k.data[None, :, j, None]
                                    for j in range(3))

    def grad_fn(g):
        gk = np.stack([(g * xp[:, :, j:j + length]).sum(axis=(0, 2)) for j in range(3)], axis=1)
        gxp = np.zeros_like(xp)
        for j in range(3):
            gxp[:, :, j:j + length] += g * k.data[None, :, j, None]
        return gxp[:, :, 1:-1], gk, g.sum(axis=(0, 2))

    return make_op(y, (x, k, b), grad_fn, "depthwise_conv1d")


def pool_matrix(t, out_len, dtype=None):
    """Averaging weights (out_len, t) of adaptive average pooling."""
    if not 1 <= out_len <= t:
        raise ValueError(f"adaptive pooling needs 1 <= out_len <= T, got out_len={out_len}, T={t}")
    m = np.zeros((out_len, t), dtype=dtype or _DTYPE)
    for i in range(out_len):
        lo = (i * t) // out_len
        hi = -((-(i + 1) * t) // out_len)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool_time(x, out_len):
    """Pool (B, T, D) along T to (B, out_len, D)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool_time expects (B, T, D), got {x.shape}")
    p = pool_matrix(x.shape[1], out_len)
    y = np.einsum("ot,btd->bod", p, x.data)
    return make_op(y, (x,), lambda g: (np.einsum("ot,bod->btd", p, g),), "adaptive_avg_pool")


def permute_last_two(x):
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"permute_last_two expects a rank-3 tensor, got shape {x.shape}")
    return make_op(x.data.transpose(0, 2, 1), (x,),
                   lambda g: (g.transpose(0, 2, 1),), "permute")


def concat_last(xs):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_last needs at least one tensor")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shapes differ {xs[0].shape} vs {x.shape}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def grad_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return make_op(np.concatenate([x.data for x in xs], axis=-1), tuple(xs), grad_fn, "concat")


def scale(x, s):
    """``s * x`` for a scalar tensor ``s``."""
    x = as_tensor(x)
    if s.data.size != 1:
        raise ShapeError(f"scale needs a scalar, got shape {s.shape}")
    sv = s.data.reshape(())
    return make_op(sv * x.data, (x, s),
                   lambda g: (g * sv, np.reshape((g * x.data).sum(), s.shape)), "scale")


def scale_add(x, s, y):
    """``s * x + y`` with ``s`` a scalar tensor."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"scale_add: shape mismatch {x.shape} vs {y.shape}")
    if s.data.size != 1:
        raise ShapeError(f"scale_add needs a scalar, got shape {s.shape}")
    sv = s.data.reshape(())

    def grad_fn(g):
        return g * sv, np.reshape((g * x.data).sum(), s.shape), g

    return make_op(sv * x.data + y.data, (x, s, y), grad_fn, "scale_add")


def mean_over_time(x):
    """Mean of (B, L, D) over L."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"mean_over_time expects (B, L, D), got {x.shape}")
    length = x.shape[1]
    return make_op(x.data.mean(axis=1), (x,),
                   lambda g: (np.repeat(g[:, None, :] / length, length, axis=1),), "mean_time")


# ---------------------------------------------------------------------------
# finite-difference checking


class GradCheckReport:
    """Outcome of :func:`grad_check`."""

    def __init__(self, name, max_rel_error, worst, checked, failures=()):
        self.name = name
        self.max_rel_error = max_rel_error
        self.worst = worst  # (param name, index, analytic, numeric)
        self.checked = checked
        self.failures = list(failures)
        self.tol = None

    @property
    def passed(self):
        return not self.failures and self.max_rel_error < self.tol

    def __repr__(self):
        return (f"GradCheckReport({self.name!r}, max_rel_error={self.max_rel_error:.3g}, "
                f"checked={self.checked}, passed={self.passed})")


def grad_check(f, params, tol=1e-4, max_coords=64, seed=0, rel_step=None,
               floor=1e-8, stencil=2, name="grad_check"):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` is a zero-argument closure building a scalar loss from ``params``.
    Up to ``max_coords`` coordinates per parameter are sampled. Coordinates
    where ``|analytic| + |numeric| < floor`` are skipped.

    ``stencil=2`` is the classic ``(f(t+h) - f(t-h)) / 2h`` with
    ``h = 1e-6 * max(1, |t|)``. ``stencil=4`` uses the fourth-order central
    formula with ``h = 1e-3 * max(1, |t|)``, which keeps round-off out of
    coordinates whose true gradient is tiny.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    if rel_step is None:
        rel_step = 1e-6 if stencil == 2 else 1e-3
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        return _failed(name, tol, "non-finite loss")
    backward(loss)
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    rng = np.random.default_rng(seed)
    worst_err, worst, checked, failures = 0.0, None, 0, []
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            h = rel_step * max(1.0, abs(float(orig)))
            try:
                vals = []
                for mult in ((1, -1) if stencil == 2 else (2, 1, -1, -2)):
                    flat[i] = orig + mult * h
                    vals.append(float(f().data))
            except FloatingPointError as exc:
                failures.append(f"{getattr(p, 'name', '?')}[{i}]: {exc}")
                continue
            finally:
                flat[i] = orig
            if not all(math.isfinite(v) for v in vals):
                failures.append(f"{getattr(p, 'name', '?')}[{i}]: non-finite value")
                continue
            if stencil == 2:
                num = (vals[0] - vals[1]) / (2 * h)
            else:
                num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            ana = float(analytic[id(p)].reshape(-1)[i])
            if abs(ana) + abs(num) < floor:
                continue
            checked += 1
            err = abs(ana - num) / max(abs(ana), abs(num))
            if err > worst_err or worst is None:
                worst_err = max(err, worst_err)
                worst = (getattr(p, "name", "?"), int(i), ana, num)
    for p in params:
        p.zero_grad()
    report = GradCheckReport(name, worst_err, worst, checked, failures)
    report.tol = tol
    return report


def _failed(name, tol, why):
    report = GradCheckReport(name, math.inf, None, 0, [why])
    report.tol = tol
    return report
