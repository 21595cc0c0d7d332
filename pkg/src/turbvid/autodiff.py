"""Reverse-mode autodiff over the fixed op set the renderer and losses need.

Every op carries a hand-derived backward. Tensors default to float32 for
training; gradient checks run the same graphs in float64 (finite differences
are unreliable in single precision). Graph topology is fixed per model
configuration: the same forward always records the same op sequence, and
backward walks it in exact reverse creation order.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.ndimage import correlate1d

_SEQ = itertools.count()

# When a tracker is installed here, nonsmooth ops append their distance to
# the nearest kink (leaky_relu/abs at 0, bilinear at integer coords) and
# layer_norm records its amplification (max inverse row std). Central finite
# differences are only valid at locally smooth points, and a perturbation is
# magnified by up to the LN amplification before reaching a kink; the
# gradcheck harness uses both to pick a generic test configuration.
_SMOOTHNESS = None


class SmoothnessReport:
    def __init__(self):
        self.kink_margins = []
        self.ln_amplification = 1.0

    @property
    def min_margin(self):
        return min(self.kink_margins, default=float("inf"))


class track_kink_margins:
    def __enter__(self):
        global _SMOOTHNESS
        self._prev = _SMOOTHNESS
        _SMOOTHNESS = SmoothnessReport()
        return _SMOOTHNESS

    def __exit__(self, *exc):
        global _SMOOTHNESS
        _SMOOTHNESS = self._prev
        return False


def _note_kink_margin(dist):
    if _SMOOTHNESS is not None and dist.size:
        _SMOOTHNESS.kink_margins.append(float(dist.min()))


def _note_ln_amplification(ivar):
    if _SMOOTHNESS is not None and ivar.size:
        _SMOOTHNESS.ln_amplification = max(_SMOOTHNESS.ln_amplification,
                                           float(ivar.max()))


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """A value in the computation graph.

    `data` is a numpy array (any float dtype); `grad` is lazily allocated
    with the same shape on first accumulation. Leaves are created directly;
    op outputs are created by the functions below and hold a backward
    closure plus references to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "sid")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = None
        self.sid = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        Graph(self).backward()

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data, dtype=np.float32):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _accumulate(t, g):
    if not t.requires_grad and t._backward is None and t.op == "leaf":
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _needs_grad(*tensors):
    return any(t.requires_grad or t.parents for t in tensors)


def _make(data, op, parents, backward):
    out = Tensor(data, op=op, parents=parents)
    out.requires_grad = _needs_grad(*parents)
    if out.requires_grad:
        out._backward = backward
    return out


class Graph:
    """Ordered op records reachable from one output tensor.

    Nodes are stored in creation order; backward traverses them reversed,
    which is the exact reverse of the forward op sequence. Repeated
    backward() calls accumulate into leaf grads (callers zero them).
    """

    def __init__(self, output: Tensor):
        self.output = output
        nodes = []
        seen = set()
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.sid)
        self.nodes = nodes

    def backward(self):
        out = self.output
        if out.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {out.data.shape}")
        out.grad = np.ones_like(out.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward()


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum grad `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data + b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    out = _make(data, "add", (a, b), backward)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data - b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    out = _make(data, "sub", (a, b), backward)
    return out


def hadamard(a, b):
    """Elementwise product; shapes equal or broadcastable along one axis."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"hadamard: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(data, "hadamard", (a, b), backward)
    return out


mul = hadamard


def divide(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    data = a.data / b.data

    def backward():
        g = out.grad
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out = _make(data, "divide", (a, b), backward)
    return out


def scale(x, c):
    """Multiply by a python-float constant (dtype-preserving)."""
    x = _as_tensor(x)
    c = float(c)
    data = x.data * c

    def backward():
        _accumulate(x, out.grad * c)

    out = _make(data, "scale", (x,), backward)
    return out


def add_const(x, c):
    x = _as_tensor(x)
    data = x.data + float(c)

    def backward():
        _accumulate(x, out.grad)

    out = _make(data, "add_const", (x,), backward)
    return out


def leaky_relu(x, slope=0.01):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0,1), got {slope}")
    x = _as_tensor(x)
    _note_kink_margin(np.abs(x.data))
    mask = x.data >= 0
    data = np.where(mask, x.data, x.data * slope)

    def backward():
        _accumulate(x, out.grad * np.where(mask, 1.0, slope))

    out = _make(data, "leaky_relu", (x,), backward)
    return out


def tanh(x):
    x = _as_tensor(x)
    data = np.tanh(x.data)

    def backward():
        _accumulate(x, out.grad * (1.0 - data * data))

    out = _make(data, "tanh", (x,), backward)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    # branch on sign to avoid exp overflow for large negative inputs
    pos = x.data >= 0
    ex = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward():
        _accumulate(x, out.grad * data * (1.0 - data))

    out = _make(data, "sigmoid", (x,), backward)
    return out


def absolute(x):
    x = _as_tensor(x)
    _note_kink_margin(np.abs(x.data))
    data = np.abs(x.data)

    def backward():
        _accumulate(x, out.grad * np.sign(x.data))

    out = _make(data, "abs", (x,), backward)
    return out


def square(x):
    x = _as_tensor(x)
    data = x.data * x.data

    def backward():
        _accumulate(x, out.grad * 2.0 * x.data)

    out = _make(data, "square", (x,), backward)
    return out


def reduce_sum(x):
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def backward():
        _accumulate(x, np.full_like(x.data, out.grad))

    out = _make(data, "reduce_sum", (x,), backward)
    return out


def reduce_mean(x):
    x = _as_tensor(x)
    n = x.data.size
    data = np.asarray(x.data.mean())

    def backward():
        _accumulate(x, np.full_like(x.data, out.grad / n))

    out = _make(data, "reduce_mean", (x,), backward)
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward():
        _accumulate(x, out.grad.reshape(x.data.shape))

    out = _make(data, "reshape", (x,), backward)
    return out


def concat(a, b):
    """Concatenate along the last axis; leading dims must match."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat: leading dims differ, {a.data.shape} vs {b.data.shape}")
    da = a.data.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)

    def backward():
        g = out.grad
        _accumulate(a, g[..., :da])
        _accumulate(b, g[..., da:])

    out = _make(data, "concat", (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra / normalization
# ---------------------------------------------------------------------------


def linear(x, w, b):
    """y = x @ w + b with x:(N,Din), w:(Din,Dout), b:(Dout,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.data.shape} by {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} does not match output dim {w.data.shape[1]}")
    data = x.data @ w.data + b.data

    def backward():
        g = out.grad
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    out = _make(data, "linear", (x, w, b), backward)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization of x:(N,D) to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    _note_ln_amplification(ivar)
    xhat = xc * ivar
    data = gamma.data * xhat + beta.data

    def backward():
        g = out.grad
        _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        dxhat = g * gamma.data
        dx = ivar * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    out = _make(data, "layer_norm", (x, gamma, beta), backward)
    return out


def take_column(m, j):
    """Select column j of m:(Q,T) -> (Q,). Backward scatters into that column."""
    m = _as_tensor(m)
    j = int(j)
    if not 0 <= j < m.data.shape[1]:
        raise IndexError(f"column {j} out of range for shape {m.data.shape}")
    data = m.data[:, j].copy()

    def backward():
        g = np.zeros_like(m.data)
        g[:, j] = out.grad
        _accumulate(m, g)

    out = _make(data, "take_column", (m,), backward)
    return out


# ---------------------------------------------------------------------------
# sampling and filtering
# ---------------------------------------------------------------------------


def bilinear_sample(grid, coords):
    """Sample grid:(Q,Gh,Gw) at coords:(N,2) given as (x, y) in grid units.

    Out-of-range coordinates clamp to the border. Backward reaches both the
    grid values and the coordinates (the warp perturbs coords, so coordinate
    gradients are required); clamped coords get zero coordinate gradient.
    """
    grid, coords = _as_tensor(grid), _as_tensor(coords)
    q, gh, gw = grid.data.shape
    if coords.requires_grad or coords.parents:
        # interpolation is kinked on the integer lattice; only coords that can
        # move under differentiation matter
        _note_kink_margin(np.abs(coords.data - np.round(coords.data)))
    cx = np.clip(coords.data[:, 0], 0.0, gw - 1.0)
    cy = np.clip(coords.data[:, 1], 0.0, gh - 1.0)
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, max(gw - 2, 0))
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, max(gh - 2, 0))
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx = (cx - x0).astype(grid.data.dtype)
    fy = (cy - y0).astype(grid.data.dtype)

    flat = grid.data.reshape(q, gh * gw)
    i00 = y0 * gw + x0
    i10 = y0 * gw + x1
    i01 = y1 * gw + x0
    i11 = y1 * gw + x1
    g00, g10, g01, g11 = flat[:, i00], flat[:, i10], flat[:, i01], flat[:, i11]

    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    data = (g00 * w00 + g10 * w10 + g01 * w01 + g11 * w11).T

    inside_x = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < gw - 1.0)
    inside_y = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < gh - 1.0)

    def backward():
        g = out.grad.T  # (Q, N)
        if grid.requires_grad or grid.parents:
            gg = np.zeros_like(flat)
            np.add.at(gg, (slice(None), i00), g * w00)
            np.add.at(gg, (slice(None), i10), g * w10)
            np.add.at(gg, (slice(None), i01), g * w01)
            np.add.at(gg, (slice(None), i11), g * w11)
            _accumulate(grid, gg.reshape(q, gh, gw))
        if coords.requires_grad or coords.parents:
            dx = ((g10 - g00) * (1 - fy) + (g11 - g01) * fy) * g
            dy = ((g01 - g00) * (1 - fx) + (g11 - g10) * fx) * g
            gc = np.empty_like(coords.data)
            gc[:, 0] = dx.sum(axis=0) * inside_x
            gc[:, 1] = dy.sum(axis=0) * inside_y
            _accumulate(coords, gc)

    out = _make(data, "bilinear_sample", (grid, coords), backward)
    return out


def gaussian_kernel1d(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gauss_blur2d(x, kernel1d):
    """Separable symmetric filtering over the two leading axes of (H,W) or (H,W,C).

    Zero padding makes the operator self-adjoint for a symmetric kernel, so
    backward is the same filter applied to the upstream gradient.
    """
    x = _as_tensor(x)
    k = np.asarray(kernel1d, dtype=x.data.dtype)

    def apply(a):
        a = correlate1d(a, k, axis=0, mode="constant", cval=0.0)
        return correlate1d(a, k, axis=1, mode="constant", cval=0.0)

    data = apply(x.data)

    def backward():
        _accumulate(x, apply(out.grad))

    out = _make(data, "gauss_blur2d", (x,), backward)
    return out


def external_scalar(x, value, grad_wrt_x):
    """Opaque scalar whose value and pixel-gradient come from outside the graph.

    Bridges oracle-evaluated losses into backward: d(value)/dx is taken to be
    `grad_wrt_x` (same shape as x).
    """
    x = _as_tensor(x)
    grad_wrt_x = np.asarray(grad_wrt_x, dtype=x.data.dtype)
    if grad_wrt_x.shape != x.data.shape:
        raise ShapeError(
            f"external gradient shape {grad_wrt_x.shape} does not match input {x.data.shape}"
        )
    if not np.all(np.isfinite(grad_wrt_x)):
        raise ValueError("external gradient contains non-finite values")
    data = np.asarray(value, dtype=x.data.dtype)

    def backward():
        _accumulate(x, out.grad * grad_wrt_x)

    out = _make(data, "external_scalar", (x,), backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(build, params, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    `build` is a callable () -> scalar Tensor re-running the forward from the
    given leaf `params` (dict name -> Tensor, float64). Relative error is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8), maximized over every
    element of every parameter.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params, {name} is {p.data.dtype}")
        p.zero_grad()
    out = build()
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar output")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build().item()
            flat[i] = orig - h
            f_minus = build().item()
            flat[i] = orig
            cd = (f_plus - f_minus) / (2.0 * h)
            err = abs(a[i] - cd) / max(abs(a[i]), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
