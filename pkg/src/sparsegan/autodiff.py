"""Dense-tensor library with reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float32 by default, float64 in the
shadow mode used for gradient checking). Operations record themselves on
an implicit tape in execution order; ``backward(loss)`` replays the tape
in reverse exactly once and then consumes it, so a second backward
without a fresh forward raises.

Broadcasting is deliberately restricted: binary elementwise ops require
equal shapes, and the only broadcast forms are a channel vector over
NCHW (``bias_add``/``channel_mul``) and scalar scaling.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes incompatible with the operation."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph that a previous backward consumed."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


# Debug-mode finiteness check on every op output.
DEBUG_FINITE = os.environ.get("SPARSEGAN_DEBUG_FINITE", "") not in ("", "0")

_grad_enabled = True
_seq_counter = 0


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        # Leaves carry a persistent gradient buffer; interior nodes get
        # transient buffers during backward only.
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._seq = -1
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def relu(self):
        return relu(self)

    def leaky_relu(self, alpha=0.2):
        return leaky_relu(self, alpha)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def clamp_min(self, lo):
        return clamp_min(self, lo)

    def reshape(self, shape):
        return reshape(self, shape)

    def mean_all(self):
        return mean_all(self)

    def sum_all(self):
        return sum_all(self)

    def l1_norm(self):
        return l1_norm(self)

    def l2_norm(self):
        return l2_norm(self)

    def frobenius_sq(self):
        return frobenius_sq(self)

    def backward(self):
        backward(self)


def zeros(shape, dtype=np.float32, requires_grad=False):
    t = Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)
    return t


# ---------------------------------------------------------------------------
# tape plumbing
# ---------------------------------------------------------------------------

def _record_op(out_data, parents, backward_fn):
    """Wrap an op result in a Tensor, recording it on the tape if needed."""
    global _seq_counter
    if DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("op produced non-finite values")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        _seq_counter += 1
        out._seq = _seq_counter
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    """Add a gradient contribution to a tensor during backward."""
    if not t.requires_grad:
        return
    if t.grad is not None:  # leaf
        t.grad += g
    else:
        t.grad = g.copy()


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss; consumes the recorded graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward on an already-consumed graph")
    if loss._backward is None:
        if loss.requires_grad and loss.grad is not None:
            loss.grad += np.ones_like(loss.data)
        return

    # Collect the reachable recorded subgraph.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._consumed:
            raise GraphConsumedError("backward reached a node consumed by a previous backward")
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    # Creation order is a topological order, so reverse-sorting by
    # sequence id visits every node after all of its consumers.
    nodes.sort(key=lambda t: t._seq, reverse=True)

    leaf_grads = {}  # interior accumulation buffers live on .grad temporarily
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    del leaf_grads

    for node in nodes:
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        # consume: free closures and interior buffers
        node._backward = None
        node._consumed = True
        node.grad = None


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _record_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return _record_op(ad * bd, (a, b), bwd)


def scale(a: Tensor, c) -> Tensor:
    """a * c for a python scalar or a 0-d Tensor (gradient flows to both)."""
    if isinstance(c, Tensor):
        if c.data.size != 1:
            raise ShapeError(f"scale: scalar tensor expected, got shape {c.shape}")
        cv = float(c.data.reshape(()))
        ad = a.data

        def bwd(g):
            _accumulate(a, g * cv)
            _accumulate(c, np.asarray(np.sum(g * ad), dtype=ad.dtype).reshape(c.shape))

        return _record_op(ad * cv, (a, c), bwd)

    cf = float(c)

    def bwd(g):
        _accumulate(a, g * cf)

    return _record_op(a.data * np.asarray(cf, dtype=a.dtype), (a,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accumulate(x, g * mask)

    return _record_op(np.where(mask, x.data, 0), (x,), bwd)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    mask = x.data > 0
    slope = np.where(mask, x.dtype.type(1), x.dtype.type(alpha))

    def bwd(g):
        _accumulate(x, g * slope)

    return _record_op(x.data * slope, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1 - out * out))

    return _record_op(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Numerically stable two-sided form.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        _accumulate(x, g * out * (1 - out))

    return _record_op(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    d = x.data

    def bwd(g):
        _accumulate(x, g / d)

    return _record_op(np.log(d), (x,), bwd)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo

    def bwd(g):
        _accumulate(x, g * mask)

    return _record_op(np.maximum(x.data, x.dtype.type(lo)), (x,), bwd)


def soft_threshold(x: Tensor, theta) -> Tensor:
    """sign(x) * max(|x| - theta, 0); subgradient 0 at the kink.

    ``theta`` may be a positive float or a positive 0-d Tensor (gradient
    flows into it in the latter case).
    """
    theta_t = theta if isinstance(theta, Tensor) else None
    tv = float(theta_t.data.reshape(())) if theta_t is not None else float(theta)
    if tv <= 0:
        raise ValueError(f"soft_threshold: theta must be positive, got {tv}")
    d = x.data
    mask = np.abs(d) > tv
    sgn = np.sign(d)
    out = np.where(mask, d - sgn * d.dtype.type(tv), 0)

    def bwd(g):
        _accumulate(x, g * mask)
        if theta_t is not None:
            dtheta = -np.sum(g * sgn * mask)
            _accumulate(theta_t, np.asarray(dtheta, dtype=d.dtype).reshape(theta_t.shape))

    parents = (x, theta_t) if theta_t is not None else (x,)
    return _record_op(out, parents, bwd)


# ---------------------------------------------------------------------------
# channel-vector broadcasting over NCHW (smallest sufficient rule set)
# ---------------------------------------------------------------------------

def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: NCHW + (C,), or 2-D rows + (K,)."""
    if x.data.ndim == 4 and b.shape == (x.shape[1],):
        out = x.data + b.data[None, :, None, None]

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    elif x.data.ndim == 2 and b.shape == (x.shape[1],):
        out = x.data + b.data[None, :]

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=0))

    else:
        raise ShapeError(f"bias_add: cannot broadcast {b.shape} over {x.shape}")
    return _record_op(out, (x, b), bwd)


def channel_mul(x: Tensor, w: Tensor) -> Tensor:
    """Multiply NCHW by a per-channel weight vector (C,)."""
    if x.data.ndim != 4 or w.shape != (x.shape[1],):
        raise ShapeError(f"channel_mul: cannot broadcast {w.shape} over {x.shape}")
    wcol = w.data[None, :, None, None]
    xd = x.data

    def bwd(g):
        _accumulate(x, g * wcol)
        _accumulate(w, (g * xd).sum(axis=(0, 2, 3)))

    return _record_op(xd * wcol, (x, w), bwd)


# ---------------------------------------------------------------------------
# matrix / shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    return _record_op(ad @ bd, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bwd(g):
        _accumulate(x, g.reshape(old))

    return _record_op(np.ascontiguousarray(x.data.reshape(shape)), (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {x.shape}")

    def bwd(g):
        _accumulate(x, np.ascontiguousarray(g.T))

    return _record_op(np.ascontiguousarray(x.data.T), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _check_nonempty(x: Tensor, op: str):
    if x.data.size == 0:
        raise ShapeError(f"{op}: empty tensor of shape {x.shape}")


def global_average_pool(x: Tensor) -> Tensor:
    """NCHW -> NC11, averaging each channel's spatial plane."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_average_pool expects NCHW, got shape {x.shape}")
    _check_nonempty(x, "global_average_pool")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def bwd(g):
        _accumulate(x, np.broadcast_to(g * inv, x.shape).astype(x.dtype, copy=False))

    return _record_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    _check_nonempty(x, "mean_all")
    inv = x.dtype.type(1.0 / x.data.size)

    def bwd(g):
        _accumulate(x, np.full_like(x.data, g.reshape(()) * inv))

    return _record_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    _check_nonempty(x, "sum_all")

    def bwd(g):
        _accumulate(x, np.full_like(x.data, g.reshape(())))

    return _record_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


def l1_norm(x: Tensor) -> Tensor:
    _check_nonempty(x, "l1_norm")
    sgn = np.sign(x.data)

    def bwd(g):
        _accumulate(x, g.reshape(()) * sgn)

    return _record_op(np.asarray(np.abs(x.data).sum(), dtype=x.dtype), (x,), bwd)


def l2_norm(x: Tensor) -> Tensor:
    _check_nonempty(x, "l2_norm")
    nrm = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
    d = x.data

    def bwd(g):
        if nrm > 0:
            _accumulate(x, (g.reshape(()) / x.dtype.type(nrm)) * d)

    return _record_op(np.asarray(nrm, dtype=x.dtype), (x,), bwd)


def frobenius_sq(x: Tensor) -> Tensor:
    _check_nonempty(x, "frobenius_sq")
    d = x.data

    def bwd(g):
        _accumulate(x, (2 * g.reshape(())) * d)

    return _record_op(np.asarray((d * d).sum(), dtype=x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _pad_nchw(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input NCHW, weight OIHW."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input/weight, got {x.shape} and {w.shape}")
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with padding {padding}")

    ker = backend.kernels()
    xp = _pad_nchw(x.data, padding)
    col = ker.im2col(xp, kh, kw, stride, oh, ow)  # (n*oh*ow, ci*kh*kw)
    wmat = w.data.reshape(co, -1)
    out_mat = col @ wmat.T
    out = np.ascontiguousarray(out_mat.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))

    def bwd(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(-1, co))
        if w.requires_grad:
            _accumulate(w, (g_mat.T @ col).reshape(w.shape))
        if x.requires_grad:
            dcol = g_mat @ wmat
            dxp = ker.col2im(dcol, n, ci, h + 2 * padding, wd + 2 * padding, kh, kw, stride, oh, ow)
            dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
            _accumulate(x, np.ascontiguousarray(dx))

    return _record_op(out, (x, w), bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution, input NCHW, weight (C_in, C_out, kh, kw).

    Adjoint of conv2d: for mirrored stride/padding it restores the
    spatial dims that the matching conv2d reduced.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-d input/weight, got {x.shape} and {w.shape}")
    n, ci, h, wd = x.shape
    ci2, co, kh, kw = w.shape
    if ci != ci2:
        raise ShapeError(f"conv_transpose2d: input channels {x.shape} do not match weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose2d: invalid stride={stride} padding={padding}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output collapses for input {x.shape}, weight {w.shape}, padding {padding}")

    ker = backend.kernels()
    x_mat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1).reshape(-1, ci))
    wmat = w.data.reshape(ci, -1)  # (ci, co*kh*kw)
    dcol = x_mat @ wmat
    outp = ker.col2im(dcol, n, co, ho + 2 * padding, wo + 2 * padding, kh, kw, stride, h, wd)
    out = outp[:, :, padding : padding + ho, padding : padding + wo] if padding else outp
    out = np.ascontiguousarray(out)

    def bwd(g):
        gp = _pad_nchw(g, padding)
        col_g = ker.im2col(gp, kh, kw, stride, h, wd)  # (n*h*wd, co*kh*kw)
        if x.requires_grad:
            dx_mat = col_g @ wmat.T
            _accumulate(x, np.ascontiguousarray(dx_mat.reshape(n, h, wd, ci).transpose(0, 3, 1, 2)))
        if w.requires_grad:
            _accumulate(w, (x_mat.T @ col_g).reshape(w.shape))

    return _record_op(out, (x, w), bwd)
