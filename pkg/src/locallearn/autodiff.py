"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable op records a node holding its parents, a backward
closure and the arrays it keeps for the backward pass.  ``backward`` walks the
graph once in reverse topological order and releases each node's saved arrays
as it goes, which is what :class:`MemoryTracker` observes.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_local = threading.local()
_param_ids = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MemoryTracker:
    """Counts saved-activation elements that are alive on the tape.

    Parameter values referenced by a backward closure are not counted; every
    other array an op keeps for backward is, once per op.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def _add(self, n: int) -> None:
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def _release(self, n: int) -> None:
        self.live -= n

    def reset_peak(self) -> None:
        self.peak = self.live


@contextmanager
def track_memory():
    """Install a fresh :class:`MemoryTracker` for the current thread."""
    prev = getattr(_local, "tracker", None)
    tracker = MemoryTracker()
    _local.tracker = tracker
    try:
        yield tracker
    finally:
        _local.tracker = prev


def _tracker() -> MemoryTracker | None:
    return getattr(_local, "tracker", None)


class Tensor:
    """A float64 array with an optional position on the autodiff tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._saved = 0
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.id = next(_param_ids)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name or self.id}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, saved: Sequence[np.ndarray], op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
        out._saved = int(sum(a.size for a in saved))
        tr = _tracker()
        if tr is not None and out._saved:
            tr._add(out._saved)
    return out


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _act(t: Tensor) -> list[np.ndarray]:
    """Arrays to charge to the tracker when ``t`` is kept for backward."""
    return [] if isinstance(t, Parameter) else [t.data]


def detach(t: Tensor) -> Tensor:
    """Value copy of ``t`` with no tape ancestry."""
    return Tensor(t.data.copy())


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tr = _tracker()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf: parameters and user tensors created with requires_grad
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if tr is not None and node._saved:
            tr._release(node._saved)
        node._backward = None
        node._parents = ()
        node._saved = 0


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), (), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), (), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
    saved = (_act(b) if a.requires_grad else []) + (_act(a) if b.requires_grad else [])
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), saved, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), (), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), (mask,), "relu")


_SIG_EPS = 2.0 ** -53


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep strictly inside (0, 1) so BCE stays finite
    np.clip(out, _SIG_EPS, 1.0 - _SIG_EPS, out=out)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), (out,), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), (out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), _act(a), "log")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, (), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), (), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    saved = (_act(b) if a.requires_grad else []) + (_act(a) if b.requires_grad else [])

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, saved, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    saved = (_act(x) if weight.requires_grad else []) + (_act(weight) if x.requires_grad else [])

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, saved, "linear")


# ----------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (Cout, Cin, k, k).

    Padding defaults to ``k // 2`` (1 for 3x3, 0 for 1x1).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    cout, cin, k, _ = weight.shape
    pad = k // 2 if padding is None else padding
    n, _, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, weight.shape)
    xd = x.data

    def patches():
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        return _im2col(xp, k, stride, ho, wo)

    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, patches())
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    saved = _act(x) if weight.requires_grad else []

    def bw(g):
        gm = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gm, patches().transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm).reshape(n, cin, k, k, ho, wo)
            gxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, saved, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    hw = h * w
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),), (), "gap")


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((dst, src))
    scale_ = src / dst
    for o in range(dst):
        pos = max((o + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(pos)), src - 1)
        i1 = min(i0 + 1, src - 1)
        frac = pos - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of an NCHW tensor to ``size``; identity when sizes match."""
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear: expected NCHW input, got shape {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == tuple(size):
        return x
    ah, aw = _interp_matrix(h, size[0]), _interp_matrix(w, size[1])
    out = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True),), (), "upsample")


# ----------------------------------------------------------------- normalisation / regularisation

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Batch norm over N (and H, W for 4-D input).

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise _shape_error("batch_norm", x.shape, gamma.shape)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // xd.shape[1]
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    saved = [xhat, invstd] if (x.requires_grad or gamma.requires_grad) else []

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                m_ = xd.size // xd.shape[1]
                gx = (invstd.reshape(bshape) / m_) * (
                    m_ * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
            else:
                gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, saved, "batch_norm")


def dropout_mask(shape, p: float, seed: int, step: int, layer_id: int) -> np.ndarray:
    """Inverted-dropout keep mask from a counter-based generator keyed by (seed, step, layer_id)."""
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (step << 20) ^ layer_id]))
    return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)


def dropout(x: Tensor, p: float, training: bool, seed: int = 0, step: int = 0, layer_id: int = 0) -> Tensor:
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    mask = dropout_mask(x.shape, p, seed, step, layer_id)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), (mask,), "dropout")


# ----------------------------------------------------------------- losses / normalised outputs

def log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor with max subtraction.

    Entries where ``mask`` is False are excluded from the normaliser; their
    output is 0 and they receive no gradient.
    """
    if x.ndim != 2:
        raise ValueError(f"log_softmax: expected 2-D input, got shape {x.shape}")
    xd = x.data if mask is None else np.where(mask, x.data, -np.inf)
    mx = xd.max(axis=1, keepdims=True)
    shifted = xd - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    if mask is not None:
        out = np.where(mask, out, 0.0)
    probs = np.exp(out) if mask is None else np.where(mask, np.exp(out), 0.0)

    def bw(g):
        gm = g if mask is None else np.where(mask, g, 0.0)
        return (gm - probs * gm.sum(axis=1, keepdims=True),)

    return _make(out, (x,), bw, (probs,), "log_softmax")


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, y.shape)
    logp = log_softmax(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return scale(tsum(mul(logp, onehot)), -1.0 / len(y))


def binary_cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-element BCE between probabilities ``pred`` and ``target`` in [0, 1]."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise _shape_error("binary_cross_entropy", pred.shape, t.shape)
    p = pred.data
    n = p.size
    lp = np.log(p)
    l1p = np.log1p(-p)
    val = -(t * lp + (1.0 - t) * l1p).sum() / n

    def bw(g):
        return (g * (p - t) / (p * (1.0 - p)) / n,)

    return _make(np.asarray(val), (pred,), bw, (p, t), "bce")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _make(out, (x,), bw, (out, norm), "l2_normalize")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected 2-D input, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), (), "transpose")
