"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the closed set of operations the auto-encoders and heads need is
provided.  Spatial ops take (N, C, H, W) batches; a bare (C, H, W) sample
is accepted and returned unbatched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

KLD_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer.

    ``grad`` is only populated on leaf tensors with ``requires_grad`` after
    :meth:`backward`; intermediate gradients are discarded.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class LayerParams:
    """Weights and bias of one conv or dense layer.

    Conv weights are (out_channels, in_channels, kh, kw); dense weights are
    (out_dim, in_dim).  A frozen layer never receives gradients.
    """

    kind: str
    weights: Tensor
    bias: Tensor
    frozen: bool = field(default=False)

    def __post_init__(self):
        if self.kind not in ("conv", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        self._sync()

    def _sync(self):
        self.weights.requires_grad = not self.frozen
        self.bias.requires_grad = not self.frozen

    def freeze(self, frozen=True):
        self.frozen = frozen
        self._sync()
        if frozen:
            self.weights.grad = None
            self.bias.grad = None

    def tensors(self):
        return (self.weights, self.bias)

    def copy(self):
        return LayerParams(self.kind, Tensor(self.weights.data.copy()), Tensor(self.bias.data.copy()), self.frozen)


def _batched(x, op):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op} expects (C, H, W) or (N, C, H, W), got shape {x.shape}")


def conv2d(x, params):
    """Stride-1 cross-correlation with zero 'same' padding, plus bias."""
    x = as_tensor(x)
    xd, single = _batched(x, "conv2d")
    w, b = params.weights, params.bias
    if w.ndim != 4:
        raise ShapeError(f"conv2d filter bank must be 4-d, got {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input has {xd.shape[1]} channels but filters expect {w.shape[1]}")
    y = kernels.conv2d_forward(xd, w.data, b.data)

    def backward(g):
        g4 = np.ascontiguousarray(g[None] if single else g)
        gx, gw, gb = kernels.conv2d_backward(xd, w.data, g4)
        return (gx[0] if single else gx), gw, gb

    return _result(y[0] if single else y, (x, w, b), backward)


def maxpool(x, ph, pw):
    """Max pooling with (ph, pw) windows; ragged trailing windows are kept."""
    if ph < 1 or pw < 1:
        raise ShapeError(f"pool sizes must be >= 1, got {ph}x{pw}")
    x = as_tensor(x)
    xd, single = _batched(x, "maxpool")
    y, idx = kernels.maxpool_forward(xd, ph, pw)

    def backward(g):
        g4 = np.ascontiguousarray(g[None] if single else g)
        gx = kernels.maxpool_backward(g4, idx, xd.shape)
        return (gx[0] if single else gx,)

    return _result(y[0] if single else y, (x,), backward)


def upsample(x, fh, fw):
    """Nearest-neighbour upsampling by integer factors."""
    if fh < 1 or fw < 1:
        raise ShapeError(f"upsample factors must be >= 1, got {fh}x{fw}")
    x = as_tensor(x)
    xd, single = _batched(x, "upsample")
    y = kernels.upsample_forward(xd, fh, fw)

    def backward(g):
        g4 = np.ascontiguousarray(g[None] if single else g)
        gx = kernels.upsample_backward(g4, fh, fw)
        return (gx[0] if single else gx,)

    return _result(y[0] if single else y, (x,), backward)


def crop(x, h, w):
    """Keep the top-left h x w block of the two trailing axes."""
    x = as_tensor(x)
    if x.shape[-2] < h or x.shape[-1] < w:
        raise ShapeError(f"cannot crop {x.shape} to {h}x{w}")
    full = x.shape

    def backward(g):
        gx = np.zeros(full)
        gx[..., :h, :w] = g
        return (gx,)

    return _result(x.data[..., :h, :w], (x,), backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    """Flatten everything after the batch axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def dense(x, params):
    """Affine map ``W x + b`` on a vector (in,) or a batch (N, in)."""
    x = as_tensor(x)
    w, b = params.weights, params.bias
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense expects trailing width {w.shape[1]}, got input shape {x.shape}")
    xd = x.data
    y = xd @ w.data.T + b.data

    def backward(g):
        if g.ndim == 1:
            return g @ w.data, np.outer(g, xd), g
        return g @ w.data, g.T @ xd, g.sum(axis=0)

    return _result(y, (x, w, b), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def total(x):
    """Sum of all elements, as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_columns(x, cols):
    """Select columns of a (N, k) or (k,) tensor."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[..., cols] = g
        return (gx,)

    return _result(x.data[..., cols], (x,), backward)


def channel_mean(x):
    """Mean over batch and spatial axes of a (N, C, H, W) or (C, H, W) tensor -> (C,)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_mean expects (C, H, W) or (N, C, H, W), got {x.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    count = x.size // (x.shape[1] if x.ndim == 4 else x.shape[0])
    shape = x.shape

    def backward(g):
        gx = g[None, :, None, None] if x.ndim == 4 else g[:, None, None]
        return (np.broadcast_to(gx / count, shape).copy(),)

    return _result(x.data.mean(axis=axes), (x,), backward)


def channel_distribution(x):
    """Softmax of the per-channel mean activation: a probability vector over channels."""
    return softmax(channel_mean(x))


def mse_loss(pred, target):
    """Mean squared difference over all elements."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _result(np.asarray((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy_loss(logits, labels):
    """-log softmax(logits)[label], averaged over the batch for 2-d logits."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"label out of range for {k} classes: {labels}")
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.shape[0] != labels.size:
        raise ShapeError(f"{z.shape[0]} logit rows but {labels.size} labels")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = (lse - shifted[rows, labels]).sum() / n
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _result(np.asarray(loss), (logits,), backward)


def smooth_distribution(p, eps=KLD_EPS):
    p = np.asarray(p, dtype=np.float64)
    p = p + eps
    return p / p.sum()


def kld(p, q, eps=KLD_EPS):
    """KL(p || q) with p a fixed reference and q differentiable.

    Both are smoothed by ``eps`` and renormalised before the logs, so the
    gradient is that of the smoothed expression.
    """
    pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    q = as_tensor(q)
    if pd.shape != q.shape or pd.ndim != 1:
        raise ShapeError(f"kld needs two equal-length vectors, got {pd.shape} and {q.shape}")
    ps = smooth_distribution(pd, eps)
    qe = q.data + eps
    z = qe.sum()
    qs = qe / z
    value = float(np.sum(ps * (np.log(ps) - np.log(qs))))

    def backward(g):
        # d/dq_j of -sum_i ps_i log((q_i + eps) / z)
        return (g * (-ps / qe + ps.sum() / z),)

    return _result(np.asarray(value), (q,), backward)


def gradient_reversal(x, lam=1.0):
    """Identity forward; multiplies the incoming gradient by -lam backward."""
    if lam < 0:
        raise ValueError(f"reversal strength must be >= 0, got {lam}")
    x = as_tensor(x)
    return _result(x.data.copy(), (x,), lambda g: (-lam * g,))
