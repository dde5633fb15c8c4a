"""Minimal deterministic reverse-mode tensor kernel.

Every operation records a closure that maps the output gradient to the
operand gradients; ``backward`` walks the recorded graph in reverse
topological order.  Gradients reach parameters and, when the input tensor
is flagged with ``requires_grad``, the input signal itself, which is what
path-integral attribution needs.

Data is float64 throughout.  Ops accept a single sample or a leading
batch dimension:

* ``conv1d_same``   (C, L) or (B, C, L)
* ``linear_affine`` (N,) or (B, N)
* ``layer_norm``, ``elu``, ``sigmoid`` over the last axis / elementwise
* ``max_pool1d``    (..., L) with even L
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError
from .rng import Rng


class Tensor:
    """Dense n-d value with an optional gradient buffer.

    ``requires_grad`` marks leaves whose ``grad`` buffer is populated by
    ``backward``; outputs of ops inherit graph membership automatically.
    Repeated backward calls accumulate into ``grad`` until ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _track(data, parents, backprop) -> Tensor:
    """Build an op output, recording the graph only where gradients can flow."""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable ``requires_grad`` leaf.

    The loss must be scalar.  Grad buffers accumulate additively across
    calls; reset them with ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))

    # Gradient arrays are shared, never mutated in place: accumulation always
    # allocates, so handing `g` to a leaf without copying is safe.
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._backprop is None:
            continue
        for parent, pg in node._backprop(g):
            if not (parent.requires_grad or parent._parents):
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# forward operators
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backprop(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _track(data, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backprop(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _track(data, (a, b), backprop)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backprop(g):
        return ((a, g * c),)

    return _track(a.data * c, (a,), backprop)


def tsum(a: Tensor) -> Tensor:
    def backprop(g):
        return ((a, np.full_like(a.data, float(g))),)

    return _track(np.asarray(a.data.sum()), (a,), backprop)


def raster(a: Tensor) -> Tensor:
    """Row-major flatten; a leading batch axis is preserved."""
    if a.data.ndim > 2:
        shape = (a.data.shape[0], -1)
    else:
        shape = (-1,)
    data = a.data.reshape(shape)

    def backprop(g):
        return ((a, g.reshape(a.data.shape)),)

    return _track(data, (a,), backprop)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backprop(g):
        return ((a, g.reshape(a.data.shape)),)

    return _track(data, (a,), backprop)


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1-D cross-correlation with zero padding.

    x: (C, L) or (B, C, L); w: (F, C, K) with K odd; b: (F,).
    out[c, t] = b[c] + sum_{i,j} w[c, i, j] * padded_x[i, t + j]
    """
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 3:
        raise DimensionError(f"conv weights must be rank 3, got shape {wd.shape}")
    fil, cin, k = wd.shape
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if bd.shape != (fil,):
        raise DimensionError(f"bias shape {bd.shape} does not match {fil} filters")
    batched = xd.ndim == 3
    xb = xd if batched else xd[None]
    if xb.ndim != 3 or xb.shape[1] != cin:
        raise DimensionError(
            f"conv input shape {xd.shape} incompatible with weights {wd.shape}")
    nb, _, length = xb.shape
    pad = (k - 1) // 2

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, L, K)
    cols = windows.transpose(0, 2, 1, 3).reshape(nb, length, cin * k)
    wmat = wd.reshape(fil, cin * k)
    out = cols @ wmat.T + bd  # (B, L, F)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if not batched:
        out = out[0]

    def backprop(g):
        gb3 = g if batched else g[None]
        gl = gb3.transpose(0, 2, 1)  # (B, L, F)
        grad_w = (gl.reshape(-1, fil).T @ cols.reshape(-1, cin * k)).reshape(wd.shape)
        grad_b = gl.sum(axis=(0, 1))
        gcols = (gl @ wmat).reshape(nb, length, cin, k).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + length] += gcols[:, :, :, j]
        grad_x = gxp[:, :, pad:pad + length]
        if not batched:
            grad_x = grad_x[0]
        return ((x, grad_x), (w, grad_w), (b, grad_b))

    return _track(out, (x, w, b), backprop)


def linear_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out = w @ x + b for a vector, row-wise for a batch. w: (M, N), b: (M,)."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2:
        raise DimensionError(f"weights must be rank 2, got shape {wd.shape}")
    m, n = wd.shape
    if bd.shape != (m,):
        raise DimensionError(f"bias shape {bd.shape} does not match {m} outputs")
    if xd.shape[-1] != n or xd.ndim not in (1, 2):
        raise DimensionError(f"input shape {xd.shape} incompatible with weights {wd.shape}")
    out = xd @ wd.T + bd

    def backprop(g):
        if xd.ndim == 1:
            grad_w = np.outer(g, xd)
            grad_b = g
            grad_x = g @ wd
        else:
            grad_w = g.T @ xd
            grad_b = g.sum(axis=0)
            grad_x = g @ wd
        return ((x, grad_x), (w, grad_w), (b, grad_b))

    return _track(out, (x, w, b), backprop)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance."""
    xd = x.data
    n = xd.shape[-1]
    if n < 2:
        raise DimensionError("layer_norm needs at least 2 entries")
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise DimensionError(
            f"gamma/beta shapes {gamma.data.shape}/{beta.data.shape} do not match width {n}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backprop(g):
        sum_axes = tuple(range(g.ndim - 1))
        grad_gamma = (g * xhat).sum(axis=sum_axes)
        grad_beta = g.sum(axis=sum_axes)
        gx = g * gamma.data
        # d/dx of (x - mean) / sqrt(var + eps) with population variance
        grad_x = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ((x, grad_x), (gamma, grad_gamma), (beta, grad_beta))

    return _track(out, (x, gamma, beta), backprop)


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg = np.exp(np.minimum(xd, 0.0)) - 1.0
    out = np.where(xd >= 0.0, xd, neg)

    def backprop(g):
        return ((x, g * np.where(xd >= 0.0, 1.0, neg + 1.0)),)

    return _track(out, (x,), backprop)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backprop(g):
        return ((x, g * out * (1.0 - out)),)

    return _track(out, (x,), backprop)


def max_pool1d(x: Tensor, k: int = 2) -> Tensor:
    """Max over disjoint windows of the last axis; ties take the first index."""
    if k != 2:
        raise UsageError(f"pooling kernel {k} unsupported; contract is k=2")
    xd = x.data
    length = xd.shape[-1]
    if length % 2 != 0:
        raise DimensionError(f"max_pool1d needs even length, got {length}")
    pairs = xd.reshape(xd.shape[:-1] + (length // 2, 2))
    arg = pairs.argmax(axis=-1)
    out = np.take_along_axis(pairs, arg[..., None], axis=-1)[..., 0]

    def backprop(g):
        gp = np.zeros_like(pairs)
        np.put_along_axis(gp, arg[..., None], g[..., None], axis=-1)
        return ((x, gp.reshape(xd.shape)),)

    return _track(out, (x,), backprop)


def bce_loss(p: Tensor, y) -> Tensor:
    """Binary cross-entropy, averaged over the batch.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the log; the clamp
    zeroes the gradient where it binds.
    """
    yd = np.asarray(y, dtype=np.float64)
    pd = p.data
    if pd.shape != yd.shape:
        raise DimensionError(f"prediction shape {pd.shape} != label shape {yd.shape}")
    pc = np.clip(pd, 1e-7, 1.0 - 1e-7)
    n = max(pd.size, 1)
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc)).sum() / n

    def backprop(g):
        inside = (pd > 1e-7) & (pd < 1.0 - 1e-7)
        grad = np.where(inside, (pc - yd) / (pc * (1.0 - pc)), 0.0) / n
        return ((p, float(g) * grad),)

    return _track(np.asarray(loss), (p,), backprop)


def mse_loss(yhat: Tensor, y) -> Tensor:
    """Mean of squared elementwise differences."""
    yd = np.asarray(y, dtype=np.float64)
    if yhat.data.shape != yd.shape:
        raise DimensionError(f"shape {yhat.data.shape} != target shape {yd.shape}")
    diff = yhat.data - yd
    n = max(diff.size, 1)
    loss = (diff * diff).sum() / n

    def backprop(g):
        return ((yhat, float(g) * 2.0 * diff / n),)

    return _track(np.asarray(loss), (yhat,), backprop)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 norm of a - b over the last axis; subgradient 0 at a == b."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backprop(g):
        safe = np.where(d > 0.0, d, 1.0)
        unit = diff / safe[..., None]
        unit = np.where(d[..., None] > 0.0, unit, 0.0)
        ga = np.asarray(g)[..., None] * unit
        return ((a, ga), (b, -ga))

    return _track(d, (a, b), backprop)


# ---------------------------------------------------------------------------
# optimizer and initialization
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, frozen=frozenset()) -> AdamState:
    """One bias-corrected Adam update over named parameter tensors.

    Frozen names are skipped entirely (weights and moments untouched).
    A missing grad counts as zero.
    """
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        if name in frozen:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise DimensionError(
                f"optimizer state shape {m.shape} != param shape {p.data.shape} for '{name}'")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        denom = np.sqrt(v)
        denom /= math.sqrt(c2)
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= state.lr / c1
        p.data -= denom
    return state


def xavier_init(shape, rng: Rng) -> Tensor:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    Rank 2 is (out, in); rank 3 is (filters, in_channels, kernel) with
    fan_in = in_channels * kernel and fan_out = filters * kernel.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 3:
        fil, cin, k = shape
        fan_in, fan_out = cin * k, fil * k
    else:
        raise UsageError(f"no fan_in/fan_out interpretation for shape {shape}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)
