"""Reverse-mode differentiable tensor kernels.

A small numpy-backed autograd engine: every operation builds a node in a
computation graph and registers a closure that propagates gradients to its
parents. The op set is exactly what the segmentation model needs (matmul,
single-head attention, transformer encoder layers, 3x3 conv + batchnorm +
relu, bilinear upsampling, softmax cross-entropy) plus an AdamW step and a
finite-difference gradient checker used as the independent verification
route for every differentiable kernel.

All math is float64. Gradients accumulate into ``Tensor.grad`` so a batch
can be processed sample by sample with a deterministic reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EmptyKeyError, LabelError, NumericError


class Tensor:
    """Dense n-dimensional array of float64 with an optional gradient buffer.

    ``requires_grad`` marks leaves that should receive gradients; interior
    nodes inherit it from their parents. ``backward()`` runs reverse-mode
    accumulation from a scalar output.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar tensor."""
        if self.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data, _parents=tuple(p for p in parents if p.requires_grad or p._parents))
    out.requires_grad = any(p.requires_grad or p._parents for p in parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data + b.data, (a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data * b.data, (a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = _bw
    return out


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    out = _node(x.data * s, (x,))

    def _bw(g):
        x._accumulate(g * s)

    out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _node(a.data / b.data, (a, b))

    def _bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = _bw
    return out


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.data)
    out = _node(y, (x,))

    def _bw(g):
        x._accumulate(g * 0.5 / y)

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with gradient accumulation into both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b))

    def _bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = _bw
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.transpose(x.data, axes), (x,))
    inv = None if axes is None else tuple(np.argsort(axes))

    def _bw(g):
        x._accumulate(np.transpose(g, inv))

    out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = _node(x.data.reshape(shape), (x,))

    def _bw(g):
        x._accumulate(g.reshape(x.shape))

    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.maximum(x.data, 0.0), (x,))
    mask = x.data > 0.0

    def _bw(g):
        x._accumulate(g * mask)

    out._backward = _bw
    return out


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = _node(y, (x,))

    def _bw(g):
        x._accumulate(g * (1.0 - y * y))

    out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    out = _node(y, (x,))

    def _bw(g):
        x._accumulate(g * y)

    out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _node(np.log(x.data), (x,))

    def _bw(g):
        x._accumulate(g / x.data)

    out._backward = _bw
    return out


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = _node(x.data.sum(axis=axis, keepdims=keepdims), (x,))

    def _bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.shape).copy())

    out._backward = _bw
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (x,))

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate((g - dot) * y)

    out._backward = _bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _node(y, (x,))
    sm = np.exp(y)

    def _bw(g):
        x._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta))

    def _bw(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv)
        axes = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))

    out._backward = _bw
    return out


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    Differentiable through all three inputs. Output rows are convex
    combinations of the value rows.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-D")
    if k.shape[0] == 0:
        raise EmptyKeyError("attention requires at least one key row")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key/value row mismatch: {k.shape} vs {v.shape}")
    d = q.shape[1]
    weights = softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d)), axis=-1)
    return matmul(weights, v)


@dataclass
class TransformerLayerParams:
    """Weights for one post-LN transformer encoder layer."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in (
            "wq", "wk", "wv", "wo", "ln1_gamma", "ln1_beta",
            "w1", "b1", "w2", "b2", "ln2_gamma", "ln2_beta")}


def init_transformer_layer(d: int, ffn_hidden: int, rng: np.random.Generator) -> TransformerLayerParams:
    def lin(n_in, n_out):
        s = math.sqrt(2.0 / (n_in + n_out))
        return Tensor(rng.normal(0.0, s, size=(n_in, n_out)), requires_grad=True)

    return TransformerLayerParams(
        wq=lin(d, d), wk=lin(d, d), wv=lin(d, d), wo=lin(d, d),
        ln1_gamma=Tensor(np.ones(d), requires_grad=True),
        ln1_beta=Tensor(np.zeros(d), requires_grad=True),
        w1=lin(d, ffn_hidden), b1=Tensor(np.zeros(ffn_hidden), requires_grad=True),
        w2=lin(ffn_hidden, d), b2=Tensor(np.zeros(d), requires_grad=True),
        ln2_gamma=Tensor(np.ones(d), requires_grad=True),
        ln2_beta=Tensor(np.zeros(d), requires_grad=True),
    )


def transformer_encoder_layer(x: Tensor, params: TransformerLayerParams) -> Tensor:
    """Self-attention + position-wise FFN, each with residual then layer norm."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"expected non-empty N x d input, got {x.shape}")
    attn = matmul(cross_attention(matmul(x, params.wq), matmul(x, params.wk), matmul(x, params.wv)), params.wo)
    h = layer_norm(add(x, attn), params.ln1_gamma, params.ln1_beta)
    ff = add(matmul(relu(add(matmul(h, params.w1), params.b1)), params.w2), params.b2)
    out = layer_norm(add(h, ff), params.ln2_gamma, params.ln2_beta)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite activations in transformer layer")
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution with padding 1 (spatial size preserved), via im2col."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 3:
        raise DimensionError(f"conv input must be C x H x W, got {x.shape}")
    c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c or w.shape[2:] != (3, 3):
        raise DimensionError(f"kernel shape {w.shape} incompatible with input channels {c}")
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * wd, c * 9)
    wm = w.data.reshape(cout, c * 9)
    out_flat = cols @ wm.T + b.data
    out = _node(out_flat.T.reshape(cout, h, wd), (x, w, b))

    def _bw(g):
        gm = g.reshape(cout, h * wd).T  # (HW, Cout)
        w._accumulate((gm.T @ cols).reshape(w.shape))
        b._accumulate(g.sum(axis=(1, 2)))
        dcols = (gm @ wm).reshape(h, wd, c, 3, 3)
        dxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky:ky + h, kx:kx + wd] += dcols[:, :, :, ky, kx].transpose(2, 0, 1)
        x._accumulate(dxp[:, 1:h + 1, 1:wd + 1])

    out._backward = _bw
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm; updated in training mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def batch_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                  training: bool) -> Tensor:
    """Per-channel normalization over the spatial axes of a C x H x W map.

    Training mode normalizes with batch statistics and updates the running
    averages (momentum 0.1); eval mode uses the running averages only.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 3 or x.shape[0] != gamma.size:
        raise DimensionError(f"batchnorm channel mismatch: {x.shape} vs {gamma.size}")
    c = x.shape[0]
    if training:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = _node(xhat * gamma.data[:, None, None] + beta.data[:, None, None], (x, gamma, beta))

    def _bw(g):
        gamma._accumulate((g * xhat).sum(axis=(1, 2)))
        beta._accumulate(g.sum(axis=(1, 2)))
        dxhat = g * gamma.data[:, None, None]
        if training:
            n = x.shape[1] * x.shape[2]
            m1 = dxhat.mean(axis=(1, 2))
            m2 = (dxhat * xhat).mean(axis=(1, 2))
            dx = (dxhat - m1[:, None, None] - xhat * m2[:, None, None]) * inv[:, None, None]
        else:
            dx = dxhat * inv[:, None, None]
        x._accumulate(dx)

    out._backward = _bw
    return out


@dataclass
class ConvBnParams:
    """One Conv(3x3)-BN-ReLU stage."""

    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b, "gamma": self.gamma, "beta": self.beta}


def init_conv_bn(c_in: int, c_out: int, rng: np.random.Generator) -> ConvBnParams:
    s = math.sqrt(2.0 / (c_in * 9))
    return ConvBnParams(
        w=Tensor(rng.normal(0.0, s, size=(c_out, c_in, 3, 3)), requires_grad=True),
        b=Tensor(np.zeros(c_out), requires_grad=True),
        gamma=Tensor(np.ones(c_out), requires_grad=True),
        beta=Tensor(np.zeros(c_out), requires_grad=True),
        bn=BatchNormState(running_mean=np.zeros(c_out), running_var=np.ones(c_out)),
    )


def conv3x3_bn_relu(x: Tensor, params: ConvBnParams, training: bool = False) -> Tensor:
    """Conv(3x3, pad 1) -> batchnorm -> max(0, .); spatial size preserved."""
    return relu(batch_norm_2d(conv3x3(x, params.w, params.b), params.gamma, params.beta,
                              params.bn, training))


_UPSAMPLE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row-interpolation matrix mapping n samples to n*factor samples.

    Half-pixel-center convention (align-corners disabled): output index i
    samples source coordinate (i + 0.5)/factor - 0.5, clamped at the edges.
    Rows are convex, so constants and min/max bounds are preserved.
    """
    key = (n, factor)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        lo = math.floor(src)
        t = src - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - t
        m[i, hi_c] += t
    _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of a C x H x W map by an integer factor."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"upsample input must be C x H x W, got {x.shape}")
    if factor == 1:
        return x
    _, h, w = x.shape
    ah = _upsample_matrix(h, factor)
    aw_t = _upsample_matrix(w, factor).T
    out = _node(np.matmul(np.matmul(ah, x.data), aw_t), (x,))

    def _bw(g):
        x._accumulate(np.matmul(np.matmul(ah.T, g), aw_t.T))

    out._backward = _bw
    return out


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double both spatial extents (the decoder's per-stage upsampling)."""
    return bilinear_upsample(x, 2)


def patchify(x: Tensor, patch: int) -> Tensor:
    """Split C x H x W into a (H/p * W/p) x (C*p*p) matrix of flattened patches."""
    x = _as_tensor(x)
    c, h, w = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    view = x.data.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    out = _node(view.reshape(gh * gw, c * patch * patch), (x,))

    def _bw(g):
        gg = g.reshape(gh, gw, c, patch, patch).transpose(2, 0, 3, 1, 4)
        x._accumulate(gg.reshape(c, h, w))

    out._backward = _bw
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of -[Y log p_fg + (1-Y) log p_bg].

    ``logits`` is 2 x H x W (background, foreground); ``labels`` is an H x W
    array over {0, 1}.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise DimensionError(f"expected 2 x H x W logits, got {logits.shape}")
    if labels.shape != logits.shape[1:]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise LabelError("labels must be binary {0, 1}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits")
    y = labels.astype(np.float64)
    onehot = Tensor(np.stack([1.0 - y, y]))
    logp = log_softmax(logits, axis=0)
    h, w = labels.shape
    return scale(tsum(mul(logp, onehot)), -1.0 / (h * w))


@dataclass
class AdamWState:
    """Optimizer state: step count and per-parameter moment buffers."""

    lr: float = 5e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns the new parameter arrays.

    Deterministic given identical inputs and state. Moment buffers are
    created lazily on the first step and must shape-match thereafter.
    """
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    new_params: dict[str, np.ndarray] = {}
    for name in params:
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name] = p - state.lr * (update + state.weight_decay * p)
    return new_params


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare f's analytic gradient at x against central finite differences.

    Returns the worst relative error over the checked coordinates, with
    relative error |fd - an| / max(|fd|, |an|, 1). ``max_coords`` limits the
    check to a random coordinate subset (seeded via ``rng``) so large models
    stay cheap; by default every coordinate is probed.
    """
    out = f(x)
    val = out.item()
    if not math.isfinite(val):
        raise NumericError("f(x) is not finite")
    x.zero_grad()
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    idxs = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        if rng is None:
            rng = np.random.default_rng(0)
        idxs = rng.choice(flat.size, size=max_coords, replace=False)
    an_flat = analytic.reshape(-1)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * eps)
        rel = abs(fd - an_flat[i]) / max(abs(fd), abs(an_flat[i]), 1.0)
        worst = max(worst, rel)
    return worst
