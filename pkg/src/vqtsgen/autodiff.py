"""Dense-array reverse-mode autodiff engine.

Defines the Tensor graph node, the differentiable kernels used by every
trainable model in the package (conv1d, linear, softmax, layer norm,
attention building blocks, losses, snake), the AdamW optimizer, and the
warmup+cosine learning-rate schedule.

float32 is the training dtype; every op preserves the dtype of its inputs,
so verification suites can run the identical graph in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation (slow; meant for debugging and tests)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """A dense array plus an optional gradient slot and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; fills .grad on every
        parameter reachable from it."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by a forward op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    else:
        out.requires_grad = False
        out._parents = ()
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may be shared with a sibling branch or reused by the caller
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and shape ops ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _back(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = _back
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _back(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = _back
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _result(y, (x,))
    if out.requires_grad:
        out._backward = lambda g: _accum(x, g * y)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(x.data.reshape(shape), (x,))
    if out.requires_grad:
        out._backward = lambda g: _accum(x, g.reshape(x.data.shape))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _result(x.data.transpose(axes), (x,))
    if out.requires_grad:
        inv = tuple(np.argsort(axes))
        out._backward = lambda g: _accum(x, g.transpose(inv))
    return out


def concat(parts: list[Tensor], axis: int) -> Tensor:
    out = _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum(sizes)[:-1]
        def _back(g):
            for p, piece in zip(parts, np.split(g, offsets, axis=axis)):
                _accum(p, piece)
        out._backward = _back
    return out


def pad_zeros(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis by (left, right)."""
    width = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    out = _result(np.pad(x.data, width), (x,))
    if out.requires_grad:
        L = x.data.shape[-1]
        out._backward = lambda g: _accum(x, g[..., left:left + L])
    return out


def pad_right_edge(x: Tensor, n: int, axis: int = -1) -> Tensor:
    """Extend an axis by n copies of its final value."""
    if n == 0:
        return x
    axis = axis % x.data.ndim
    idx_last = [slice(None)] * x.data.ndim
    idx_last[axis] = slice(-1, None)
    tail = np.repeat(x.data[tuple(idx_last)], n, axis=axis)
    out = _result(np.concatenate([x.data, tail], axis=axis), (x,))
    if out.requires_grad:
        L = x.data.shape[axis]
        def _back(g):
            head = [slice(None)] * g.ndim
            head[axis] = slice(0, L)
            rest = [slice(None)] * g.ndim
            rest[axis] = slice(L, None)
            gx = g[tuple(head)].copy()
            last = [slice(None)] * g.ndim
            last[axis] = L - 1
            gx[tuple(last)] += g[tuple(rest)].sum(axis=axis)
            _accum(x, gx)
        out._backward = _back
    return out


def crop_to(x: Tensor, length: int, axis: int = -1) -> Tensor:
    """Keep the first `length` entries of an axis."""
    axis = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(0, length)
    out = _result(x.data[tuple(idx)], (x,))
    if out.requires_grad:
        def _back(g):
            gx = np.zeros_like(x.data)
            gx[tuple(idx)] = g
            _accum(x, gx)
        out._backward = _back
    return out


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    if out.requires_grad:
        def _back(g):
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))
        out._backward = _back
    return out


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else (
        np.prod([x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- nonlinearities ----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0
        out._backward = lambda g: _accum(x, g * mask)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: 0.5*x*(1 + erf(x/sqrt(2)))."""
    d = x.data
    phi = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    out = _result(d * phi, (x,))
    if out.requires_grad:
        dens = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        out._backward = lambda g: _accum(x, g * (phi + d * dens))
    return out


def snake(x: Tensor, alpha: Tensor) -> Tensor:
    """Periodic-bias activation x + sin^2(alpha*x)/alpha; alpha must be positive.

    alpha broadcasts against x (per-channel alphas use shape [1, C, 1]).
    """
    if np.any(alpha.data <= 0):
        raise ValueError("snake requires alpha > 0")
    a, d = alpha.data, x.data
    s = np.sin(a * d)
    out = _result(d + s * s / a, (x, alpha))
    if out.requires_grad:
        def _back(g):
            s2 = np.sin(2.0 * a * d)
            _accum(x, g * (1.0 + s2))
            ga = g * (d * s2 / a - (s * s) / (a * a))
            _accum(alpha, _unbroadcast(ga, alpha.data.shape))
        out._backward = _back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (x,))
    if out.requires_grad:
        def _back(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))
        out._backward = _back
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _result(y, (x,))
    if out.requires_grad:
        def _back(g):
            _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        out._backward = _back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    gain/bias broadcast against the normalized tensor: [D] for sequence
    features [B, N, D], [C, 1] for per-channel affine on maps [B, C, L].
    """
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _back(g):
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
            _accum(bias, _unbroadcast(g, bias.data.shape))
        out._backward = _back
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with identical stacked leading dims on both operands."""
    if a.data.ndim != b.data.ndim:
        raise ValueError("matmul operands must have equal ndim; lift with reshape")
    out = _result(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def _back(g):
            _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
            _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))
        out._backward = _back
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ w (+ b), x: [..., in], w: [in, out]."""
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y.reshape(*lead, w.data.shape[1]), parents)
    if out.requires_grad:
        def _back(g):
            g2 = g.reshape(-1, g.shape[-1])
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
            _accum(w, x2.T @ g2)
            if b is not None:
                _accum(b, g2.sum(axis=0))
        out._backward = _back
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution, x: [B, C, L], w: [O, C, k] -> [B, O, L'].

    L' = floor((L + 2*padding - dilation*(k-1) - 1)/stride) + 1.
    """
    B, C, L = x.data.shape
    O, Cw, k = w.data.shape
    if Cw != C:
        raise ConfigurationError(f"conv1d channel mismatch: input has {C}, weight expects {Cw}")
    if k < 1 or dilation < 1 or stride < 1:
        raise ConfigurationError("conv1d requires k >= 1, dilation >= 1, stride >= 1")
    span = dilation * (k - 1) + 1
    if L + 2 * padding < span:
        raise ConfigurationError(
            f"conv1d receptive span {span} exceeds padded length {L + 2 * padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # im2col: windows [B, C, L', k] gathered with dilation, then one BLAS matmul
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=2)[:, :, ::stride, ::dilation]
    Lp = win.shape[2]
    cols = win.transpose(0, 2, 1, 3).reshape(B * Lp, C * k)
    y = cols @ w.data.reshape(O, C * k).T
    if b is not None:
        y = y + b.data
    y = y.reshape(B, Lp, O).transpose(0, 2, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = _result(np.ascontiguousarray(y), parents)
    if out.requires_grad:
        def _back(g):
            g2 = g.transpose(0, 2, 1).reshape(B * Lp, O)
            if b is not None:
                _accum(b, g2.sum(axis=0))
            _accum(w, (g2.T @ cols).reshape(O, C, k))
            if x.requires_grad:
                gcols = (g2 @ w.data.reshape(O, C * k)).reshape(B, Lp, C, k).transpose(0, 2, 3, 1)
                gxp = np.zeros_like(xp)
                for j in range(k):
                    start = j * dilation
                    gxp[:, :, start:start + stride * Lp:stride] += gcols[:, :, j, :]
                _accum(x, gxp[:, :, padding:padding + L] if padding else gxp)
        out._backward = _back
    return out


def _window_cols(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int]:
    """im2col for channels-last maps: [B, Lp_in, C] -> ([B*Lp, k*C], Lp)."""
    B, Lp_in, C = xp.shape
    Lp = (Lp_in - k) // stride + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Lp, k, C), strides=(s0, stride * s1, s1, s2))
    return win.reshape(B * Lp, k * C), Lp


def conv1d_cl(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
              padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Channels-last 1-D convolution, x: [B, L, C], w: [k, C, O] -> [B, L', O].

    Same arithmetic as conv1d, laid out so each im2col row is one contiguous
    memcpy; this is the fast path the models train through. Asymmetric
    padding supports even kernel widths.
    """
    B, L, C = x.data.shape
    k, Cw, O = w.data.shape
    if Cw != C:
        raise ConfigurationError(f"conv1d_cl channel mismatch: input has {C}, weight expects {Cw}")
    left, right = padding
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0))) if (left or right) else x.data
    if xp.shape[1] < k:
        raise ConfigurationError(f"conv1d_cl kernel {k} exceeds padded length {xp.shape[1]}")
    w2 = w.data.reshape(k * C, O)
    pointwise = (k == 1 and stride == 1)
    if pointwise:
        cols, Lp = xp.reshape(B * xp.shape[1], C), xp.shape[1]
    else:
        cols, Lp = _window_cols(xp, k, stride)
    y = cols @ w2
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _result(y.reshape(B, Lp, O), parents)
    if out.requires_grad:
        def _back(g):
            g2 = g.reshape(B * Lp, O)
            if b is not None:
                _accum(b, g2.sum(axis=0))
            _accum(w, (cols.T @ g2).reshape(k, C, O))
            if not x.requires_grad:
                return
            if pointwise:
                gxp = (g2 @ w2.T).reshape(xp.shape)
            elif stride == 1:
                # grad wrt input is a full convolution with the flipped kernel
                gpad = np.pad(g.reshape(B, Lp, O), ((0, 0), (k - 1, k - 1), (0, 0)))
                gcols, _ = _window_cols(gpad, k, 1)
                wflip = np.ascontiguousarray(w.data[::-1].swapaxes(1, 2)).reshape(k * O, C)
                gxp = (gcols @ wflip).reshape(xp.shape)
            else:
                gcols = (g2 @ w2.T).reshape(B, Lp, k, C)
                gxp = np.zeros_like(xp)
                for j in range(k):
                    gxp[:, j:j + stride * Lp:stride, :] += gcols[:, :, j, :]
            _accum(x, gxp[:, left:left + L, :] if (left or right) else gxp)
        out._backward = _back
    return out


def upsample2(x: Tensor, axis: int = -1) -> Tensor:
    """Nearest-neighbor x2 upsampling along the given axis."""
    axis = axis % x.data.ndim
    out = _result(np.repeat(x.data, 2, axis=axis), (x,))
    if out.requires_grad:
        def _back(g):
            shape = list(x.data.shape)
            shape.insert(axis + 1, 2)
            _accum(x, g.reshape(shape).sum(axis=axis + 1))
        out._backward = _back
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table [V, D] indexed by an integer array -> [*ids.shape, D]."""
    ids = np.asarray(ids)
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def _back(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accum(table, gt)
        out._backward = _back
    return out


# -- losses ------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over rows; optional per-row weights.

    Weighted rows with weight 0 contribute nothing to value or gradient,
    which is what masked-token training relies on.
    """
    t = np.asarray(targets)
    M, K = logits.data.shape
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(M), t]
    if weights is None:
        denom = float(M)
        val = nll.sum() / denom
    else:
        weights = np.asarray(weights, dtype=logits.data.dtype)
        denom = float(weights.sum())
        if denom <= 0:
            raise ValueError("cross_entropy: weights sum to zero")
        val = (nll * weights).sum() / denom
    out = _result(np.asarray(val, dtype=logits.data.dtype), (logits,))
    if out.requires_grad:
        def _back(g):
            p = np.exp(logp)
            p[np.arange(M), t] -= 1.0
            if weights is not None:
                p *= weights[:, None]
            _accum(logits, g * p / denom)
        out._backward = _back
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred.data - target.data
    out = _result(np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype), (pred, target))
    if out.requires_grad:
        def _back(g):
            s = np.sign(diff) * (g / diff.size)
            _accum(pred, s.astype(pred.data.dtype, copy=False))
            _accum(target, -s.astype(target.data.dtype, copy=False))
        out._backward = _back
    return out


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = pred.data - target.data
    out = _result(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), (pred, target))
    if out.requires_grad:
        def _back(g):
            s = diff * (2.0 * g / diff.size)
            _accum(pred, s.astype(pred.data.dtype, copy=False))
            _accum(target, -s.astype(target.data.dtype, copy=False))
        out._backward = _back
    return out


# -- modules -----------------------------------------------------------------


class Module:
    """Minimal parameter container with recursive named collection."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: dict[str, Tensor]) -> None:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                value._collect(key + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{key}.{i}.", out)
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ConfigurationError(f"checkpoint missing parameters: {missing[:4]}")
        for name, t in params.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(t.data.shape):
                raise ConfigurationError(
                    f"checkpoint shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(src, dtype=t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None


# -- optimizer and schedule ----------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam; moments are stored per parameter name."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"_step": np.array([self.step_count], dtype=np.int64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["_step"][0])
        for k in self.params:
            self.m[k] = np.ascontiguousarray(arrays[f"m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.ascontiguousarray(arrays[f"v.{k}"], dtype=self.v[k].dtype)


@dataclass
class LrSchedule:
    """Linear warmup to `initial`, then cosine decay to `final` at `total_steps`."""
    initial: float
    final: float
    warmup_steps: int
    total_steps: int


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    w, total = schedule.warmup_steps, schedule.total_steps
    if step >= total:
        return schedule.final
    if w > 0 and step < w:
        return schedule.initial * step / w
    span = max(total - w, 1)
    progress = (step - w) / span
    return schedule.final + 0.5 * (schedule.initial - schedule.final) * (1.0 + math.cos(math.pi * progress))


# -- layer helpers shared by the models ---------------------------------------


def he_conv_weight(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype) -> Tensor:
    scale = math.sqrt(2.0 / (c_in * k))
    return parameter(rng.normal(0.0, scale, size=(c_out, c_in, k)), dtype=dtype)


def glorot_matrix(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> Tensor:
    scale = math.sqrt(2.0 / (d_in + d_out))
    return parameter(rng.normal(0.0, scale, size=(d_in, d_out)), dtype=dtype)


class Conv1d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 dilation: int = 1, padding: int = 0, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.w = he_conv_weight(rng, c_out, c_in, k, dtype)
        self.b = parameter(np.zeros(c_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b, stride=self.stride,
                      dilation=self.dilation, padding=self.padding)


class ConvCL(Module):
    """Channels-last conv layer; `padding` is symmetric int or a (left, right) pair."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1,
                 padding=0, dtype=DEFAULT_DTYPE):
        self.stride = stride
        self.padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
        scale = math.sqrt(2.0 / (c_in * k))
        self.w = parameter(rng.normal(0.0, scale, size=(k, c_in, c_out)), dtype=dtype)
        self.b = parameter(np.zeros(c_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_cl(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=DEFAULT_DTYPE):
        self.w = glorot_matrix(rng, d_in, d_out, dtype)
        self.b = parameter(np.zeros(d_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    """Affine layer norm over the last axis; `shape` sets the affine broadcast."""

    def __init__(self, shape, dtype=DEFAULT_DTYPE):
        self.g = parameter(np.ones(shape), dtype=dtype)
        self.b = parameter(np.zeros(shape), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)


def attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              num_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention on [B, N, D]."""
    B, N, D = x.data.shape
    if D % num_heads:
        raise ConfigurationError(f"model dim {D} not divisible by {num_heads} heads")
    dh = D // num_heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, N, num_heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, wq))
    k = split_heads(linear(x, wk))
    v = split_heads(linear(x, wv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, N, D))
    return linear(merged, wo)


class SelfAttention(Module):
    def __init__(self, rng, dim: int, num_heads: int, dtype=DEFAULT_DTYPE):
        self.num_heads = num_heads
        self.wq = glorot_matrix(rng, dim, dim, dtype)
        self.wk = glorot_matrix(rng, dim, dim, dtype)
        self.wv = glorot_matrix(rng, dim, dim, dtype)
        self.wo = glorot_matrix(rng, dim, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return attention(x, self.wq, self.wk, self.wv, self.wo, self.num_heads)
