"""
Layers of the convolutional recurrent network with hand-written backward passes.

Activations are plain numpy arrays: (B, C, T, D) through the convolutional
stack and (B, T, F) through the recurrent part. Each layer keeps what its
backward pass needs from the last forward call, so a layer instance must not
be shared between concurrent forward passes.
"""

import math
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

from .errors import ShapeError


class Parameter:
    """A named trainable array with its gradient accumulator"""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Layer:
    def parameters(self) -> List[Parameter]:
        return []

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# ---------------------------------------------------------------- convolution

def conv2d_3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution (cross-correlation) with zero padding of 1.

    x is (C_in, T, D) or (B, C_in, T, D); kernel is (C_out, C_in, 3, 3).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3) or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_3x3: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} does not match {kernel.shape[0]} output channels")

    B, _, T, D = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, kernel.shape[0], T, D), dtype=np.result_type(x, kernel))
    for i in range(3):
        for j in range(3):
            out += np.einsum("bctd,oc->botd", xp[:, :, i:i + T, j:j + D], kernel[:, :, i, j], optimize=True)
    out += bias[None, :, None, None]
    return out[0] if squeeze else out


class Conv2d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32, slope: float = 0.1):
        # He-uniform for leaky activations
        bound = math.sqrt(6.0 / ((1.0 + slope ** 2) * c_in * 9))
        self.weight = Parameter(f"{name}.weight", rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return conv2d_3x3(x, self.weight.data, self.bias.data)

    def backward(self, grad):
        x = self._x
        _, _, T, D = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        dxp = np.zeros_like(xp, dtype=np.result_type(x, grad))
        w = self.weight.data
        for i in range(3):
            for j in range(3):
                self.weight.grad[:, :, i, j] += np.einsum("botd,bctd->oc", grad, xp[:, :, i:i + T, j:j + D], optimize=True)
                dxp[:, :, i:i + T, j:j + D] += np.einsum("botd,oc->bctd", grad, w[:, :, i, j], optimize=True)
        self.bias.grad += grad.sum(axis=(0, 2, 3))
        return dxp[:, :, 1:-1, 1:-1]


# ---------------------------------------------------------------- batch norm

def _channel_count(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return np.full(x.shape[1], x.shape[0] * x.shape[2] * x.shape[3], dtype=np.float64)
    return np.broadcast_to(mask, x.shape).sum(axis=(0, 2, 3)).astype(np.float64)


def batch_norm(x, scale, shift, running_mean, running_var, mode: str = "eval",
               mask=None, momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalisation of a (B, C, T, D) tensor.

    Train mode uses (masked) batch statistics and updates the running
    statistics in place; eval mode uses the running statistics.
    """
    out, _ = _batch_norm(x, scale, shift, running_mean, running_var, mode == "train", mask, momentum, eps)
    return out


def _batch_norm(x, scale, shift, running_mean, running_var, training, mask, momentum, eps):
    axes = (0, 2, 3)
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: {x.shape[1]} channels but scale {scale.shape}, shift {shift.shape}")
    bc = (None, slice(None), None, None)
    if training:
        m = np.ones((1, 1, 1, 1), dtype=x.dtype) if mask is None else mask.astype(x.dtype)
        n = _channel_count(x, mask)
        safe_n = np.maximum(n, 1.0)
        mean = (x * m).sum(axis=axes) / safe_n
        centered = (x - mean[bc]) * m
        var = (centered ** 2).sum(axis=axes) / safe_n
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[bc]
        running_mean *= (1.0 - momentum)
        running_mean += (momentum * mean).astype(running_mean.dtype)
        unbiased = var * n / np.maximum(n - 1.0, 1.0)
        running_var *= (1.0 - momentum)
        running_var += (momentum * unbiased).astype(running_var.dtype)
        cache = (xhat, inv_std, m, n, True)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[bc]) * inv_std[bc]
        cache = (xhat, inv_std, None, None, False)
    out = (scale[bc] * xhat + shift[bc]).astype(x.dtype)
    return out, cache


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.scale = Parameter(f"{name}.scale", np.ones(channels, dtype=dtype))
        self.shift = Parameter(f"{name}.shift", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def parameters(self):
        return [self.scale, self.shift]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, mask=None, training: bool = False):
        out, self._cache = _batch_norm(x, self.scale.data, self.shift.data, self.running_mean,
                                       self.running_var, training, mask, self.momentum, self.eps)
        return out

    def backward(self, grad):
        xhat, inv_std, m, n, training = self._cache
        axes = (0, 2, 3)
        bc = (None, slice(None), None, None)
        if training:
            grad = grad * m
        self.scale.grad += (grad * xhat).sum(axis=axes)
        self.shift.grad += grad.sum(axis=axes)
        dxhat = grad * self.scale.data[bc]
        if not training:
            return dxhat * inv_std[bc]
        safe_n = np.maximum(n, 1.0)
        sum_d = dxhat.sum(axis=axes)
        sum_dx = (dxhat * xhat).sum(axis=axes)
        dx = (inv_std / safe_n)[bc] * (safe_n[bc] * dxhat - sum_d[bc] - xhat * sum_dx[bc])
        return (dx * m).astype(grad.dtype)


# ---------------------------------------------------------------- activations

def leaky_relu(x, slope: float = 0.1):
    return np.where(x >= 0, x, slope * x)


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.1):
        self.slope = slope
        self._x = None

    def forward(self, x):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, grad):
        return grad * np.where(self._x >= 0, 1.0, self.slope).astype(grad.dtype)


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = expit(x)
        return self._y

    def backward(self, grad):
        return grad * self._y * (1.0 - self._y)


# ---------------------------------------------------------------- L4 pooling

def _pad_right(x, stride_t: int, stride_d: int):
    pad_t = (-x.shape[-2]) % stride_t
    pad_d = (-x.shape[-1]) % stride_d
    if pad_t or pad_d:
        x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, pad_t), (0, pad_d)])
    return x


def l4_pool(x, stride_t: int, stride_d: int):
    """Power-mean (p=4) of magnitudes over non-overlapping windows.

    The input is right-zero-padded so both axes divide by their stride.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    xp = _pad_right(x, stride_t, stride_d)
    B, C, T, D = xp.shape
    windows = xp.reshape(B, C, T // stride_t, stride_t, D // stride_d, stride_d)
    out = np.mean(windows ** 4, axis=(3, 5)) ** 0.25
    return out[0] if squeeze else out


class L4Pool(Layer):
    def __init__(self, stride_t: int, stride_d: int):
        self.stride_t = stride_t
        self.stride_d = stride_d
        self._cache = None

    def forward(self, x):
        y = l4_pool(x, self.stride_t, self.stride_d)
        self._cache = (x, y)
        return y

    def backward(self, grad):
        x, y = self._cache
        shape = x.shape
        st, sd = self.stride_t, self.stride_d
        xp = _pad_right(x, st, sd)
        B, C, T, D = xp.shape
        windows = xp.reshape(B, C, T // st, st, D // sd, sd)
        y3 = (y ** 3)[:, :, :, None, :, None]
        coef = np.divide(grad[:, :, :, None, :, None], (st * sd) * y3,
                         out=np.zeros_like(y3), where=y3 > 0)
        dx = (coef * windows ** 3).reshape(B, C, T, D)
        return dx[:, :, :shape[2], :shape[3]]


# ---------------------------------------------------------------- recurrent

def gru_forward(x, w_ih, w_hh, b_ih, b_hh):
    """Single-direction GRU over (B, T, F) from a zero initial state.

    Gates are stacked (reset, update, candidate) along the 3H axis.
    Returns the (B, T, H) outputs and the per-step cache used by gru_backward.
    """
    B, T, _ = x.shape
    H = w_hh.shape[1]
    gi = x @ w_ih.T + b_ih
    h = np.zeros((B, H), dtype=gi.dtype)
    out = np.empty((B, T, H), dtype=gi.dtype)
    steps = []
    for t in range(T):
        gh = h @ w_hh.T + b_hh
        r = expit(gi[:, t, :H] + gh[:, :H])
        z = expit(gi[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, t, 2 * H:] + r * gh[:, 2 * H:])
        steps.append((h, r, z, n, gh[:, 2 * H:]))
        h = (1.0 - z) * n + z * h
        out[:, t] = h
    return out, (x, steps)


def gru_backward(grad_out, cache, w_ih, w_hh):
    x, steps = cache
    B, T, _ = x.shape
    H = w_hh.shape[1]
    dgi = np.zeros((B, T, 3 * H), dtype=grad_out.dtype)
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * H, dtype=w_hh.dtype)
    dh = np.zeros((B, H), dtype=grad_out.dtype)
    for t in reversed(range(T)):
        h_prev, r, z, n, ghn = steps[t]
        dh = dh + grad_out[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dn_pre = dn * (1.0 - n ** 2)
        dr = dn_pre * ghn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dgi[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dw_hh += dgh.T @ h_prev
        db_hh += dgh.sum(axis=0)
        dh = dh * z + dgh @ w_hh
    dw_ih = np.einsum("btg,btf->gf", dgi, x, optimize=True)
    db_ih = dgi.sum(axis=(0, 1))
    dx = dgi @ w_ih
    return dx, dw_ih, dw_hh, db_ih, db_hh


class GRU(Layer):
    def __init__(self, name: str, input_size: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(hidden)

        def init(shape):
            return rng.uniform(-bound, bound, shape).astype(dtype)

        self.w_ih = Parameter(f"{name}.w_ih", init((3 * hidden, input_size)))
        self.w_hh = Parameter(f"{name}.w_hh", init((3 * hidden, hidden)))
        self.b_ih = Parameter(f"{name}.b_ih", init((3 * hidden,)))
        self.b_hh = Parameter(f"{name}.b_hh", init((3 * hidden,)))
        self._cache = None

    def parameters(self):
        return [self.w_ih, self.w_hh, self.b_ih, self.b_hh]

    def forward(self, x):
        out, self._cache = gru_forward(x, self.w_ih.data, self.w_hh.data, self.b_ih.data, self.b_hh.data)
        return out

    def backward(self, grad):
        dx, dw_ih, dw_hh, db_ih, db_hh = gru_backward(grad, self._cache, self.w_ih.data, self.w_hh.data)
        self.w_ih.grad += dw_ih
        self.w_hh.grad += dw_hh
        self.b_ih.grad += db_ih
        self.b_hh.grad += db_hh
        return dx


def reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-item index that reverses each sequence within its valid length"""
    t = np.arange(T)[None, :]
    lengths = np.asarray(lengths)[:, None]
    return np.where(t < lengths, lengths - 1 - t, t)


def bgru_forward(x, params: Dict[str, tuple], lengths=None):
    """Bidirectional GRU: (T, F) or (B, T, F) -> (..., T, 2H).

    params holds 'forward' and 'backward' tuples of (w_ih, w_hh, b_ih, b_hh).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, T, _ = x.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    rows = np.arange(B)[:, None]
    idx = reverse_index(lengths, T)
    fw, _ = gru_forward(x, *params["forward"])
    bw, _ = gru_forward(x[rows, idx], *params["backward"])
    out = np.concatenate([fw, bw[rows, idx]], axis=-1)
    return out[0] if squeeze else out


class BiGRU(Layer):
    def __init__(self, name: str, input_size: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden = hidden
        self.fw = GRU(f"{name}.forward", input_size, hidden, rng, dtype)
        self.bw = GRU(f"{name}.backward", input_size, hidden, rng, dtype)
        self._idx = None

    def parameters(self):
        return self.fw.parameters() + self.bw.parameters()

    def forward(self, x, lengths=None):
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        rows = np.arange(B)[:, None]
        self._idx = (rows, reverse_index(lengths, T))
        fw = self.fw.forward(x)
        bw = self.bw.forward(x[self._idx])
        return np.concatenate([fw, bw[self._idx]], axis=-1)

    def backward(self, grad):
        H = self.hidden
        dx = self.fw.backward(np.ascontiguousarray(grad[..., :H]))
        dx_rev = self.bw.backward(np.ascontiguousarray(grad[..., H:][self._idx]))
        return dx + dx_rev[self._idx]


# ---------------------------------------------------------------- dense head

class Dense(Layer):
    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        bound = math.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(f"{name}.weight", rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features, dtype=dtype))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad):
        x = self._x
        self.weight.grad += np.einsum("...o,...i->oi", grad, x, optimize=True)
        self.bias.grad += grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return grad @ self.weight.data


# ---------------------------------------------------------------- temporal pooling

def linear_softmax_pool(probs, mask=None):
    """Clip probability sum_t y_t^2 / sum_t y_t over valid frames.

    probs is (T, E) or (B, T, E); mask is (T,) or (B, T) validity flags.
    An event whose frame sum is zero pools to zero.
    """
    if mask is None:
        mask = np.ones(probs.shape[:-1], dtype=probs.dtype)
    m = np.asarray(mask, dtype=probs.dtype)[..., None]
    s1 = (probs * m).sum(axis=-2)
    s2 = (probs ** 2 * m).sum(axis=-2)
    return np.divide(s2, s1, out=np.zeros_like(s1), where=s1 > 0)


def linear_softmax_pool_backward(probs, mask, grad_out):
    if mask is None:
        mask = np.ones(probs.shape[:-1], dtype=probs.dtype)
    m = np.asarray(mask, dtype=probs.dtype)[..., None]
    s1 = (probs * m).sum(axis=-2)
    pooled = linear_softmax_pool(probs, mask)
    scale = np.divide(grad_out, s1, out=np.zeros_like(s1), where=s1 > 0)
    return m * (2.0 * probs - pooled[..., None, :]) * scale[..., None, :]
