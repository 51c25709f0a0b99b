"""Small NHWC layer set with hand-written reverse-mode gradients.

Only what the convolutional VAE needs: 4x4 convolutions and transposed
convolutions, batch normalization, ReLU, Xavier-uniform init and Adam.
Tensors are plain numpy arrays laid out as (batch, height, width, channels).
Conv kernels are (kh, kw, c_in, c_out); transposed-conv kernels use the layout
of the convolution they transpose, i.e. (kh, kw, c_out, c_in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


class NonFiniteError(FloatingPointError):
    """A forward pass or gradient produced NaN/Inf."""


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NonFiniteError(f"{bad} non-finite values in {where} (shape {a.shape})")
    return a


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving ceil(size / stride) outputs.

    Odd totals put the extra row after, so a 4x4 kernel at stride 2 pads 1/1
    (32 -> 16 -> 8 -> 4) and at stride 1 pads 1/2.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv_pads(h: int, w: int, k: int, stride: int, padding: str) -> tuple[int, int, int, int]:
    if padding == "valid":
        return 0, 0, 0, 0
    if padding != "same":
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return same_pads(h, k, stride) + same_pads(w, k, stride)


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if size < k:
        raise ValueError(f"valid convolution needs input >= kernel ({size} < {k})")
    return (size - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return size * stride
    return (size - 1) * stride + k


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _check_rank4(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ValueError(f"{name} must be rank 4, got shape {a.shape}")


# ---------------------------------------------------------------------------
# Convolution primitives
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, Ho, Wo, C, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = kernel.shape
    return kernel.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)


def _conv_forward(x, kernel, stride, pads):
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ValueError(
            f"channel mismatch: input has {x.shape[3]} channels, kernel expects {cin} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, stride)
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n * ho * wo, cin * kh * kw)
    out = cols @ _kernel_matrix(kernel)
    return out.reshape(n, ho, wo, cout), cols


def _conv_grad_input(g, kernel, stride, pads, in_shape):
    kh, kw, cin, cout = kernel.shape
    n, ho, wo, _ = g.shape
    pt, pb, pl, pr = pads
    gcols = (g.reshape(-1, cout) @ _kernel_matrix(kernel).T).reshape(n, ho, wo, cin, kh, kw)
    hp, wp = in_shape[1] + pt + pb, in_shape[2] + pl + pr
    dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[..., i, j]
    return dxp[:, pt : pt + in_shape[1], pl : pl + in_shape[2], :]


def _conv_grad_kernel(cols, g, kernel_shape):
    kh, kw, cin, cout = kernel_shape
    dk = cols.T @ g.reshape(-1, cout)
    return dk.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Cross-correlation of an NHWC batch with a (kh, kw, c_in, c_out) kernel."""
    _check_rank4("input", x)
    _check_rank4("kernel", kernel)
    _check_stride(stride)
    pads = conv_pads(x.shape[1], x.shape[2], kernel.shape[0], stride, padding)
    if padding == "valid":
        conv_output_size(x.shape[1], kernel.shape[0], stride, padding)
        conv_output_size(x.shape[2], kernel.shape[1], stride, padding)
    return _conv_forward(x, kernel, stride, pads)[0]


def deconv2d(y: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Transposed convolution: the adjoint of ``conv2d`` with the same kernel.

    ``kernel`` is (kh, kw, c_out, c_in) where c_in == y.shape[-1].
    """
    _check_rank4("input", y)
    _check_rank4("kernel", kernel)
    _check_stride(stride)
    if y.shape[3] != kernel.shape[3]:
        raise ValueError(
            f"channel mismatch: input has {y.shape[3]} channels, kernel expects {kernel.shape[3]} "
            f"(input {y.shape}, kernel {kernel.shape})"
        )
    kh, kw = kernel.shape[:2]
    ho = deconv_output_size(y.shape[1], kh, stride, padding)
    wo = deconv_output_size(y.shape[2], kw, stride, padding)
    out_shape = (y.shape[0], ho, wo, kernel.shape[2])
    pads = conv_pads(ho, wo, kh, stride, padding)
    return _conv_grad_input(y, kernel, stride, pads, out_shape)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors, their gradients, Adam moments and BN buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.asarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.asarray(value, dtype=self.dtype)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            kind, name = key.split("/", 1)
            target = self.params if kind == "param" else self.buffers
            if name not in target:
                raise KeyError(f"unknown tensor {key!r}")
            if target[name].shape != value.shape:
                raise ValueError(f"shape mismatch for {key}: {target[name].shape} vs {value.shape}")
            target[name][...] = value

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def xavier_bound(shape: tuple[int, ...]) -> float:
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: tuple[int, ...], seed, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform sample; ``seed`` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = xavier_bound(shape)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def adam_step(store: ParamStore, config: AdamConfig, step: int, grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update, in place. Raises NonFiniteError before touching anything."""
    if step < 1:
        raise ValueError("step counts from 1")
    grads = store.grads if grads is None else grads
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, g in grads.items():
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        store.params[name] -= update.astype(store.dtype, copy=False)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    def forward(self, x: np.ndarray, train: bool = False, record: bool = True) -> np.ndarray:
        """``record=False`` skips caching for backward, so frozen inference is reentrant."""
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int,
                 padding: str = "same", k: int = 4, rng=None):
        _check_stride(stride)
        self.store, self.name = store, name
        self.stride, self.padding, self.k = stride, padding, k
        self.wname, self.bname = f"{name}.kernel", f"{name}.bias"
        store.add(self.wname, xavier_init((k, k, cin, cout), rng, store.dtype))
        store.add(self.bname, np.zeros(cout))

    def forward(self, x, train=False, record=True):
        kernel = self.store.params[self.wname]
        pads = conv_pads(x.shape[1], x.shape[2], self.k, self.stride, self.padding)
        out, cols = _conv_forward(x, kernel, self.stride, pads)
        if record:
            self._cache = (cols, pads, x.shape)
        return out + self.store.params[self.bname]

    def backward(self, g):
        cols, pads, in_shape = self._cache
        kernel = self.store.params[self.wname]
        self.store.grads[self.wname] += _conv_grad_kernel(cols, g, kernel.shape)
        self.store.grads[self.bname] += g.sum(axis=(0, 1, 2))
        return _conv_grad_input(g, kernel, self.stride, pads, in_shape)


class Deconv2d(Layer):
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, stride: int,
                 padding: str = "same", k: int = 4, rng=None):
        _check_stride(stride)
        self.store, self.name = store, name
        self.stride, self.padding, self.k = stride, padding, k
        self.wname, self.bname = f"{name}.kernel", f"{name}.bias"
        store.add(self.wname, xavier_init((k, k, cout, cin), rng, store.dtype))
        store.add(self.bname, np.zeros(cout))

    def forward(self, y, train=False, record=True):
        kernel = self.store.params[self.wname]
        ho = deconv_output_size(y.shape[1], self.k, self.stride, self.padding)
        wo = deconv_output_size(y.shape[2], self.k, self.stride, self.padding)
        pads = conv_pads(ho, wo, self.k, self.stride, self.padding)
        out = _conv_grad_input(y, kernel, self.stride, pads, (y.shape[0], ho, wo, kernel.shape[2]))
        if record:
            self._cache = (y, pads)
        return out + self.store.params[self.bname]

    def backward(self, g):
        y, pads = self._cache
        kernel = self.store.params[self.wname]
        gy, gcols = _conv_forward(g, kernel, self.stride, pads)
        # d/dK of <g, deconv(y, K)> == conv-kernel gradient with input g and output-grad y
        self.store.grads[self.wname] += _conv_grad_kernel(gcols, y, kernel.shape)
        self.store.grads[self.bname] += g.sum(axis=(0, 1, 2))
        return gy


class BatchNorm(Layer):
    def __init__(self, store: ParamStore, name: str, channels: int,
                 momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        self.store, self.name = store, name
        self.momentum, self.epsilon = momentum, epsilon
        self.gname, self.bname = f"{name}.gamma", f"{name}.beta"
        self.mname, self.vname = f"{name}.running_mean", f"{name}.running_var"
        store.add(self.gname, np.ones(channels))
        store.add(self.bname, np.zeros(channels))
        store.add_buffer(self.mname, np.zeros(channels))
        store.add_buffer(self.vname, np.ones(channels))

    def forward(self, x, train=False, record=True):
        p, buf = self.store.params, self.store.buffers
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            m = self.momentum
            buf[self.mname][...] = m * buf[self.mname] + (1 - m) * mean
            buf[self.vname][...] = m * buf[self.vname] + (1 - m) * var
        else:
            mean, var = buf[self.mname], buf[self.vname]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        if record:
            self._cache = (xhat, inv_std, train)
        return xhat * p[self.gname] + p[self.bname]

    def backward(self, g):
        xhat, inv_std, train = self._cache
        gamma = self.store.params[self.gname]
        self.store.grads[self.gname] += (g * xhat).sum(axis=(0, 1, 2))
        self.store.grads[self.bname] += g.sum(axis=(0, 1, 2))
        dxhat = g * gamma
        if not train:
            return dxhat * inv_std
        m = g.shape[0] * g.shape[1] * g.shape[2]
        s1 = dxhat.sum(axis=(0, 1, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
        return (inv_std / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=False, record=True):
        mask = x > 0
        if record:
            self._mask = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return g * self._mask


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x, train=False, record=True):
        for layer in self.layers:
            x = layer.forward(x, train, record)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis))


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return mu + np.exp(0.5 * logvar) * eps
