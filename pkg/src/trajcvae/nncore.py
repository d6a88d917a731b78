"""Small double-precision 1D CNN toolkit with hand-written reverse mode.

Tensors are ``(batch, channels, length)`` float64 arrays. Each layer keeps
the values its backward pass needs from the most recent forward call;
calling ``backward`` without a preceding ``forward`` raises.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

CHECKPOINT_FORMAT = "trajcvae-checkpoint/1"


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def conv1d_output_length(length_in: int, k: int, stride: int, pad: int) -> int:
    return (length_in + 2 * pad - k) // stride + 1


def conv_transpose1d_output_length(length_in: int, k: int, stride: int, pad: int = 0, out_pad: int = 0) -> int:
    return (length_in - 1) * stride - 2 * pad + k + out_pad


def _zero_pad(x, pad: int):
    if not pad:
        return x
    out = np.zeros(x.shape[:2] + (x.shape[2] + 2 * pad,))
    out[:, :, pad:-pad] = x
    return out


def conv1d_forward(x, weight, bias=None, stride: int = 1, pad: int = 0, name: str = "conv1d"):
    """Cross-correlation with zero padding; ``weight`` is (out_ch, in_ch, k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{name}: expected input (N, {weight.shape[1]}, L), got {x.shape}")
    length_out = conv1d_output_length(x.shape[2], weight.shape[2], stride, pad)
    if length_out < 1:
        raise ShapeError(f"{name}: output length {length_out} < 1 for input length {x.shape[2]}")
    return _corr_padded(_zero_pad(x, pad), weight, bias, stride)


def _corr_padded(xp, weight, bias, stride):
    out = kernels.corr(xp, weight, stride)
    if bias is not None:
        out += bias[None, :, None]
    return out


def conv_transpose1d_forward(x, weight, bias=None, stride: int = 1, out_pad: int = 0, pad: int = 0,
                             name: str = "conv_transpose1d"):
    """Transposed convolution; ``weight`` is (in_ch, out_ch, k).

    With zero bias this is the adjoint of :func:`conv1d_forward` using the
    same weight array.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"{name}: expected input (N, {weight.shape[0]}, L), got {x.shape}")
    k = weight.shape[2]
    length_out = conv_transpose1d_output_length(x.shape[2], k, stride, pad, out_pad)
    if length_out < 1 or (out_pad > 0 and out_pad >= stride):
        raise ShapeError(f"{name}: invalid output length {length_out} or out_pad={out_pad} >= stride={stride}")
    full = max((x.shape[2] - 1) * stride + k, pad + length_out)
    out = kernels.scatter(x, weight, stride, full)[:, :, pad : pad + length_out]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias[None, :, None]
    return out


def batchnorm1d(x, gamma, beta, running_mean, running_var, train: bool, momentum: float = 0.1,
                eps: float = 1e-5):
    """Per-channel normalization over (batch, length); updates running stats in place when training."""
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm1d: batch size must be >= 2 in train mode")
        m = x.shape[0] * x.shape[2]
        mean = x.sum(axis=(0, 2)) / m
        xc = x - mean[None, :, None]
        var = np.einsum("ncl,ncl->c", xc, xc) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    return gamma[None, :, None] * xhat + beta[None, :, None], xhat, inv_std


def leaky_relu(x, slope: float = 0.2):
    return np.where(x >= 0, x, slope * x)


def relu(x):
    return leaky_relu(x, 0.0)


def gaussian_sampler(shape, seed) -> np.ndarray:
    """Standard normal draws from a stream fully determined by ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a recorded forward pass")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    def __init__(self, in_ch, out_ch, k, stride=1, pad=0, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _uniform_init(rng, (out_ch, in_ch, k), in_ch * k)
        self.params["bias"] = _uniform_init(rng, (out_ch,), in_ch * k)

    def output_length(self, length_in):
        return conv1d_output_length(length_in, self.k, self.stride, self.pad)

    def forward(self, x, train=True):
        w, b = self.params["weight"], self.params["bias"]
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self!r}: expected input (N, {self.in_ch}, L), got {x.shape}")
        if self.output_length(x.shape[2]) < 1:
            raise ShapeError(f"{self!r}: output length {self.output_length(x.shape[2])} < 1 for input length {x.shape[2]}")
        xp = _zero_pad(x, self.pad)
        self._cache = (xp, x.shape[2])
        return _corr_padded(xp, w, b, self.stride)

    def backward(self, grad):
        xp, length_in = self._take_cache()
        self.grads["weight"] = kernels.corr_grad_w(xp, grad, self.k, self.stride)
        self.grads["bias"] = grad.sum(axis=(0, 2))
        gxp = kernels.scatter(grad, self.params["weight"], self.stride, xp.shape[2])
        return np.ascontiguousarray(gxp[:, :, self.pad : self.pad + length_in])

    def __repr__(self):
        return f"Conv1d({self.in_ch}, {self.out_ch}, k={self.k}, stride={self.stride}, pad={self.pad})"


class ConvTranspose1d(Layer):
    def __init__(self, in_ch, out_ch, k, stride=1, out_pad=0, pad=0, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.out_pad, self.pad = stride, out_pad, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _uniform_init(rng, (in_ch, out_ch, k), in_ch * k)
        self.params["bias"] = _uniform_init(rng, (out_ch,), in_ch * k)

    def output_length(self, length_in):
        return conv_transpose1d_output_length(length_in, self.k, self.stride, self.pad, self.out_pad)

    def forward(self, x, train=True):
        w, b = self.params["weight"], self.params["bias"]
        out = conv_transpose1d_forward(x, w, b, self.stride, self.out_pad, self.pad, name=repr(self))
        self._cache = (x, out.shape[2])
        return out

    def backward(self, grad):
        x, length_out = self._take_cache()
        length_in = x.shape[2]
        full = (length_in - 1) * self.stride + self.k
        gfull = np.zeros((grad.shape[0], grad.shape[1], max(full, self.pad + length_out)))
        gfull[:, :, self.pad : self.pad + length_out] = grad
        gfull = np.ascontiguousarray(gfull[:, :, :full])
        self.grads["weight"] = kernels.corr_grad_w(gfull, x, self.k, self.stride)
        self.grads["bias"] = grad.sum(axis=(0, 2))
        return kernels.corr(gfull, self.params["weight"], self.stride)

    def __repr__(self):
        return (f"ConvTranspose1d({self.in_ch}, {self.out_ch}, k={self.k}, stride={self.stride}, "
                f"out_pad={self.out_pad})")


class BatchNorm1d(Layer):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch-norm eps must be positive")
        self.ch, self.momentum, self.eps = ch, momentum, eps
        self.params["gamma"] = np.ones(ch)
        self.params["beta"] = np.zeros(ch)
        self.buffers["running_mean"] = np.zeros(ch)
        self.buffers["running_var"] = np.ones(ch)

    def forward(self, x, train=True):
        out, xhat, inv_std = batchnorm1d(
            x, self.params["gamma"], self.params["beta"], self.buffers["running_mean"],
            self.buffers["running_var"], train, self.momentum, self.eps,
        )
        self._cache = (xhat, inv_std, train)
        return out

    def backward(self, grad):
        xhat, inv_std, train = self._take_cache()
        gamma = self.params["gamma"]
        self.grads["beta"] = grad.sum(axis=(0, 2))
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2))
        scale = (gamma * inv_std)[None, :, None]
        if not train:
            return grad * scale
        m = grad.shape[0] * grad.shape[2]
        return scale * (grad - (self.grads["beta"][None, :, None] + xhat * self.grads["gamma"][None, :, None]) / m)

    def __repr__(self):
        return f"BatchNorm1d({self.ch})"


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        self._cache = x >= 0
        return leaky_relu(x, self.slope)

    def backward(self, grad):
        pos = self._take_cache()
        return np.where(pos, grad, self.slope * grad)

    def __repr__(self):
        return f"LeakyReLU({self.slope})"


class ReLU(LeakyReLU):
    def __init__(self):
        super().__init__(0.0)

    def __repr__(self):
        return "ReLU()"


class Sequential:
    """Ordered stack of layers with flat ``"<index>.<param>"`` parameter names."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=True):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if not np.all(np.isfinite(x)):
                bad = int(np.flatnonzero(~np.isfinite(x).reshape(x.shape[0], -1).all(axis=1))[0])
                raise FloatingPointError(f"non-finite activation at batch sample {bad} after layer {i} ({layer!r})")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out[f"{prefix}{i}.{k}"] = layer.grads[k]
        return out

    def named_buffers(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def output_length(self, length_in):
        for layer in self.layers:
            if hasattr(layer, "output_length"):
                length_in = layer.output_length(length_in)
        return length_in


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _tensor_record(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    return {"name": name, "shape": list(arr.shape), "values": arr.ravel().tolist()}


def _tensor_from_record(rec):
    return np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])


def save_checkpoint(path, tensors: dict, adam: AdamState | None = None, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta or {},
        "tensors": [_tensor_record(k, v) for k, v in tensors.items()],
    }
    if adam is not None:
        doc["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t,
            "m": [_tensor_record(k, v) for k, v in adam.m.items()],
            "v": [_tensor_record(k, v) for k, v in adam.v.items()],
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, AdamState | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    tensors = {rec["name"]: _tensor_from_record(rec) for rec in doc["tensors"]}
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"],
                         {r["name"]: _tensor_from_record(r) for r in a["m"]},
                         {r["name"]: _tensor_from_record(r) for r in a["v"]})
    return tensors, adam, doc.get("meta", {})
