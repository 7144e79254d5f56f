"""Layer kernels with explicit forward and backward passes.

Activations use the (N, C, T, H, W) layout. Backward functions take the
forward inputs again rather than a saved context, so every function here is
pure apart from ``dropout``, which takes its Rng explicitly. Gradients come
back as a dict: ``"x"`` for the input and one entry per parameter name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ParameterError, ShapeError
from .tensor import Rng, require_same_shape, sigmoid

LayerGrads = dict


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


@dataclass
class Conv3dParams:
    weights: np.ndarray  # (C_out, C_in, kT, kH, kW)
    bias: np.ndarray  # (C_out,)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        self.stride = _triple(self.stride)
        self.padding = _triple(self.padding)
        if self.weights.ndim != 5:
            raise ShapeError(f"conv weights must be rank 5, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match C_out={self.weights.shape[0]}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"bad stride {self.stride} / padding {self.padding}")


@dataclass
class AttentionGateParams:
    parameterized: bool = True
    weights: Optional[np.ndarray] = None  # (C, C, 1, 1, 1)
    bias: Optional[np.ndarray] = None  # (C,)

    def __post_init__(self):
        if not self.parameterized:
            return
        if self.weights is None or self.bias is None:
            raise ShapeError("parameterized gate needs weights and bias")
        c = self.weights.shape[0]
        if self.weights.shape != (c, c, 1, 1, 1) or self.bias.shape != (c,):
            raise ShapeError(f"gate weights must be (C,C,1,1,1) with bias (C,), got "
                             f"{self.weights.shape} / {self.bias.shape}")


@dataclass
class DenseParams:
    weights: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray = field(default=None)  # (fan_out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias is None or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense weights/bias mismatch: {self.weights.shape} / "
                             f"{None if self.bias is None else self.bias.shape}")


def conv_output_shape(in_shape: Sequence[int], kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for i, k, s, p in zip(in_shape, _triple(kernel), _triple(stride), _triple(padding)):
        span = i + 2 * p - k
        if span < 0:
            raise ShapeError(f"kernel {k} larger than padded input {i + 2 * p}")
        out.append(span // s + 1)
    return tuple(out)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _check_conv_input(x: np.ndarray, p: Conv3dParams) -> tuple[int, int, int]:
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be (N,C,T,H,W), got {x.shape}")
    if x.shape[1] != p.weights.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[1]}, kernel expects {p.weights.shape[1]}")
    return conv_output_shape(x.shape[2:], p.weights.shape[2:], p.stride, p.padding)


def _im2col(x: np.ndarray, p: Conv3dParams, out_sp) -> np.ndarray:
    """Rows are output positions (n, t, h, w); columns are (c, i, j, k)."""
    pt, ph, pw = p.padding
    st, sh, sw = p.stride
    kt, kh, kw = p.weights.shape[2:]
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kt, kh, kw), axis=(2, 3, 4))
    to, ho, wo = out_sp
    win = win[:, :, : st * (to - 1) + 1: st, : sh * (ho - 1) + 1: sh, : sw * (wo - 1) + 1: sw]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, c * kt * kh * kw)


def conv3d_forward(x: np.ndarray, p: Conv3dParams) -> np.ndarray:
    out_sp = _check_conv_input(x, p)
    n = x.shape[0]
    c_out = p.weights.shape[0]
    cols = _im2col(x, p, out_sp)
    out = cols @ p.weights.reshape(c_out, -1).T
    out += p.bias
    return np.ascontiguousarray(out.reshape(n, *out_sp, c_out).transpose(0, 4, 1, 2, 3))


def conv3d_backward(x: np.ndarray, p: Conv3dParams, grad_out: np.ndarray) -> LayerGrads:
    out_sp = _check_conv_input(x, p)
    n, c_in = x.shape[:2]
    c_out = p.weights.shape[0]
    if grad_out.shape != (n, c_out, *out_sp):
        raise ShapeError(f"conv3d grad_out {grad_out.shape} != output shape {(n, c_out, *out_sp)}")
    kt, kh, kw = p.weights.shape[2:]
    st, sh, sw = p.stride
    pt, ph, pw = p.padding
    to, ho, wo = out_sp

    go = grad_out.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
    cols = _im2col(x, p, out_sp)
    grad_w = (go.T @ cols).reshape(p.weights.shape)
    grad_b = go.sum(axis=0)

    gcols = (go @ p.weights.reshape(c_out, -1)).reshape(n, to, ho, wo, c_in, kt, kh, kw)
    gcols = gcols.transpose(0, 4, 5, 6, 7, 1, 2, 3)  # (n, c, i, j, k, t, h, w)
    t_pad, h_pad, w_pad = x.shape[2] + 2 * pt, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw
    gxp = np.zeros((n, c_in, t_pad, h_pad, w_pad), dtype=x.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                gxp[:, :, i: i + st * (to - 1) + 1: st,
                    j: j + sh * (ho - 1) + 1: sh,
                    k: k + sw * (wo - 1) + 1: sw] += gcols[:, :, i, j, k]
    grad_x = gxp[:, :, pt: pt + x.shape[2], ph: ph + x.shape[3], pw: pw + x.shape[4]]
    return {"x": np.ascontiguousarray(grad_x), "weights": grad_w, "bias": grad_b}


# ---------------------------------------------------------------------------
# attention gate
# ---------------------------------------------------------------------------

def _gate_logits(f: np.ndarray, p: AttentionGateParams) -> np.ndarray:
    if f.ndim != 5:
        raise ShapeError(f"attention gate input must be (N,C,T,H,W), got {f.shape}")
    if not p.parameterized:
        return f
    c = p.weights.shape[0]
    if f.shape[1] != c:
        raise ShapeError(f"attention gate channel mismatch: features have {f.shape[1]}, gate expects {c}")
    n = f.shape[0]
    flat = f.reshape(n, c, -1)
    a = np.matmul(p.weights.reshape(c, c), flat)
    a += p.bias[:, None]
    return a.reshape(f.shape)


def attention_gate_forward(f: np.ndarray, p: AttentionGateParams) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(gated, gate)`` with ``gate = sigmoid(W*f + b)`` (or ``sigmoid(f)``) and ``gated = f * gate``."""
    gate = sigmoid(_gate_logits(f, p))
    return f * gate, gate


def attention_gate_backward(f: np.ndarray, p: AttentionGateParams, grad_out: np.ndarray) -> LayerGrads:
    require_same_shape(f, grad_out, "attention gate grad_out")
    gate = sigmoid(_gate_logits(f, p))
    grad_logits = grad_out * f * gate * (1 - gate)
    grad_f = grad_out * gate
    if not p.parameterized:
        return {"x": grad_f + grad_logits}
    n, c = f.shape[:2]
    gl = grad_logits.reshape(n, c, -1)
    flat = f.reshape(n, c, -1)
    grad_w = np.matmul(gl, flat.transpose(0, 2, 1)).sum(axis=0)
    grad_b = gl.sum(axis=(0, 2))
    grad_f = grad_f + np.matmul(p.weights.reshape(c, c).T, gl).reshape(f.shape)
    return {"x": grad_f, "weights": grad_w.reshape(c, c, 1, 1, 1), "bias": grad_b}


# ---------------------------------------------------------------------------
# average pooling
# ---------------------------------------------------------------------------

def pool_output_shape(in_shape: Sequence[int], kernel, stride) -> tuple[int, int, int]:
    out = []
    for i, k, s in zip(in_shape, _triple(kernel), _triple(stride)):
        if k < 1 or s < 1:
            raise ShapeError(f"pool kernel/stride must be >= 1, got {k}/{s}")
        if k > i:
            raise ShapeError(f"pool window {k} larger than input extent {i}")
        if (i - k) % s:
            raise ShapeError(f"pool window {k} stride {s} does not tile extent {i} exactly")
        out.append((i - k) // s + 1)
    return tuple(out)


def avgpool3d_forward(x: np.ndarray, kernel, stride) -> np.ndarray:
    if x.ndim != 5:
        raise ShapeError(f"avgpool3d input must be (N,C,T,H,W), got {x.shape}")
    kernel, stride = _triple(kernel), _triple(stride)
    to, ho, wo = pool_output_shape(x.shape[2:], kernel, stride)
    n, c = x.shape[:2]
    kt, kh, kw = kernel
    if kernel == stride:
        blocks = x.reshape(n, c, to, kt, ho, kh, wo, kw)
        return blocks.mean(axis=(3, 5, 7), dtype=x.dtype)
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    return win.mean(axis=(5, 6, 7), dtype=x.dtype)


def avgpool3d_backward(x_shape: Sequence[int], kernel, stride, grad_out: np.ndarray) -> np.ndarray:
    x_shape = tuple(x_shape)
    kernel, stride = _triple(kernel), _triple(stride)
    out_sp = pool_output_shape(x_shape[2:], kernel, stride)
    if grad_out.shape != (*x_shape[:2], *out_sp):
        raise ShapeError(f"avgpool3d grad_out {grad_out.shape} != output shape {(*x_shape[:2], *out_sp)}")
    kt, kh, kw = kernel
    scale = grad_out.dtype.type(1.0 / (kt * kh * kw))
    g = grad_out * scale
    n, c = x_shape[:2]
    to, ho, wo = out_sp
    if kernel == stride:
        gx = np.broadcast_to(g[:, :, :, None, :, None, :, None], (n, c, to, kt, ho, kh, wo, kw))
        return np.ascontiguousarray(gx).reshape(x_shape)
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    st, sh, sw = stride
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                gx[:, :, i: i + st * (to - 1) + 1: st,
                   j: j + sh * (ho - 1) + 1: sh,
                   k: k + sw * (wo - 1) + 1: sw] += g
    return gx


# ---------------------------------------------------------------------------
# dense, relu, dropout
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match fan_in={p.weights.shape[1]}")
    out = x @ p.weights.T
    out += p.bias
    return out


def dense_backward(x: np.ndarray, p: DenseParams, grad_out: np.ndarray) -> LayerGrads:
    if x.ndim != 2 or x.shape[1] != p.weights.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match fan_in={p.weights.shape[1]}")
    if grad_out.shape != (x.shape[0], p.weights.shape[0]):
        raise ShapeError(f"dense grad_out {grad_out.shape} != {(x.shape[0], p.weights.shape[0])}")
    return {
        "x": grad_out @ p.weights,
        "weights": grad_out.T @ x,
        "bias": grad_out.sum(axis=0),
    }


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    require_same_shape(x, grad_out, "relu grad_out")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dropout(x: np.ndarray, rate: float, mode: str, rng: Optional[Rng] = None) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns ``(out, mask)``; the backward pass is ``grad * mask``.

    Element i is dropped when the i-th uniform draw is below ``rate``.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs an Rng")
    keep = rng.random(x.size).reshape(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.dtype.kind not in "iu":
        raise LabelError(f"expected {n} integer labels, got shape {labels.shape} dtype {labels.dtype}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax in float64 with max subtraction."""
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
