"""Central finite-difference oracle for every analytic backward pass.

All probing runs in float64. A layer is checked by contracting its output
with a fixed random tensor ``r`` (loss = sum(r * out)), feeding ``r`` as the
upstream gradient to the analytic backward, and comparing against
finite differences of that loss over every input and parameter element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import layers as L
from .errors import NumericError, ParameterError
from .model import ModelConfig, build_model
from .tensor import Rng, relu


def fd_gradient(loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every element i, in float64."""
    if not h > 0:
        raise ParameterError(f"step must be > 0, got {h}")
    probe = np.array(x, dtype=np.float64)
    flat = probe.reshape(-1)
    grad = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(probe))
        flat[i] = orig - h
        down = float(loss_fn(probe))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            index = tuple(int(j) for j in np.unravel_index(i, probe.shape))
            raise NumericError(f"non-finite loss while probing element {index}")
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(probe.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class GradReport:
    name: str
    threshold: float
    tensors: list = field(default_factory=list)  # (tensor name, analytic, numeric)

    def add(self, tensor: str, analytic: np.ndarray, numeric: np.ndarray) -> None:
        self.tensors.append((tensor, np.asarray(analytic, np.float64).reshape(-1),
                             np.asarray(numeric, np.float64).reshape(-1)))

    @property
    def max_rel_error(self) -> float:
        return max((float(relative_error(a, n).max()) for _, a, n in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    @property
    def num_elements(self) -> int:
        return sum(a.size for _, a, _ in self.tensors)

    def worst(self, k: int = 5) -> list[tuple]:
        rows = []
        for tensor, a, n in self.tensors:
            for i, e in enumerate(relative_error(a, n)):
                rows.append((float(e), tensor, i, float(a[i]), float(n[i])))
        return sorted(rows, reverse=True)[:k]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<28} elements={self.num_elements:<6d} "
                f"max_rel_err={self.max_rel_error:.3e} threshold={self.threshold:.0e} {status}")


def _probe_all(report: GradReport, tensors: dict, analytic: dict, loss: Callable[[], float], h: float):
    """Finite differences over each named array in ``tensors`` (mutated in place, then restored)."""
    for name, arr in tensors.items():
        def f(v, arr=arr):
            saved = arr.copy()
            arr[...] = v
            try:
                return loss()
            finally:
                arr[...] = saved
        report.add(name, analytic[name], fd_gradient(f, arr, h))


def _normal(rng: Rng, shape, scale: float = 1.0) -> np.ndarray:
    return rng.normal(math.prod(shape)).reshape(shape) * scale


def _check_conv(report, rng, h, sizes):
    x_shape = sizes.get("x", (1, 2, 3, 4, 4))
    w_shape = sizes.get("w", (2, 2, 2, 2, 2))
    x = _normal(rng, x_shape)
    p = L.Conv3dParams(_normal(rng, w_shape, 0.5), _normal(rng, w_shape[:1], 0.1),
                       sizes.get("stride", 1), sizes.get("padding", 1))
    r = _normal(rng, L.conv3d_forward(x, p).shape)
    g = L.conv3d_backward(x, p, r)
    loss = lambda: float(np.sum(r * L.conv3d_forward(x, p)))
    _probe_all(report, {"x": x, "weights": p.weights, "bias": p.bias}, g, loss, h)


def _check_gate(parameterized: bool):
    def check(report, rng, h, sizes):
        shape = sizes.get("x", (1, 2, 2, 3, 3))
        c = shape[1]
        f = _normal(rng, shape)
        if parameterized:
            p = L.AttentionGateParams(True, _normal(rng, (c, c, 1, 1, 1), 0.7), _normal(rng, (c,), 0.1))
        else:
            p = L.AttentionGateParams(False)
        r = _normal(rng, shape)
        g = L.attention_gate_backward(f, p, r)
        loss = lambda: float(np.sum(r * L.attention_gate_forward(f, p)[0]))
        tensors = {"x": f}
        if parameterized:
            tensors.update(weights=p.weights, bias=p.bias)
        _probe_all(report, tensors, g, loss, h)
    return check


def _check_pool(report, rng, h, sizes):
    shape = sizes.get("x", (1, 2, 4, 4, 4))
    kernel, stride = sizes.get("kernel", 2), sizes.get("stride", 2)
    x = _normal(rng, shape)
    r = _normal(rng, L.avgpool3d_forward(x, kernel, stride).shape)
    g = {"x": L.avgpool3d_backward(x.shape, kernel, stride, r)}
    loss = lambda: float(np.sum(r * L.avgpool3d_forward(x, kernel, stride)))
    _probe_all(report, {"x": x}, g, loss, h)


def _check_dense(report, rng, h, sizes):
    n, fan_in, fan_out = sizes.get("dims", (3, 5, 4))
    x = _normal(rng, (n, fan_in))
    p = L.DenseParams(_normal(rng, (fan_out, fan_in)), _normal(rng, (fan_out,)))
    r = _normal(rng, (n, fan_out))
    g = L.dense_backward(x, p, r)
    loss = lambda: float(np.sum(r * L.dense_forward(x, p)))
    _probe_all(report, {"x": x, "weights": p.weights, "bias": p.bias}, g, loss, h)


def _check_dropout(report, rng, h, sizes):
    """The mask is drawn once and then held fixed while probing."""
    shape = sizes.get("x", (4, 6))
    rate = sizes.get("rate", 0.25)
    x = _normal(rng, shape)
    _, mask = L.dropout(x, rate, "train", rng.substream("mask"))
    r = _normal(rng, shape)
    loss = lambda: float(np.sum(r * (x * mask)))
    _probe_all(report, {"x": x}, {"x": r * mask}, loss, h)


def _check_relu(report, rng, h, sizes):
    shape = sizes.get("x", (3, 7))
    x = _normal(rng, shape)
    x[np.abs(x) < 10 * h] += 20 * h  # keep probes off the kink
    r = _normal(rng, shape)
    loss = lambda: float(np.sum(r * relu(x)))
    _probe_all(report, {"x": x}, {"x": L.relu_backward(x, r)}, loss, h)


def _check_softmax_xent(report, rng, h, sizes):
    n, k = sizes.get("dims", (3, 5))
    logits = _normal(rng, (n, k), 2.0)
    labels = np.array([rng.uniform_int(0, k - 1) for _ in range(n)])
    _, g = L.softmax_cross_entropy(logits, labels)
    loss = lambda: L.softmax_cross_entropy(logits, labels)[0]
    _probe_all(report, {"x": logits}, {"x": g}, loss, h)


TINY_GRADCHECK_MODEL = ModelConfig(
    in_channels=3, frames=4, height=8, width=8, conv_out_channels=3,
    pool_kernel=(2, 2, 2), pool_stride=(2, 2, 2), hidden_width=6, dropout_rate=0.25, num_classes=2,
)


def _clear_of_kinks(model, x, mode, dropout_key, h) -> bool:
    """True when no probe of size ``h`` can push a ReLU pre-activation across zero.

    A single conv probe moves a conv pre-activation by at most h * max(1, max|w|)
    (inputs lie in [0, 1]); the dense pre-activations get a flat 1e-2 margin.
    """
    _, t = model.forward(x, mode, Rng(0, _key=dropout_key), trace=True)
    conv_reach = 4 * h * max(1.0, float(np.abs(model.params["conv.weights"]).max()))
    return float(np.abs(t["conv"]).min()) > conv_reach and float(np.abs(t["fc1"]).min()) > 1e-2


def _check_model(attention: bool, mode: str):
    def check(report, rng, h, sizes):
        cfg = replace(TINY_GRADCHECK_MODEL, attention_enabled=attention, **sizes.get("config", {}))
        labels = np.array([0, 1])
        in_shape = (2, *cfg.stage_shapes()["input"])
        for attempt in range(100):
            sub = rng.substream("attempt", attempt)
            model = build_model(cfg, sub.substream("model"), dtype=np.float64)
            for name, p in model.params.items():
                if name.endswith(".bias"):
                    p[...] = _normal(sub.substream(name), p.shape, 0.1)
            x = sub.substream("x").random(math.prod(in_shape)).reshape(in_shape)
            dropout_key = sub.substream("dropout").key
            if _clear_of_kinks(model, x, mode, dropout_key, h):
                break
        else:
            raise NumericError("could not draw a model instance clear of ReLU kinks")

        def loss():
            logits = model.forward(x, mode, Rng(0, _key=dropout_key))[0]
            return L.softmax_cross_entropy(logits, labels)[0]

        logits, t = model.forward(x, mode, Rng(0, _key=dropout_key), trace=True)
        _, g_logits = L.softmax_cross_entropy(logits, labels)
        analytic = model.backward_from(t, g_logits)
        _probe_all(report, {**model.params, "x": x}, analytic, loss, h)
    return check


def _with_sizes(check, **defaults):
    return lambda report, rng, h, sizes: check(report, rng, h, {**defaults, **sizes})


LAYER_CHECKS = {
    "conv3d": (_check_conv, 1e-4),
    "conv3d_strided": (_with_sizes(_check_conv, x=(1, 2, 5, 5, 5), w=(2, 2, 3, 3, 3), stride=2), 1e-4),
    "attention_gate": (_check_gate(True), 1e-4),
    "attention_gate_unparam": (_check_gate(False), 1e-4),
    "avgpool3d": (_check_pool, 1e-4),
    "avgpool3d_overlapping": (_with_sizes(_check_pool, x=(1, 2, 3, 5, 5), kernel=(1, 3, 3), stride=1), 1e-4),
    "dense": (_check_dense, 1e-4),
    "relu": (_check_relu, 1e-4),
    "dropout_fixed_mask": (_check_dropout, 1e-4),
    "softmax_cross_entropy": (_check_softmax_xent, 1e-4),
    "model_eval": (_check_model(True, "eval"), 1e-3),
    "model_train_fixed_mask": (_check_model(True, "train"), 1e-3),
    "model_no_attention": (_check_model(False, "eval"), 1e-3),
}


def check_layer(name: str, sizes: Optional[dict] = None, seed: int = 0,
                threshold: Optional[float] = None, h: float = 1e-4) -> GradReport:
    if name not in LAYER_CHECKS:
        raise ParameterError(f"unknown layer check {name!r}; choose from {sorted(LAYER_CHECKS)}")
    fn, default_threshold = LAYER_CHECKS[name]
    report = GradReport(name, default_threshold if threshold is None else threshold)
    fn(report, Rng(seed).substream("gradcheck", name), h, sizes or {})
    return report


def check_all(seed: int = 0, h: float = 1e-4) -> list[GradReport]:
    return [check_layer(name, seed=seed, h=h) for name in LAYER_CHECKS]
