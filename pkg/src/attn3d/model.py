"""The action-recognition network.

Stage order::

    conv3d -> relu -> attention gate -> avgpool3d -> flatten
           -> fc1 -> relu -> dropout -> fc2 (logits)

With ``attention_enabled=False`` the gate stage is the identity and no
``gate.*`` parameters exist. Parameter names are part of the checkpoint
format and must not change.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .tensor import DTYPE, Rng, relu


@dataclass
class ModelConfig:
    in_channels: int = 3
    frames: int = 16
    height: int = 112
    width: int = 112
    conv_out_channels: int = 64
    conv_kernel: tuple = (3, 3, 3)
    conv_stride: tuple = (1, 1, 1)
    conv_padding: tuple = (1, 1, 1)
    attention_enabled: bool = True
    attention_parameterized: bool = True
    pool_kernel: tuple = (2, 2, 2)
    pool_stride: tuple = (2, 2, 2)
    global_pool: bool = False
    hidden_width: int = 512
    dropout_rate: float = 0.25
    num_classes: int = 101

    def __post_init__(self):
        for name in ("conv_kernel", "conv_stride", "conv_padding", "pool_kernel", "pool_stride"):
            value = getattr(self, name)
            if np.isscalar(value):
                value = (value,) * 3
            setattr(self, name, tuple(int(v) for v in value))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def stage_shapes(self) -> dict:
        """Per-sample activation shape after each stage; raises ConfigError naming the bad stage."""
        for name in ("in_channels", "frames", "height", "width", "conv_out_channels",
                     "hidden_width", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage 'input/config': {name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"stage 'dropout': rate must be in [0, 1), got {self.dropout_rate}")
        if min(self.conv_kernel) < 1 or min(self.conv_stride) < 1 or min(self.conv_padding) < 0:
            raise ConfigError("stage 'conv': kernel/stride must be >= 1 and padding >= 0")
        shapes = {"input": (self.in_channels, self.frames, self.height, self.width)}
        try:
            conv_sp = L.conv_output_shape((self.frames, self.height, self.width),
                                          self.conv_kernel, self.conv_stride, self.conv_padding)
        except ShapeError as e:
            raise ConfigError(f"stage 'conv': {e}") from None
        shapes["conv"] = (self.conv_out_channels, *conv_sp)
        shapes["gate"] = shapes["conv"]
        kernel, stride = self.pool_geometry()
        try:
            pool_sp = L.pool_output_shape(conv_sp, kernel, stride)
        except ShapeError as e:
            raise ConfigError(f"stage 'pool': {e}") from None
        shapes["pool"] = (self.conv_out_channels, *pool_sp)
        shapes["flatten"] = (self.flatten_width(),)
        shapes["fc1"] = (self.hidden_width,)
        shapes["fc2"] = (self.num_classes,)
        return shapes

    def pool_geometry(self) -> tuple[tuple, tuple]:
        if self.global_pool:
            conv_sp = L.conv_output_shape((self.frames, self.height, self.width),
                                          self.conv_kernel, self.conv_stride, self.conv_padding)
            return conv_sp, conv_sp
        return self.pool_kernel, self.pool_stride

    def flatten_width(self) -> int:
        conv_sp = L.conv_output_shape((self.frames, self.height, self.width),
                                      self.conv_kernel, self.conv_stride, self.conv_padding)
        kernel, stride = self.pool_geometry()
        return self.conv_out_channels * math.prod(L.pool_output_shape(conv_sp, kernel, stride))


def param_shapes(cfg: ModelConfig) -> dict:
    """Parameter name -> shape, in checkpoint order. Does not allocate anything."""
    cfg.stage_shapes()
    c = cfg.conv_out_channels
    shapes = {
        "conv.weights": (c, cfg.in_channels, *cfg.conv_kernel),
        "conv.bias": (c,),
    }
    if cfg.attention_enabled and cfg.attention_parameterized:
        shapes["gate.weights"] = (c, c, 1, 1, 1)
        shapes["gate.bias"] = (c,)
    shapes["fc1.weights"] = (cfg.hidden_width, cfg.flatten_width())
    shapes["fc1.bias"] = (cfg.hidden_width,)
    shapes["fc2.weights"] = (cfg.num_classes, cfg.hidden_width)
    shapes["fc2.bias"] = (cfg.num_classes,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


class Model:
    def __init__(self, config: ModelConfig, params: dict):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ConfigError(f"parameter names {list(params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["conv.bias"].dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def conv(self) -> L.Conv3dParams:
        return L.Conv3dParams(self.params["conv.weights"], self.params["conv.bias"],
                              self.config.conv_stride, self.config.conv_padding)

    def gate(self) -> L.AttentionGateParams:
        if not self.config.attention_parameterized:
            return L.AttentionGateParams(parameterized=False)
        return L.AttentionGateParams(True, self.params["gate.weights"], self.params["gate.bias"])

    def fc(self, name: str) -> L.DenseParams:
        return L.DenseParams(self.params[f"{name}.weights"], self.params[f"{name}.bias"])

    def forward(self, x: np.ndarray, mode: str = "eval", rng: Optional[Rng] = None,
                trace: bool = False):
        """Returns ``(logits, trace)``; ``trace`` is a dict of stage activations or None.

        Train mode needs ``rng`` for dropout.
        """
        cfg = self.config
        expected = (cfg.in_channels, cfg.frames, cfg.height, cfg.width)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"stage 'input': expected (N, {', '.join(map(str, expected))}), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        t = {"x": x}
        t["conv"] = L.conv3d_forward(x, self.conv())
        t["relu"] = relu(t["conv"])
        if cfg.attention_enabled:
            t["gated"], t["gate"] = L.attention_gate_forward(t["relu"], self.gate())
        else:
            t["gated"] = t["relu"]
        kernel, stride = cfg.pool_geometry()
        t["pool"] = L.avgpool3d_forward(t["gated"], kernel, stride)
        t["flat"] = t["pool"].reshape(x.shape[0], -1)
        t["fc1"] = L.dense_forward(t["flat"], self.fc("fc1"))
        t["fc1_relu"] = relu(t["fc1"])
        t["dropped"], t["mask"] = L.dropout(t["fc1_relu"], cfg.dropout_rate, mode, rng)
        logits = L.dense_forward(t["dropped"], self.fc("fc2"))
        return logits, (t if trace else None)

    def backward(self, x: np.ndarray, labels, mode: str = "train", rng: Optional[Rng] = None):
        """Returns ``(loss, grads, logits)`` with ``grads`` keyed like ``params``."""
        logits, t = self.forward(x, mode, rng, trace=True)
        loss, g = L.softmax_cross_entropy(logits, labels)
        grads = self.backward_from(t, g)
        del grads["x"]
        return loss, grads, logits

    def backward_from(self, t: dict, grad_logits: np.ndarray) -> dict:
        """Reverse pass from a forward trace; the result also carries the input gradient as ``"x"``."""
        cfg = self.config
        grads = {}
        g = L.dense_backward(t["dropped"], self.fc("fc2"), grad_logits)
        grads["fc2.weights"], grads["fc2.bias"] = g["weights"], g["bias"]
        gx = L.relu_backward(t["fc1"], g["x"] * t["mask"])
        g = L.dense_backward(t["flat"], self.fc("fc1"), gx)
        grads["fc1.weights"], grads["fc1.bias"] = g["weights"], g["bias"]
        kernel, stride = cfg.pool_geometry()
        gx = L.avgpool3d_backward(t["gated"].shape, kernel, stride, g["x"].reshape(t["pool"].shape))
        if cfg.attention_enabled:
            g = L.attention_gate_backward(t["relu"], self.gate(), gx)
            if cfg.attention_parameterized:
                grads["gate.weights"], grads["gate.bias"] = g["weights"], g["bias"]
            gx = g["x"]
        gx = L.relu_backward(t["conv"], gx)
        g = L.conv3d_backward(t["x"], self.conv(), gx)
        grads["conv.weights"], grads["conv.bias"] = g["weights"], g["bias"]
        grads["x"] = g["x"]
        return {name: grads[name] for name in [*self.params, "x"]}


def _fan_in(name: str, shape: tuple) -> int:
    return math.prod(shape[1:])


def build_model(cfg: ModelConfig, rng: Rng, dtype=DTYPE) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases.

    Each weight tensor draws from its own substream ``rng.substream("init", name)``,
    so enabling the gate does not change the conv or dense initialisation.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        std = math.sqrt(2.0 / _fan_in(name, shape))
        draws = rng.substream("init", name).normal(math.prod(shape))
        params[name] = (draws * std).astype(dtype).reshape(shape)
    return Model(cfg, params)
