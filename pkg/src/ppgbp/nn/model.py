"""Declarative architectures (AlexNet-1D, ResNet-18/34/50-1D) and the model container."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError, DivergenceError, StructuralError
from . import layers as L
from .losses import softmax

ARCHITECTURES = ("alexnet", "resnet18", "resnet34", "resnet50")
PROFILES = ("full", "desk")
TASKS = ("classification", "regression")

_RESNET_PLAN = {
    "resnet18": ("basic", (2, 2, 2, 2)),
    "resnet34": ("basic", (3, 4, 6, 3)),
    "resnet50": ("bottleneck", (3, 4, 6, 3)),
}


@dataclass
class ArchitectureConfig:
    name: str
    head: str
    n_outputs: int
    profile: str = "desk"
    input_length: int = 625
    layers: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))


def _width(channels, profile):
    return channels if profile == "full" else max(8, channels // 4)


def build_architecture(name, head="classification", n_outputs=None, profile="desk",
                       input_length=625) -> ArchitectureConfig:
    """Layer plan for a named network.

    ``n_outputs`` is the number of bins for a classification head and is
    forced to 1 for regression.
    """
    if name not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if head not in TASKS:
        raise ConfigurationError(f"unknown head {head!r}; expected one of {TASKS}")
    if head == "regression":
        n_outputs = 1
    elif n_outputs is None or n_outputs < 2:
        raise ConfigurationError("classification head needs n_outputs >= 2")

    w = lambda c: _width(c, profile)  # noqa: E731
    if name == "alexnet":
        plan = [
            {"kind": "conv1d", "channels": w(96), "kernel": 11, "stride": 4, "padding": "valid"},
            {"kind": "relu"},
            {"kind": "maxpool1d", "kernel": 3, "stride": 2, "padding": 0},
            {"kind": "conv1d", "channels": w(256), "kernel": 5, "stride": 1, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool1d", "kernel": 3, "stride": 2, "padding": 0},
            {"kind": "conv1d", "channels": w(384), "kernel": 3, "stride": 1, "padding": "same"},
            {"kind": "relu"},
            {"kind": "conv1d", "channels": w(384), "kernel": 3, "stride": 1, "padding": "same"},
            {"kind": "relu"},
            {"kind": "conv1d", "channels": w(256), "kernel": 3, "stride": 1, "padding": "same"},
            {"kind": "relu"},
            {"kind": "maxpool1d", "kernel": 3, "stride": 2, "padding": 0},
            {"kind": "flatten"},
            {"kind": "dense", "units": w(4096)},
            {"kind": "relu"},
            {"kind": "dropout", "rate": 0.5},
            {"kind": "dense", "units": w(4096)},
            {"kind": "relu"},
            {"kind": "dropout", "rate": 0.5},
        ]
    else:
        variant, blocks = _RESNET_PLAN[name]
        plan = [
            {"kind": "conv1d", "channels": w(64), "kernel": 7, "stride": 2, "padding": 3},
            {"kind": "batchnorm"},
            {"kind": "relu"},
            {"kind": "maxpool1d", "kernel": 3, "stride": 2, "padding": 1},
        ]
        for stage, (channels, count) in enumerate(zip((64, 128, 256, 512), blocks)):
            for i in range(count):
                plan.append({"kind": f"residual_{variant}", "channels": w(channels),
                             "downsample": stage > 0 and i == 0})
        plan.append({"kind": "globalavgpool"})
    head_kind = "softmax_head" if head == "classification" else "linear_head"
    plan.append({"kind": head_kind, "units": n_outputs})
    config = ArchitectureConfig(name, head, n_outputs, profile, input_length, plan)
    check_architecture(config)
    return config


def _make_layer(spec, shape, rng):
    kind = spec["kind"]
    if kind == "conv1d":
        return L.Conv1d(shape[1], spec["channels"], spec["kernel"], spec.get("stride", 1),
                        spec.get("padding", "same"), rng)
    if kind == "batchnorm":
        return L.BatchNorm1d(shape[-1], spec.get("momentum", 0.9), spec.get("eps", 1e-5))
    if kind == "relu":
        return L.ReLU()
    if kind == "maxpool1d":
        return L.MaxPool1d(spec.get("kernel", 3), spec.get("stride", 2), spec.get("padding", 0))
    if kind == "globalavgpool":
        return L.GlobalAvgPool()
    if kind == "flatten":
        return L.Flatten()
    if kind in ("dense", "softmax_head", "linear_head"):
        if len(shape) != 1:
            raise StructuralError(f"{kind} needs flat features, got shape {shape}")
        return L.Dense(shape[0], spec["units"], rng)
    if kind == "dropout":
        return L.Dropout(spec.get("rate", 0.5), int(rng.integers(2**63)))
    if kind in ("residual_basic", "residual_bottleneck"):
        variant = kind.split("_", 1)[1]
        return L.ResidualBlock(shape[1], spec["channels"], variant, spec.get("downsample", False),
                               spec.get("project"), rng)
    raise StructuralError(f"unknown layer kind {kind!r}")


def _instantiate(config: ArchitectureConfig, rng):
    shape = (config.input_length, 1)
    built = []
    for i, spec in enumerate(config.layers):
        try:
            layer = _make_layer(spec, shape, rng)
            shape = layer.output_shape(shape)
        except StructuralError as exc:
            raise StructuralError(f"layer {i} ({spec['kind']}): {exc}") from None
        built.append(layer)
    return built, shape


def check_architecture(config: ArchitectureConfig):
    """Raise :class:`StructuralError` if the plan is inconsistent."""
    if not config.layers:
        raise StructuralError("architecture has no layers")
    head = config.layers[-1]
    expected = "softmax_head" if config.head == "classification" else "linear_head"
    if head["kind"] != expected:
        raise StructuralError(f"{config.head} model must end in {expected}, not {head['kind']}")
    if head["units"] != config.n_outputs:
        raise StructuralError(f"head width {head['units']} != n_outputs {config.n_outputs}")
    if config.head == "regression" and config.n_outputs != 1:
        raise StructuralError("regression head must have width 1")
    _, shape = _instantiate(config, np.random.default_rng(0))
    if shape != (config.n_outputs,):
        raise StructuralError(f"network output shape {shape} != ({config.n_outputs},)")


class Model:
    """A built network: forward/backward over a batch plus parameter access."""

    def __init__(self, config: ArchitectureConfig, seed=0):
        self.config = config
        self.seed = seed
        layers, _ = _instantiate(config, np.random.default_rng(seed))
        self.net = L.Sequential(layers)
        self._slots = list(self.net.param_slots())
        self._buffer_slots = list(self.net.buffer_slots())

    @property
    def task(self):
        return self.config.head

    @property
    def n_outputs(self):
        return self.config.n_outputs

    @property
    def dtype(self):
        return self._slots[0][1].params[self._slots[0][2]].dtype

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[1] != self.config.input_length or x.shape[2] != 1:
            raise StructuralError(
                f"model expects input (N, {self.config.input_length}, 1), got {x.shape}"
            )
        return x

    def forward(self, x, training=False):
        out = self.net.forward(self._prepare(x), training)
        if not np.all(np.isfinite(out)):
            raise DivergenceError("non-finite network output")
        return out

    def backward(self, dy):
        return self.net.backward(dy)

    def zero_grads(self):
        self.net.zero_grads()

    def param_names(self):
        return [name for name, _, _ in self._slots]

    def parameters(self):
        return [layer.params[key] for _, layer, key in self._slots]

    def gradients(self):
        return [layer.grads[key] for _, layer, key in self._slots]

    def buffer_names(self):
        return [name for name, _, _ in self._buffer_slots]

    def buffers(self):
        return [layer.buffers[key] for _, layer, key in self._buffer_slots]

    def set_parameters(self, values):
        for (_, layer, key), v in zip(self._slots, values, strict=True):
            if layer.params[key].shape != v.shape:
                raise StructuralError(f"parameter shape {v.shape} != {layer.params[key].shape}")
            layer.params[key][...] = v

    def set_buffers(self, values):
        for (_, layer, key), v in zip(self._buffer_slots, values, strict=True):
            layer.buffers[key] = np.array(v, dtype=layer.buffers[key].dtype)

    def dropout_layers(self):
        return [l for l in self.net.layers if isinstance(l, L.Dropout)]

    def astype(self, dtype):
        self.net.astype(dtype)
        self._slots = list(self.net.param_slots())
        self._buffer_slots = list(self.net.buffer_slots())
        return self

    def n_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def predict(self, x, batch_size=256):
        """Head outputs in evaluation mode, batched."""
        x = np.asarray(x)
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
        if not outs:
            return np.zeros((0, self.n_outputs), dtype=self.dtype)
        return np.concatenate(outs)

    def predict_proba(self, x, batch_size=256):
        if self.task != "classification":
            raise StructuralError("predict_proba needs a classification head")
        return softmax(self.predict(x, batch_size))
