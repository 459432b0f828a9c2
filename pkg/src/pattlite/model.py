"""PAtt-Lite assembly: truncated MobileNetV1, patch extraction, attention head.

The network is a flat list of *records* (conv, batch-norm, activation, pad,
pooling, dense, attention, softmax).  Each record owns a forward and a
layer-local backward; :class:`Model` chains them.  Freezing counts records
from the top of this list.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, DTYPE_TAGS, TAG_DTYPES, Rng, Tensor, check_finite, pad2d, crop2d, truncated_normal

PLW_MAGIC = b"PLW1\x00\x00\x00\x00"
INIT_STD = 0.05
# std of a normal truncated at two standard deviations, relative to the untruncated one
_TRUNC_STD_RATIO = 0.87962566103423978


class ConfigError(ValueError):
    """Invalid model or sweep configuration."""


class ManifestMismatchError(ValueError):
    """A weight file does not agree with the model it is loaded into."""


# -- declarative tables -----------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # standard-conv | depthwise-conv | pointwise-conv | batch-norm | activation
    kernel: int = 1
    stride: int = 1
    out_channels: int = 0
    activation: str = "relu6"


@dataclass(frozen=True)
class BackboneSpec:
    layers: tuple[LayerSpec, ...]

    def names(self) -> list[str]:
        return [r.name for r in self.layers]

    def truncated(self, tap: str) -> "BackboneSpec":
        names = self.names()
        if tap not in names:
            raise ConfigError(f"unknown backbone tap {tap!r}")
        return BackboneSpec(self.layers[: names.index(tap) + 1])


def _conv_bn_act(layers: list, name: str, kind: str, kernel: int, stride: int, out: int, act: str):
    layers.append(LayerSpec(name, kind, kernel, stride, out, act))
    layers.append(LayerSpec(f"{name}_bn", "batch-norm"))
    layers.append(LayerSpec(f"{name}_relu", "activation", activation=act))


def mobilenet_v1_backbone(activation: str = "relu6") -> BackboneSpec:
    """MobileNetV1 (alpha 1) cut after the block-9 depthwise activation."""
    layers: list[LayerSpec] = []
    _conv_bn_act(layers, "conv1", "standard-conv", 3, 2, 32, activation)
    pw_widths = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1), (512, 1)]
    for block, (width, stride) in enumerate(pw_widths, start=1):
        _conv_bn_act(layers, f"conv_dw_{block}", "depthwise-conv", 3, stride, 0, activation)
        _conv_bn_act(layers, f"conv_pw_{block}", "pointwise-conv", 1, 1, width, activation)
    _conv_bn_act(layers, "conv_dw_9", "depthwise-conv", 3, 1, 0, activation)
    return BackboneSpec(tuple(layers))


DEFAULT_TAP = "conv_dw_9_relu"
SWEEP_TAPS = tuple(f"conv_dw_{i}_relu" for i in range(3, 10))
SWEEP_KERNELS = (3, 4, 5, 7, 8)


@dataclass
class ModelConfig:
    num_classes: int = 7
    use_patch_extraction: bool = True
    use_attention_classifier: bool = True
    patch_channels: int = 256
    hidden_width: int = 32
    attention_scale_mode: str = "fixed"  # fixed | learned
    pad_to: int = 16
    patch_padding: str = "padded"  # padded | unpadded
    patch_kernels: tuple = ((4, 4), (2, 2), (1, 1))
    backbone_tap: str = DEFAULT_TAP
    backbone_activation: str = "relu6"
    input_size: int = 224
    input_channels: int = 3
    dtype: str = "float32"
    backbone_init: str = "he"  # he | fixed
    backbone: Optional[BackboneSpec] = None

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if self.attention_scale_mode not in ("fixed", "learned"):
            raise ConfigError(f"attention_scale_mode must be fixed or learned, got {self.attention_scale_mode!r}")
        if self.patch_padding not in ("padded", "unpadded"):
            raise ConfigError(f"patch_padding must be padded or unpadded, got {self.patch_padding!r}")
        if self.backbone_activation not in ("relu", "relu6"):
            raise ConfigError(f"backbone_activation must be relu or relu6, got {self.backbone_activation!r}")
        if self.backbone_init not in ("he", "fixed"):
            raise ConfigError(f"backbone_init must be he or fixed, got {self.backbone_init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.patch_kernels) != 3:
            raise ConfigError("patch_kernels needs three (kernel, stride) pairs")
        if self.patch_kernels[2][0] != 1:
            raise ConfigError("the last patch layer is pointwise and must use kernel 1")
        for k, s in self.patch_kernels:
            if k < 1 or s < 1:
                raise ConfigError(f"bad patch kernel/stride ({k}, {s})")
        if min(self.patch_channels, self.hidden_width, self.input_size, self.input_channels) < 1:
            raise ConfigError("widths and input extents must be positive")

    def with_sweep(self, tap: str, kernel: int, padding: str) -> "ModelConfig":
        """Variant for an output-layer / first-kernel sweep; stride follows kernel."""
        kernels = ((kernel, kernel),) + tuple(self.patch_kernels[1:])
        return replace(self, backbone_tap=tap, patch_kernels=kernels, patch_padding=padding)


# -- parameter store ----------------------------------------------------------

@dataclass
class Param:
    tensor: Tensor
    trainable: bool
    kind: str  # weight | bias | bn-gamma | bn-beta | bn-moving | scale


class ParameterStore:
    """Ordered name -> :class:`Param` map.  Moving statistics are never trainable."""

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name: str, tensor: Tensor, kind: str, trainable: bool = True) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if "\t" in name or "\n" in name:
            raise ValueError(f"parameter names may not contain tabs or newlines: {name!r}")
        self._params[name] = Param(tensor, trainable and kind != "bn-moving", kind)

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensor(self, name: str) -> Tensor:
        return self._params[name].tensor

    def set_trainable(self, name: str, flag: bool) -> None:
        p = self._params[name]
        p.trainable = bool(flag) and p.kind != "bn-moving"

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self._params.items() if not p.trainable]

    def copy_tensors(self) -> dict[str, Tensor]:
        return {n: p.tensor.copy() for n, p in self._params.items()}


# -- records ----------------------------------------------------------------

class Record:
    kind = "record"
    param_suffixes: tuple[str, ...] = ()
    init_std = INIT_STD

    def __init__(self, name: str):
        self.name = name

    def param_names(self) -> list[str]:
        return [f"{self.name}/{s}" for s in self.param_suffixes]

    def output_shape(self, shape: tuple) -> tuple:
        return shape

    def init_params(self, store: ParameterStore, rng: Rng, dtype) -> None:
        pass

    def forward(self, x: Tensor, store: ParameterStore) -> Tensor:
        raise NotImplementedError

    def backward(self, x: Tensor, y: Tensor, grad: Tensor, store: ParameterStore):
        """Return ``(dx, {param_name: grad})``."""
        raise NotImplementedError


def _spatial_out(shape, k, s, padding, name):
    try:
        h, _, _ = ops.conv_output_size(shape[1], k, s, padding)
        w, _, _ = ops.conv_output_size(shape[2], k, s, padding)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return h, w


class Conv(Record):
    kind = "standard-conv"
    param_suffixes = ("kernel", "bias")

    def __init__(self, name, cin, cout, kernel, stride, padding="same"):
        super().__init__(name)
        self.cin, self.cout, self.k, self.stride, self.padding = cin, cout, kernel, stride, padding

    def output_shape(self, shape):
        if shape[3] != self.cin:
            raise ConfigError(f"{self.name}: expected {self.cin} channels, got {shape[3]}")
        h, w = _spatial_out(shape, self.k, self.stride, self.padding, self.name)
        return (shape[0], h, w, self.cout)

    def init_params(self, store, rng, dtype):
        store.add(f"{self.name}/kernel", truncated_normal(rng.child(f"{self.name}/kernel"), (self.k, self.k, self.cin, self.cout), self.init_std, dtype), "weight")
        store.add(f"{self.name}/bias", np.zeros(self.cout, dtype), "bias")

    def kernel(self, store):
        return ops.ConvKernel(store.tensor(f"{self.name}/kernel"), store.tensor(f"{self.name}/bias"), self.stride, self.padding)

    def forward(self, x, store):
        return ops.conv2d(x, self.kernel(store))

    def backward(self, x, y, grad, store):
        dx, dw, db = ops.conv2d_backward(x, self.kernel(store), grad)
        return dx, {f"{self.name}/kernel": dw, f"{self.name}/bias": db}


class DepthwiseConv(Record):
    kind = "depthwise-conv"
    param_suffixes = ("depthwise_kernel",)

    def __init__(self, name, channels, kernel, stride, padding="same"):
        super().__init__(name)
        self.c, self.k, self.stride, self.padding = channels, kernel, stride, padding

    def output_shape(self, shape):
        if shape[3] != self.c:
            raise ConfigError(f"{self.name}: expected {self.c} channels, got {shape[3]}")
        h, w = _spatial_out(shape, self.k, self.stride, self.padding, self.name)
        return (shape[0], h, w, self.c)

    def init_params(self, store, rng, dtype):
        n = f"{self.name}/depthwise_kernel"
        store.add(n, truncated_normal(rng.child(n), (self.k, self.k, self.c, 1), self.init_std, dtype), "weight")

    def kernel(self, store):
        return ops.ConvKernel(store.tensor(f"{self.name}/depthwise_kernel"), None, self.stride, self.padding)

    def forward(self, x, store):
        return ops.depthwise_conv2d(x, self.kernel(store))

    def backward(self, x, y, grad, store):
        dx, dw, _ = ops.depthwise_conv2d_backward(x, self.kernel(store), grad)
        return dx, {f"{self.name}/depthwise_kernel": dw}


class Pointwise(Record):
    kind = "pointwise-conv"
    param_suffixes = ("kernel", "bias")

    def __init__(self, name, cin, cout):
        super().__init__(name)
        self.cin, self.cout = cin, cout

    def output_shape(self, shape):
        if shape[3] != self.cin:
            raise ConfigError(f"{self.name}: expected {self.cin} channels, got {shape[3]}")
        return shape[:3] + (self.cout,)

    def init_params(self, store, rng, dtype):
        store.add(f"{self.name}/kernel", truncated_normal(rng.child(f"{self.name}/kernel"), (1, 1, self.cin, self.cout), self.init_std, dtype), "weight")
        store.add(f"{self.name}/bias", np.zeros(self.cout, dtype), "bias")

    def kernel(self, store):
        return ops.ConvKernel(store.tensor(f"{self.name}/kernel"), store.tensor(f"{self.name}/bias"))

    def forward(self, x, store):
        return ops.pointwise_conv2d(x, self.kernel(store))

    def backward(self, x, y, grad, store):
        dx, dw, db = ops.pointwise_conv2d_backward(x, self.kernel(store), grad)
        return dx, {f"{self.name}/kernel": dw, f"{self.name}/bias": db}


class BatchNorm(Record):
    """Always normalises with stored statistics (see freezing policy)."""

    kind = "batch-norm"
    param_suffixes = ("gamma", "beta", "moving_mean", "moving_var")

    def __init__(self, name, channels):
        super().__init__(name)
        self.c = channels

    def init_params(self, store, rng, dtype):
        store.add(f"{self.name}/gamma", np.ones(self.c, dtype), "bn-gamma")
        store.add(f"{self.name}/beta", np.zeros(self.c, dtype), "bn-beta")
        store.add(f"{self.name}/moving_mean", np.zeros(self.c, dtype), "bn-moving")
        store.add(f"{self.name}/moving_var", np.ones(self.c, dtype), "bn-moving")

    def state(self, store):
        t = store.tensor
        n = self.name
        return ops.BatchNormState(t(f"{n}/gamma"), t(f"{n}/beta"), t(f"{n}/moving_mean"), t(f"{n}/moving_var"))

    def forward(self, x, store):
        return ops.batch_norm(x, self.state(store), "infer")

    def backward(self, x, y, grad, store):
        dx, dg, db = ops.batch_norm_backward(x, self.state(store), grad, "infer")
        return dx, {f"{self.name}/gamma": dg, f"{self.name}/beta": db}


class Activation(Record):
    kind = "activation"

    def __init__(self, name, fn="relu"):
        super().__init__(name)
        if fn not in ("relu", "relu6"):
            raise ConfigError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, store):
        return ops.relu6(x) if self.fn == "relu6" else ops.relu(x)

    def backward(self, x, y, grad, store):
        return (ops.relu6_backward(x, grad) if self.fn == "relu6" else ops.relu_backward(x, grad)), {}


class Pad(Record):
    kind = "pad"

    def __init__(self, name, pads):
        super().__init__(name)
        self.pads = tuple(pads)

    def output_shape(self, shape):
        t, b, l, r = self.pads
        return (shape[0], shape[1] + t + b, shape[2] + l + r, shape[3])

    def forward(self, x, store):
        return pad2d(x, *self.pads)

    def backward(self, x, y, grad, store):
        return crop2d(grad, *self.pads), {}


class GlobalAveragePool(Record):
    kind = "pool"

    def output_shape(self, shape):
        return (shape[0], shape[3])

    def forward(self, x, store):
        return ops.global_average_pool(x)

    def backward(self, x, y, grad, store):
        return ops.global_average_pool_backward(x.shape, grad), {}


class Dense(Record):
    kind = "dense"
    param_suffixes = ("kernel", "bias")

    def __init__(self, name, din, dout):
        super().__init__(name)
        self.din, self.dout = din, dout

    def output_shape(self, shape):
        if shape[-1] != self.din:
            raise ConfigError(f"{self.name}: expected {self.din} features, got {shape[-1]}")
        return (shape[0], self.dout)

    def init_params(self, store, rng, dtype):
        store.add(f"{self.name}/kernel", truncated_normal(rng.child(f"{self.name}/kernel"), (self.din, self.dout), self.init_std, dtype), "weight")
        store.add(f"{self.name}/bias", np.zeros(self.dout, dtype), "bias")

    def forward(self, x, store):
        return ops.dense(x, store.tensor(f"{self.name}/kernel"), store.tensor(f"{self.name}/bias"))

    def backward(self, x, y, grad, store):
        dx, dw, db = ops.dense_backward(x, store.tensor(f"{self.name}/kernel"), grad)
        return dx, {f"{self.name}/kernel": dw, f"{self.name}/bias": db}


class SelfAttention(Record):
    """Dot-product self-attention over the features of a pooled vector.

    Each of the H features is a token of depth 1 and Q = K = V = the tokens,
    so the fixed scale 1/sqrt(depth) is 1.  ``learned`` mode multiplies the
    scores by exp(log_scale) instead, which keeps the scale positive.
    """

    kind = "attention"

    def __init__(self, name, scale_mode="fixed"):
        super().__init__(name)
        self.scale_mode = scale_mode
        self.param_suffixes = ("log_scale",) if scale_mode == "learned" else ()

    def init_params(self, store, rng, dtype):
        if self.scale_mode == "learned":
            store.add(f"{self.name}/log_scale", np.zeros(1, dtype), "scale")

    def scale(self, store) -> float:
        if self.scale_mode == "learned":
            return float(np.exp(store.tensor(f"{self.name}/log_scale")[0]))
        return ops.inverse_sqrt_scale(1)

    def forward(self, x, store):
        tokens = x[:, :, None]
        return ops.scaled_dot_attention(tokens, tokens, tokens, self.scale(store))[:, :, 0]

    def backward(self, x, y, grad, store):
        tokens = x[:, :, None]
        c = self.scale(store)
        dq, dk, dv, dscale = ops.scaled_dot_attention_backward(tokens, tokens, tokens, c, grad[:, :, None])
        dx = (dq + dk + dv)[:, :, 0]
        grads = {}
        if self.scale_mode == "learned":
            grads[f"{self.name}/log_scale"] = np.array([dscale * c], dtype=x.dtype)
        return dx, grads


class Softmax(Record):
    kind = "softmax"

    def forward(self, x, store):
        return ops.softmax(x)

    def backward(self, x, y, grad, store):
        return ops.softmax_backward(y, grad), {}


# -- model ------------------------------------------------------------------

def he_std(fan_in: int) -> float:
    """Truncated-normal std giving variance 2 / fan_in after truncation."""
    return math.sqrt(2.0 / fan_in) / _TRUNC_STD_RATIO


def _backbone_records(spec: BackboneSpec, in_channels: int, init: str = "he") -> list[Record]:
    records: list[Record] = []
    c = in_channels
    for layer in spec.layers:
        if layer.kind == "standard-conv":
            rec = Conv(layer.name, c, layer.out_channels, layer.kernel, layer.stride)
            fan_in = layer.kernel * layer.kernel * c
            c = layer.out_channels
        elif layer.kind == "depthwise-conv":
            rec = DepthwiseConv(layer.name, c, layer.kernel, layer.stride)
            fan_in = layer.kernel * layer.kernel
        elif layer.kind == "pointwise-conv":
            rec = Pointwise(layer.name, c, layer.out_channels)
            fan_in = c
            c = layer.out_channels
        elif layer.kind == "batch-norm":
            records.append(BatchNorm(layer.name, c))
            continue
        elif layer.kind == "activation":
            records.append(Activation(layer.name, layer.activation))
            continue
        else:
            raise ConfigError(f"unknown backbone layer kind {layer.kind!r}")
        if init == "he":
            rec.init_std = he_std(fan_in)
        records.append(rec)
    return records


def _patch_pads(size: int, pad_to: int) -> tuple[int, int]:
    total = pad_to - size if size < pad_to else 2
    return total // 2, total - total // 2


class Model:
    """Backbone + head as one flat record list with a shared parameter store."""

    def __init__(self, records: Sequence[Record], store: ParameterStore, input_shape: tuple,
                 num_backbone: int, cfg: Optional[ModelConfig] = None):
        self.records = list(records)
        self.store = store
        self.input_shape = tuple(input_shape)  # (H, W, C)
        self.num_backbone = num_backbone
        self.cfg = cfg
        self._cache: Optional[list] = None
        self._cache_from = 0
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise ConfigError("record names must be unique")
        self.shapes = self._infer_shapes()

    @property
    def dtype(self):
        for _, p in self.store.items():
            return p.tensor.dtype
        return np.dtype(DEFAULT_DTYPE)

    def _infer_shapes(self) -> dict[str, tuple]:
        shape = (1,) + self.input_shape
        shapes = {"input": shape[1:]}
        for r in self.records:
            shape = r.output_shape(shape)
            shapes[r.name] = shape[1:]
        return shapes

    def record_index(self, name: str) -> int:
        if name == "input":
            return -1
        for i, r in enumerate(self.records):
            if r.name == name:
                return i
        raise KeyError(f"no record named {name!r}")

    def backbone_records(self) -> list[Record]:
        return self.records[: self.num_backbone]

    def head_records(self) -> list[Record]:
        return self.records[self.num_backbone:]

    def lowest_trainable_index(self) -> int:
        for i, r in enumerate(self.records):
            names = [n for n in r.param_names() if n in self.store]
            if any(self.store[n].trainable for n in names):
                return i
        return len(self.records)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input of shape [N, {', '.join(map(str, self.input_shape))}], got {list(x.shape)}")

    def run(self, x: Tensor, stop: Optional[int] = None, cache_from: Optional[int] = None,
            keep_all: bool = False) -> list:
        """Run records ``[0, stop)``; return activations ``[input, out_0, ...]``.

        Only activations from ``cache_from`` on are retained (others are
        ``None``) unless ``keep_all`` is set.
        """
        self._check_input(x)
        stop = len(self.records) if stop is None else stop
        cache_from = 0 if cache_from is None or keep_all else cache_from
        acts: list = [x if cache_from <= 0 else None]
        h = x.astype(self.dtype, copy=False)
        for i in range(stop):
            h = self.records[i].forward(h, self.store)
            acts.append(h if keep_all or i + 1 >= cache_from else None)
        acts[-1] = h
        return acts

    def logits(self, x: Tensor) -> Tensor:
        return check_finite(self.run(x, stop=len(self.records) - 1)[-1], "logits")

    def forward(self, x: Tensor, mode: str = "infer") -> Tensor:
        """Class probabilities.  ``train`` mode keeps what backward needs."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {mode!r}")
        if mode == "infer":
            return check_finite(self.run(x)[-1], "probabilities")
        return ops.softmax(self.forward_cached(x, self.lowest_trainable_index()))

    def backward_from_logits(self, dlogits: Tensor, tap: Optional[str] = None):
        """Propagate d(loss)/d(logits) down the cached forward.

        Returns ``(grads, tap_grad)`` where ``grads`` holds trainable
        parameters only and ``tap_grad`` is d/d(output of ``tap``).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached train-mode forward")
        acts = self._cache
        stop = self._cache_from
        tap_index = None
        if tap is not None:
            tap_index = self.record_index(tap)
            if tap_index + 1 < stop:
                raise RuntimeError(f"forward did not cache activations down to {tap!r}")
            stop = min(stop, tap_index + 1)
        grads: dict[str, Tensor] = {}
        g = dlogits
        tap_grad = g if tap_index == len(self.records) - 2 else None
        for i in range(len(self.records) - 2, stop - 1, -1):
            rec = self.records[i]
            if acts[i] is None:
                raise RuntimeError(f"missing cached input for record {rec.name!r}")
            g, pg = rec.backward(acts[i], acts[i + 1], g, self.store)
            for name, val in pg.items():
                if self.store[name].trainable:
                    grads[name] = val
            if i == stop and tap_index is not None and i == tap_index + 1:
                tap_grad = g
        return grads, tap_grad

    def forward_cached(self, x: Tensor, cache_from: int) -> Tensor:
        """Logits, caching activations from record ``cache_from`` upward."""
        acts = self.run(x, stop=len(self.records) - 1, cache_from=cache_from)
        check_finite(acts[-1], "logits")
        self._cache = acts
        self._cache_from = cache_from
        return acts[-1]

    def clear_cache(self) -> None:
        self._cache = None


def _dtype_of(cfg: ModelConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def build_model(cfg: ModelConfig, rng: Rng) -> Model:
    """Construct the configured network with seeded random initialisation."""
    cfg.validate()
    dtype = _dtype_of(cfg)
    spec = cfg.backbone if cfg.backbone is not None else mobilenet_v1_backbone(cfg.backbone_activation)
    if cfg.backbone_tap in spec.names():
        spec = spec.truncated(cfg.backbone_tap)
    elif cfg.backbone is None or cfg.backbone_tap != DEFAULT_TAP:
        raise ConfigError(f"unknown backbone tap {cfg.backbone_tap!r}")
    records = _backbone_records(spec, cfg.input_channels, cfg.backbone_init)
    num_backbone = len(records)

    shape = (1, cfg.input_size, cfg.input_size, cfg.input_channels)
    for r in records:
        shape = r.output_shape(shape)

    head: list[Record] = []
    d = cfg.patch_channels
    if cfg.use_patch_extraction:
        c = shape[3]
        if cfg.patch_padding == "padded":
            pt, pb = _patch_pads(shape[1], cfg.pad_to)
            pl, pr = _patch_pads(shape[2], cfg.pad_to)
            head.append(Pad("patch_pad", (pt, pb, pl, pr)))
        (k1, s1), (k2, s2), _ = cfg.patch_kernels
        head += [
            DepthwiseConv("patch_sep1_dw", c, k1, s1, "valid"),
            Pointwise("patch_sep1_pw", c, d),
            Activation("patch_sep1_relu", "relu"),
            DepthwiseConv("patch_sep2_dw", d, k2, s2, "valid"),
            Pointwise("patch_sep2_pw", d, d),
            Activation("patch_sep2_relu", "relu"),
            Pointwise("patch_pw", d, d),
            Activation("patch_pw_relu", "relu"),
        ]
    head.append(GlobalAveragePool("gap"))
    for r in head:
        shape = r.output_shape(shape)
    feat = shape[-1]
    if cfg.use_attention_classifier:
        head += [
            Dense("fc_hidden", feat, cfg.hidden_width),
            Activation("fc_hidden_relu", "relu"),
            SelfAttention("attention", cfg.attention_scale_mode),
            Dense("classifier", cfg.hidden_width, cfg.num_classes),
        ]
    else:
        head.append(Dense("classifier", feat, cfg.num_classes))
    head.append(Softmax("softmax"))

    store = ParameterStore()
    for r in records + head:
        r.init_params(store, rng, dtype)
    model = Model(records + head, store, (cfg.input_size, cfg.input_size, cfg.input_channels), num_backbone, cfg)
    set_trainable(model, 0)
    return model


def forward(model: Model, x: Tensor, mode: str = "infer") -> Tensor:
    return model.forward(x, mode)


def set_trainable(model: Model, unfreeze_top_n: int) -> None:
    """Make the last ``unfreeze_top_n`` records trainable; head records always are.

    Records are counted from the top of the whole network (head included),
    one per conv, batch-norm, activation, pad, pool, dense, attention and
    softmax record.  Batch-norm records keep using stored statistics either way.
    """
    total = len(model.records)
    if not 0 <= unfreeze_top_n <= total:
        raise ValueError(f"unfreeze_top_n must be in [0, {total}], got {unfreeze_top_n}")
    first = total - unfreeze_top_n
    for i, rec in enumerate(model.records):
        flag = i >= model.num_backbone or i >= first
        for name in rec.param_names():
            if name in model.store:
                model.store.set_trainable(name, flag)


def trainable_records(model: Model) -> list[str]:
    return [r.name for r in model.records if any(model.store[n].trainable for n in r.param_names() if n in model.store)]


# -- parameter counting -----------------------------------------------------

@dataclass
class ParamRow:
    name: str
    shape: tuple
    count: int
    trainable: bool


@dataclass
class ParamTable:
    rows: list[ParamRow]

    @property
    def trainable(self) -> int:
        return sum(r.count for r in self.rows if r.trainable)

    @property
    def non_trainable(self) -> int:
        return sum(r.count for r in self.rows if not r.trainable)

    @property
    def total(self) -> int:
        return sum(r.count for r in self.rows)

    def format(self) -> str:
        width = max([len(r.name) for r in self.rows] + [4])
        lines = [f"{'name':<{width}}  {'shape':<18} {'count':>10}  trainable"]
        for r in self.rows:
            shape = "x".join(map(str, r.shape))
            lines.append(f"{r.name:<{width}}  {shape:<18} {r.count:>10}  {'yes' if r.trainable else 'no'}")
        lines.append(f"trainable: {self.trainable}")
        lines.append(f"non-trainable: {self.non_trainable}")
        lines.append(f"total: {self.total}")
        return "\n".join(lines)


def param_count(model: Model) -> ParamTable:
    rows = [ParamRow(n, tuple(p.tensor.shape), int(p.tensor.size), p.trainable) for n, p in model.store.items()]
    return ParamTable(rows)


# -- PLW weight container ----------------------------------------------------

def _encode_store(store: ParameterStore) -> bytes:
    lines = []
    blobs = []
    offset = 0
    for name, p in store.items():
        t = np.ascontiguousarray(p.tensor)
        raw = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{DTYPE_TAGS[t.dtype]}\t{shape}\t{offset}\t{len(raw)}\t{int(p.trainable)}")
        blobs.append(raw)
        offset += len(raw)
    manifest = ("\n".join(lines) + "\n\n").encode("utf-8")
    return PLW_MAGIC + manifest + b"".join(blobs)


def _decode(buf: bytes) -> dict[str, tuple[Tensor, bool]]:
    if not buf.startswith(PLW_MAGIC):
        raise ManifestMismatchError("bad PLW magic")
    body = buf[len(PLW_MAGIC):]
    end = body.find(b"\n\n")
    if end < 0:
        raise ManifestMismatchError("PLW manifest is not terminated by a blank line")
    blob = body[end + 2:]
    out: dict[str, tuple[Tensor, bool]] = {}
    for line in body[:end].decode("utf-8").split("\n"):
        parts = line.split("\t")
        if len(parts) != 6:
            raise ManifestMismatchError(f"malformed manifest line {line!r}")
        name, tag, shape_txt, off, length, trainable = parts
        dtype = TAG_DTYPES.get(int(tag))
        if dtype is None:
            raise ManifestMismatchError(f"{name}: unknown dtype tag {tag}")
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        off, length = int(off), int(length)
        if off + length > len(blob) or length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise ManifestMismatchError(f"{name}: byte range inconsistent with shape {shape}")
        arr = np.frombuffer(blob[off:off + length], dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
        out[name] = (arr, trainable == "1")
    return out


def _apply(model: Model, entries: dict[str, tuple[Tensor, bool]]) -> None:
    for name, p in model.store.items():
        if name not in entries:
            raise ManifestMismatchError(f"{name}: missing from weight file")
        arr, _ = entries[name]
        if arr.shape != p.tensor.shape:
            raise ManifestMismatchError(f"{name}: shape {arr.shape} in file, model expects {p.tensor.shape}")
    extra = sorted(set(entries) - set(model.store))
    if extra:
        raise ManifestMismatchError(f"{extra[0]}: not present in the model")
    for name, p in model.store.items():
        arr, trainable = entries[name]
        p.tensor[...] = arr.astype(p.tensor.dtype, copy=False)
        model.store.set_trainable(name, trainable)


def weights_to_bytes(model: Model) -> bytes:
    return _encode_store(model.store)


def weights_from_bytes(model: Model, buf: bytes) -> None:
    _apply(model, _decode(buf))


def save_weights(model: Model, path: Union[str, Path]) -> None:
    Path(path).write_bytes(weights_to_bytes(model))


def load_weights(model: Model, path: Union[str, Path]) -> None:
    weights_from_bytes(model, Path(path).read_bytes())


def read_manifest(path: Union[str, Path]) -> list[tuple[str, tuple, bool]]:
    return [(n, a.shape, t) for n, (a, t) in _decode(Path(path).read_bytes()).items()]
