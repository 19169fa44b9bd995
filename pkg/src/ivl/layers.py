"""Model building blocks: LSTM cell, soft-attention readout, pre-activation
residual units, and config-driven convolutional encoders.

Encoders are described by ordered layer strings in the form
``Conv-5x5-F16-D1``, ``Res-3x3-F64-D1-S2`` or ``MaxPool-2x2`` (kind, kernel,
filters, dilation rate, stride). Three named presets cover the models used in
the experiments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def gaussian_param(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def he_param(rng, shape, fan_in):
    std = float(np.sqrt(2.0 / max(fan_in, 1)))
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def make_param(rng, shape, init, fan_in=None, std=0.01):
    # "paper": every parameter from N(0, 0.01); "he": fan-in scaled weights.
    if init == "he" and fan_in is not None:
        return he_param(rng, shape, fan_in)
    return gaussian_param(rng, shape, std)


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


class Linear:
    def __init__(self, rng, din, dout, init="paper"):
        self.weight = make_param(rng, (din, dout), init, fan_in=din)
        self.bias = gaussian_param(rng, (dout,), 0.01)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LSTMCell:
    """Standard LSTM: sigmoid input/forget/output gates, tanh candidate."""

    def __init__(self, rng, din, hidden, init="paper"):
        self.hidden = hidden
        self.wx = make_param(rng, (din, 4 * hidden), init, fan_in=din)
        self.wh = make_param(rng, (hidden, 4 * hidden), init, fan_in=hidden)
        self.bias = gaussian_param(rng, (4 * hidden,), 0.01)

    def init_state(self, n, dtype=np.float32):
        z = np.zeros((n, self.hidden), dtype=dtype)
        return LstmState(h=Tensor(z), c=Tensor(z.copy()))

    def step(self, state: LstmState, x: Tensor) -> LstmState:
        if x.shape[-1] != self.wx.shape[0]:
            raise T.ShapeError(f"lstm input width {x.shape[-1]} != expected {self.wx.shape[0]}")
        hdim = self.hidden
        z = T.add(T.add(T.matmul(x, self.wx), T.matmul(state.h, self.wh)), self.bias)
        i = T.sigmoid(z[:, :hdim])
        f = T.sigmoid(z[:, hdim:2 * hdim])
        g = T.tanh(z[:, 2 * hdim:3 * hdim])
        o = T.sigmoid(z[:, 3 * hdim:])
        c = T.add(T.mul(f, state.c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return LstmState(h=h, c=c)

    def parameters(self):
        return {"wx": self.wx, "wh": self.wh, "bias": self.bias}


class Attention:
    """Additive soft attention over a spatial feature map.

    Scores are v_ij = w . tanh(W s + W' f_ij + b); the attention map is the
    softmax of the scores over all spatial cells and the context is the
    alpha-weighted sum of feature vectors.
    """

    def __init__(self, rng, state_size, channels, embed, init="paper"):
        self.w_state = make_param(rng, (state_size, embed), init, fan_in=state_size)
        self.w_feat = make_param(rng, (channels, embed), init, fan_in=channels)
        self.bias = gaussian_param(rng, (embed,), 0.01)
        self.w_score = make_param(rng, (embed, 1), init, fan_in=embed)

    def __call__(self, h: Tensor, feats: Tensor):
        if feats.shape[1] != self.w_feat.shape[0]:
            raise T.ShapeError(f"attention expects {self.w_feat.shape[0]} feature channels, got {feats.shape[1]}")
        n, c, fh, fw = feats.shape
        flat = T.transpose(T.reshape(feats, (n, c, fh * fw)), (0, 2, 1))  # (N, HW, C)
        scores = T.matmul(T.tanh(T.add(T.add(T.matmul(flat, self.w_feat),
                                             T.reshape(T.matmul(h, self.w_state), (n, 1, -1))),
                                       self.bias)),
                          self.w_score)
        alpha = T.softmax(T.reshape(scores, (n, fh * fw)), axis=-1)
        context = T.reshape(T.matmul(T.reshape(alpha, (n, 1, fh * fw)), flat), (n, c))
        return context, T.reshape(alpha, (n, fh, fw))

    def parameters(self):
        return {"w_state": self.w_state, "w_feat": self.w_feat,
                "bias": self.bias, "w_score": self.w_score}


class ChannelNorm:
    """Per-channel normalisation with learned scale and shift.

    mode "affine" applies scale/shift only (stable at toy batch sizes);
    mode "batch" additionally standardises by batch statistics.
    """

    def __init__(self, channels, mode="affine"):
        if mode not in ("affine", "batch"):
            raise ConfigError(f"unknown norm mode {mode!r}; expected 'affine' or 'batch'")
        self.mode = mode
        self.scale = Tensor(np.ones((1, channels, 1, 1), dtype=np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros((1, channels, 1, 1), dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        if self.mode == "batch":
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            xc = T.sub(x, mu)
            var = T.tmean(T.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
            x = T.div(xc, T.sqrt(T.add(var, Tensor(np.asarray(1e-5, dtype=x.dtype)))))
        return T.add(T.mul(x, self.scale), self.shift)

    def parameters(self):
        return {"scale": self.scale, "shift": self.shift}


@dataclass
class LayerSpec:
    kind: str               # conv | res | maxpool
    kernel: int = 0
    filters: int = 0
    dilation: int = 1
    stride: int = 1
    norm: bool = False

    @property
    def downsample(self):
        return 2 if self.kind == "maxpool" else self.stride


_SPEC_RE = re.compile(
    r"^(?P<kind>Conv|Res|MaxPool)-(?P<kh>\d+)x(?P<kw>\d+)"
    r"(?:-F(?P<filters>\d+))?(?:-D(?P<dil>\d+))?(?:-S(?P<stride>\d+))?$",
    re.IGNORECASE,
)


def parse_layer_spec(text, norm=False) -> LayerSpec:
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse layer spec {text!r} (expected e.g. 'Res-3x3-F64-D1-S2')")
    kind = m.group("kind").lower()
    kh, kw = int(m.group("kh")), int(m.group("kw"))
    if kh != kw:
        raise ConfigError(f"only square kernels are supported, got {text!r}")
    if kind == "maxpool":
        if kh != 2:
            raise ConfigError(f"only 2x2 max-pooling is supported, got {text!r}")
        return LayerSpec(kind="maxpool")
    if m.group("filters") is None:
        raise ConfigError(f"{text!r} is missing a filter count")
    return LayerSpec(
        kind=kind,
        kernel=kh,
        filters=int(m.group("filters")),
        dilation=int(m.group("dil") or 1),
        stride=int(m.group("stride") or 1),
        norm=norm,
    )


class ConvLayer:
    def __init__(self, rng, cin, spec: LayerSpec, norm_mode, init="paper", activate=True):
        k = spec.kernel
        self.spec = spec
        self.activate = activate
        self.weight = make_param(rng, (spec.filters, cin, k, k), init, fan_in=cin * k * k)
        self.bias = gaussian_param(rng, (spec.filters,), 0.01)
        self.norm = ChannelNorm(spec.filters, norm_mode) if spec.norm else None

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=self.spec.stride, dilation=self.spec.dilation)
        if self.norm is not None:
            y = self.norm(y)
        if self.activate:
            y = T.relu(y)
        return y

    def parameters(self):
        params = {"weight": self.weight, "bias": self.bias}
        if self.norm is not None:
            params.update({f"norm.{k}": v for k, v in self.norm.parameters().items()})
        return params


class ResidualUnit:
    """Pre-activation residual unit: x + conv(act(norm(conv(act(norm(x)))))).

    The skip path is the identity, or a strided 1x1 projection when the
    filter count or stride changes.
    """

    def __init__(self, rng, cin, spec: LayerSpec, norm_mode, init="paper"):
        k, f = spec.kernel, spec.filters
        self.spec = spec
        self.norm1 = ChannelNorm(cin, norm_mode)
        self.conv1_w = make_param(rng, (f, cin, k, k), init, fan_in=cin * k * k)
        self.conv1_b = gaussian_param(rng, (f,), 0.01)
        self.norm2 = ChannelNorm(f, norm_mode)
        self.conv2_w = make_param(rng, (f, f, k, k), init, fan_in=f * k * k)
        self.conv2_b = gaussian_param(rng, (f,), 0.01)
        if cin != f or spec.stride != 1:
            self.proj_w = make_param(rng, (f, cin, 1, 1), init, fan_in=cin)
            self.proj_b = gaussian_param(rng, (f,), 0.01)
        else:
            self.proj_w = None
            self.proj_b = None

    def __call__(self, x):
        h = T.conv2d(T.relu(self.norm1(x)), self.conv1_w, self.conv1_b,
                     stride=self.spec.stride, dilation=self.spec.dilation)
        h = T.conv2d(T.relu(self.norm2(h)), self.conv2_w, self.conv2_b,
                     stride=1, dilation=self.spec.dilation)
        if self.proj_w is not None:
            skip = T.conv2d(x, self.proj_w, self.proj_b, stride=self.spec.stride)
        else:
            skip = x
        return T.add(skip, h)

    def parameters(self):
        params = {
            "conv1.weight": self.conv1_w, "conv1.bias": self.conv1_b,
            "conv2.weight": self.conv2_w, "conv2.bias": self.conv2_b,
        }
        for name, norm in (("norm1", self.norm1), ("norm2", self.norm2)):
            params.update({f"{name}.{k}": v for k, v in norm.parameters().items()})
        if self.proj_w is not None:
            params.update({"proj.weight": self.proj_w, "proj.bias": self.proj_b})
        return params


class MaxPoolLayer:
    def __call__(self, x):
        return T.maxpool2x2(x)

    def parameters(self):
        return {}


# Named encoder presets: (layer strings, layers normalised?).
ENCODER_PRESETS = {
    # Dilated residual network for text blocks; downsamples by 8, 512 channels out.
    "drn-c26-text": ([
        "Conv-5x5-F16-D1",
        "Res-3x3-F16-D1-S2",
        "Res-3x3-F32-D1-S2",
        "Res-3x3-F64-D1",
        "Res-3x3-F64-D1-S2",
        "Res-3x3-F128-D1",
        "Res-3x3-F128-D1",
        "Res-3x3-F256-D2",
        "Res-3x3-F256-D2",
        "Res-3x3-F512-D4",
        "Res-3x3-F512-D4",
        "Conv-3x3-F512-D2",
        "Conv-3x3-F512-D2",
        "Conv-3x3-F512-D1",
        "Conv-3x3-F512-D1",
    ], True),
    # Counting encoder: six residual units at full resolution, growing dilation.
    "count-6res": ([
        "Res-5x5-F32-D1-S1",
        "Res-5x5-F32-D1-S1",
        "Res-5x5-F32-D2-S1",
        "Res-5x5-F32-D2-S1",
        "Res-5x5-F32-D4-S1",
        "Res-5x5-F32-D4-S1",
    ], True),
    # Toy block encoder: six conv+ReLU layers, two 2x2 max-pools.
    "toy-6conv": ([
        "Conv-5x5-F16-D1",
        "Conv-5x5-F16-D1",
        "MaxPool-2x2",
        "Conv-5x5-F16-D1",
        "Conv-5x5-F16-D1",
        "MaxPool-2x2",
        "Conv-5x5-F32-D1",
        "Conv-5x5-F32-D1",
    ], False),
}


class Encoder:
    """A stack of conv / residual / max-pool layers acting on (N,C,H,W)."""

    def __init__(self, rng, specs, in_channels, norm_mode="affine", init="paper"):
        self.specs = list(specs)
        self.in_channels = in_channels
        self.layers = []
        cin = in_channels
        df = 1
        for spec in self.specs:
            if spec.kind == "maxpool":
                self.layers.append(MaxPoolLayer())
            elif spec.kind == "conv":
                self.layers.append(ConvLayer(rng, cin, spec, norm_mode, init=init))
                cin = spec.filters
            elif spec.kind == "res":
                self.layers.append(ResidualUnit(rng, cin, spec, norm_mode, init=init))
                cin = spec.filters
            else:
                raise ConfigError(f"unknown layer kind {spec.kind!r}")
            df *= spec.downsample
        self.out_channels = cin
        self.downsample_factor = df

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            params.update({f"layers.{i}.{k}": v for k, v in layer.parameters().items()})
        return params


def build_encoder(spec, in_channels, rng, norm_mode="affine", init="paper") -> Encoder:
    """Build an encoder from a preset name or an explicit layer-string list."""
    if isinstance(spec, str):
        if spec not in ENCODER_PRESETS:
            raise ConfigError(f"unknown encoder preset {spec!r}; valid presets: {sorted(ENCODER_PRESETS)}")
        layer_strings, use_norm = ENCODER_PRESETS[spec]
    else:
        layer_strings, use_norm = list(spec), True
    specs = [parse_layer_spec(s, norm=use_norm) for s in layer_strings]
    return Encoder(rng, specs, in_channels, norm_mode=norm_mode, init=init)
