"""Gated dense and convolution layers plus model builders.

Gate placement follows the group-sparsity convention: a convolution layer
carries one gate per *output filter* (applied to the output channels,
after the bias, before any activation); a dense layer carries one gate
per *input neuron* (applied to its input vector). Pool, relu, and flatten
layers pass activations through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gates as hc
from .autodiff import Tape, Tensor
from .gates import GateGroup, Granularity


class Conv2d:
    """2-D convolution with optional per-output-filter gates."""

    def __init__(self, name, weight, bias, stride=1, padding=0, log_alpha=None,
                 beta=hc.DEFAULT_BETA, gamma=hc.DEFAULT_GAMMA, zeta=hc.DEFAULT_ZETA):
        self.name = name
        self.weight = weight  # (filters, in_channels, kh, kw)
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.log_alpha = log_alpha  # Tensor (filters,) or None when ungated
        self.beta, self.gamma, self.zeta = beta, gamma, zeta
        self.in_h = self.in_w = None  # input spatial extents, set by the model

    @property
    def gated(self):
        return self.log_alpha is not None

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]

    def gate_group(self) -> GateGroup:
        return GateGroup(self.log_alpha.data, beta=self.beta, gamma=self.gamma,
                         zeta=self.zeta, granularity=Granularity.PER_OUTPUT_FILTER)


class Dense:
    """Fully-connected layer with optional per-input-neuron gates."""

    def __init__(self, name, weight, bias, log_alpha=None,
                 beta=hc.DEFAULT_BETA, gamma=hc.DEFAULT_GAMMA, zeta=hc.DEFAULT_ZETA):
        self.name = name
        self.weight = weight  # (in_features, out_features)
        self.bias = bias
        self.log_alpha = log_alpha  # Tensor (in_features,) or None
        self.beta, self.gamma, self.zeta = beta, gamma, zeta

    @property
    def gated(self):
        return self.log_alpha is not None

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def gate_group(self) -> GateGroup:
        return GateGroup(self.log_alpha.data, beta=self.beta, gamma=self.gamma,
                         zeta=self.zeta, granularity=Granularity.PER_INPUT_NEURON)


@dataclass
class MaxPool2x2:
    name: str = "pool"


@dataclass
class Relu:
    name: str = "relu"


@dataclass
class Flatten:
    name: str = "flatten"
    in_shape: tuple = None  # (channels, h, w) at this point, set by the model


class GatedModel:
    """Ordered layer chain with one softmax cross-entropy head."""

    def __init__(self, layers, input_shape, num_classes, name="model"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)  # (channels, h, w) or (features,)
        self.num_classes = num_classes
        self.name = name
        self._annotate_geometry()

    def _annotate_geometry(self):
        """Propagate shapes so conv layers know their input extents."""
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                c, h, w = shape
                if c != layer.in_channels:
                    raise ValueError(
                        f"{layer.name}: expects {layer.in_channels} input channels, got {c}"
                    )
                layer.in_h, layer.in_w = h, w
                kh, kw = layer.kernel
                ph, pw = ad.pad_amounts(layer.padding)
                oh = (h - kh + ph) // layer.stride + 1
                ow = (w - kw + pw) // layer.stride + 1
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, MaxPool2x2):
                c, h, w = shape
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, Flatten):
                layer.in_shape = shape
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ValueError(
                        f"{layer.name}: expects {layer.in_features} inputs, got {shape}"
                    )
                shape = (layer.out_features,)
        if shape != (self.num_classes,):
            raise ValueError(f"model output {shape} does not match {self.num_classes} classes")

    @property
    def is_gated(self):
        return any(getattr(l, "gated", False) for l in self.layers)

    def gated_layers(self):
        return [l for l in self.layers if getattr(l, "gated", False)]

    def parameters(self):
        """[(name, tensor, kind)] with kind in {weight, bias, log_alpha}."""
        params = []
        for layer in self.layers:
            if isinstance(layer, (Conv2d, Dense)):
                params.append((f"{layer.name}.weight", layer.weight, "weight"))
                params.append((f"{layer.name}.bias", layer.bias, "bias"))
                if layer.gated:
                    params.append((f"{layer.name}.log_alpha", layer.log_alpha, "log_alpha"))
        return params

    @property
    def dtype(self):
        for layer in self.layers:
            if isinstance(layer, (Conv2d, Dense)):
                return layer.weight.dtype
        raise ValueError("model has no parameterized layers")


def _forward(model, x_t, labels, tape, mode, rng=None):
    """Shared layer walk. mode: 'train' samples hard concrete gates,
    'eval' uses the deterministic estimator, 'plain' applies no gates."""
    x = x_t
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            x = ad.conv2d(x, layer.weight, stride=layer.stride, padding=layer.padding, tape=tape)
            x = ad.add_bias(x, layer.bias, tape=tape)
            if layer.gated and mode != "plain":
                x = ad.scale_channels(x, _gate_values(layer, mode, rng, tape), tape=tape)
        elif isinstance(layer, Dense):
            if layer.gated and mode != "plain":
                x = ad.scale_channels(x, _gate_values(layer, mode, rng, tape), tape=tape)
            x = ad.matmul(x, layer.weight, tape=tape)
            x = ad.add_bias(x, layer.bias, tape=tape)
        elif isinstance(layer, MaxPool2x2):
            x = ad.maxpool2x2(x, tape=tape)
        elif isinstance(layer, Relu):
            x = ad.relu(x, tape=tape)
        elif isinstance(layer, Flatten):
            x = ad.flatten(x, tape=tape)
        else:
            raise TypeError(f"unknown layer type {type(layer).__name__}")
    if labels is None:
        return x
    return ad.softmax_cross_entropy(x, labels, tape=tape)


def _gate_values(layer, mode, rng, tape):
    n = len(layer.log_alpha.data)
    if mode == "train":
        u = rng.random(n)
        return hc.sample_on_tape(layer.log_alpha, u, tape,
                                 beta=layer.beta, gamma=layer.gamma, zeta=layer.zeta)
    return Tensor(hc.deterministic_gate(layer.gate_group()).astype(layer.log_alpha.dtype))


def forward_train(model, images, labels, rng):
    """One stochastic forward pass: every gated layer draws one hard
    concrete sample per minibatch. Returns (mean-NLL tensor, tape)."""
    tape = Tape()
    x = Tensor(np.asarray(images, dtype=model.dtype))
    loss = _forward(model, x, np.asarray(labels), tape, "train", rng)
    return loss, tape


def forward_eval(model, images):
    """Deterministic-gate forward pass; returns logits as a numpy array."""
    x = Tensor(np.asarray(images, dtype=model.dtype))
    return _forward(model, x, None, None, "eval").data


def predict(model, images):
    return forward_eval(model, images).argmax(axis=1)


# --- builders -------------------------------------------------------------

# dropout rates the gate initialization mimics: the input-adjacent layer
# kept 80% of units in the original nets, hidden layers 50%
INPUT_DROPOUT = 0.2
HIDDEN_DROPOUT = 0.5


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_lenet5_caffe(rng=None, dtype=np.float32, gate_noise_std=0.01,
                       beta=hc.DEFAULT_BETA, gamma=hc.DEFAULT_GAMMA, zeta=hc.DEFAULT_ZETA):
    """LeNet-5-Caffe with gates on conv filters and dense inputs.

    conv 20@5x5 -> pool -> conv 50@5x5 -> pool -> flatten(800)
    -> dense 500 -> relu -> dense 10, input 1x28x28.
    Gate counts per layer: [20, 50, 800, 500].

    With rng=None the weights are zero (geometry-only model for FLOPs
    accounting); gates still initialize at their dropout-rate means.
    """
    def w(shape, fan_in):
        if rng is None:
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        return Tensor(_he_normal(rng, shape, fan_in, dtype), requires_grad=True)

    def b(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    def la(n, dropout):
        if rng is None:
            vals = np.full(n, np.log(1.0 - dropout) - np.log(dropout))
        else:
            vals = hc.log_alpha_init(n, dropout, rng, noise_std=gate_noise_std)
        return Tensor(vals.astype(dtype), requires_grad=True)

    hyper = dict(beta=beta, gamma=gamma, zeta=zeta)
    layers = [
        Conv2d("conv1", w((20, 1, 5, 5), 25), b(20), log_alpha=la(20, INPUT_DROPOUT), **hyper),
        MaxPool2x2("pool1"),
        Conv2d("conv2", w((50, 20, 5, 5), 500), b(50), log_alpha=la(50, HIDDEN_DROPOUT), **hyper),
        MaxPool2x2("pool2"),
        Flatten("flatten"),
        Dense("fc1", w((800, 500), 800), b(500), log_alpha=la(800, HIDDEN_DROPOUT), **hyper),
        Relu("relu1"),
        Dense("fc2", w((500, 10), 500), b(10), log_alpha=la(500, HIDDEN_DROPOUT), **hyper),
    ]
    return GatedModel(layers, input_shape=(1, 28, 28), num_classes=10, name="lenet5caffe")


@dataclass(frozen=True)
class ConvGeom:
    """Static geometry of one convolution, enough to count its FLOPs."""

    name: str
    k_w: int
    k_h: int
    c_in: int
    i_w: int
    i_h: int
    p_w: int
    p_h: int
    stride: int
    c_out: int
    penalized: bool = False


@dataclass(frozen=True)
class ArchSpec:
    """Weight-free architecture description used by static accounting."""

    name: str
    convs: tuple
    widths: tuple = ()
    blocks_per_group: int = 0

    @property
    def block_count(self):
        return len(self.widths) * self.blocks_per_group


def build_wrn_28_10_spec() -> ArchSpec:
    """WideResNet-28-10 as an accounting spec (no weights).

    Three groups of four residual blocks at widths 160/320/640 and spatial
    sizes 32/16/8; each block holds two 3x3 convs, the first conv of a
    group downsamples with stride 2 (except group 1). The two in-block
    convs are the penalized set; the stem conv and the 1x1 projection
    shortcuts are not penalized.
    """
    widths = (160, 320, 640)
    blocks = 4
    convs = [ConvGeom("conv0", 3, 3, 3, 32, 32, 2, 2, 1, 16, penalized=False)]
    c_in = 16
    spatial_in = 32
    for g, width in enumerate(widths, start=1):
        for b in range(1, blocks + 1):
            stride = 2 if (g > 1 and b == 1) else 1
            spatial_out = spatial_in // stride
            convs.append(ConvGeom(
                f"group{g}.block{b}.conv_a", 3, 3, c_in, spatial_in, spatial_in,
                2, 2, stride, width, penalized=True,
            ))
            convs.append(ConvGeom(
                f"group{g}.block{b}.conv_b", 3, 3, width, spatial_out, spatial_out,
                2, 2, 1, width, penalized=True,
            ))
            if b == 1:
                convs.append(ConvGeom(
                    f"group{g}.shortcut", 1, 1, c_in, spatial_in, spatial_in,
                    0, 0, stride, width, penalized=False,
                ))
            c_in = width
            spatial_in = spatial_out
    return ArchSpec(name="wrn28x10", convs=tuple(convs), widths=widths, blocks_per_group=blocks)
