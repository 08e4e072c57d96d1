"""Conv layers with attached fake-quantizers, batch-norm folding, and
forward/backward over an ordered layer stack.

A layer in "int8" mode fake-quantizes its input and its weights before the
convolution; "fp" mode ignores all quantization state. Batch-norm is always
folded into weight/bias before quantization starts, so LayerSpec never
carries live BN parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import QuantError, QuantParams, RoundingOffsets, fake_quant


class NetworkError(ValueError):
    """Structural problem in a layer stack or a forward call."""


@dataclass
class LayerSpec:
    """One conv layer (BN pre-folded) plus its per-layer quantization state."""

    name: str
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0
    activation: str = "relu"  # "relu" | "none"
    w_quant: Optional[QuantParams] = None
    a_quant: Optional[QuantParams] = None
    theta: Optional[RoundingOffsets] = None
    precision: str = "fp"  # "fp" | "int8"

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4:
            raise NetworkError(f"{self.name}: weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise NetworkError(
                f"{self.name}: bias shape {self.bias.shape} != out_ch {self.weight.shape[0]}"
            )
        if self.activation not in ("relu", "none"):
            raise NetworkError(f"{self.name}: unknown activation {self.activation!r}")
        if self.precision not in ("fp", "int8"):
            raise NetworkError(f"{self.name}: unknown precision {self.precision!r}")
        if self.theta is not None:
            if self.w_quant is None:
                raise NetworkError(f"{self.name}: rounding offsets require w_quant")
            if self.theta.theta.shape != self.weight.shape:
                raise NetworkError(
                    f"{self.name}: offsets shape {self.theta.theta.shape} "
                    f"!= weight shape {self.weight.shape}"
                )

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "LayerSpec":
        return replace(
            self,
            weight=self.weight.copy(),
            bias=self.bias.copy(),
            theta=RoundingOffsets(self.theta.theta.copy()) if self.theta else None,
        )


@dataclass
class Network:
    """Ordered trunk of LayerSpecs with named head layers attached at the end."""

    layers: list
    heads: Dict[str, LayerSpec] = field(default_factory=dict)
    input_spec: tuple = ()  # (channels, H, W)

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_ch != prev.out_ch:
                raise NetworkError(
                    f"channel mismatch {prev.name}({prev.out_ch}) -> {cur.name}({cur.in_ch})"
                )
        if self.layers:
            tail_ch = self.layers[-1].out_ch
            for head in self.heads.values():
                if head.in_ch != tail_ch:
                    raise NetworkError(
                        f"head {head.name} expects {head.in_ch} channels, trunk emits {tail_ch}"
                    )

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        if name in self.heads:
            return self.heads[name]
        raise NetworkError(f"unknown layer {name!r}")

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise NetworkError(f"unknown trunk layer {name!r}")

    def copy(self) -> "Network":
        return Network(
            layers=[l.copy() for l in self.layers],
            heads={k: v.copy() for k, v in self.heads.items()},
            input_spec=tuple(self.input_spec),
        )


# -- forward ------------------------------------------------------------------------


def quantized_weight(layer: LayerSpec) -> np.ndarray:
    """The dequantized weight a frozen int8 layer effectively convolves with."""
    if layer.w_quant is None:
        return layer.weight
    return fake_quant(layer.weight, layer.w_quant, layer.theta)


def conv2d(x: Tensor, layer: LayerSpec, overrides: Optional[dict] = None) -> Tensor:
    """Layer convolution (plus bias), honoring the layer's precision mode.

    `overrides` supplies live Tensors {"w_scale", "a_scale", "theta"} while a
    layer's quantization parameters are being optimized; without it, frozen
    QuantParams / offsets from the LayerSpec are used.
    """
    x = ad.as_tensor(x)
    if x.data.ndim != 4:
        raise NetworkError(f"{layer.name}: input must be (B,C,H,W), got {x.data.shape}")
    if x.data.shape[1] != layer.in_ch:
        raise NetworkError(
            f"{layer.name}: input shape {x.data.shape} incompatible with "
            f"weight shape {layer.weight.shape}"
        )
    ov = overrides or {}
    quantized = layer.precision == "int8" or ov
    if not quantized:
        w = Tensor(layer.weight)
        return ad.conv2d(x, w, Tensor(layer.bias), layer.stride, layer.padding)

    if "a_scale" in ov:
        a_bits = ov.get("a_bits", layer.a_quant.bits if layer.a_quant else 8)
        x = ad.fake_quant_op(x, ov["a_scale"], a_bits)
    elif layer.a_quant is not None:
        x = ad.fake_quant_op(x, Tensor(layer.a_quant.scale), layer.a_quant.bits)

    if "w_scale" in ov:
        w_bits = ov.get("w_bits", layer.w_quant.bits if layer.w_quant else 8)
        w = ad.fake_quant_op(
            Tensor(layer.weight), ov["w_scale"], w_bits, theta=ov.get("theta")
        )
    elif layer.w_quant is not None:
        theta = Tensor(layer.theta.theta) if layer.theta is not None else None
        w = ad.fake_quant_op(
            Tensor(layer.weight), Tensor(layer.w_quant.scale), layer.w_quant.bits, theta=theta
        )
    else:
        raise QuantError(f"{layer.name}: int8 precision but no weight quantizer set")
    return ad.conv2d(x, w, Tensor(layer.bias), layer.stride, layer.padding)


def layer_forward(x: Tensor, layer: LayerSpec, overrides: Optional[dict] = None) -> Tensor:
    out = conv2d(x, layer, overrides)
    if layer.activation == "relu":
        out = ad.relu(out)
    return out


def forward(net: Network, x, stop_after: Optional[str] = None) -> Tensor:
    """Run the trunk in order; with stop_after, return that layer's activation."""
    t = ad.as_tensor(x)
    for layer in net.layers:
        t = layer_forward(t, layer)
        if stop_after is not None and layer.name == stop_after:
            return t
    if stop_after is not None:
        raise NetworkError(f"unknown layer {stop_after!r}")
    return t


def forward_collect(net: Network, x) -> Dict[str, np.ndarray]:
    """Trunk forward capturing every layer's (post-activation) output."""
    t = ad.as_tensor(x)
    acts: Dict[str, np.ndarray] = {}
    for layer in net.layers:
        t = layer_forward(t, layer)
        acts[layer.name] = t.data
    return acts


def backward(loss: Tensor, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the designated parameters."""
    on_trace = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in on_trace:
            continue
        on_trace.add(id(node))
        stack.extend(node._parents)
    for name, p in params.items():
        if id(p) not in on_trace:
            raise NetworkError(f"parameter {name!r} is not on the computation trace")
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {name: p.grad for name, p in params.items()}


# -- batch-norm folding ---------------------------------------------------------------


def fold_batchnorm(
    conv_w: np.ndarray,
    conv_b: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
):
    """Fold a per-channel batch-norm into the preceding conv's weight and bias.

    w' = w * gamma / sqrt(var + eps)   (per output channel)
    b' = (b - mean) * gamma / sqrt(var + eps) + beta
    """
    conv_w = np.asarray(conv_w)
    out_ch = conv_w.shape[0]
    for nm, arr in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        arr = np.asarray(arr)
        if arr.shape != (out_ch,):
            raise NetworkError(f"fold_batchnorm: {nm} shape {arr.shape} != ({out_ch},)")
    var = np.asarray(var)
    if (var < 0).any():
        raise NetworkError("fold_batchnorm: negative variance")
    factor = np.asarray(gamma) / np.sqrt(var + eps)
    w = conv_w * factor.reshape(-1, 1, 1, 1)
    b = (np.asarray(conv_b) - np.asarray(mean)) * factor + np.asarray(beta)
    return w.astype(conv_w.dtype), b.astype(conv_w.dtype)
