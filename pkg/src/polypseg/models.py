"""Builders and forward passes for the two encoder-decoder architectures.

Both share a VGG-style five-stage encoder (3x3 conv + batchnorm + ReLU, 2x2
max pooling, channel widths base*{1,2,4,8,8}, conv counts {2,2,3,3,3}).

``efcn8`` keeps the convolutionalized classifier head of its VGG ancestry
(a 7x7 and a 1x1 conv with dropout after each) which is where the bulk of
its parameters lives, scores pool3/pool4/head with 1x1 convs, and fuses them
additively through learned transposed-conv upsampling (x2, x2, x8).

``esegnet`` mirrors the encoder with a decoder that upsamples by scattering
values to the encoder's pooling indices, then densifies with conv blocks;
dropout sits after the three central encoder stages and after the three
central decoder stages, which is what makes Monte Carlo sampling possible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor, as_tensor
from .errors import InvalidArgumentError, ShapeError
from .rng import Rng

STAGE_MULT = (1, 2, 4, 8, 8)
STAGE_CONVS = (2, 2, 3, 3, 3)
HEAD_MULT = 12  # classifier-head width multiplier; keeps efcn8 heavier than esegnet
MODES = ("train", "eval", "mc-sample")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 16
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in ("efcn8", "esegnet"):
            raise InvalidArgumentError(f"unknown model kind {self.kind!r}")
        if self.base_width < 1:
            raise InvalidArgumentError("base_width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must lie in [0, 1)")
        if self.num_classes != 2:
            raise InvalidArgumentError("this artifact is binary: num_classes must be 2")

    def stage_width(self, stage: int) -> int:
        return self.base_width * STAGE_MULT[stage - 1]


class ModelParams:
    """Named parameter set: trainable tensors plus batchnorm running stats.

    The name set is fully determined by the ModelSpec that built it.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, np.ndarray] = {}

    def add_conv(self, name: str, conv: L.Conv2dParams):
        self.params[f"{name}.weight"] = conv.weights
        if conv.bias is not None:
            self.params[f"{name}.bias"] = conv.bias

    def add_bn(self, name: str, bn: L.BatchNormState):
        self.params[f"{name}.gamma"] = bn.gamma
        self.params[f"{name}.beta"] = bn.beta
        self.bn_stats[f"{name}.running_mean"] = bn.running_mean
        self.bn_stats[f"{name}.running_var"] = bn.running_var

    def conv(self, name: str, stride: int = 1, padding: int = 0) -> L.Conv2dParams:
        bias = self.params.get(f"{name}.bias")
        return L.Conv2dParams(weights=self.params[f"{name}.weight"], bias=bias,
                              stride=stride, padding=padding)

    def bn(self, name: str, epsilon: float = 1e-5, momentum: float = 0.1) -> L.BatchNormState:
        return L.BatchNormState(
            gamma=self.params[f"{name}.gamma"],
            beta=self.params[f"{name}.beta"],
            running_mean=self.bn_stats[f"{name}.running_mean"],
            running_var=self.bn_stats[f"{name}.running_var"],
            momentum=momentum, epsilon=epsilon)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        """Copy with every tensor cast (used by 64-bit gradient checks)."""
        other = ModelParams()
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        for name, a in self.bn_stats.items():
            other.bn_stats[name] = a.astype(dtype)
        return other

    def copy(self) -> "ModelParams":
        return self.astype(next(iter(self.params.values())).dtype)


def _add_conv_bn(mp: ModelParams, name: str, cin: int, cout: int, k: int,
                 rng: Rng, padding: int):
    mp.add_conv(name, L.make_conv(cin, cout, k, rng, padding=padding))
    mp.add_bn(f"{name}.bn", L.make_batchnorm(cout))


def _build_encoder(mp: ModelParams, spec: ModelSpec, rng: Rng):
    cin = spec.in_channels
    for stage in range(1, 6):
        width = spec.stage_width(stage)
        for i in range(STAGE_CONVS[stage - 1]):
            _add_conv_bn(mp, f"enc{stage}.conv{i}", cin, width, 3, rng, padding=1)
            cin = width


def build_efcn8(spec: ModelSpec, rng: Rng) -> ModelParams:
    if spec.kind != "efcn8":
        raise InvalidArgumentError(f"build_efcn8 got spec.kind={spec.kind!r}")
    mp = ModelParams()
    _build_encoder(mp, spec, rng)
    deep = spec.stage_width(5)
    head = spec.base_width * HEAD_MULT
    _add_conv_bn(mp, "head.conv6", deep, head, 7, rng, padding=3)
    _add_conv_bn(mp, "head.conv7", head, head, 1, rng, padding=0)
    k = spec.num_classes
    mp.add_conv("score_final", L.make_conv(head, k, 1, rng))
    mp.add_conv("score_pool4", L.make_conv(spec.stage_width(4), k, 1, rng))
    mp.add_conv("score_pool3", L.make_conv(spec.stage_width(3), k, 1, rng))
    # learned upsampling; bias-free so skip fusion stays purely additive
    mp.add_conv("up2a", L.make_conv(k, k, 4, rng, bias=False))
    mp.add_conv("up2b", L.make_conv(k, k, 4, rng, bias=False))
    mp.add_conv("up8", L.make_conv(k, k, 16, rng, bias=False))
    return mp


def build_esegnet(spec: ModelSpec, rng: Rng) -> ModelParams:
    if spec.kind != "esegnet":
        raise InvalidArgumentError(f"build_esegnet got spec.kind={spec.kind!r}")
    mp = ModelParams()
    _build_encoder(mp, spec, rng)
    for stage in range(5, 0, -1):
        width = spec.stage_width(stage)
        out_width = spec.stage_width(stage - 1) if stage > 1 else spec.base_width
        count = STAGE_CONVS[stage - 1]
        cin = width
        for i in range(count):
            cout = out_width if i == count - 1 else width
            _add_conv_bn(mp, f"dec{stage}.conv{i}", cin, cout, 3, rng, padding=1)
            cin = cout
    mp.add_conv("classifier", L.make_conv(spec.base_width, spec.num_classes, 1, rng))
    return mp


def build_model(spec: ModelSpec, rng: Rng) -> ModelParams:
    return build_efcn8(spec, rng) if spec.kind == "efcn8" else build_esegnet(spec, rng)


# -- forward passes -----------------------------------------------------------


def _validate_input(x: Tensor):
    if x.data.ndim != 4:
        raise ShapeError("model input must be [N, C, H, W]")
    h, w = x.shape[2], x.shape[3]
    if h % 32 or w % 32:
        raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")
    if x.data.min() < 0.0 or x.data.max() > 1.0:
        raise InvalidArgumentError("input values must lie in [0, 1]")


def _conv_block(mp: ModelParams, name: str, h, bn_mode: str):
    h = L.conv2d(h, mp.conv(name, padding=_pad_of(mp, name)))
    h = L.batchnorm(h, mp.bn(f"{name}.bn"), mode=bn_mode)
    return ad.relu(h)


def _pad_of(mp: ModelParams, name: str) -> int:
    k = mp.params[f"{name}.weight"].shape[2]
    return k // 2


def _dropout(spec: ModelSpec, mode: str, h, rng: Rng | None):
    if mode == "eval" or spec.dropout_rate == 0.0:
        return h
    cfg = L.DropoutConfig(rate=spec.dropout_rate, mode=mode)
    return L.dropout(h, cfg, rng)


def forward(params: ModelParams, spec: ModelSpec, x, mode: str = "eval",
            rng: Rng | None = None, trace: dict | None = None) -> Tensor:
    """Run the architecture selected by ``spec.kind``; returns [N, 2, H, W]
    logits at input resolution.

    ``mode`` governs both batchnorm (train statistics vs running averages)
    and dropout (active in train/mc-sample, identity in eval).
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    x = as_tensor(x)
    _validate_input(x)
    if mode != "eval" and spec.dropout_rate > 0.0 and rng is None:
        raise InvalidArgumentError(f"mode {mode!r} needs an Rng for dropout masks")
    bn_mode = "train" if mode == "train" else "eval"

    if spec.kind == "efcn8":
        return _forward_efcn8(params, spec, x, mode, bn_mode, rng, trace)
    return _forward_esegnet(params, spec, x, mode, bn_mode, rng, trace)


def _forward_efcn8(params, spec, x, mode, bn_mode, rng, trace):
    h = x
    pooled = {}
    for stage in range(1, 6):
        for i in range(STAGE_CONVS[stage - 1]):
            h = _conv_block(params, f"enc{stage}.conv{i}", h, bn_mode)
        h = L.maxpool2x2(h).output
        pooled[stage] = h
    h = _dropout(spec, mode, _conv_block(params, "head.conv6", h, bn_mode), rng)
    h = _dropout(spec, mode, _conv_block(params, "head.conv7", h, bn_mode), rng)

    score5 = L.conv2d(h, params.conv("score_final"))
    score4 = L.conv2d(pooled[4], params.conv("score_pool4"))
    score3 = L.conv2d(pooled[3], params.conv("score_pool3"))

    fused4 = ad.add(L.transposed_conv2d(score5, params.conv("up2a", stride=2, padding=1)), score4)
    fused3 = ad.add(L.transposed_conv2d(fused4, params.conv("up2b", stride=2, padding=1)), score3)
    logits = L.transposed_conv2d(fused3, params.conv("up8", stride=8, padding=4))
    if trace is not None:
        trace.update(score5=score5.data, score4=score4.data, score3=score3.data)
    return logits


def _forward_esegnet(params, spec, x, mode, bn_mode, rng, trace):
    h = x
    indices, shapes = {}, {}
    for stage in range(1, 6):
        for i in range(STAGE_CONVS[stage - 1]):
            h = _conv_block(params, f"enc{stage}.conv{i}", h, bn_mode)
        shapes[stage] = h.shape
        pr = L.maxpool2x2(h)
        h = pr.output
        indices[stage] = pr.indices
        if stage >= 3:  # dropout after the three central encoder stages
            h = _dropout(spec, mode, h, rng)

    for stage in range(5, 0, -1):
        h = L.max_unpool2x2(h, indices[stage], shapes[stage])
        if trace is not None:
            trace[f"dec{stage}.unpooled"] = h.data
        for i in range(STAGE_CONVS[stage - 1]):
            h = _conv_block(params, f"dec{stage}.conv{i}", h, bn_mode)
        if stage >= 3:  # dropout after the three central decoder stages
            h = _dropout(spec, mode, h, rng)

    return L.conv2d(h, params.conv("classifier"))
