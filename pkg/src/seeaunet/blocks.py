"""Composite network blocks built from :mod:`seeaunet.ops`.

Blocks are plain functions over explicit parameter bundles. Bundles are created
by :class:`ParamFactory`, which registers every tensor in a
:class:`~seeaunet.params.ParameterStore` under a hierarchical name and
initialises it (He-normal weights, zero biases and beta, unit gamma, running
mean 0 and running variance 1).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .params import ParameterStore

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    padding: str = "same"

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class DenseParams:
    weight: Tensor
    bias: Optional[Tensor]


@dataclass
class ConvBlockParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    final_relu: bool = True


@dataclass
class ResidualBlockParams:
    body: ConvBlockParams
    shortcut: Optional[ConvParams] = None
    shortcut_bn: Optional[BatchNormParams] = None


@dataclass
class SEBlockParams:
    fc1: DenseParams
    fc2: DenseParams
    reduction: int


@dataclass
class GatingParams:
    conv: ConvParams
    bn: BatchNormParams


@dataclass
class AttentionGateParams:
    """Attention gate weights.

    ``wx`` projects (and halves) the skip signal, ``wg`` projects the gating
    signal, ``psi`` maps the joint features to one coefficient channel. The
    optional ``wg_refine`` and ``out_conv``/``out_bn`` entries are only present
    in the ``reference`` layout.
    """

    wx: ConvParams
    wg: ConvParams
    psi: ConvParams
    psi_bn: Optional[BatchNormParams] = None
    wg_refine: Optional[ConvParams] = None
    out_conv: Optional[ConvParams] = None
    out_bn: Optional[BatchNormParams] = None

    @property
    def f_int(self) -> int:
        return self.wx.out_channels


class ParamFactory:
    """Creates and registers initialised parameter bundles."""

    def __init__(self, store: ParameterStore, rng: np.random.Generator, dtype=np.float32):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def _he(self, shape, fan_in: int) -> np.ndarray:
        return self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    def conv(self, name: str, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True) -> ConvParams:
        w = self.store.add(f"{name}.weight", self._he((cout, cin, k, k), cin * k * k), dtype=self.dtype)
        b = self.store.add(f"{name}.bias", np.zeros(cout), dtype=self.dtype) if bias else None
        return ConvParams(w, b, stride=stride)

    def bn(self, name: str, c: int) -> BatchNormParams:
        add = self.store.add
        return BatchNormParams(
            gamma=add(f"{name}.gamma", np.ones(c), dtype=self.dtype),
            beta=add(f"{name}.beta", np.zeros(c), dtype=self.dtype),
            running_mean=add(f"{name}.running_mean", np.zeros(c), trainable=False, dtype=self.dtype),
            running_var=add(f"{name}.running_var", np.ones(c), trainable=False, dtype=self.dtype),
        )

    def dense(self, name: str, fin: int, fout: int, bias: bool = True) -> DenseParams:
        w = self.store.add(f"{name}.weight", self._he((fin, fout), fin), dtype=self.dtype)
        b = self.store.add(f"{name}.bias", np.zeros(fout), dtype=self.dtype) if bias else None
        return DenseParams(w, b)

    # composite bundles

    def conv_block(self, name: str, cin: int, cout: int, final_relu: bool = True) -> ConvBlockParams:
        return ConvBlockParams(
            conv1=self.conv(f"{name}.conv1", cin, cout, 3),
            bn1=self.bn(f"{name}.bn1", cout),
            conv2=self.conv(f"{name}.conv2", cout, cout, 3),
            bn2=self.bn(f"{name}.bn2", cout),
            final_relu=final_relu,
        )

    def residual_block(self, name: str, cin: int, cout: int, layout: str = "compact") -> ResidualBlockParams:
        if layout == "reference":
            body = self.conv_block(f"{name}.body", cin, cout, final_relu=False)
            return ResidualBlockParams(
                body,
                shortcut=self.conv(f"{name}.shortcut", cin, cout, 1),
                shortcut_bn=self.bn(f"{name}.shortcut_bn", cout),
            )
        body = self.conv_block(f"{name}.body", cin, cout)
        shortcut = self.conv(f"{name}.shortcut", cin, cout, 1) if cin != cout else None
        return ResidualBlockParams(body, shortcut=shortcut)

    def se_block(self, name: str, c: int, reduction: int, bias: bool = True) -> SEBlockParams:
        check_se_reduction(c, reduction)
        hidden = c // reduction
        return SEBlockParams(
            fc1=self.dense(f"{name}.fc1", c, hidden, bias),
            fc2=self.dense(f"{name}.fc2", hidden, c, bias),
            reduction=reduction,
        )

    def gating(self, name: str, cin: int, cout: int) -> GatingParams:
        return GatingParams(self.conv(f"{name}.conv", cin, cout, 1), self.bn(f"{name}.bn", cout))

    def attention_gate(self, name: str, c_skip: int, c_gate: int, f_int: int, layout: str = "compact") -> AttentionGateParams:
        if layout == "reference":
            return AttentionGateParams(
                wx=self.conv(f"{name}.wx", c_skip, f_int, 2, stride=2),
                wg=self.conv(f"{name}.wg", c_gate, f_int, 1),
                wg_refine=self.conv(f"{name}.wg_refine", f_int, f_int, 3),
                psi=self.conv(f"{name}.psi", f_int, 1, 1),
                out_conv=self.conv(f"{name}.out_conv", c_skip, c_skip, 1),
                out_bn=self.bn(f"{name}.out_bn", c_skip),
            )
        return AttentionGateParams(
            wx=self.conv(f"{name}.wx", c_skip, f_int, 1, stride=2),
            wg=self.conv(f"{name}.wg", c_gate, f_int, 1),
            psi=self.conv(f"{name}.psi", f_int, 1, 1),
            psi_bn=self.bn(f"{name}.psi_bn", 1),
        )


def check_se_reduction(c: int, reduction: int) -> None:
    if reduction < 1:
        raise ConfigError(f"SE reduction ratio must be >= 1, got {reduction}")
    if c % reduction:
        raise ConfigError(f"SE block on {c} channels: not divisible by reduction ratio {reduction}")


# -- forward functions ---------------------------------------------------------

def conv(x: Tensor, p: ConvParams) -> Tensor:
    return ops.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding)


def batchnorm(x: Tensor, p: BatchNormParams, train: bool) -> Tensor:
    return ops.batchnorm2d(x, p.gamma, p.beta, p.running_mean, p.running_var, train, p.momentum, p.eps)


def conv_block(x: Tensor, p: ConvBlockParams, train: bool = False) -> Tensor:
    """conv3x3 -> BN -> relu -> conv3x3 -> BN -> relu (last relu optional)."""
    h = ops.relu(batchnorm(conv(x, p.conv1), p.bn1, train))
    h = batchnorm(conv(h, p.conv2), p.bn2, train)
    return ops.relu(h) if p.final_relu else h


def residual_conv_block(x: Tensor, p: ResidualBlockParams, train: bool = False) -> Tensor:
    body = conv_block(x, p.body, train)
    shortcut = x
    if p.shortcut is not None:
        shortcut = conv(x, p.shortcut)
        if p.shortcut_bn is not None:
            shortcut = batchnorm(shortcut, p.shortcut_bn, train)
    return ops.relu(ops.add(body, shortcut))


def se_scales(x: Tensor, p: SEBlockParams) -> Tensor:
    """Per-channel excitation weights ``s[N,C,1,1]`` in (0, 1)."""
    n, c = x.shape[:2]
    z = ops.reshape(ops.global_avg_pool(x), (n, c))
    z = ops.relu(ops.dense(z, p.fc1.weight, p.fc1.bias))
    z = ops.sigmoid(ops.dense(z, p.fc2.weight, p.fc2.bias))
    return ops.reshape(z, (n, c, 1, 1))


def se_block(x: Tensor, p: SEBlockParams, train: bool = False) -> Tensor:
    """Squeeze (global average pool), excite (bottleneck MLP, sigmoid), rescale channels."""
    if x.shape[1] != p.fc1.weight.shape[0]:
        raise ShapeError(f"SE block built for {p.fc1.weight.shape[0]} channels, got input {x.shape}")
    return ops.scale_channels(x, se_scales(x, p))


def gating_signal(d: Tensor, p: GatingParams, train: bool = False) -> Tensor:
    return ops.relu(batchnorm(conv(d, p.conv), p.bn, train))


def attention_coefficients(x_skip: Tensor, g: Tensor, p: AttentionGateParams, train: bool = False) -> Tensor:
    """Coefficients ``alpha[N,1,h,w]`` at the gating signal's resolution."""
    if x_skip.ndim != 4 or g.ndim != 4:
        raise ShapeError(f"attention gate needs 4-D inputs, got {x_skip.shape} and {g.shape}")
    if (x_skip.shape[2], x_skip.shape[3]) != (2 * g.shape[2], 2 * g.shape[3]) or x_skip.shape[0] != g.shape[0]:
        raise ShapeError(
            f"attention gate: skip level {x_skip.shape} is not one pooling level above gating level {g.shape}"
        )
    theta = conv(x_skip, p.wx)
    phi = conv(g, p.wg)
    if p.wg_refine is not None:
        phi = conv(phi, p.wg_refine)
    psi = conv(ops.relu(ops.add(theta, phi)), p.psi)
    if p.psi_bn is not None:
        psi = batchnorm(psi, p.psi_bn, train)
    return ops.sigmoid(psi)


def attention_gate(x_skip: Tensor, g: Tensor, p: AttentionGateParams, train: bool = False) -> Tensor:
    """Re-weight ``x_skip`` by spatial attention computed from ``x_skip`` and ``g``."""
    alpha = ops.upsample2d(attention_coefficients(x_skip, g, p, train), 2)
    y = ops.mul(x_skip, alpha)
    if p.out_conv is not None:
        y = conv(y, p.out_conv)
        if p.out_bn is not None:
            y = batchnorm(y, p.out_bn, train)
    return y
