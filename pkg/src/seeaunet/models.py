"""The four segmentation architectures and their parameter accounting.

``unet``
    Plain encoder/decoder with concatenated skip connections.
``attention_unet``
    Skip connections pass through attention gates driven by a gating signal
    projected from the coarser decoder features.
``attention_res_unet``
    ``attention_unet`` with residual conv blocks.
``seea_unet``
    ``attention_unet`` with squeeze-and-excitation blocks after the encoder
    conv blocks.

Two layouts are available. ``compact`` (default) uses 1x1 projections inside
the attention gate with batch norm after ``psi`` and a bare sigmoid head.
``reference`` follows the widely shared Keras tutorial models (2x2 strided
skip projection, 3x3 refinement of the gating projection, 1x1 conv + batch norm
on the gated output, batch norm in the head, batch-normed 1x1 residual
shortcuts); under it the parameter totals of the published comparison table are
reproducible, see :func:`scan_published`.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import blocks, ops
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, ShapeError
from .params import ParameterStore

ARCHS = ("unet", "attention_unet", "attention_res_unet", "seea_unet")
ARCH_ALIASES = {
    "unet": "unet",
    "attention": "attention_unet",
    "attention_unet": "attention_unet",
    "attunet": "attention_unet",
    "attres": "attention_res_unet",
    "attention_res_unet": "attention_res_unet",
    "attresunet": "attention_res_unet",
    "seea": "seea_unet",
    "seea_unet": "seea_unet",
}
LAYOUTS = ("compact", "reference")

# Published reference counts: (total, trainable)
PUBLISHED_COUNTS = {
    "unet": (31_401_349, 31_389_571),
    "attention_unet": (37_334_665, 37_319_047),
    "attention_res_unet": (39_090_377, 39_068_871),
    "seea_unet": (37_355_145, 37_339_527),
}


def resolve_arch(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key not in ARCH_ALIASES:
        raise ConfigError(f"unknown architecture {name!r}; choose from {', '.join(ARCHS)}")
    return ARCH_ALIASES[key]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``se_stages`` lists the 1-based encoder stages that carry an SE block
    (``None`` means all of them); it only matters for ``seea_unet``.
    """

    arch: str = "seea_unet"
    input_size: tuple = (256, 256)
    in_channels: int = 3
    base_filters: int = 64
    depth: int = 4
    se_reduction: int = 16
    se_on_bottleneck: bool = False
    se_stages: Optional[tuple] = None
    se_bias: bool = True
    attention_f_int_ratio: float = 0.5
    out_channels: int = 1
    layout: str = "compact"

    def __post_init__(self):
        object.__setattr__(self, "arch", resolve_arch(self.arch) if self.arch in ARCH_ALIASES else self.arch)
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.se_stages is not None:
            object.__setattr__(self, "se_stages", tuple(int(s) for s in self.se_stages))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.arch not in ARCHS:
            out.append(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.layout not in LAYOUTS:
            out.append(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.depth < 1:
            out.append(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            out.append(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1:
            out.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels != 1:
            out.append(f"out_channels must be 1 (binary masks), got {self.out_channels}")
        if len(self.input_size) != 2 or any(v < 1 for v in self.input_size):
            out.append(f"input_size must be two positive ints, got {self.input_size}")
        elif self.depth >= 1:
            step = 2 ** self.depth
            for axis, v in zip("HW", self.input_size):
                if v % step:
                    out.append(f"input {axis}={v} not divisible by 2**depth={step}")
        if not 0 < self.attention_f_int_ratio <= 4:
            out.append(f"attention_f_int_ratio must lie in (0, 4], got {self.attention_f_int_ratio}")
        if self.se_reduction < 1:
            out.append(f"se_reduction must be >= 1, got {self.se_reduction}")
        elif self.arch == "seea_unet" and self.depth >= 1 and self.base_filters >= 1:
            if self.se_stages is not None:
                bad = [s for s in self.se_stages if not 1 <= s <= self.depth]
                if bad:
                    out.append(f"se_stages {bad} outside 1..{self.depth}")
            for c in self.se_channels():
                if c % self.se_reduction:
                    out.append(f"SE block on {c} channels not divisible by se_reduction={self.se_reduction}")
        return out

    # derived quantities

    @property
    def widths(self) -> list[int]:
        """Encoder stage widths, shallow to deep."""
        return [self.base_filters * 2 ** i for i in range(self.depth)]

    @property
    def bottleneck_width(self) -> int:
        return self.base_filters * 2 ** self.depth

    def has_se(self) -> bool:
        return self.arch == "seea_unet"

    def se_stage_set(self) -> set[int]:
        if not self.has_se():
            return set()
        return set(range(1, self.depth + 1)) if self.se_stages is None else set(self.se_stages)

    def se_channels(self) -> list[int]:
        chans = [w for i, w in enumerate(self.widths, 1) if i in self.se_stage_set()]
        if self.has_se() and self.se_on_bottleneck:
            chans.append(self.bottleneck_width)
        return chans

    def f_int(self, c_skip: int) -> int:
        return max(1, int(round(c_skip * self.attention_f_int_ratio)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        if self.se_stages is not None:
            d["se_stages"] = list(self.se_stages)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown model field {k!r}" for k in unknown])
        return cls(**data)


def canonical_config(arch: str = "seea_unet", **overrides) -> ModelConfig:
    """256x256x3 input, 64 base filters, four poolings."""
    return ModelConfig(arch=resolve_arch(arch), **overrides)


@dataclass
class LayerInfo:
    name: str
    kind: str
    out_shape: tuple  # (C, H, W) per sample
    params: int = 0


@dataclass
class _Stage:
    block: object
    se: Optional[blocks.SEBlockParams] = None
    gating: Optional[blocks.GatingParams] = None
    gate: Optional[blocks.AttentionGateParams] = None


class SegmentationNetwork:
    """A built model: parameters plus the forward pass.

    Call it (or :meth:`forward`) with a ``Tensor``/array of shape ``(N, C, H, W)``;
    the result has shape ``(N, 1, H, W)`` with values in (0, 1).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterStore()
        self.layers: list[LayerInfo] = []
        f = blocks.ParamFactory(self.params, np.random.default_rng(seed), self.dtype)
        self._build(f)

    # -- construction ----------------------------------------------------------

    def _layer(self, name, kind, shape):
        self.layers.append(LayerInfo(name, kind, tuple(shape)))

    def _block(self, f, name, cin, cout):
        cfg = self.cfg
        if cfg.arch == "attention_res_unet":
            p = f.residual_block(name, cin, cout, cfg.layout)
            self._layer(f"{name}.body.conv1", "conv3x3", (cout,) + self._hw)
            self._layer(f"{name}.body.bn1", "batchnorm", (cout,) + self._hw)
            self._layer(f"{name}.body.conv2", "conv3x3", (cout,) + self._hw)
            self._layer(f"{name}.body.bn2", "batchnorm", (cout,) + self._hw)
            if p.shortcut is not None:
                self._layer(f"{name}.shortcut", "conv1x1", (cout,) + self._hw)
            if p.shortcut_bn is not None:
                self._layer(f"{name}.shortcut_bn", "batchnorm", (cout,) + self._hw)
            return p
        p = f.conv_block(name, cin, cout)
        for sub, kind in (("conv1", "conv3x3"), ("bn1", "batchnorm"), ("conv2", "conv3x3"), ("bn2", "batchnorm")):
            self._layer(f"{name}.{sub}", kind, (cout,) + self._hw)
        return p

    def _build(self, f: blocks.ParamFactory) -> None:
        cfg = self.cfg
        h, w = cfg.input_size
        self._hw = (h, w)
        attention = cfg.arch != "unet"
        se_stages = cfg.se_stage_set()
        self.encoder: list[_Stage] = []
        cin = cfg.in_channels
        for i, width in enumerate(cfg.widths, 1):
            stage = _Stage(self._block(f, f"enc{i}.block", cin, width))
            if i in se_stages:
                stage.se = f.se_block(f"enc{i}.se", width, cfg.se_reduction, cfg.se_bias)
                self._layer(f"enc{i}.se.fc1", "dense", (width // cfg.se_reduction, 1, 1))
                self._layer(f"enc{i}.se.fc2", "dense", (width, 1, 1))
            self._hw = (self._hw[0] // 2, self._hw[1] // 2)
            self._layer(f"enc{i}.pool", "maxpool", (width,) + self._hw)
            self.encoder.append(stage)
            cin = width
        bw = cfg.bottleneck_width
        self.bottleneck = _Stage(self._block(f, "bottleneck.block", cin, bw))
        if cfg.has_se() and cfg.se_on_bottleneck:
            self.bottleneck.se = f.se_block("bottleneck.se", bw, cfg.se_reduction, cfg.se_bias)
            self._layer("bottleneck.se.fc1", "dense", (bw // cfg.se_reduction, 1, 1))
            self._layer("bottleneck.se.fc2", "dense", (bw, 1, 1))
        self.decoder: list[_Stage] = []
        cin = bw
        for i in range(cfg.depth, 0, -1):
            width = cfg.widths[i - 1]
            name = f"dec{i}"
            gating = gate = None
            skip_hw = (self._hw[0] * 2, self._hw[1] * 2)
            if attention:
                gating = f.gating(f"{name}.gating", cin, width)
                self._layer(f"{name}.gating.conv", "conv1x1", (width,) + self._hw)
                self._layer(f"{name}.gating.bn", "batchnorm", (width,) + self._hw)
                f_int = cfg.f_int(width)
                gate = f.attention_gate(f"{name}.gate", width, width, f_int, cfg.layout)
                self._layer(f"{name}.gate.wx", "conv", (f_int,) + self._hw)
                self._layer(f"{name}.gate.wg", "conv1x1", (f_int,) + self._hw)
                if gate.wg_refine is not None:
                    self._layer(f"{name}.gate.wg_refine", "conv3x3", (f_int,) + self._hw)
                self._layer(f"{name}.gate.psi", "conv1x1", (1,) + self._hw)
                if gate.psi_bn is not None:
                    self._layer(f"{name}.gate.psi_bn", "batchnorm", (1,) + self._hw)
                if gate.out_conv is not None:
                    self._layer(f"{name}.gate.out_conv", "conv1x1", (width,) + skip_hw)
                    self._layer(f"{name}.gate.out_bn", "batchnorm", (width,) + skip_hw)
            self._hw = skip_hw
            self._layer(f"{name}.up", "upsample", (cin,) + self._hw)
            self._layer(f"{name}.concat", "concat", (cin + width,) + self._hw)
            block = self._block(f, f"{name}.block", cin + width, width)
            self.decoder.append(_Stage(block, gating=gating, gate=gate))
            cin = width
        self.head = f.conv("head.conv", cin, cfg.out_channels, 1)
        self._layer("head.conv", "conv1x1", (cfg.out_channels,) + self._hw)
        self.head_bn = None
        if cfg.layout == "reference":
            self.head_bn = f.bn("head.bn", cfg.out_channels)
            self._layer("head.bn", "batchnorm", (cfg.out_channels,) + self._hw)
        self._layer("head.sigmoid", "sigmoid", (cfg.out_channels,) + self._hw)
        for info in self.layers:
            prefix = info.name + "."
            info.params = sum(p.size for p in self.params if p.name.startswith(prefix))
        del self._hw

    # -- forward ---------------------------------------------------------------

    def _run_block(self, x, p, train):
        if isinstance(p, blocks.ResidualBlockParams):
            return blocks.residual_conv_block(x, p, train)
        return blocks.conv_block(x, p, train)

    def forward(self, x, train: bool = False) -> Tensor:
        x = as_tensor(x, dtype=self.dtype)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
        step = 2 ** cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ShapeError(f"input spatial size {x.shape[2:]} not divisible by 2**depth={step}")
        skips = []
        h = x
        for stage in self.encoder:
            h = self._run_block(h, stage.block, train)
            if stage.se is not None:
                h = blocks.se_block(h, stage.se)
            skips.append(h)
            h = ops.maxpool2d(h, 2, 2)
        h = self._run_block(h, self.bottleneck.block, train)
        if self.bottleneck.se is not None:
            h = blocks.se_block(h, self.bottleneck.se)
        for stage in self.decoder:
            skip = skips.pop()
            if stage.gate is not None:
                g = blocks.gating_signal(h, stage.gating, train)
                skip = blocks.attention_gate(skip, g, stage.gate, train)
            h = ops.concat_channels(ops.upsample2d(h, 2), skip)
            h = self._run_block(h, stage.block, train)
        h = blocks.conv(h, self.head)
        if self.head_bn is not None:
            h = blocks.batchnorm(h, self.head_bn, train)
        return ops.sigmoid(h)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> SegmentationNetwork:
    return SegmentationNetwork(cfg, seed=seed, dtype=dtype)


# -- parameter accounting --------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int
    non_trainable: int

    def __iter__(self):
        return iter((self.total, self.trainable, self.non_trainable))


def count_parameters(store: ParameterStore) -> ParamCount:
    """Element counts partitioned by the trainable flag."""
    trainable = sum(p.size for p in store if p.trainable)
    frozen = sum(p.size for p in store if not p.trainable)
    return ParamCount(trainable + frozen, trainable, frozen)


def analytic_param_formula(cfg: ModelConfig) -> ParamCount:
    """Closed-form parameter count, independent of the builder."""

    def conv(ci, co, k):
        return k * k * ci * co + co

    def se(c):
        r = c // cfg.se_reduction
        return c * r + r + r * c + c if cfg.se_bias else 2 * c * r

    ref = cfg.layout == "reference"
    trainable = 0
    bn_channels = 0

    def block(ci, co):
        nonlocal trainable, bn_channels
        trainable += conv(ci, co, 3) + conv(co, co, 3)
        bn_channels += 2 * co
        if cfg.arch == "attention_res_unet":
            if ref:
                trainable += conv(ci, co, 1)
                bn_channels += co
            elif ci != co:
                trainable += conv(ci, co, 1)

    widths = [cfg.base_filters * 2 ** i for i in range(cfg.depth)]
    ci = cfg.in_channels
    for i, c in enumerate(widths, 1):
        block(ci, c)
        ci = c
    bottleneck = cfg.base_filters * 2 ** cfg.depth
    block(ci, bottleneck)
    trainable += sum(se(c) for c in cfg.se_channels())
    ci = bottleneck
    for c in reversed(widths):
        if cfg.arch != "unet":
            fi = cfg.f_int(c)
            trainable += conv(ci, c, 1)  # gating projection
            bn_channels += c
            if ref:
                trainable += conv(c, fi, 2) + conv(c, fi, 1) + conv(fi, fi, 3) + conv(fi, 1, 1) + conv(c, c, 1)
                bn_channels += c
            else:
                trainable += conv(c, fi, 1) + conv(c, fi, 1) + conv(fi, 1, 1)
                bn_channels += 1
        block(ci + c, c)
        ci = c
    trainable += conv(ci, cfg.out_channels, 1)
    if ref:
        bn_channels += cfg.out_channels
    # gamma/beta are trainable, running mean/var are not
    trainable += 2 * bn_channels
    frozen = 2 * bn_channels
    return ParamCount(trainable + frozen, trainable, frozen)


def summarize(cfg_or_model, seed: int = 0) -> list[LayerInfo]:
    """Per-layer table (name, kind, per-sample output shape, parameter count)."""
    model = cfg_or_model if isinstance(cfg_or_model, SegmentationNetwork) else build_model(cfg_or_model, seed)
    return list(model.layers)


def format_summary(rows: list[LayerInfo], counts: Optional[ParamCount] = None) -> str:
    name_w = max([len(r.name) for r in rows] + [5])
    lines = [f"{'layer':<{name_w}}  {'kind':<10} {'output':<18} {'params':>12}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        shape = "x".join(str(v) for v in r.out_shape)
        lines.append(f"{r.name:<{name_w}}  {r.kind:<10} {shape:<18} {r.params:>12,}")
    if counts is not None:
        lines.append("-" * len(lines[0]))
        lines.append(f"total {counts.total:,}  trainable {counts.trainable:,}  non-trainable {counts.non_trainable:,}")
    return "\n".join(lines)


def summary_csv(rows: list[LayerInfo]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "kind", "out_channels", "out_height", "out_width", "params"])
    for r in rows:
        writer.writerow([r.name, r.kind, *r.out_shape, r.params])
    return buf.getvalue()


# -- Published-count config search ------------------------------------------

@dataclass
class ScanResult:
    arch: str
    target_total: int
    target_trainable: int
    counts: ParamCount
    config: ModelConfig

    @property
    def delta_total(self) -> int:
        return self.counts.total - self.target_total

    @property
    def delta_trainable(self) -> int:
        return self.counts.trainable - self.target_trainable

    @property
    def exact(self) -> bool:
        return self.delta_total == 0 and self.delta_trainable == 0


def _se_placements(depth: int):
    stages = range(1, depth + 1)
    for n in range(1, depth + 1):
        for subset in itertools.combinations(stages, n):
            yield subset, False
    for n in range(0, depth + 1):
        for subset in itertools.combinations(stages, n):
            yield subset, True


def scan_published(
    archs=ARCHS,
    layouts=LAYOUTS,
    in_channels=(1, 3),
    f_int_ratios=(0.5, 1.0),
    reductions=(1, 2, 4, 8, 16, 32),
    se_biases=(True, False),
    base: ModelConfig | None = None,
) -> dict[str, list[ScanResult]]:
    """Enumerate the declared search grid and rank configs by distance to the published counts.

    Returns, per architecture, all evaluated candidates sorted by
    ``(|delta_total|, |delta_trainable|)``.
    """
    base = base or canonical_config()
    results: dict[str, list[ScanResult]] = {}
    for arch in archs:
        target_total, target_trainable = PUBLISHED_COUNTS[arch]
        seen = {}
        for layout, cin, ratio in itertools.product(layouts, in_channels, f_int_ratios):
            common = dict(arch=arch, layout=layout, in_channels=cin, attention_f_int_ratio=ratio)
            if arch == "unet" and ratio != f_int_ratios[0]:
                continue
            if arch != "seea_unet":
                variants = [replace(base, **common)]
            else:
                variants = []
                for r, bias, (stages, on_bn) in itertools.product(
                    reductions, se_biases, _se_placements(base.depth)
                ):
                    try:
                        variants.append(
                            replace(base, **common, se_reduction=r, se_bias=bias, se_stages=stages, se_on_bottleneck=on_bn)
                        )
                    except ConfigError:
                        continue
            for cfg in variants:
                counts = analytic_param_formula(cfg)
                seen[cfg] = ScanResult(arch, target_total, target_trainable, counts, cfg)
        results[arch] = sorted(seen.values(), key=lambda s: (abs(s.delta_total), abs(s.delta_trainable)))
    return results
