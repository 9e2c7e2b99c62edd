"""CIFAR ResNets (6n+2 basic-block family) and a small CNN.

Both trunks have three stages with output strides 1, 2, 4, so a 32x32 input
yields an 8x8 trunk feature map.  The classifier is a single linear layer
shared by every input scale; trunk features reach it through adaptive pooling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .module import Conv2d, Linear, Module
from .normalization import fixup_initialize, make_norm
from .resample import ScaleSet, adaptive_pool
from .tensor import Parameter, Tensor, add, flatten, mul, relu

DOWNSAMPLE_FACTOR = 4
FAMILIES = ("resnet-cifar", "small-cnn")
NORM_KINDS = ("bn", "sbn", "gn", "fixup")


@dataclass
class ModelConfig:
    family: str = "resnet-cifar"
    depth: int = 20
    norm: str = "bn"
    num_classes: int = 10
    width_multiplier: float = 1.0
    calibration: str = "avg"
    gn_groups: int = 8

    def validate(self, scale_set: Optional[ScaleSet] = None) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "resnet-cifar" and (self.depth < 8 or (self.depth - 2) % 6):
            raise ValueError(f"resnet depth must satisfy depth = 6n+2 with n >= 1 "
                             f"(8, 14, 20, 32, 110, ...), got {self.depth}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"unknown norm {self.norm!r}; expected one of {NORM_KINDS}")
        if self.norm == "sbn" and scale_set is None:
            raise ValueError("norm=sbn requires a scale set")
        if self.norm == "fixup" and self.family != "resnet-cifar":
            raise ValueError("fixup initialization needs residual blocks (family resnet-cifar)")
        if self.calibration not in ("avg", "max"):
            raise ValueError(f"calibration must be 'avg' or 'max', got {self.calibration!r}")
        if self.num_classes < 2 or self.width_multiplier <= 0:
            raise ValueError("num_classes must be >= 2 and width_multiplier > 0")

    @property
    def widths(self) -> tuple:
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in (16, 32, 64))


class BasicBlock(Module):
    """Two 3x3 convs with an identity or 1x1-conv (option B) shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, norm: str,
                 scale_set: Optional[ScaleSet], gn_groups: int, rng: np.random.Generator):
        super().__init__()
        self.fixup = norm == "fixup"
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng=rng)
        self.norm1 = make_norm(norm, cout, scale_set, gn_groups)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng=rng)
        self.norm2 = make_norm(norm, cout, scale_set, gn_groups)
        self.shortcut = None
        self.shortcut_norm = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(cin, cout, 1, stride, 0, rng=rng)
            self.shortcut_norm = make_norm(norm, cout, scale_set, gn_groups)
        if self.fixup:
            self.bias1a = Parameter(np.zeros(1))
            self.bias1b = Parameter(np.zeros(1))
            self.bias2a = Parameter(np.zeros(1))
            self.scale = Parameter(np.ones(1))
            self.bias2b = Parameter(np.zeros(1))
        self.preact: Optional[np.ndarray] = None

    def scalar_biases(self) -> list:
        return [self.bias1a, self.bias1b, self.bias2a, self.bias2b]

    def __call__(self, x: Tensor, scale_index: int = 0, keep_preact: bool = False) -> Tensor:
        if self.fixup:
            xin = add(x, self.bias1a)
            out = relu(add(self.conv1(xin), self.bias1b))
            out = add(mul(self.conv2(add(out, self.bias2a)), self.scale), self.bias2b)
            sc = self.shortcut(xin) if self.shortcut is not None else x
        else:
            out = relu(self.norm1(self.conv1(x), scale_index))
            out = self.norm2(self.conv2(out), scale_index)
            sc = x
            if self.shortcut is not None:
                sc = self.shortcut_norm(self.shortcut(x), scale_index)
        out = add(out, sc)
        if keep_preact:
            self.preact = out.data.copy()
        return relu(out)


class Stage(Module):
    def __init__(self, blocks: list):
        super().__init__()
        self.n = len(blocks)
        for i, b in enumerate(blocks, 1):
            self.add_module(f"block{i}", b)

    def blocks(self) -> list:
        return [getattr(self, f"block{i}") for i in range(1, self.n + 1)]


class ConvNormAct(Module):
    def __init__(self, cin: int, cout: int, stride: int, norm: str,
                 scale_set: Optional[ScaleSet], gn_groups: int, rng: np.random.Generator):
        super().__init__()
        self.fixup = norm == "fixup"
        self.conv = Conv2d(cin, cout, 3, stride, 1, rng=rng)
        self.norm = make_norm(norm, cout, scale_set, gn_groups)
        if self.fixup:
            self.bias = Parameter(np.zeros(1))
        self.preact: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, scale_index: int = 0, keep_preact: bool = False) -> Tensor:
        out = self.conv(x)
        out = add(out, self.bias) if self.fixup else self.norm(out, scale_index)
        if keep_preact:
            self.preact = out.data.copy()
        return relu(out)


class SCTNet(Module):
    """Convolutional trunk + calibration pooling + shared linear classifier."""

    def __init__(self, cfg: ModelConfig, scale_set: Optional[ScaleSet] = None, seed: int = 0):
        super().__init__()
        cfg.validate(scale_set)
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "scale_set", scale_set)
        rng = np.random.default_rng(seed)
        w = cfg.widths
        args = (cfg.norm, scale_set, cfg.gn_groups, rng)
        self.stem = ConvNormAct(3, w[0], 1, *args)
        if cfg.family == "resnet-cifar":
            n = (cfg.depth - 2) // 6
            cin = w[0]
            for s, (cout, stride) in enumerate(zip(w, (1, 2, 2)), 1):
                blocks = []
                for b in range(n):
                    blocks.append(BasicBlock(cin, cout, stride if b == 0 else 1, *args))
                    cin = cout
                self.add_module(f"stage{s}", Stage(blocks))
        else:
            self.stage1 = ConvNormAct(w[0], w[0], 1, *args)
            self.stage2 = ConvNormAct(w[0], w[1], 2, *args)
            self.stage3 = ConvNormAct(w[1], w[2], 2, *args)
        self.fc = Linear(w[2], cfg.num_classes, rng=rng)
        object.__setattr__(self, "probing", False)
        object.__setattr__(self, "probe_preact", False)
        object.__setattr__(self, "taps", [])
        if cfg.norm == "fixup":
            fixup_initialize(self, self.num_residual_blocks, rng)
        self.name_parameters()

    @property
    def out_channels(self) -> int:
        return self.cfg.widths[2]

    @property
    def num_residual_blocks(self) -> int:
        return len(list(self.residual_blocks()))

    def residual_blocks(self) -> Iterator[BasicBlock]:
        for m in self.modules():
            if isinstance(m, BasicBlock):
                yield m

    def stages(self) -> list:
        return [self.stage1, self.stage2, self.stage3]

    def enable_probe(self, on: bool = True, preact: bool = False) -> None:
        object.__setattr__(self, "probing", on)
        object.__setattr__(self, "probe_preact", preact)
        object.__setattr__(self, "taps", [])

    def forward_features(self, x: Tensor, scale_index: int = 0) -> Tensor:
        h, w = x.shape[2:]
        if h < DOWNSAMPLE_FACTOR or w < DOWNSAMPLE_FACTOR:
            raise ValueError(f"input {h}x{w} is smaller than the trunk downsample factor "
                             f"{DOWNSAMPLE_FACTOR}")
        pre = self.probing and self.probe_preact
        if self.probing:
            object.__setattr__(self, "taps", [])
        out = self.stem(x, scale_index)
        for stage in self.stages():
            if isinstance(stage, Stage):
                blocks = stage.blocks()
                for b in blocks[:-1]:
                    out = b(out, scale_index)
                out = blocks[-1](out, scale_index, keep_preact=pre)
                last = blocks[-1]
            else:
                out = stage(out, scale_index, keep_preact=pre)
                last = stage
            if self.probing:
                self.taps.append(last.preact if pre else out.data.copy())
        return out

    def calibrate(self, features: Tensor) -> Tensor:
        return flatten(adaptive_pool(features, (1, 1), self.cfg.calibration))

    def classify(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.out_channels:
            raise ValueError(f"classifier expects (N, {self.out_channels}) features, got {features.shape}")
        return self.fc(features)

    def __call__(self, x: Tensor, scale_index: int = 0) -> Tensor:
        return self.classify(self.calibrate(self.forward_features(x, scale_index)))

    def arch_string(self) -> str:
        meta = asdict(self.cfg)
        meta["scales"] = [list(s) for s in self.scale_set] if self.scale_set else None
        return json.dumps(meta, sort_keys=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def build_model(cfg: ModelConfig, scale_set: Optional[ScaleSet] = None, seed: int = 0) -> SCTNet:
    return SCTNet(cfg, scale_set, seed)


def model_from_arch(arch: str, seed: int = 0) -> SCTNet:
    meta = json.loads(arch)
    scales = meta.pop("scales")
    return SCTNet(ModelConfig(**meta), ScaleSet(scales) if scales else None, seed)


def forward_features(model: SCTNet, x: Tensor, scale_index: int = 0, mode: str = "eval") -> Tensor:
    model.train(mode == "train")
    return model.forward_features(x, scale_index)


def classify(model: SCTNet, features: Tensor) -> Tensor:
    return model.classify(features)


def trunk_output_size(h: int, w: int) -> tuple:
    """Spatial size after three stages with strides 1, 2, 2 (3x3, pad 1)."""
    for _ in range(2):
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    return h, w


def count_norm_parameters(model: SCTNet) -> int:
    from .normalization import NORM_LAYERS

    return sum(p.size for m in model.modules() if isinstance(m, NORM_LAYERS)
               for _, p in m._local_parameters())
