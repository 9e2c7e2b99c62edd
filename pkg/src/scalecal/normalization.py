"""Batch norm, scale-specific batch norm, group norm and Fixup initialization.

S-BN keeps one :class:`NormParamBank` per training scale.  The bank is chosen
by scale *index* (not by the observed spatial size), so the exact same
normalization code runs for vanilla BN and for bank ``i`` of S-BN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .module import Module, kaiming_normal
from .resample import ScaleSet
from .tensor import Parameter, Tensor, record

_BN_AXES = (0, 2, 3)


def _normalize_grad(gxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    """Gradient through ``xhat = (x - mean(x)) * inv_std`` with stats over ``axes``."""
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (gxhat - m1 - xhat * m2)


class NormParamBank:
    """gamma/beta plus running mean/variance for one set of channels."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum <= 1:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        if eps < 0:
            raise ValueError(f"eps must be non-negative, got {eps}")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def bn_forward_train(x: Tensor, bank: NormParamBank) -> Tensor:
    """Normalize with batch statistics and update the bank's running statistics."""
    n, c, h, w = x.shape
    count = n * h * w
    if count < 2:
        raise ValueError(f"batch norm needs at least 2 values per channel, got N*H*W={count}")
    if c != bank.channels:
        raise ValueError(f"batch norm: input has {c} channels, bank has {bank.channels}")
    xd = x.data
    mean = xd.mean(axis=_BN_AXES, keepdims=True)
    var = xd.var(axis=_BN_AXES, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.float32(bank.eps))
    xhat = (xd - mean) * inv_std
    g = bank.gamma.data.reshape(1, c, 1, 1)
    out = g * xhat + bank.beta.data.reshape(1, c, 1, 1)

    mom = np.float32(bank.momentum)
    bank.running_mean *= 1 - mom
    bank.running_mean += mom * mean.reshape(c)
    bank.running_var *= 1 - mom
    bank.running_var += mom * var.reshape(c) * np.float32(count / (count - 1))

    def grad_fn(gy):
        gg = (gy * xhat).sum(axis=_BN_AXES)
        gb = gy.sum(axis=_BN_AXES)
        gx = _normalize_grad(gy * g, xhat, inv_std, _BN_AXES)
        return gx, gg, gb

    return record(out, (x, bank.gamma, bank.beta), grad_fn)


def bn_forward_eval(x: Tensor, bank: NormParamBank) -> Tensor:
    """Normalize with running statistics; no state changes."""
    c = x.shape[1]
    if c != bank.channels:
        raise ValueError(f"batch norm: input has {c} channels, bank has {bank.channels}")
    inv_std = (1.0 / np.sqrt(bank.running_var + np.float32(bank.eps))).reshape(1, c, 1, 1)
    xhat = (x.data - bank.running_mean.reshape(1, c, 1, 1)) * inv_std
    g = bank.gamma.data.reshape(1, c, 1, 1)
    out = g * xhat + bank.beta.data.reshape(1, c, 1, 1)
    return record(
        out,
        (x, bank.gamma, bank.beta),
        lambda gy: (gy * g * inv_std, (gy * xhat).sum(axis=_BN_AXES), gy.sum(axis=_BN_AXES)),
    )


def bn_forward(x: Tensor, bank: NormParamBank, mode: str) -> Tensor:
    if mode == "train":
        return bn_forward_train(x, bank)
    if mode == "eval":
        return bn_forward_eval(x, bank)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


@dataclass
class SBNState:
    """M disjoint banks, one per registered scale."""

    banks: list
    scale_set: ScaleSet

    @classmethod
    def create(cls, channels: int, scale_set: ScaleSet, momentum: float = 0.1,
               eps: float = 1e-5) -> "SBNState":
        return cls([NormParamBank(channels, momentum, eps) for _ in scale_set], scale_set)

    @property
    def scale_index_map(self) -> dict:
        return {s: i for i, s in enumerate(self.scale_set)}


def sbn_forward(x: Tensor, scale_index: int, state: SBNState, mode: str) -> Tensor:
    """Batch norm with the bank registered for ``scale_index``."""
    if not 0 <= scale_index < len(state.banks):
        registered = ", ".join(f"{i}:{h}x{w}" for i, (h, w) in enumerate(state.scale_set))
        raise KeyError(f"scale index {scale_index} is not registered; registered scales: {registered}")
    return bn_forward(x, state.banks[scale_index], mode)


@dataclass(frozen=True)
class GNConfig:
    groups: int
    eps: float = 1e-5


def gn_forward(x: Tensor, cfg: GNConfig, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample, per-group normalization; identical in train and eval."""
    n, c, h, w = x.shape
    if cfg.groups < 1 or c % cfg.groups:
        raise ValueError(f"group norm: {c} channels not divisible into {cfg.groups} groups")
    axes = (2, 3, 4)
    xg = x.data.reshape(n, cfg.groups, c // cfg.groups, h, w)
    mean = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.float32(cfg.eps))
    xhat = ((xg - mean) * inv_std).reshape(n, c, h, w)
    g = gamma.data.reshape(1, c, 1, 1)
    out = g * xhat + beta.data.reshape(1, c, 1, 1)

    def grad_fn(gy):
        gxhat = (gy * g).reshape(xg.shape)
        gx = _normalize_grad(gxhat, xhat.reshape(xg.shape), inv_std, axes).reshape(n, c, h, w)
        return gx, (gy * xhat).sum(axis=_BN_AXES), gy.sum(axis=_BN_AXES)

    return record(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class BatchNorm2d(Module):
    """Vanilla BN: one bank shared by every input scale."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.bank = NormParamBank(channels, momentum, eps)

    def _local_parameters(self):
        return [("weight", self.bank.gamma), ("bias", self.bank.beta)]

    def _local_buffers(self):
        return [("running_mean", self.bank.running_mean), ("running_var", self.bank.running_var)]

    def __call__(self, x: Tensor, scale_index: int = 0) -> Tensor:
        return bn_forward(x, self.bank, "train" if self.training else "eval")


class ScaleSpecificBatchNorm(Module):
    """S-BN: bank ``i`` normalizes inputs of scale ``i`` in both train and eval."""

    def __init__(self, channels: int, scale_set: ScaleSet, momentum: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.state = SBNState.create(channels, scale_set, momentum, eps)

    @property
    def banks(self) -> list:
        return self.state.banks

    def _local_parameters(self):
        out = []
        for i, b in enumerate(self.state.banks):
            out += [(f"weight.scale{i}", b.gamma), (f"bias.scale{i}", b.beta)]
        return out

    def _local_buffers(self):
        out = []
        for i, b in enumerate(self.state.banks):
            out += [(f"running_mean.scale{i}", b.running_mean),
                    (f"running_var.scale{i}", b.running_var)]
        return out

    def __call__(self, x: Tensor, scale_index: int = 0) -> Tensor:
        return sbn_forward(x, scale_index, self.state, "train" if self.training else "eval")


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.cfg = GNConfig(groups, eps)
        if channels % groups:
            raise ValueError(f"group norm: {channels} channels not divisible into {groups} groups")
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor, scale_index: int = 0) -> Tensor:
        return gn_forward(x, self.cfg, self.weight, self.bias)


NORM_LAYERS = (BatchNorm2d, ScaleSpecificBatchNorm, GroupNorm)


def make_norm(kind: str, channels: int, scale_set: Optional[ScaleSet] = None,
              gn_groups: int = 8) -> Optional[Module]:
    if kind == "bn":
        return BatchNorm2d(channels)
    if kind == "sbn":
        if scale_set is None:
            raise ValueError("norm=sbn requires a scale set")
        return ScaleSpecificBatchNorm(channels, scale_set)
    if kind == "gn":
        return GroupNorm(channels, _fit_groups(channels, gn_groups))
    if kind in ("none", "fixup"):
        return None
    raise ValueError(f"unknown norm kind {kind!r}; expected bn, sbn, gn or fixup")


def _fit_groups(channels: int, groups: int) -> int:
    while channels % groups:
        groups -= 1
    return groups


# ---------------------------------------------------------------------------
# Fixup
# ---------------------------------------------------------------------------


def fixup_initialize(model: Module, num_residual_blocks: int,
                     rng: Optional[np.random.Generator] = None) -> Module:
    """Fixup init for 2-conv basic blocks on a normalization-free model.

    Branch-first convs get He init scaled by ``L ** -0.5``, branch-last convs and
    the classifier start at zero, scalar multipliers at 1 and scalar biases at 0.
    """
    rng = rng or np.random.default_rng(0)
    for m in model.modules():
        if isinstance(m, NORM_LAYERS):
            raise ValueError("fixup_initialize: model contains normalization layers; build it with norm=fixup")
    blocks = list(model.residual_blocks())
    if not blocks:
        raise ValueError("fixup_initialize: model has no residual blocks")
    depth_scale = num_residual_blocks ** -0.5
    for block in blocks:
        w1 = block.conv1.weight
        fan_in = int(np.prod(w1.shape[1:]))
        w1.data[...] = kaiming_normal(rng, w1.shape, fan_in) * np.float32(depth_scale)
        block.conv2.weight.data[...] = 0.0
        block.scale.data[...] = 1.0
        for b in block.scalar_biases():
            b.data[...] = 0.0
    model.fc.weight.data[...] = 0.0
    model.fc.bias.data[...] = 0.0
    return model
