"""Scale calibrated training: sample M resolutions, forward, calibrate, weight losses.

One optimizer step forwards every scale of a mini-batch and backpropagates the
single weighted loss ``sum_i alpha_i * mean_j CE(f(x_j^i), y_j)``.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_model
from .data import AugmentConfig, Dataset, augment, iterate_batches, normalize
from .models import SCTNet
from .optim import SGD, default_milestones, lr_schedule
from .resample import ScaleSet, bilinear_resize
from .tensor import Tape, Tensor, accuracy, softmax_cross_entropy, weighted_sum

log = logging.getLogger(__name__)

SCHEMES = {
    "standard": (224,),
    "sct-a": (320, 224, 192),
    "sct-b": (320, 224, 192, 128, 64),
    "cifar-32": (32,),
    "cifar-32-24": (32, 24),
    "cifar-32-28": (32, 28),
    "cifar-32-16": (32, 16),
}


class NonFiniteLoss(RuntimeError):
    pass


def scheme_scales(name: str) -> ScaleSet:
    try:
        return ScaleSet(SCHEMES[name])
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; known: {', '.join(SCHEMES)}") from None


@dataclass
class SCTConfig:
    scale_set: ScaleSet = field(default_factory=lambda: scheme_scales("cifar-32-16"))
    alphas: Optional[Sequence[float]] = None
    scheme_name: str = "cifar-32-16"
    epochs: int = 1
    batch_size: int = 128
    lr0: float = 0.1
    schedule: str = "step"
    milestones: Optional[Sequence[int]] = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    calibration: str = "avg"
    seed: int = 0
    skip_zero_weight: bool = False
    checkpoint_every: int = 0
    deterministic: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        m = len(self.scale_set)
        if self.alphas is None:
            self.alphas = tuple([1.0 / m] * m)
        self.alphas = tuple(float(a) for a in self.alphas)
        if len(self.alphas) != m:
            raise ValueError(f"{len(self.alphas)} loss weights for {m} scales")
        if min(self.alphas) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.alphas}")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"schedule must be cosine or step, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_set"] = [list(s) for s in self.scale_set]
        return d


@dataclass
class ScaleCollection:
    batches: list
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.batches)


def scale_sample(batch, scale_set: ScaleSet, rng=None, labels=None) -> ScaleCollection:
    """Bilinearly resample one (augmented) batch to every scale of ``scale_set``.

    ``rng`` is accepted for API symmetry; the resampling itself is deterministic.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    return ScaleCollection([bilinear_resize(x, s) for s in scale_set], labels)


def sct_forward(model: SCTNet, collection: ScaleCollection, mode: str = "train",
                active: Optional[Sequence[bool]] = None) -> list:
    """Trunk -> calibration pooling -> shared classifier, once per scale.

    Scale ``i`` runs with normalization bank ``i``.  Entries with
    ``active[i] == False`` are not forwarded and come back as None.
    """
    model.train(mode == "train")
    logits = []
    for i, x in enumerate(collection.batches):
        if active is not None and not active[i]:
            logits.append(None)
            continue
        feats = model.forward_features(x, i)
        logits.append(model.classify(model.calibrate(feats)))
    return logits


def per_scale_losses(logits: Sequence, labels) -> list:
    return [None if z is None else softmax_cross_entropy(z, labels) for z in logits]


def combine_losses(losses: Sequence, alphas: Sequence[float]) -> Tensor:
    if len(losses) != len(alphas):
        raise ValueError(f"{len(losses)} per-scale losses but {len(alphas)} weights")
    pairs = [(l, a) for l, a in zip(losses, alphas) if l is not None]
    return weighted_sum([l for l, _ in pairs], [a for _, a in pairs])


def sct_loss(logits: Sequence, labels, alphas: Sequence[float]) -> Tensor:
    """``L = sum_i alpha_i * (1/B) sum_j CE(logits_i[j], labels[j])``."""
    if len(logits) != len(alphas):
        raise ValueError(f"{len(logits)} logit tensors but {len(alphas)} weights")
    return combine_losses(per_scale_losses(logits, labels), alphas)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    loss_history: list = field(default_factory=list)  # per step: (total, [per-scale])
    acc_history: list = field(default_factory=list)  # per step: [per-scale]
    rng_state: Optional[dict] = None


@contextlib.contextmanager
def single_threaded(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def metrics_header(m: int) -> list:
    return (["epoch", "step", "lr", "loss_total"]
            + [f"loss_scale_{i}" for i in range(m)]
            + [f"acc_scale_{i}" for i in range(m)])


def train(model: SCTNet, dataset: Dataset, cfg: SCTConfig, out_dir=None,
          checkpoint_name: str = "model.ckpt"):
    """Run SCT; returns ``(model, state, checkpoint_path)``.

    Writes ``metrics.csv`` (one row per epoch) and the checkpoint when
    ``out_dir`` is given.  A non-finite loss raises :class:`NonFiniteLoss`
    before any parameter update, leaving the last checkpoint untouched.
    """
    m = len(cfg.scale_set)
    if model.cfg.norm == "sbn" and model.scale_set != cfg.scale_set:
        raise ValueError(f"S-BN model registered scales {model.scale_set} but training uses "
                         f"{cfg.scale_set}")
    if cfg.calibration != model.cfg.calibration:
        raise ValueError(f"training calibration {cfg.calibration!r} does not match the model's "
                         f"{model.cfg.calibration!r}")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
    milestones = list(cfg.milestones) if cfg.milestones else default_milestones(cfg.epochs)
    active = [not (cfg.skip_zero_weight and a == 0.0) for a in cfg.alphas]
    state = TrainState()
    ckpt = None
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / checkpoint_name
        (out_dir / "sct_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(metrics_header(m))

    try:
        with single_threaded(cfg.deterministic):
            for epoch in range(cfg.epochs):
                state.epoch = epoch
                state.lr = opt.lr = lr_schedule(cfg.schedule, epoch, cfg.epochs, cfg.lr0, milestones)
                sums = np.zeros(m + 1)
                correct = np.zeros(m)
                seen = 0
                for idx in iterate_batches(len(dataset), cfg.batch_size, rng):
                    x = augment(dataset.images[idx], cfg.augment, rng)
                    y = dataset.labels[idx]
                    coll = scale_sample(x, cfg.scale_set, labels=y)
                    opt.zero_grad()
                    with Tape() as tape:
                        logits = sct_forward(model, coll, "train", active)
                        losses = per_scale_losses(logits, y)
                        total = combine_losses(losses, cfg.alphas)
                    lval = total.item()
                    if not math.isfinite(lval):
                        raise NonFiniteLoss(f"non-finite loss {lval} at epoch {epoch} step {state.step}")
                    tape.backward(total)
                    opt.step()

                    per = [l.item() if l is not None else float("nan") for l in losses]
                    accs = [accuracy(z.data, y) if z is not None else float("nan") for z in logits]
                    state.loss_history.append((lval, per))
                    state.acc_history.append(accs)
                    state.step += 1
                    b = len(idx)
                    sums += b * np.array([lval] + per)
                    correct += b * np.array(accs)
                    seen += b
                row = [epoch, state.step, state.lr] + list(sums / seen) + list(correct / seen)
                log.info("epoch %d step %d lr %.4g loss %.4f acc %s", epoch, state.step, state.lr,
                         row[3], " ".join(f"{a:.3f}" for a in row[4 + m:]))
                if writer is not None:
                    writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
                    fh.flush()
                    if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                        save_model(model, ckpt)
        state.epoch = cfg.epochs
        state.rng_state = rng.bit_generator.state
        if ckpt is not None:
            save_model(model, ckpt)
    finally:
        if writer is not None:
            fh.close()
    return model, state, ckpt


def resolve_bank(model: SCTNet, test_scale, nearest_bank: bool = False) -> Optional[int]:
    """Bank index serving ``test_scale`` (None for models without S-BN)."""
    if model.cfg.norm != "sbn":
        return None
    try:
        return model.scale_set.index_of(test_scale)
    except KeyError:
        if nearest_bank:
            return model.scale_set.nearest_index(test_scale)
        raise


def predict(model: SCTNet, images: np.ndarray, test_scale, augment_cfg: AugmentConfig,
            nearest_bank: bool = False, batch_size: int = 256) -> np.ndarray:
    bank = resolve_bank(model, test_scale, nearest_bank)
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = Tensor(normalize(images[start : start + batch_size], augment_cfg))
        x = bilinear_resize(x, test_scale)
        out.append(model(x, bank or 0).data)
    return np.concatenate(out)


def evaluate(model: SCTNet, dataset: Dataset, test_scale, augment_cfg: Optional[AugmentConfig] = None,
             nearest_bank: bool = False, batch_size: int = 256) -> float:
    """Top-1 accuracy with images resized to ``test_scale``; eval-mode normalization."""
    logits = predict(model, dataset.images, test_scale, augment_cfg or AugmentConfig(),
                     nearest_bank, batch_size)
    return accuracy(logits, dataset.labels)
