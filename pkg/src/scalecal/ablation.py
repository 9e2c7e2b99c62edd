"""Desk-scale CIFAR-10 normalization ablation: single-scale BN vs SCT with BN / S-BN.

Each (arm, seed) run is cached under ``out_dir/<arm>/seed<k>/`` so a long
sweep can be resumed.  :func:`criteria` turns the collected accuracies and
divergences into pass/fail verdicts on the expected orderings.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_model
from .data import Dataset
from .diagnostics import METRICS, divergence_report, emit_report, probe_activations
from .models import ModelConfig, build_model
from .pipeline import SCTConfig, evaluate, scheme_scales, train

log = logging.getLogger(__name__)

ARMS = {
    "bn-32": ("bn", "cifar-32"),
    "bn-32-16": ("bn", "cifar-32-16"),
    "sbn-32-16": ("sbn", "cifar-32-16"),
    "fixup-32-16": ("fixup", "cifar-32-16"),
}
DEFAULT_ARMS = ("bn-32", "bn-32-16", "sbn-32-16")


@dataclass
class AblationResult:
    accuracy: dict = field(default_factory=dict)  # (arm, seed, size) -> top-1 in [0, 1]
    divergence: dict = field(default_factory=dict)  # (arm, seed, metric) -> [per-stage value]

    def mean_acc(self, arm: str, size: int) -> float:
        vals = [v for (a, _, s), v in self.accuracy.items() if a == arm and s == size]
        return 100.0 * float(np.mean(vals))

    def mean_div(self, arm: str, metric: str) -> np.ndarray:
        vals = [v for (a, _, m), v in self.divergence.items() if a == arm and m == metric]
        return np.mean(np.array(vals), axis=0)


def run_ablation(train_set: Dataset, test_set: Dataset, out_dir, seeds: Sequence[int] = (0, 1, 2),
                 epochs: int = 40, depth: int = 20, width: float = 1.0, batch_size: int = 128,
                 lr0: float = 0.1, arms: Sequence[str] = DEFAULT_ARMS, probe_slice: int = 500,
                 test_sizes: Sequence[int] = (32, 16)) -> AblationResult:
    out_dir = Path(out_dir)
    result = AblationResult()
    for arm in arms:
        norm, scheme = ARMS[arm]
        for seed in seeds:
            run_dir = out_dir / arm / f"seed{seed}"
            ckpt = run_dir / "model.ckpt"
            if (run_dir / "DONE").exists():
                model = load_model(ckpt)
            else:
                scales = scheme_scales(scheme)
                model = build_model(ModelConfig(depth=depth, norm=norm, width_multiplier=width),
                                    scales if norm == "sbn" else None, seed=seed)
                cfg = SCTConfig(scale_set=scales, scheme_name=scheme, epochs=epochs,
                                batch_size=batch_size, lr0=lr0, schedule="step", seed=seed)
                log.info("training %s seed %d", arm, seed)
                train(model, train_set, cfg, run_dir)
                (run_dir / "DONE").write_text("ok\n")
            for size in test_sizes:
                # S-BN evaluates unseen sizes with the nearest registered bank.
                result.accuracy[arm, seed, size] = evaluate(model, test_set, (size, size),
                                                            nearest_bank=True)
            if scheme != "cifar-32":
                records = probe_activations(model, test_set.take(probe_slice), scheme_scales(scheme))
                reports = [divergence_report(records, m) for m in METRICS]
                emit_report(records, reports, run_dir / "probe")
                for rep in reports:
                    stages = sorted({s for s, _, _ in rep.entries})
                    result.divergence[arm, seed, rep.metric_name] = [rep.value(s) for s in stages]
    write_summary(result, out_dir / "summary.csv")
    return result


def write_summary(result: AblationResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "seed", "test_size", "accuracy"])
        for (arm, seed, size), acc in sorted(result.accuracy.items()):
            w.writerow([arm, seed, size, repr(acc)])


def criteria(result: AblationResult) -> dict:
    """Ordering checks on seed-mean top-1 (percent) and stage divergences."""
    out = {}
    bn1 = result.mean_acc("bn-32", 32)
    bn2 = result.mean_acc("bn-32-16", 32)
    sbn = result.mean_acc("sbn-32-16", 32)
    out["7_bn_multiscale_drop"] = (bn2 <= bn1 - 1.0, f"BN{{32,16}} {bn2:.2f} vs BN{{32}} {bn1:.2f}")
    out["8_sbn_recovers"] = (sbn >= bn2 + 1.0 and sbn >= bn1 - 0.5,
                             f"S-BN {sbn:.2f}, BN{{32,16}} {bn2:.2f}, BN{{32}} {bn1:.2f}")
    sbn16 = result.mean_acc("sbn-32-16", 16)
    bn16 = result.mean_acc("bn-32", 16)
    out["9_low_res_eval"] = (sbn16 >= bn16 + 3.0, f"@16: S-BN {sbn16:.2f} vs BN{{32}} {bn16:.2f}")
    ok, parts = True, []
    for m in METRICS:
        bn_div = result.mean_div("bn-32-16", m)
        sbn_div = result.mean_div("sbn-32-16", m)
        ok &= bool(bn_div[-1] > bn_div[0]) and bool(sbn_div[-1] < bn_div[-1])
        parts.append(f"{m}: BN first {bn_div[0]:.4f} last {bn_div[-1]:.4f}, S-BN last {sbn_div[-1]:.4f}")
    out["10_divergence"] = (ok, "; ".join(parts))
    return out
