"""scalecal command line: train, eval, probe, plotdata, selftest and ablation.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import selftest
from .data import AugmentConfig, DataError, load_cifar10, synthetic_dataset

log = logging.getLogger("scalecal")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v) -> Optional[list]:
    if v in (None, "", "none"):
        return None
    return [int(x) for x in str(v).replace(" ", "").split(",") if x]


def _float_list(v) -> Optional[list]:
    if v in (None, "", "none"):
        return None
    return [float(x) for x in str(v).replace(" ", "").split(",") if x]


def _optional_str(v) -> Optional[str]:
    return None if v in (None, "", "none") else str(v)


# key -> (parser, default, help).  Config-file keys and --flags share these names.
TRAIN_KEYS = {
    "scheme": (str, "cifar-32-16", "named scale scheme"),
    "scales": (_int_list, None, "comma-separated square sizes overriding the scheme"),
    "alphas": (_float_list, None, "comma-separated per-scale loss weights (default uniform 1/M)"),
    "strict_scales": (_bool, False, "require scale gaps to be multiples of the downsample factor"),
    "data_dir": (_optional_str, None, "directory with CIFAR-10 binary batches"),
    "synthetic": (_bool, False, "use the synthetic blob dataset instead of CIFAR-10"),
    "synthetic_count": (int, 2000, "synthetic training images"),
    "synthetic_test_count": (int, 500, "synthetic test images"),
    "subset": (int, 0, "train on a seeded random subset of this size (0 = all)"),
    "epochs": (int, 40, "training epochs"),
    "batch_size": (int, 128, "mini-batch size"),
    "family": (str, "resnet-cifar", "resnet-cifar or small-cnn"),
    "depth": (int, 20, "ResNet depth (6n+2)"),
    "width": (float, 1.0, "channel width multiplier"),
    "norm": (str, "bn", "bn, sbn, gn or fixup"),
    "gn_groups": (int, 8, "group-norm groups"),
    "num_classes": (int, 10, "number of classes"),
    "calibration": (str, "avg", "calibration pooling: avg or max"),
    "lr": (float, 0.1, "initial learning rate"),
    "schedule": (str, "step", "cosine or step"),
    "milestones": (_int_list, None, "step-schedule epochs (default 50%% and 75%% of epochs)"),
    "momentum": (float, 0.9, "SGD momentum"),
    "weight_decay": (float, 1e-4, "L2 weight decay"),
    "pad_crop": (int, 4, "zero-pad then random-crop margin"),
    "hflip_prob": (float, 0.5, "horizontal flip probability"),
    "skip_zero_weight": (_bool, False, "do not forward scales whose loss weight is 0"),
    "seed": (int, 0, "random seed"),
    "deterministic": (_bool, False, "single-threaded BLAS for bit-reproducible runs"),
    "checkpoint_every": (int, 0, "also checkpoint every N epochs (0 = only at the end)"),
    "out_dir": (str, "runs/latest", "run directory"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_KEYS:
            raise UsageError(f"{p}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_config(config_path: Optional[str], flags: dict) -> dict:
    """Defaults, then config file, then explicitly given flags."""
    raw: dict = {k: d for k, (_, d, _) in TRAIN_KEYS.items()}
    if config_path:
        raw.update(parse_config_file(config_path))
    raw.update(flags)
    resolved = {}
    for key, value in raw.items():
        conv = TRAIN_KEYS[key][0]
        try:
            resolved[key] = value if value is None or not isinstance(value, str) else conv(value)
        except ValueError as e:
            raise UsageError(f"bad value for {key}: {e}") from None
    return resolved


def format_config(cfg: dict) -> str:
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, (list, tuple)):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in TRAIN_KEYS)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for key, (conv, _, help_) in TRAIN_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if conv is _bool:
            p.add_argument(flag, dest=key, action="store_const", const=True,
                           default=argparse.SUPPRESS, help=help_)
        else:
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=help_)


def load_data(cfg: dict):
    if cfg["synthetic"]:
        n = cfg["num_classes"]
        return (synthetic_dataset(cfg["seed"], cfg["synthetic_count"], n),
                synthetic_dataset(cfg["seed"] + 1_000_003, cfg["synthetic_test_count"], n, split="test"))
    if not cfg["data_dir"]:
        raise UsageError("no data: pass --data-dir DIR or --synthetic")
    if not Path(cfg["data_dir"]).is_dir():
        raise UsageError(f"data directory does not exist: {cfg['data_dir']}")
    train_set, test_set = load_cifar10(cfg["data_dir"])
    if cfg["subset"]:
        train_set = train_set.subset(cfg["subset"], cfg["seed"])
    return train_set, test_set


def _augment_cfg(cfg: dict) -> AugmentConfig:
    return AugmentConfig(pad_crop=cfg["pad_crop"], hflip_prob=cfg["hflip_prob"])


def cmd_train(args) -> int:
    from .models import ModelConfig, build_model
    from .pipeline import SCTConfig, evaluate, scheme_scales, train
    from .resample import ScaleSet

    cfg = resolve_config(args.config, {k: v for k, v in vars(args).items() if k in TRAIN_KEYS})
    try:
        scale_set = (ScaleSet(cfg["scales"], strict=cfg["strict_scales"]) if cfg["scales"]
                     else scheme_scales(cfg["scheme"]))
        if cfg["strict_scales"]:
            ScaleSet(scale_set.scales, strict=True)
        mcfg = ModelConfig(family=cfg["family"], depth=cfg["depth"], norm=cfg["norm"],
                           num_classes=cfg["num_classes"], width_multiplier=cfg["width"],
                           calibration=cfg["calibration"], gn_groups=cfg["gn_groups"])
        mcfg.validate(scale_set)
        sct = SCTConfig(scale_set=scale_set, alphas=cfg["alphas"], scheme_name=cfg["scheme"],
                        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr0=cfg["lr"],
                        schedule=cfg["schedule"], milestones=cfg["milestones"],
                        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                        calibration=cfg["calibration"], seed=cfg["seed"],
                        skip_zero_weight=cfg["skip_zero_weight"],
                        checkpoint_every=cfg["checkpoint_every"],
                        deterministic=cfg["deterministic"], augment=_augment_cfg(cfg))
    except ValueError as e:
        raise UsageError(str(e)) from None
    train_set, test_set = load_data(cfg)

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    model = build_model(mcfg, scale_set if mcfg.norm == "sbn" else None, seed=cfg["seed"])
    log.info("training %s depth %d norm %s on scales %s (%d images)",
             mcfg.family, mcfg.depth, mcfg.norm, scale_set, len(train_set))
    _, state, ckpt = train(model, train_set, sct, out)
    with open(out / "test_accuracy.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["test_h", "test_w", "accuracy"])
        for size in scale_set:
            acc = evaluate(model, test_set, size, sct.augment)
            w.writerow([size[0], size[1], repr(acc)])
            print(f"test accuracy @{size[0]}x{size[1]}: {acc:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _eval_data(args, num_classes: int):
    cfg = dict(synthetic=args.synthetic, data_dir=args.data_dir, seed=args.seed,
               num_classes=num_classes, synthetic_count=args.synthetic_test_count,
               synthetic_test_count=args.synthetic_test_count, subset=0)
    return load_data(cfg)[1]


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .pipeline import evaluate, resolve_bank

    if not args.test_size:
        raise UsageError("eval needs at least one --test-size H W")
    model = load_model(args.checkpoint)
    test_set = _eval_data(args, model.cfg.num_classes)
    if args.limit:
        test_set = test_set.take(args.limit)
    rows = []
    for h, w in args.test_size:
        try:
            bank = resolve_bank(model, (h, w), args.nearest_bank)
            acc = evaluate(model, test_set, (h, w), nearest_bank=args.nearest_bank)
            rows.append([h, w, "" if bank is None else bank, repr(acc), ""])
        except (KeyError, ValueError) as e:
            rows.append([h, w, "", "", str(e).strip("'\"")])
    header = ["test_h", "test_w", "bank", "accuracy", "error"]
    print(f"{'size':>9}  {'bank':>4}  {'accuracy':>8}  error")
    for h, w, bank, acc, err in rows:
        accs = f"{float(acc):.4f}" if acc else "-"
        print(f"{f'{h}x{w}':>9}  {str(bank) if bank != '' else '-':>4}  {accs:>8}  {err}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.csv")
    with open(out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        wr.writerows(rows)
    return EXIT_RUNTIME if any(r[4] for r in rows) else EXIT_OK


def _parse_sizes(text: str) -> list:
    sizes = []
    for part in text.split(","):
        part = part.strip().lower()
        if "x" in part:
            h, w = part.split("x")
            sizes.append((int(h), int(w)))
        elif part:
            sizes.append((int(part), int(part)))
    return sizes


def cmd_probe(args) -> int:
    from .checkpoint import load_model
    from .diagnostics import METRICS, divergence_report, emit_report, probe_activations
    from .resample import ScaleSet

    if args.slice_size < 1:
        raise UsageError(f"--slice-size must be >= 1, got {args.slice_size}")
    model = load_model(args.checkpoint)
    scales = ScaleSet(_parse_sizes(args.scales)) if args.scales else model.scale_set
    if scales is None:
        raise UsageError("model has no registered scales; pass --scales")
    test_set = _eval_data(args, model.cfg.num_classes).take(args.slice_size)
    records = probe_activations(model, test_set, scales, bins=args.bins,
                                value_range=(args.range[0], args.range[1]),
                                preact=args.preact, nearest_bank=args.nearest_bank)
    reports = [divergence_report(records, m) for m in METRICS]
    dist, div = emit_report(records, reports, args.out_dir)
    for rep in reports:
        for stage, (a, b), v in rep.entries:
            print(f"stage {stage}  scales {a}-{b}  {rep.metric_name:6s} {v:.6f}")
    print(f"wrote {dist} and {div}")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    from .diagnostics import overlay_series, read_distributions

    records = read_distributions(args.distributions)
    rows = overlay_series(records, args.rebin)
    scales = sorted({r.scale_index for r in records})
    out = Path(args.out)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "bin_center"] + [f"density_scale_{s}" for s in scales])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    try:
        return selftest.main(args.break_ or ())
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_ablation(args) -> int:
    from .ablation import DEFAULT_ARMS, criteria, run_ablation

    if not Path(args.data_dir).is_dir():
        raise UsageError(f"data directory does not exist: {args.data_dir}")
    train_set, test_set = load_cifar10(args.data_dir)
    train_set = train_set.subset(args.subset, 0)
    result = run_ablation(train_set, test_set, args.out_dir, seeds=_parse_ints(args.seeds),
                          epochs=args.epochs, depth=args.depth, width=args.width,
                          arms=args.arms.split(",") if args.arms else DEFAULT_ARMS)
    failed = 0
    for name, (ok, detail) in criteria(result).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_OK if not failed else EXIT_RUNTIME


def _parse_ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_eval_data_flags(p) -> None:
    p.add_argument("--data-dir", help="CIFAR-10 binary directory (test split is used)")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic test split")
    p.add_argument("--synthetic-test-count", type=int, default=500)
    p.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    p.add_argument("--nearest-bank", action="store_true",
                   help="serve unregistered sizes with the nearest S-BN bank")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scalecal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model with SCT")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at one or more test sizes")
    p.add_argument("checkpoint")
    p.add_argument("--test-size", nargs=2, type=int, action="append", metavar=("H", "W"))
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N test images")
    p.add_argument("--out", help="CSV output path (default: eval.csv next to the checkpoint)")
    _add_eval_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="per-stage activation distributions across scales")
    p.add_argument("checkpoint")
    p.add_argument("--scales", help="comma-separated sizes, e.g. 32,16 or 32x32,16x16")
    p.add_argument("--slice-size", type=int, default=256)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--range", nargs=2, type=float, default=(-8.0, 8.0), metavar=("LO", "HI"))
    p.add_argument("--preact", action="store_true", help="probe before the final ReLU of each stage")
    p.add_argument("--out-dir", default=".")
    _add_eval_data_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plotdata", help="re-bin distributions.csv into overlay series")
    p.add_argument("distributions")
    p.add_argument("--rebin", type=int, default=1)
    p.add_argument("--out", default="overlay.csv")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("selftest", help="run the fast invariant battery")
    p.add_argument("--break", dest="break_", action="append", choices=selftest.FAULTS,
                   help="inject a known fault (negative control)")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("ablation", help="desk-scale CIFAR-10 BN / S-BN ablation")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", default="runs/ablation")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--subset", type=int, default=10000)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--arms", help="comma-separated subset of arms")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablation")
                            else logging.WARNING, format="%(asctime)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
