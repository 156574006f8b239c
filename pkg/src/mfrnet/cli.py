"""Command line interface: ``synth``, ``train``, ``infer``, ``evaluate`` and ``sweep``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ._validation import ConfigError
from .config import RunConfig, dump_config, load_config, packaged_config
from .data import DatasetIndexError, make_synthetic_dataset
from .estimator import MFRNet
from .features import BackboneLoadError
from .metrics import write_report_csv, write_report_json
from .pipeline import (check_unsupervised, evaluate_index, index_categories, infer_directory,
                       train_on_index)

logger = logging.getLogger("mfrnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SWEEP_PARAMS = ("k_set", "n", "layers")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def parse_sweep_values(param: str, text: str) -> list:
    """``n`` takes ``1,2,3``; ``k_set`` and ``layers`` take sets separated by ``;``."""
    if param == "n":
        return _int_list(text)
    return [_int_list(chunk) for chunk in text.split(";") if chunk.strip()]


def _config(path) -> RunConfig:
    if path in ("default", "toy"):
        return packaged_config(path)
    return load_config(path)


def cmd_synth(args) -> int:
    index = make_synthetic_dataset(args.out, args.normals, args.defects, seed=args.seed,
                                   image_size=args.image_size, test_good_count=args.good)
    print(f"wrote {len(index.train)} normal and {len(index.test)} test images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args.config)
    overrides = {}
    if args.dataset:
        overrides.setdefault("data", {})["train_root"] = str(args.dataset)
    if args.subsample:
        overrides.setdefault("data", {})["subsample"] = args.subsample
    if args.epochs is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if args.out:
        overrides["output_dir"] = str(args.out)
    config = config.with_overrides(**overrides)
    if not config.data.train_root:
        raise ConfigError("no training data: set data.train_root or pass --dataset")

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    indices = index_categories(config.data.train_root, mt_style=args.mt_style or config.data.mt_style)
    for name, index in indices.items():
        check_unsupervised(index.root)
        cat_out = out if len(indices) == 1 else out / name
        cat_out.mkdir(parents=True, exist_ok=True)
        log_path = cat_out / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
        model = train_on_index(config, index, log_path=log_path, checkpoint_dir=cat_out / "checkpoints")
        model.save(cat_out / "model.ckpt")
        print(f"{name}: {model.n_steps_} steps, checkpoint {cat_out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = MFRNet.load(args.checkpoint)
    records = infer_directory(model, args.images, args.out)
    print(f"scored {len(records)} images into {args.out}")
    return EXIT_OK


def _checkpoint_for(checkpoint: Path, category: str) -> Path:
    if checkpoint.is_file():
        return checkpoint
    for candidate in (checkpoint / category / "model.ckpt", checkpoint / f"{category}.ckpt",
                      checkpoint / "model.ckpt"):
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no checkpoint for category {category!r} under {checkpoint}")


def cmd_evaluate(args) -> int:
    indices = index_categories(args.dataset, mt_style=args.mt_style)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name, index in indices.items():
        model = MFRNet.load(_checkpoint_for(Path(args.checkpoint), name))
        heat_dir = None if args.no_heatmaps else (out if len(indices) == 1 else out / name)
        reports[name] = evaluate_index(model, index, heat_dir, num_thresholds=args.thresholds)
    write_report_csv(reports, out / "report.csv")
    write_report_json(reports, out / "report.json")
    print((out / "report.csv").read_text(), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _config(args.config)
    values = parse_sweep_values(args.param, args.values)
    if not values:
        raise UsageError("no sweep values given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = args.dataset or base.data.train_root
    if not dataset:
        raise ConfigError("no dataset: pass --dataset or set data.train_root")
    indices = index_categories(dataset)
    rows = []
    for value in values:
        if args.param == "n":
            config = base.with_overrides(masking={"subset_count": value})
        elif args.param == "k_set":
            config = base.with_overrides(masking={"k_set": value})
        else:
            config = base.with_overrides(backbone={"layers": value})
        if args.epochs is not None:
            config = config.with_overrides(train={"epochs": args.epochs})
        label = value if args.param == "n" else "+".join(str(v) for v in value)
        for name, index in indices.items():
            check_unsupervised(index.root)
            model = train_on_index(config, index)
            rep = evaluate_index(model, index)
            rows.append({"param": args.param, "value": label, "category": name,
                         "AUROC": rep.auroc, "MAE": rep.mae, "ACC": rep.acc, "F1": rep.f1})
            logger.info("%s=%s %s AUROC %.4f F1 %.4f", args.param, label, name, rep.auroc, rep.f1)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    print(f"{'value':>12} {'category':>12} {'AUROC':>8} {'MAE':>8} {'ACC':>8} {'F1':>8}")
    for r in rows:
        print(f"{r['value']!s:>12} {r['category']:>12} {r['AUROC']:8.4f} {r['MAE']:8.4f} {r['ACC']:8.4f} {r['F1']:8.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfrnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the synthetic texture dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--normals", type=int, default=20)
    p.add_argument("--defects", type=int, default=30)
    p.add_argument("--good", type=int, default=0, help="defect-free test images")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model per category on normal images")
    p.add_argument("--config", required=True, help="YAML file, or 'default' / 'toy'")
    p.add_argument("--dataset", type=Path, help="overrides data.train_root")
    p.add_argument("--out", type=Path, help="overrides output_dir")
    p.add_argument("--subsample", type=int, help="use only this many training images")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mt-style", action="store_true", help="train on test/good as well")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write anomaly heatmaps for a folder of images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--images", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="pixel-level AUROC/MAE/ACC/F1 on a test split")
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file or training output dir")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--thresholds", type=int, default=256)
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--mt-style", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate over one varied parameter")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True,
                   help="n: '1,2,3'; k_set / layers: sets separated by ';', e.g. '2;2,4;2,4,8'")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mfrnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetIndexError, BackboneLoadError, FileNotFoundError, ValueError) as exc:
        print(f"mfrnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        logger.exception("run failed")
        print(f"mfrnet: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
