"""Command-line front end: synth, pca-fit, pretrain, probe, finetune, report.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import apply_thread_limit, dump_config, load_config, resolve
from .data import ChipDataset, ChipFileError, SynthConfig, generate_synthetic
from .nn import CmcModel, save_module
from .train import PretrainConfig, Pretrainer, load_model
from .transfer import (
    LEDGER_COLUMNS,
    FinetuneConfig,
    ProbeConfig,
    append_ledger,
    run_finetune,
    run_linear_probe,
)
from .views import ViewError, ViewSpec, band_statistics, fixed_band_spec, lab_spec, pca_fit, pca_spec

log = logging.getLogger("mvc")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

SUMMARY_COLUMNS = (
    "task", "protocol", "metric", "pretrain_source", "views", "n_pretrain", "n_runs", "mean", "std", "min", "max",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _snapshot(out_dir: Path, resolved: dict, name: str = "resolved_config.txt") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(resolved, out_dir / name)


def _flags(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys}


def _check_keys(config: dict, cls) -> dict:
    unknown = set(config) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return config


def _dataset_name(root: Path) -> str:
    meta = json.loads((root / "dataset.json").read_text())
    return meta.get("name") or root.name


def _build_spec(kind: str, dataset: ChipDataset, view_spec_path=None) -> ViewSpec:
    if view_spec_path:
        spec = ViewSpec.from_json(view_spec_path)
        if kind and spec.spec_id != kind:
            raise UsageError(f"--views {kind} disagrees with view spec file of kind {spec.spec_id}")
        return spec
    train = dataset.chips[dataset.split("train")]
    if kind == "bands":
        return fixed_band_spec(band_statistics(train), dataset.band_names)
    if kind == "lab":
        return lab_spec()
    if kind == "pca":
        raise UsageError("pca views need --view-spec (see `mvc pca-fit`)")
    raise UsageError(f"unknown views {kind!r}")


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    defaults = {
        "name": "synthetic", "num_chips": 2000, "C": 10, "H": 32, "num_classes": 8, "noise_std": 0.02,
        "separation": 0.1, "patch_mixture": False, "rgb_confusable": True, "seed": 0,
        "split_fractions": [0.5, 0.0, 0.5],
    }
    file_cfg = load_config(args.config) if args.config else {}
    resolved = resolve(defaults, file_cfg, _flags(args, ("num_chips", "seed")))
    if args.multi_label:
        resolved["patch_mixture"] = True
    unknown = set(resolved) - set(defaults)
    if unknown:
        raise UsageError(f"unknown synth config keys: {sorted(unknown)}")
    name = resolved.pop("name")
    dataset = generate_synthetic(SynthConfig(**{**resolved, "split_fractions": tuple(resolved["split_fractions"])}))
    out = Path(args.out)
    dataset.save(out)
    meta = json.loads((out / "dataset.json").read_text())
    meta["name"] = name
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))
    _snapshot(out, {**resolved, "name": name})
    print(f"wrote {len(dataset)} chips to {out}")
    return 0


def cmd_pca_fit(args) -> int:
    dataset = ChipDataset.load(args.dataset)
    chips = dataset.chips[dataset.split("train")]
    basis = pca_fit(chips, args.pixels_per_chip, args.seed)
    spec = pca_spec(basis, dataset.band_names)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec.to_json(out)
    _snapshot(out.parent, {"dataset": str(args.dataset), "pixels_per_chip": args.pixels_per_chip, "seed": args.seed},
              out.stem + ".config.txt")
    share = basis.explained_variance_share(spec.channels_view1)
    print(f"view1 components {spec.channels_view1} explain {share:.3f} of the variance")
    if basis.rank_deficient:
        print("warning: pixel covariance is rank deficient", file=sys.stderr)
    return 0


PRETRAIN_KEYS = ("epochs", "batch_size", "lr", "k", "tau", "seed", "bank_momentum", "positive")


def cmd_pretrain(args) -> int:
    file_cfg = load_config(args.config) if args.config else {}
    defaults = PretrainConfig().to_dict()
    resolved = resolve(defaults, file_cfg, _flags(args, PRETRAIN_KEYS))
    for key in ("milestones", "crop_scale"):
        resolved[key] = tuple(resolved[key])
    cfg = PretrainConfig(**_check_keys(resolved, PretrainConfig))
    dataset = ChipDataset.load(args.dataset)
    spec = _build_spec(args.views, dataset, args.view_spec)
    out = Path(args.out)
    trainer = Pretrainer(dataset, spec, cfg)
    if args.resume and (out / "manifest.json").exists():
        trainer.load(out)
        print(f"resumed at epoch {trainer.epoch}")
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, {**cfg.to_dict(), "views": spec.spec_id, "dataset": str(args.dataset)})
    spec.to_json(out / "view_spec.json")
    log_path = out / "train_log.csv"
    if trainer.epoch == 0 or not log_path.exists():
        log_path.write_text("epoch,loss,lr\n")

    def on_epoch(epoch, loss):
        with log_path.open("a") as fh:
            fh.write(f"{epoch},{loss!r},{trainer.optimizer.lr!r}\n")
        print(f"epoch {epoch} loss {loss:.6f}")
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            _save_checkpoint(trainer, out, name)

    name = _dataset_name(Path(args.dataset))
    trainer.run(on_epoch=on_epoch)
    _save_checkpoint(trainer, out, name)
    return 0


def _save_checkpoint(trainer: Pretrainer, out: Path, dataset_name: str) -> None:
    trainer.save(out)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest.update({"pretrain_source": "cmc", "dataset_name": dataset_name})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _init_model(args, dataset: ChipDataset, spec_kind: str):
    """(model, spec, pretrain_source, n_pretrain) for the chosen initialization."""
    ckpt = args.checkpoint or args.supervised_init
    if ckpt:
        ckpt = Path(ckpt)
        model, manifest = load_model(ckpt)
        spec = ViewSpec.from_json(ckpt / "view_spec.json")
        source = "supervised" if args.supervised_init else manifest.get("pretrain_source", "cmc")
        if source == "cmc" and manifest.get("dataset_name"):
            source = f"cmc:{manifest['dataset_name']}"
        return model, spec, source, int(manifest.get("n_pretrain", 0))
    spec = _build_spec(spec_kind, dataset, args.view_spec)
    model = CmcModel.for_views(*spec.view_channels, seed=args.seed)
    return model, spec, "random", 0


def _report_out(args, report, cfg) -> None:
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_json(out)
        resolved = {**asdict(cfg), "dataset": str(args.dataset), "pretrain_source": report.pretrain_source}
        _snapshot(out.parent, resolved, out.stem + ".config.txt")
    if args.ledger:
        append_ledger(args.ledger, report)
    print(report.to_json())


def cmd_probe(args) -> int:
    dataset = ChipDataset.load(args.dataset)
    model, spec, source, n_pretrain = _init_model(args, dataset, args.views)
    overrides = {k: v for k, v in _flags(args, ("epochs", "lr", "weight_decay", "seed")).items() if v is not None}
    file_cfg = load_config(args.config) if args.config else {}
    cfg = ProbeConfig.preset(args.preset, **_check_keys({**file_cfg, **overrides}, ProbeConfig))
    _, report = run_linear_probe(model, dataset, spec, cfg, task=_dataset_name(Path(args.dataset)))
    report.pretrain_source, report.n_pretrain = source, n_pretrain
    _report_out(args, report, cfg)
    return 0


def cmd_finetune(args) -> int:
    dataset = ChipDataset.load(args.dataset)
    model, spec, source, n_pretrain = _init_model(args, dataset, args.views)
    file_cfg = load_config(args.config) if args.config else {}
    overrides = {k: v for k, v in _flags(args, ("epochs", "lr", "weight_decay", "seed")).items() if v is not None}
    cfg = FinetuneConfig(**_check_keys({**file_cfg, **overrides}, FinetuneConfig))
    net, report, losses = run_finetune(model, dataset, spec, cfg, task=_dataset_name(Path(args.dataset)))
    report.pretrain_source, report.n_pretrain = source, n_pretrain
    if args.save_model:
        out = Path(args.save_model)
        manifest = model.manifest()
        manifest.update(
            {"pretrain_source": "supervised", "view_spec_id": spec.spec_id, "epoch": cfg.epochs,
             "rng_seed": cfg.seed, "n_pretrain": int(len(dataset.split("train"))), "history": losses}
        )
        save_module(model, out / "model", manifest)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        spec.to_json(out / "view_spec.json")
    _report_out(args, report, cfg)
    return 0


def summarize_ledger(rows: list) -> list:
    groups = defaultdict(list)
    for row in rows:
        key = (row["task"], row["protocol"], row["metric"], row["pretrain_source"], row["views"], int(row["n_pretrain"]))
        groups[key].append(float(row["value"]))
    summary = []
    for key in sorted(groups):
        values = np.array(groups[key])
        summary.append(
            dict(zip(SUMMARY_COLUMNS, (*key, len(values), *(float(f(values)) for f in (np.mean, np.std, np.min, np.max)))))
        )
    return summary


def cmd_report(args) -> int:
    ledger = Path(args.ledger)
    if not ledger.exists():
        raise FileNotFoundError(f"ledger {ledger} does not exist")
    with ledger.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != LEDGER_COLUMNS:
            raise ValueError(f"ledger columns {reader.fieldnames} differ from {list(LEDGER_COLUMNS)}")
        rows = list(reader)
    summary = summarize_ledger(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        for row in summary:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    # one series per (task, protocol, pretrain source, views): x = pretraining set size
    plot = defaultdict(dict)
    for row in summary:
        series = f"{row['pretrain_source']}/{row['views']}"
        plot[f"{row['task']}/{row['protocol']}"].setdefault(series, []).append([row["n_pretrain"], row["mean"]])
    (out / "plot_data.json").write_text(json.dumps(plot, indent=2, sort_keys=True))
    print(f"{len(rows)} ledger rows -> {len(summary)} groups in {out / 'summary.csv'}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multispectral chip dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--num-chips", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--multi-label", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pca-fit", help="fit PCA views on the training split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pixels-per-chip", type=int, default=144)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca_fit)

    p = sub.add_parser("pretrain", help="contrastive multiview pretraining")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--views", choices=("lab", "bands", "pca"), required=True)
    p.add_argument("--view-spec")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--bank-momentum", type=float)
    p.add_argument("--positive", choices=("bank", "live"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} evaluation")
        init = p.add_mutually_exclusive_group(required=True)
        init.add_argument("--checkpoint")
        init.add_argument("--random-init", action="store_true")
        init.add_argument("--supervised-init")
        p.add_argument("--config")
        p.add_argument("--dataset", required=True)
        p.add_argument("--views", choices=("lab", "bands", "pca"), default="bands")
        p.add_argument("--view-spec")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--ledger")
        p.add_argument("--out")
        if name == "probe":
            p.add_argument("--preset", choices=("default", "aid", "mlrsnet"), default="default")
        else:
            p.add_argument("--save-model")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="summarize a results ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    apply_thread_limit()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mvc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (T.NonFiniteError, FloatingPointError) as exc:
        print(f"mvc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ChipFileError, ViewError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"mvc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
