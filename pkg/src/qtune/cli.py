"""``qtune`` command line: train, sweep, rate, encode, export, ingest-check."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, DatasetError, DatasetSpec, ingest_dataset, read_image, write_image
from .entropy import build_huffman_tables, load_qtables, measure_rate, write_qtables
from .jpeg import ColorTransform, CompressionKernels, compress_images
from .metrics import batch_psnr, batch_ssim, finite_mean
from .sweep import matched_baselines, plot_rate_accuracy, run_sweep, write_sweep_csv
from .trainer import Checkpoint, TrainConfig, Trainer, TrainingAborted, write_history

logger = logging.getLogger("qtune")

COMMANDS = ("train", "sweep", "rate", "encode", "export", "ingest-check")
DEFAULT_QUALITIES = [5, 10, 12.5, 15, 20, 25, 30, 40, 50, 60, 70, 80, 85, 90, 95, 100]


class CliError(RuntimeError):
    pass


def default_config() -> dict:
    return {
        "seed": 0,
        "out": "qtune-out",
        "dataset": {
            "kind": "synthetic",
            "path": None,
            "num_classes": 10,
            "subset": None,
            "val_subset": None,
            "class_subset": None,
            "n": 1000,
            "n_val": 200,
            "image_size": 32,
        },
        "train": TrainConfig().to_dict(),
        "kernels": {"checkpoint": None, "qtables": None, "quality": None},
        "sweep": {
            "param": "lam",
            "values": [0.01, 0.03, 0.1, 0.3],
            "coupled": True,
            "baselines": True,
            "qualities": DEFAULT_QUALITIES,
        },
        "input": None,
    }


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _dataset_from_flag(value: str) -> dict:
    if value == "synthetic":
        return {"kind": "synthetic", "path": None}
    p = Path(value)
    if p.is_file() or (p.is_dir() and any(p.glob("*.bin"))):
        return {"kind": "cifar_binary", "path": value}
    return {"kind": "image_folder", "path": value}


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then command-line flags."""
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must be a mapping")
        cfg = _merge(cfg, loaded)
    cfg["command"] = args.command
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
        cfg["train"]["classifier"]["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.dataset is not None:
        cfg["dataset"].update(_dataset_from_flag(args.dataset))
    if args.subset is not None:
        cfg["dataset"]["subset"] = args.subset
    tr = cfg["train"]
    if args.mode is not None:
        tr["mode"] = args.mode
    if args.lam is not None:
        tr["loss"]["lam"] = args.lam
    if args.lam1 is not None:
        tr["loss"]["lam1"] = args.lam1
    if args.c is not None:
        tr["loss"]["c"] = args.c
    if args.quality is not None:
        tr["quality"] = args.quality
        cfg["kernels"]["quality"] = args.quality
    if args.checkpoint is not None:
        cfg["kernels"]["checkpoint"] = args.checkpoint
    if getattr(args, "qtables", None) is not None:
        cfg["kernels"]["qtables"] = args.qtables
    if getattr(args, "values", None):
        cfg["sweep"]["values"] = [float(v) for v in args.values.split(",")]
    if getattr(args, "input", None) is not None:
        cfg["input"] = args.input
    if cfg["dataset"]["num_classes"] is not None:
        tr["classifier"]["num_classes"] = cfg["dataset"]["num_classes"]
    return cfg


def echo_config(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    extra = set(cfg["train"]) - known
    if extra:
        raise CliError(f"unknown train settings: {sorted(extra)}")
    try:
        return TrainConfig.from_dict(copy.deepcopy(cfg["train"]))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid train configuration: {exc}") from exc


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["dataset"]
    common = dict(
        kind=d["kind"],
        path=d.get("path"),
        num_classes=d.get("num_classes"),
        class_subset=d.get("class_subset"),
        seed=cfg["seed"],
        image_size=d.get("image_size", 32),
    )
    train = ingest_dataset(DatasetSpec(split="train", subset=d.get("subset"), n=d.get("n", 1000), **common))
    val = ingest_dataset(DatasetSpec(split="test", subset=d.get("val_subset"), n=d.get("n_val", 200), **common))
    return train, val


def load_kernels(cfg: dict) -> tuple[CompressionKernels, ColorTransform]:
    k = cfg["kernels"]
    if k.get("checkpoint"):
        ckpt = Checkpoint.load(k["checkpoint"])
        return ckpt.compression_kernels(), ckpt.color_transform()
    if k.get("qtables"):
        return load_qtables(k["qtables"]), ColorTransform()
    if k.get("quality") is not None:
        return CompressionKernels.from_quality(float(k["quality"])), ColorTransform()
    raise CliError("no kernel source: pass --checkpoint, --qtables or --quality")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict) -> Path:
    out = Path(cfg["out"])
    tcfg = train_config(cfg)
    train, val = load_datasets(cfg)
    if tcfg.classifier.num_classes != train.num_classes:
        raise CliError(f"classifier has {tcfg.classifier.num_classes} classes, dataset {train.num_classes}")
    if cfg["kernels"].get("checkpoint"):
        trainer = Trainer.from_checkpoint(Checkpoint.load(cfg["kernels"]["checkpoint"]), train, val, tcfg)
    else:
        trainer = Trainer(tcfg, train, val)

    def progress(t: Trainer, ckpt: Checkpoint) -> None:
        ckpt.save(out / "checkpoint.json")
        write_history(out / "history.csv", t.history)
        logger.info("position %d/%d: %s", t.position, t.total_positions, t.history[-1])

    try:
        ckpt = trainer.run(on_step=progress)
    except TrainingAborted as exc:
        exc.checkpoint.save(out / "checkpoint.json")
        raise CliError(f"training aborted: {exc}") from exc
    ckpt.save(out / "checkpoint.json")
    write_history(out / "history.csv", trainer.history)
    result = trainer.evaluate()
    result.rate.write_csv(out / "rate.csv")
    write_qtables(out / "qtables.json", trainer.kernels, {"config_hash": tcfg.digest(), "mode": tcfg.mode})
    _write_json(out / "summary.json", result.summary())
    print(json.dumps(result.summary(), sort_keys=True))
    return out


def cmd_sweep(cfg: dict) -> Path:
    out = Path(cfg["out"])
    tcfg = train_config(cfg)
    train, val = load_datasets(cfg)
    sw = cfg["sweep"]
    rows = run_sweep(tcfg, sw["values"], train, val, sw.get("param", "lam"), sw.get("coupled", True))
    if sw.get("baselines", True):
        rows += list(matched_baselines(tcfg, rows, train, val, sw.get("qualities", DEFAULT_QUALITIES)).values())
    write_sweep_csv(out / "sweep.csv", rows)
    plot_rate_accuracy(out / "rate_accuracy.png", rows)
    for r in rows:
        print(json.dumps(r.as_dict(), default=float))
    return out


def cmd_rate(cfg: dict) -> Path:
    out = Path(cfg["out"])
    kernels, ct = load_kernels(cfg)
    train, val = load_datasets(cfg)
    tcfg = train_config(cfg)
    codec = build_huffman_tables(train.images, kernels, tcfg.huffman_sample, cfg["seed"], ct)
    report = measure_rate(val.images, kernels, codec, ct, image_ids=list(val.ids))
    report.write_csv(out / "rate.csv")
    summary = {"images": len(val), "mean_KB": report.mean_kb, "median_KB": report.median_kb}
    _write_json(out / "rate_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return out


def _encode_inputs(cfg: dict) -> tuple[np.ndarray | list[np.ndarray], list[str]]:
    src = cfg.get("input")
    if src is None:
        _, val = load_datasets(cfg)
        return val.images, list(val.ids)
    p = Path(src)
    if p.is_file():
        return [read_image(p)], [p.stem]
    files = sorted(f for f in p.rglob("*") if f.is_file() and f.suffix.lower() in {".png", ".ppm", ".jpg", ".jpeg", ".bmp"})
    if not files:
        raise CliError(f"no images under {src}")
    return [read_image(f) for f in files], [str(f.relative_to(p).with_suffix("")) for f in files]


def cmd_encode(cfg: dict) -> Path:
    out = Path(cfg["out"])
    kernels, ct = load_kernels(cfg)
    images, ids = _encode_inputs(cfg)
    codec_train, _ = load_datasets(cfg) if cfg.get("input") is None else (None, None)
    recon_dir = out / "reconstructed"
    recon_dir.mkdir(parents=True, exist_ok=True)
    shared = None
    if codec_train is not None:
        shared = build_huffman_tables(codec_train.images, kernels, train_config(cfg).huffman_sample, cfg["seed"], ct)
    rows = []
    for img, name in zip(images, ids):
        batch = np.asarray(img)[None]
        rec = compress_images(batch, kernels, ct)
        # loose files have no training split, so each one gets tables fitted to itself
        codec = shared if shared is not None else build_huffman_tables(batch, kernels, 1, cfg["seed"], ct)
        bits = measure_rate(batch, kernels, codec, ct).total_bits
        fname = name.replace("/", "__") + ".png"
        write_image(recon_dir / fname, rec[0])
        rows.append({
            "image_id": name,
            "file": fname,
            "psnr": float(batch_psnr(batch, rec)[0]),
            "ssim": float(batch_ssim(batch, rec)[0]),
            "bits": int(bits),
        })
    with open(out / "encode.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["image_id", "file", "psnr", "ssim", "bits"])
        w.writeheader()
        w.writerows(rows)
    psnrs = np.array([r["psnr"] for r in rows])
    print(json.dumps({"images": len(rows), "mean_psnr": finite_mean(psnrs)}))
    return out


def cmd_export(cfg: dict) -> Path:
    out = Path(cfg["out"])
    ck = cfg["kernels"].get("checkpoint")
    if not ck:
        raise CliError("export needs --checkpoint")
    if not Path(ck).is_file():
        raise CliError(f"checkpoint {ck} not found")
    ckpt = Checkpoint.load(ck)
    doc = write_qtables(out / "qtables.json", ckpt.compression_kernels(), {"config_hash": ckpt.config_hash})
    for name in ("y_qtable", "cb_qtable", "cr_qtable"):
        print(name)
        for row in doc[name]:
            print(" ".join(f"{v:3d}" for v in row))
    return out


def cmd_ingest_check(cfg: dict) -> Path:
    out = Path(cfg["out"])
    train, val = load_datasets(cfg)
    report = {}
    for split, ds in (("train", train), ("test", val)):
        counts = np.bincount(ds.labels, minlength=ds.num_classes)
        report[split] = {
            "images": len(ds),
            "classes": ds.num_classes,
            "shape": list(ds.images.shape[1:]),
            "min_per_class": int(counts.min()),
            "max_per_class": int(counts.max()),
        }
    _write_json(out / "ingest.json", report)
    print(json.dumps(report, sort_keys=True))
    return out


HANDLERS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "rate": cmd_rate,
    "encode": cmd_encode,
    "export": cmd_export,
    "ingest-check": cmd_ingest_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtune", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--mode", choices=["alternating", "joint", "baseline"])
        s.add_argument("--lambda", dest="lam", type=float)
        s.add_argument("--lambda1", dest="lam1", type=float)
        s.add_argument("--c", type=float)
        s.add_argument("--quality", type=float)
        s.add_argument("--dataset", help="'synthetic', a CIFAR binary file/dir, or an image folder")
        s.add_argument("--subset", type=int)
        s.add_argument("--checkpoint")
        s.add_argument("--qtables", help="Q-table JSON written by 'export'")
        s.add_argument("--values", help="comma-separated sweep values")
        s.add_argument("--input", help="image file or directory to encode")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        echo_config(cfg)
        HANDLERS[args.command](cfg)
    except (CliError, DatasetError, ValueError, OSError) as exc:
        print(f"qtune {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
