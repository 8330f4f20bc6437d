"""``kanlab`` command-line interface.

Exit codes: 0 success, 1 invalid arguments or a failed run, 2 missing or
unreadable input, 3 malformed checkpoint/dataset file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .checkpoint import CheckpointFormatError, MAGIC, load_checkpoint, save_checkpoint
from .config import ALL_KEYS, ConfigError, RunConfig
from .data import (DataFormatError, Dataset, ReductionSpec, augment_balance, load_idx_pair,
                   load_image, load_image_directory, reduce_training_set, stratified_split,
                   synth_generate, write_idx_pair)
from .gradcam import export_csv, gradcam, overlay_export
from .metrics import MetricsReport, metrics_report, roc_auc, roc_csv
from .models import build, parameter_count
from .rng import derive_seed
from .train import TrainingDiverged, evaluate, predict_logits, softmax_np, train

log = logging.getLogger("kanlab")

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_FORMAT = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


# -- helpers ---------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git names blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_paths(paths) -> str:
    h = hashlib.sha1()
    for p in sorted(Path(q) for q in paths):
        h.update(f"{p.name}\0{git_blob_hash(p.read_bytes())}\n".encode())
    return h.hexdigest()


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} not configured")
    if not path.exists():
        raise CliError(f"{what} not found: {path}", EXIT_MISSING)
    return path


def load_source(cfg: RunConfig, test: bool = False) -> tuple[Dataset, str] | None:
    """Dataset named by the config plus a content hash of its inputs.

    With ``test=True`` the optional external test set is loaded instead
    (``None`` when the config names none).
    """
    hw = cfg.model_spec().backbone.input_hw
    if test:
        if cfg.test_dir is not None:
            root = _require(cfg.test_dir, "test directory")
            return load_image_directory(root, hw), _hash_paths(p for p in root.rglob("*") if p.is_file())
        if cfg.test_idx_images is not None:
            a = _require(cfg.test_idx_images, "test IDX images")
            b = _require(cfg.test_idx_labels, "test IDX labels")
            return load_idx_pair(a, b), _hash_paths([a, b])
        return None
    if cfg.data_source == "synth":
        ds = synth_generate(cfg.synth_classes, cfg.synth_per_class, hw,
                            derive_seed(cfg.seed, "synth"), cfg.synth_noise)
        return ds, git_blob_hash(ds.provenance.encode())
    if cfg.data_source == "dir":
        root = _require(cfg.data_dir, "dataset directory")
        return load_image_directory(root, hw), _hash_paths(p for p in root.rglob("*") if p.is_file())
    a = _require(cfg.idx_images, "IDX images")
    b = _require(cfg.idx_labels, "IDX labels")
    return load_idx_pair(a, b), _hash_paths([a, b])


def _check_hw(ds: Dataset, model) -> None:
    want = (model.spec.backbone.in_channels, *model.spec.backbone.input_hw)
    if ds.images.shape[1:] != want:
        raise CliError(f"dataset images are {ds.images.shape[1:]}, model expects {want}")


def prepare_splits(cfg: RunConfig, ds: Dataset):
    return stratified_split(ds, cfg.split, derive_seed(cfg.seed, "split"))


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def report_for(model, ds: Dataset, batch_size: int) -> tuple[MetricsReport, np.ndarray]:
    _, cm = evaluate(model, ds, batch_size)
    probs = softmax_np(predict_logits(model, ds.images, batch_size).astype(np.float64))
    return metrics_report(cm, probs, ds.labels), probs


def write_roc(out_dir: Path, ds: Dataset, probs: np.ndarray, prefix: str = "roc") -> list[Path]:
    res = roc_auc(probs, ds.labels)
    written = []
    for key, curve in res.curves.items():
        name = key if key == "micro" else ds.class_names[int(key)]
        path = out_dir / f"{prefix}_{name}.csv"
        write_text(path, roc_csv(curve))
        written.append(path)
    return written


def _resolve_jobs(requested: int | None) -> int:
    jobs = requested or 1
    cap = os.environ.get("KANLAB_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise CliError(f"KANLAB_THREADS must be an integer, got {cap!r}") from None
    return max(1, jobs)


def _load_config(args) -> RunConfig:
    overrides = dict(getattr(args, "overrides", None) or {})
    for key in ALL_KEYS:
        val = getattr(args, "opt_" + key, None)
        if val is not None:
            overrides[key] = val
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_pairs({}, None, overrides)


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    spec = cfg.model_spec()
    tcfg = cfg.train_config()
    ds, data_hash = load_source(cfg)
    if ds.num_classes != spec.num_classes:
        raise CliError(f"dataset has {ds.num_classes} classes, model spec expects {spec.num_classes}")
    split = prepare_splits(cfg, ds)
    train_ds, val_ds, test_ds = ds.subset(split.train), ds.subset(split.val), ds.subset(split.test)
    if cfg.balance_target:
        train_ds = augment_balance(train_ds, cfg.balance_target, derive_seed(cfg.seed, "balance"))
    model = build(spec, derive_seed(cfg.seed, "model"))
    _check_hw(ds, model)
    model, rep = train(model, train_ds, val_ds, tcfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    report, probs = report_for(model, test_ds, tcfg.batch_size)
    write_text(out / "metrics.csv", report.to_csv())
    write_text(out / "train_log.csv", rep.to_csv())
    write_roc(out, test_ds, probs)
    ckpt_size = save_checkpoint(model, out / "model.ckpt")
    external = load_source(cfg, test=True)
    ext_row = None
    if external is not None:
        ext_ds, _ = external
        _check_hw(ext_ds, model)
        ext_report, ext_probs = report_for(model, ext_ds, tcfg.batch_size)
        write_text(out / "external_metrics.csv", ext_report.to_csv())
        write_roc(out, ext_ds, ext_probs, prefix="external_roc")
        ext_row = ext_report.row() | {"micro_auc": ext_report.micro_auc}
    manifest = {
        "version": __version__,
        "command": "train",
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "stage_seeds": {k: derive_seed(cfg.seed, k) for k in ("synth", "split", "balance", "model")},
        "input_hash": data_hash,
        "split_sizes": list(split.sizes()),
        "train_size": len(train_ds),
        "best_epoch": rep.best_epoch + 1,
        "epochs_run": rep.epochs_run,
        "checkpoint_bytes": ckpt_size,
        "test_metrics": report.row() | {"micro_auc": report.micro_auc},
        "external_metrics": ext_row,
        "wall_time_s": rep.wall_time,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    write_text(out / "run_manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")
    print(report.to_text())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    model = load_checkpoint(ckpt)
    hw = model.spec.backbone.input_hw
    if args.dataset:
        src = Path(args.dataset)
        if not src.exists():
            raise CliError(f"dataset not found: {src}", EXIT_MISSING)
        if src.is_dir():
            ds = load_image_directory(src, hw)
        else:
            if not args.labels:
                raise CliError("IDX image file given without --labels")
            lab = Path(args.labels)
            if not lab.exists():
                raise CliError(f"labels not found: {lab}", EXIT_MISSING)
            ds = load_idx_pair(src, lab)
    else:
        # no dataset given: rebuild the configured source and use its test split
        cfg = _load_config(args)
        full, _ = load_source(cfg)
        ds = full.subset(prepare_splits(cfg, full).test)
    if ds.num_classes != model.num_classes:
        raise CliError(f"class-count mismatch: dataset has {ds.num_classes} classes, "
                       f"model has {model.num_classes}")
    _check_hw(ds, model)
    report, probs = report_for(model, ds, int(args.opt_batch_size or 64))
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "metrics.csv", report.to_csv())
    write_roc(out, ds, probs)
    print(report.to_text())
    return EXIT_OK


SWEEP_HEADER = ("p", "n_train", "accuracy", "precision", "recall", "f1")


def _fraction_label(p: Fraction) -> str:
    return f"{float(p):.2f}"


def cmd_reduce_sweep(args) -> int:
    cfg = _load_config(args)
    fractions = cfg.fractions
    spec = cfg.model_spec()
    tcfg = cfg.train_config()
    ds, _ = load_source(cfg)
    if ds.num_classes != spec.num_classes:
        raise CliError(f"dataset has {ds.num_classes} classes, model spec expects {spec.num_classes}")
    split = prepare_splits(cfg, ds)
    val_ds, test_ds = ds.subset(split.val), ds.subset(split.test)

    def run(p: Fraction):
        label = _fraction_label(p)
        sub = reduce_training_set(split, ReductionSpec(p, derive_seed(cfg.seed, f"reduce:{label}")),
                                  ds.labels)
        train_ds = ds.subset(sub.train)
        model = build(spec, derive_seed(cfg.seed, f"model:{label}"))
        model, _ = train(model, train_ds, val_ds, tcfg)
        _, cm = evaluate(model, test_ds, tcfg.batch_size)
        rep = metrics_report(cm)
        return [label, len(train_ds), f"{rep.accuracy:.6f}", f"{rep.precision:.6f}",
                f"{rep.recall:.6f}", f"{rep.f1:.6f}"]

    def guarded(p):
        try:
            return run(p), None
        except (ValueError, TrainingDiverged, FloatingPointError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    jobs = _resolve_jobs(args.jobs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(guarded, fractions))
    else:
        results = [guarded(p) for p in fractions]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for p, (row, err) in zip(fractions, results):
            if row is not None:
                w.writerow(row)
                print(",".join(str(v) for v in row))
            else:
                failures.append((_fraction_label(p), err))
    if failures:
        with open(out / "sweep_failures.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("p", "error"))
            w.writerows(failures)
        for p, err in failures:
            print(f"fraction {p} failed: {err}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcam(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_MISSING)
    model = load_checkpoint(ckpt)
    img_path = Path(args.image)
    if not img_path.exists():
        raise CliError(f"image not found: {img_path}", EXIT_MISSING)
    try:
        img = load_image(img_path, model.spec.backbone.input_hw)
    except DataFormatError as exc:
        raise CliError(str(exc), EXIT_MISSING) from None
    try:
        hm = gradcam(model, img[None], args.target_class)
    except IndexError as exc:
        raise CliError(str(exc), EXIT_FAIL) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    overlay_export(hm, img, out)
    export_csv(hm, out.with_suffix(".csv"))
    flat = " (flat map)" if hm.flat else ""
    print(f"class {hm.target_class}{flat}: wrote {out} and {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_synth(args) -> int:
    hw = tuple(int(v) for v in args.hw.lower().split("x")) if "x" in args.hw else (int(args.hw),) * 2
    ds = synth_generate(args.classes, args.per_class, hw, args.seed or 0, args.noise)
    out = Path(args.out_dir or "synth")
    if args.format == "idx":
        out.mkdir(parents=True, exist_ok=True)
        write_idx_pair(ds, out / "images.idx", out / "labels.idx")
    else:
        for c, name in enumerate(ds.class_names):
            (out / name).mkdir(parents=True, exist_ok=True)
        counters = [0] * ds.num_classes
        for img, lab in zip(ds.images, ds.labels):
            arr = np.clip(np.rint(img[0] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(out / ds.class_names[lab] / f"{counters[lab]:05d}.png")
            counters[lab] += 1
    print(f"wrote {len(ds)} images ({ds.num_classes} classes, {hw[0]}x{hw[1]}) to {out}")
    return EXIT_OK


def _looks_like_checkpoint(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC or path.suffix.lower() in (".ckpt", ".bin"):
        return True
    try:
        path.read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        return True
    return False


def cmd_info(args) -> int:
    target = Path(args.target)
    if not target.exists():
        raise CliError(f"not found: {target}", EXIT_MISSING)
    if _looks_like_checkpoint(target):
        model = load_checkpoint(target)
    else:
        try:
            cfg = RunConfig.load(target)
        except ConfigError as exc:
            raise CliError(str(exc), EXIT_FORMAT) from None
        model = build(cfg.model_spec(), derive_seed(cfg.seed, "model"))
    pc = parameter_count(model)
    spec = model.spec
    print(f"variant        {spec.variant}")
    print(f"kan_dims       {' -> '.join(str(d) for d in spec.kan_dims)}")
    print(f"{'layer':<10}{'trainable':>12}{'non_trainable':>15}")
    for name, tr, nt in pc.per_layer:
        print(f"{name:<10}{tr:>12}{nt:>15}")
    print(f"trainable      {pc.trainable}")
    print(f"non_trainable  {pc.non_trainable}")
    print(f"total          {pc.total}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _kv(text: str) -> tuple[str, str]:
    key, sep, val = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), val.strip()


def _add_globals(p: argparse.ArgumentParser, config_keys: bool = False) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--seed", type=lambda s: int(s, 0), help="master seed (overrides config)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, default=None, help="worker threads (capped by KANLAB_THREADS)")
    if config_keys:
        p.add_argument("--set", dest="overrides", type=_kv, action="append", default=[],
                       metavar="KEY=VALUE", help="override any config key")
        g = p.add_argument_group("config keys")
        for key in ALL_KEYS:
            if key in ("seed", "out_dir"):
                continue
            hint = "comma-separated, default 1.00,0.95,...,0.20" if key == "fractions" else None
            g.add_argument("--" + key.replace("_", "-"), dest="opt_" + key, metavar="V", help=hint)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kanlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kanlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="split, train, evaluate and checkpoint one model")
    _add_globals(p, config_keys=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", help="image directory or IDX image file")
    p.add_argument("--labels", help="IDX label file when DATASET is an IDX image file")
    _add_globals(p, config_keys=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reduce-sweep", help="retrain on stratified fractions of the train split")
    _add_globals(p, config_keys=True)
    p.set_defaults(func=cmd_reduce_sweep)

    p = sub.add_parser("gradcam", help="Grad-CAM overlay for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--class", dest="target_class", type=int, default=None,
                   help="target class index (default: predicted class)")
    p.add_argument("--out", default="gradcam.png", help="PNG path; raw values go next to it as .csv")
    _add_globals(p)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("synth", help="write a synthetic shape dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--hw", default="16x16")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--format", choices=("dir", "idx"), default="dir")
    _add_globals(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("info", help="parameter census of a checkpoint or config")
    p.add_argument("target")
    _add_globals(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"kanlab: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"kanlab: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointFormatError, DataFormatError) as exc:
        print(f"kanlab: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, TrainingDiverged, OSError) as exc:
        print(f"kanlab: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
