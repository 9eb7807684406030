"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .bagfile import FormatError, ManifestRow, load_bag, read_manifest, write_bag, write_manifest
from .checkpoint import Checkpoint
from .exports import export_interpretability
from .fusion import EmbeddedBag
from .metrics import UndefinedMetricError
from .pipeline import DegenerateInputError, EmbedderError, StubEmbedder, load_slide, preprocess_slide
from .selftest import run_selftest
from .survival import ConfigurationError
from .synth import SYNTH_MODES, synth_cohort, write_cohort
from .trainer import TrainConfig, cross_validate, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "FLUOROFORMER_THREADS"

log = logging.getLogger("fluoroformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    data = json.loads(p.read_text())
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p}: config must be a mapping")
    return data


def _load_cohort(bags_dir: str) -> tuple[list[EmbeddedBag], list[ManifestRow]]:
    root = Path(bags_dir)
    rows = read_manifest(root / "manifest.csv")
    if not rows:
        raise ConfigurationError(f"{root}/manifest.csv lists no samples")
    bags = [load_bag(root / r.bag_path, r.sample_id) for r in rows]
    return bags, rows


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _read_clinical(path: str | None) -> dict[str, dict]:
    if not path:
        return {}
    with open(path, newline="") as fh:
        return {rec["sample_id"]: rec for rec in csv.DictReader(fh)}


def _import_embeddings(path: Path) -> EmbeddedBag:
    with np.load(path, allow_pickle=False) as data:
        if "embeddings" not in data or "coords" not in data:
            raise FormatError(f"{path}: expected arrays 'embeddings' and 'coords'")
        emb = data["embeddings"]
        names = tuple(str(n) for n in data["channel_names"]) if "channel_names" in data else ()
        return EmbeddedBag(nx.tensor(emb), data["coords"], path.stem, names)


def cmd_preprocess(args) -> int:
    src, out = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    if args.embedder == "import":
        entries = sorted(p for p in src.iterdir() if p.suffix == ".npz")
    else:
        entries = sorted(p for p in src.iterdir() if p.is_dir() or p.suffix.lower() in (".png", ".tif", ".tiff"))
    if not entries:
        raise FileNotFoundError(f"no slides found in {src}")
    clinical = _read_clinical(args.clinical)
    embedder = StubEmbedder(args.d_emb, seed=args.seed)
    rows, n_patches, channels = [], 0, set()
    for entry in entries:
        if args.embedder == "import":
            bag = _import_embeddings(entry)
            if args.mode == "he" and bag.n_markers != 1:
                raise ConfigurationError(f"{entry}: H&E mode expects single-channel embeddings")
        else:
            slide = load_slide(entry, args.mode)
            bag = preprocess_slide(slide, embedder, args.mode, args.patch_size, args.factor)
            if bag is None:
                log.warning("%s: no foreground patches; skipped", entry)
                continue
        sid = bag.sample_id
        write_bag(out / "bags" / f"{sid}.bag", bag)
        rec = clinical.get(sid, {})
        time = float(rec["time_days"]) if rec.get("time_days") else math.nan
        censored = int(rec["censored"]) if rec.get("censored") else -1
        rows.append(ManifestRow(sid, rec.get("patient_id") or sid, time, censored, f"bags/{sid}.bag"))
        n_patches += bag.n_patches
        channels.update(bag.channel_names)
    if not rows:
        raise DegenerateInputError("no slide produced foreground patches")
    write_manifest(out / "manifest.csv", rows)
    _write_json(out / "config.json", {"command": "preprocess", **{k: v for k, v in vars(args).items() if k != "func"}})
    print(f"slides: {len(rows)}  patches: {n_patches}  channels: {len(channels)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cohort = synth_cohort(args.n, args.markers, args.d_emb, args.seed, censor_rate=args.censor_rate,
                          signal_weight=args.signal_weight, mode=args.mode, smooth=args.smooth,
                          signal_strength=args.signal_strength, noise=args.noise, grid=args.grid)
    out = write_cohort(cohort, args.out)
    _write_json(out / "config.json", {"command": "synth", **cohort.params})
    print(f"samples: {args.n}  oracle C-index: {cohort.oracle_cindex():.4f}")
    return EXIT_OK


_TRAIN_FLAGS = {"lr": "lr", "epochs": "epochs", "seed": "seed", "d_hid": "d_hid", "d_att": "d_att",
                "weight_decay": "weight_decay", "precision": "precision", "fusion": "fusion", "n_bins": "n_bins"}


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    merged = TrainConfig().to_dict()
    merged.update(_load_config_file(args.config))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged)


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def cmd_train(args) -> int:
    if args.folds < 3:
        raise UsageError("--folds must be at least 3 (train, validation and test splits)")
    config = resolve_train_config(args)
    bags, rows = _load_cohort(args.bags)
    out = Path(args.out)
    result = cross_validate(bags, rows, config, k=args.folds, workers=_workers())
    for f in result.folds:
        fold_dir = out / f"fold{f.fold}"
        f.checkpoint.save(fold_dir / "checkpoint.flck")
        with (fold_dir / "train_log.jsonl").open("w") as fh:
            for rec in f.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with (out / "risks.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "fold", "risk"])
        for f in result.folds:
            for sid in sorted(f.risks):
                w.writerow([sid, f.fold, repr(f.risks[sid])])
    table = result.summary_table()
    (out / "summary.md").write_text(table)
    _write_json(out / "summary.json", {
        "folds": [{"fold": f.fold, "test_cindex": f.test_cindex, "morans_i": f.test_morans_i,
                   "best_epoch": f.checkpoint.epoch, "val_cindex": f.checkpoint.val_cindex} for f in result.folds],
        "mean_cindex": result.mean_cindex, "std_cindex": result.std_cindex, "mean_morans_i": result.mean_morans_i,
    })
    _write_json(out / "config.json", {"command": "train", "folds": args.folds, "bags": args.bags,
                                      "train_config": config.to_dict()})
    print(table, end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    bags, rows = _load_cohort(args.bags)
    if args.samples:
        keep = set(Path(args.samples).read_text().split())
        bags = [b for b in bags if b.sample_id in keep]
        rows = [r for r in rows if r.sample_id in keep]
    with_outcome = [r for r in rows if r.has_outcome]
    ids = {r.sample_id for r in with_outcome}
    cidx, risks = evaluate(ckpt, [b for b in bags if b.sample_id in ids], with_outcome)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "risks.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "risk"])
        for sid in sorted(risks):
            w.writerow([sid, repr(risks[sid])])
    _write_json(out / "metrics.json", {"cindex": cidx, "n_samples": len(with_outcome)})
    _write_json(out / "config.json", {"command": "evaluate", "checkpoint": args.checkpoint, "bags": args.bags})
    print(f"C-index: {cidx:.4f}  samples: {len(with_outcome)}")
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    bags, _ = _load_cohort(args.bags)
    report = export_interpretability(ckpt, bags, args.out)
    _write_json(Path(args.out) / "config.json", {"command": "export", "checkpoint": args.checkpoint,
                                                 "bags": args.bags})
    print(f"exported {report['n_slides']} slides to {args.out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fluoroformer", description="Marker-fusion MIL for multiplexed slide images.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="tile, mask and embed slides into bag files")
    s.add_argument("--input", required=True, help="directory with one entry per slide")
    s.add_argument("--mode", choices=("mif", "he"), default="mif")
    s.add_argument("--patch-size", type=int, default=224)
    s.add_argument("--factor", type=int, default=224, help="downsampling factor for foreground detection")
    s.add_argument("--embedder", choices=("stub", "import"), default="stub")
    s.add_argument("--d-emb", type=int, default=64)
    s.add_argument("--seed", type=int, default=0, help="stub embedder seed")
    s.add_argument("--clinical", help="CSV with sample_id, patient_id, time_days, censored")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="generate a synthetic cohort with a planted signal")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--markers", type=int, default=7)
    s.add_argument("--d-emb", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--censor-rate", type=float, default=0.3)
    s.add_argument("--signal-weight", type=float, default=1.0)
    s.add_argument("--signal-strength", type=float, default=2.0)
    s.add_argument("--noise", type=float, default=1.0)
    s.add_argument("--mode", choices=SYNTH_MODES, default="linear")
    s.add_argument("--smooth", type=float, default=0.0)
    s.add_argument("--grid", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="patient-stratified cross-validation")
    s.add_argument("--bags", required=True, help="directory containing manifest.csv")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--d-hid", type=int)
    s.add_argument("--d-att", type=int)
    s.add_argument("--n-bins", type=int)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--precision", choices=("float32", "float64"))
    s.add_argument("--fusion", choices=("fluoroformer", "mean"))
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="C-index and risks of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--samples", help="file with whitespace-separated sample ids to evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export", help="attention heatmaps and marker-attention summaries")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("selftest", help="gradient, oracle and format checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nx.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ConfigurationError, DegenerateInputError, EmbedderError, UndefinedMetricError,
            FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
