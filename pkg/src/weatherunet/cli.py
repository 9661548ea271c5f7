"""Command-line entry point: ``weatherunet <command> [options]``.

Exit codes: 0 success, 1 data error (missing or malformed inputs), 2 config
error (bad flags, bad config file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .datasets import (
    VALIDATION_SETS,
    DatasetError,
    LabelParseError,
    SampleRecord,
    SceneError,
    build_validation_sets,
    cropify_dataset,
    extend_dataset,
    generate_corpus,
    read_manifest,
    write_manifest,
)
from .detect_eval import DetectorConfig, EvalDataError, SetReport, emit_report, evaluate_set, read_detections
from .imaging import CropGrid, DimensionError, ImageFormatError, read_ppm, write_ppm
from .rng import derive_seed
from .weathergen import Condition, WeatherSpec, apply_weather, tier_of
from .wunet import (
    CheckpointError,
    ConfigError,
    DataError,
    TrainConfig,
    TrainingError,
    WUNetConfig,
    build_model,
    forward_image,
    load_checkpoint,
    train,
)

log = logging.getLogger("weatherunet")

DATA_ERRORS = (FileNotFoundError, IsADirectoryError, DataError, DatasetError, EvalDataError,
               ImageFormatError, LabelParseError, CheckpointError, TrainingError, SceneError,
               DimensionError)


class UsageError(Exception):
    """Bad configuration detected after argument parsing (exit 2)."""


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log_config(args, out: Path, **extra) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(extra)
    cfg["version"] = __version__
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _ppms(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory not found: {d}")
    return sorted(d.glob("*.ppm"))


# -- commands --------------------------------------------------------------

def cmd_scene_gen(args) -> None:
    out = _out(args)
    _log_config(args, out)
    recs = generate_corpus(out, args.count, args.width, args.height, seed=args.seed,
                           split=args.split, n_objects=tuple(args.objects), threads=args.threads)
    log.info("wrote %d scenes to %s", len(recs), out)


def cmd_augment(args) -> None:
    if not 0.0 <= args.intensity <= 1.0:
        raise UsageError(f"--intensity must be in [0, 1], got {args.intensity}")
    out = _out(args)
    _log_config(args, out)
    cond = Condition(args.condition)
    recs = []
    for p in _ppms(args.input):
        spec = WeatherSpec(cond, args.intensity, derive_seed(args.seed, p.stem, cond.value))
        dest = out / p.name
        write_ppm(apply_weather(read_ppm(p), spec), dest)
        tier = tier_of(args.intensity)
        recs.append(SampleRecord(p.stem, str(dest), cond.value, args.intensity,
                                 tier.value if tier else None, str(p.resolve())))
    write_manifest(recs, out / "manifest.jsonl")
    log.info("augmented %d images", len(recs))


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        cols, rows = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid must look like COLSxROWS, got {text!r}") from None
    return cols, rows


def cmd_dataset(args) -> None:
    out = _out(args)
    _log_config(args, out)
    if args.action == "extend":
        recs = extend_dataset(args.manifest, out, seed=args.seed, threads=args.threads)
        log.info("extended dataset: %d records", len(recs))
    elif args.action == "valsets":
        sets = build_validation_sets(args.manifest, out, seed=args.seed, threads=args.threads)
        log.info("built %d validation sets", len(sets))
    else:
        cols, rows = _parse_grid(args.grid)
        recs = read_manifest(args.manifest)
        if not recs:
            raise DatasetError(f"{args.manifest}: empty manifest")
        first = read_ppm(recs[0].image_path)
        try:
            grid = CropGrid.for_size(first.width, first.height, cols, rows)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        crops = cropify_dataset(recs, grid, out, threads=args.threads)
        log.info("cropified into %d records", len(crops))


def _load_train_config(path: str) -> tuple[WUNetConfig, TrainConfig]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    try:
        mcfg = WUNetConfig.from_dict(raw.get("model", {}))
        tcfg = TrainConfig(**raw.get("train", {}))
    except TypeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return mcfg, tcfg


def cmd_train(args) -> None:
    mcfg, tcfg = _load_train_config(args.config)
    for m in (args.train, args.test):
        if not Path(m).is_file():
            raise FileNotFoundError(f"manifest not found: {m}")
    out = _out(args)
    tcfg.checkpoint_dir = str(out)
    tcfg.seed = args.seed
    _log_config(args, out, model=mcfg.to_dict(), train=asdict(tcfg))
    model = build_model(mcfg, args.seed)
    best = train(model, args.train, args.test, tcfg)
    log.info("best test MSE %.6f at epoch %d", best.test_mse, best.epoch)


def cmd_denoise(args) -> None:
    model = load_checkpoint(args.model)
    dest = Path(args.output)
    dest.mkdir(parents=True, exist_ok=True)
    if args.out_dir is None:
        args.out_dir = str(dest)
    _log_config(args, _out(args))
    paths = _ppms(args.input)
    for p in paths:
        write_ppm(forward_image(model, read_ppm(p)), dest / p.name)
    log.info("denoised %d images", len(paths))


def _set_dirs(root: Path) -> list[tuple[str, Path]]:
    if not root.is_dir():
        raise FileNotFoundError(f"sets directory not found: {root}")
    found = {p.parent.name: p for p in root.glob("*/manifest.jsonl")}
    if not found:
        raise FileNotFoundError(f"no */manifest.jsonl under {root}")
    order = [n for n in VALIDATION_SETS if n in found] + sorted(set(found) - set(VALIDATION_SETS))
    return [(n, found[n]) for n in order]


def _detections_for(dets: dict, set_name: str) -> dict:
    prefix = set_name + "/"
    scoped = {k[len(prefix):]: v for k, v in dets.items() if k.startswith(prefix)}
    return scoped or dets


def cmd_eval(args) -> None:
    if args.model and args.detections:
        raise UsageError("--model and --detections are mutually exclusive")
    model = load_checkpoint(args.model) if args.model else None
    dets = read_detections(args.detections) if args.detections else None
    variant = args.name or ("wunet" if model else "external" if dets else "baseline")
    sets = _set_dirs(Path(args.sets))
    out = _out(args)
    _log_config(args, out, variant=variant)
    det_cfg = DetectorConfig(args.radius, args.contrast, args.min_area)
    reports = []
    for name, manifest in sets:
        rep = evaluate_set(read_manifest(manifest), model, det_cfg,
                           _detections_for(dets, name) if dets is not None else None,
                           name=f"{variant}/{name}", threads=args.threads)
        log.info("%s: mAP %.4f mse %.6f", rep.name, rep.map, rep.mse)
        reports.append(rep)
    with open(out / "reports.jsonl", "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    emit_report(reports, out / "report.csv")


def cmd_report(args) -> None:
    root = Path(args.runs)
    files = sorted(root.rglob("reports.jsonl")) if root.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no reports.jsonl found under {root}")
    reports = []
    for f in files:
        for line in f.read_text().splitlines():
            if line.strip():
                reports.append(SetReport.from_dict(json.loads(line)))
    out = _out(args)
    _log_config(args, out, sources=[str(f) for f in files])
    emit_report(reports, out / "report.csv")
    log.info("combined %d rows from %d runs", len(reports), len(files))


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker threads for dataset and eval maps")
    common.add_argument("--out-dir", default="out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="weatherunet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scene-gen", parents=[common], help="render a synthetic labelled corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--split", choices=["train", "test", "val"], default="train")
    s.add_argument("--objects", type=int, nargs=2, default=[2, 4], metavar=("MIN", "MAX"))
    s.set_defaults(func=cmd_scene_gen)

    s = sub.add_parser("augment", parents=[common], help="apply one weather condition to a directory")
    s.add_argument("--input", required=True)
    s.add_argument("--condition", choices=[c.value for c in Condition if c is not Condition.NONE],
                   required=True)
    s.add_argument("--intensity", type=float, required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("dataset", parents=[common], help="extend, build validation sets, or cropify")
    s.add_argument("action", choices=["extend", "valsets", "cropify"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--grid", default="4x2", help="COLSxROWS for cropify")
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", parents=[common], help="train a WUNet from manifests")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--config", required=True, help='JSON with "model" and "train" sections')
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", parents=[common], help="run a checkpoint over a directory")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_denoise, out_dir=None)

    s = sub.add_parser("eval", parents=[common], help="score validation sets")
    s.add_argument("--sets", required=True)
    s.add_argument("--model")
    s.add_argument("--detections", help="JSONL detection dump instead of the blob detector")
    s.add_argument("--name", help="pipeline variant label (default baseline or wunet)")
    s.add_argument("--radius", type=int, default=DetectorConfig.radius)
    s.add_argument("--contrast", type=float, default=DetectorConfig.contrast)
    s.add_argument("--min-area", type=int, default=DetectorConfig.min_area)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="combine eval runs into one CSV")
    s.add_argument("--runs", required=True)
    s.set_defaults(func=cmd_report)
    return p


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
