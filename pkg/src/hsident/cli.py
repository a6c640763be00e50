"""Command-line front end: synth, train, evaluate, predict, spectra, bands.

Settings resolve as command-line flags over ``--config`` JSON over defaults.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import DEFAULT_TARGETS, SplitPlan, SynthConfig, collect_samples, default_class_map, generate_synthetic
from .errors import ConfigError, DataError, HsidentError
from .evaluation import (
    interval_mean_spectra,
    render_band_image,
    render_label_map,
    save_png,
)
from .hscube import (
    HEADER_SUFFIX,
    AnnotationSet,
    HsCube,
    cube_stem,
    extract_band,
    read_annotations,
    read_cube,
    read_header,
    write_annotations,
    write_cube,
)
from .mlp import Checkpoint, TrainConfig, predict_pixels, write_log_csv
from .pipeline import evaluate_checkpoint, prepare_samples, run_experiment
from .preprocess import box_filter
from .transforms import PCA_COMPONENTS, Mode

log = logging.getLogger("hsident")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration


def _parse_box_filter(value: Any) -> int | None:
    if value is None or str(value).lower() in ("off", "none", "0"):
        return None
    try:
        k = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--box-filter expects an odd integer or 'off', got {value!r}") from None
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"box filter kernel must be odd and >= 1, got {k}")
    return k


def _parse_targets(value: Any) -> dict[str, int]:
    if isinstance(value, dict):
        return {str(k): int(v) for k, v in value.items()}
    out = {}
    for part in str(value).split(","):
        name, _, count = part.partition("=")
        if not count:
            raise ConfigError(f"targets must look like train=N,val=N,test=N; got {value!r}")
        out[name.strip()] = int(count)
    return out


@dataclass
class ExperimentConfig:
    data_dir: Path | None = None
    out: Path | None = None
    mode: Mode = Mode.HS
    box_filter: int | None = 5
    targets: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TARGETS))
    class_ids: list[int] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pca_components: int = PCA_COMPONENTS
    rgb_gain: float = 1.0
    seed: int = 0

    @classmethod
    def from_sources(cls, file_cfg: dict[str, Any], overrides: dict[str, Any]) -> ExperimentConfig:
        merged = {**file_cfg, **{k: v for k, v in overrides.items() if v is not None}}
        known = {
            "data_dir", "out", "mode", "box_filter", "targets", "class_ids", "train",
            "synth", "pca_components", "rgb_gain", "seed", "epochs", "batch_size",
        }
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(merged.get("seed", 0))
        train_d = dict(merged.get("train", {}))
        for key in ("epochs", "batch_size"):
            if key in merged:
                train_d[key] = merged[key]
        train_d["seed"] = seed
        synth_d = dict(merged.get("synth", {}))
        synth_d["seed"] = seed
        try:
            cfg = cls(
                data_dir=Path(merged["data_dir"]) if merged.get("data_dir") else None,
                out=Path(merged["out"]) if merged.get("out") else None,
                mode=Mode.parse(merged.get("mode", "hs")),
                box_filter=_parse_box_filter(merged.get("box_filter", 5)),
                targets=_parse_targets(merged.get("targets", DEFAULT_TARGETS)),
                class_ids=[int(i) for i in merged["class_ids"]] if merged.get("class_ids") else None,
                train=TrainConfig.from_dict(train_d),
                synth=SynthConfig.from_dict(synth_d),
                pca_components=int(merged.get("pca_components", PCA_COMPONENTS)),
                rgb_gain=float(merged.get("rgb_gain", 1.0)),
                seed=seed,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, HsidentError):
                raise
            raise ConfigError(str(exc)) from exc
        return cfg


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _resolve(args: argparse.Namespace, **extra: Any) -> ExperimentConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "box_filter": getattr(args, "box_filter", None),
        "out": getattr(args, "out", None),
        **extra,
    }
    return ExperimentConfig.from_sources(_load_config_file(getattr(args, "config", None)), overrides)


# --------------------------------------------------------------------------
# data directories


class DataDir:
    """HSC containers (and same-stem annotations) found in one directory."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"data directory {self.root} does not exist")
        self.stems: dict[str, Path] = {}
        for header in sorted(self.root.glob("*" + HEADER_SUFFIX)):
            cube_id = read_header(header)["cube_id"]
            if cube_id in self.stems:
                raise DataError(f"duplicate cube_id {cube_id!r} in {self.root}")
            self.stems[cube_id] = cube_stem(header)
        if not self.stems:
            raise DataError(f"no {HEADER_SUFFIX} files in {self.root}")

    def load_cube(self, cube_id: str) -> HsCube:
        try:
            return read_cube(self.stems[cube_id])
        except KeyError:
            raise DataError(f"cube {cube_id!r} not found in {self.root}") from None

    def annotations(self) -> list[AnnotationSet]:
        out = []
        for cube_id, stem in self.stems.items():
            header = read_header(stem)
            ann = read_annotations(stem, (header["height"], header["width"]))
            if ann.cube_id != cube_id:
                raise DataError(f"annotation for {stem.name} names cube {ann.cube_id!r}, header says {cube_id!r}")
            out.append(ann)
        return out


def _class_map(cfg: ExperimentConfig, anns: Sequence[AnnotationSet]) -> dict[int, int]:
    return default_class_map(anns, cfg.class_ids)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    synth_over = {
        k: getattr(args, k)
        for k in ("classes", "scenes", "bands", "height", "width", "noise")
        if getattr(args, k, None) is not None
    }
    if args.regions is not None:
        synth_over["regions_per_scene"] = args.regions
    cfg = _resolve(args)
    if synth_over:
        merged = {**cfg.synth.to_dict(), **synth_over}
        if args.regions is None:
            # a scene never holds the same individual twice
            merged["regions_per_scene"] = min(merged["regions_per_scene"], merged["classes"])
        cfg.synth = SynthConfig.from_dict(merged)
    if cfg.out is None:
        raise ConfigError("synth needs --out")
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for cube, ann in generate_synthetic(cfg.synth):
        header = write_cube(cube, out / cube.cube_id)
        sidecar = write_annotations(ann, out / cube.cube_id)
        stem = cube_stem(header)
        for p in (header, stem.with_name(stem.name + ".hsc.raw"), stem.with_name(stem.name + ".mask.png"), sidecar):
            files.append({"file": p.name, "sha256": _sha256(p)})
    manifest = {"generator": "hsident.synth", "config": cfg.synth.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d scenes to %s", cfg.synth.scenes, out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    extra = {"data_dir": args.data_dir, "epochs": args.epochs, "batch_size": args.batch_size}
    if args.targets:
        extra["targets"] = args.targets
    if args.class_ids:
        extra["class_ids"] = [int(i) for i in args.class_ids.split(",")]
    cfg = _resolve(args, **extra)
    if cfg.data_dir is None or cfg.out is None:
        raise ConfigError("train needs a data directory and --out")
    data = DataDir(cfg.data_dir)
    anns = data.annotations()
    class_map = _class_map(cfg, anns)
    plan, samples = prepare_samples(anns, data.load_cube, cfg.targets, class_map, cfg.box_filter, cfg.seed)
    wl = data.load_cube(next(iter(data.stems))).wavelengths_nm
    cfg.out.mkdir(parents=True, exist_ok=True)
    plan.save(cfg.out / "split_plan.json")
    class_ids = sorted(class_map, key=class_map.get)
    metadata = {
        "box_filter": cfg.box_filter,
        "class_ids": class_ids,
        "data_dir": str(cfg.data_dir),
        "split_plan": "split_plan.json",
    }

    def report(rec):
        log.info("epoch %d lr %.3g loss %.4f val_oa %.4f", rec.epoch, rec.lr, rec.train_loss, rec.val_oa)

    result = run_experiment(
        samples, wl, cfg.mode, cfg.train, len(class_ids), metadata, cfg.pca_components, cfg.rgb_gain, report
    )
    result.training.final.save(cfg.out / "model_final")
    result.training.best.save(cfg.out / "model_best")
    write_log_csv(result.training.log, cfg.out / "train_log.csv")
    if result.report is not None:
        log.info("test OA (final model): %.4f", result.report.overall_accuracy)
    return EXIT_OK


def _check_mode(args: argparse.Namespace, ckpt: Checkpoint) -> None:
    if getattr(args, "mode", None) is None:
        return
    want = Mode.parse(args.mode)
    have = ckpt.transform.mode if ckpt.transform is not None else Mode.HS
    if want is not have:
        raise ConfigError(f"checkpoint was trained with mode {have.value!r}, but --mode {want.value!r} was given")


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_mode(args, ckpt)
    ckpt_dir = Path(args.checkpoint).parent
    plan_path = Path(args.plan) if args.plan else ckpt_dir / ckpt.metadata.get("split_plan", "split_plan.json")
    data_dir = args.data_dir or ckpt.metadata.get("data_dir")
    if not data_dir:
        raise ConfigError("evaluate needs --data-dir (not recorded in checkpoint)")
    plan = SplitPlan.load(plan_path)
    data = DataDir(data_dir)
    k = ckpt.metadata.get("box_filter")

    def load(cube_id: str) -> HsCube:
        cube = data.load_cube(cube_id)
        return box_filter(cube, k) if k and k > 1 else cube

    samples = collect_samples(plan, load, [args.split])[args.split]
    report = evaluate_checkpoint(ckpt, samples)
    out = Path(args.out) if args.out else ckpt_dir
    out.mkdir(parents=True, exist_ok=True)
    mode = ckpt.transform.mode.value.upper() if ckpt.transform is not None else "HS"
    ids = ckpt.metadata.get("class_ids")
    table = report.format_table(mode, [str(i) for i in ids] if ids else None)
    stem = f"report_{args.split}"
    (out / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
    (out / f"{stem}.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    _check_mode(args, ckpt)
    cube = read_cube(args.cube)
    k = ckpt.metadata.get("box_filter")
    if getattr(args, "box_filter", None) is not None:
        k = _parse_box_filter(args.box_filter)
    if k and k > 1:
        cube = box_filter(cube, k)
    labels, conf = predict_pixels(ckpt.model, cube, ckpt.transform)
    mask = None
    if args.annotations:
        ann = read_annotations(args.annotations, (cube.height, cube.width))
        mask = ann.id_mask > 0
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_png(render_label_map(labels, mask=mask), out / f"{cube.cube_id}.labels.png")
    np.save(out / f"{cube.cube_id}.labels.npy", labels)
    np.save(out / f"{cube.cube_id}.confidence.npy", conf)
    return EXIT_OK


def _parse_time(text: str) -> datetime:
    try:
        t = datetime.fromisoformat(text[:-1] + "+00:00" if text.endswith("Z") else text)
    except ValueError:
        raise ConfigError(f"cannot parse time {text!r}; use ISO-8601") from None
    return t if t.tzinfo else t.replace(tzinfo=timezone.utc)


def cmd_spectra(args: argparse.Namespace) -> int:
    if not args.interval:
        raise ConfigError("spectra needs at least one --interval START END")
    intervals = [(_parse_time(a), _parse_time(b)) for a, b in args.interval]
    q = None if str(args.white_quantile).lower() == "off" else float(args.white_quantile)
    data = DataDir(args.data_dir)
    anns = {a.cube_id: a for a in data.annotations()}
    ids = [int(i) for i in args.ids.split(",")] if args.ids else None
    items = ((data.load_cube(cid), anns[cid]) for cid in data.stems)
    summary = interval_mean_spectra(items, intervals, q, ids)
    out = Path(args.out) if args.out else Path("spectra.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "spectra.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out)
    log.info("wrote %d rows to %s", len(summary.rows), out)
    return EXIT_OK


def cmd_bands(args: argparse.Namespace) -> int:
    cube = read_cube(args.cube)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    bands = [extract_band(cube, i) for i in args.indices]
    for band in bands:
        name = f"{cube.cube_id}_band{band.band_index:03d}_{band.wavelength_nm:g}nm.png"
        save_png(render_band_image(band, args.colormap), out / name)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--mode", choices=[m.value for m in Mode], type=str.lower, help="input representation")
    common.add_argument("--box-filter", dest="box_filter", help="odd kernel size or 'off'")
    common.add_argument("--out", help="output directory (or file for spectra)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hsident", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic labelled dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--scenes", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--regions", type=int, help="labelled individuals per scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="split, filter, transform and train")
    p.add_argument("data_dir", nargs="?")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--targets", help="per-class pixels per split, e.g. train=50000,val=5000,test=5000")
    p.add_argument("--class-ids", dest="class_ids", help="comma-separated individual IDs to classify")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--plan", help="split plan JSON (default: next to the checkpoint)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="per-pixel label map for one cube")
    p.add_argument("checkpoint")
    p.add_argument("cube")
    p.add_argument("--annotations", help="annotation stem; pixels outside its mask render gray")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("spectra", parents=[common], help="interval-averaged spectra per individual")
    p.add_argument("data_dir")
    p.add_argument("--interval", nargs=2, action="append", metavar=("START", "END"))
    p.add_argument("--white-quantile", dest="white_quantile", default="0.6")
    p.add_argument("--ids", help="comma-separated individual IDs (default: all)")
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("bands", parents=[common], help="render band images as PNG")
    p.add_argument("cube")
    p.add_argument("--indices", type=int, nargs="+", required=True)
    p.add_argument("--colormap", default="viridis")
    p.set_defaults(func=cmd_bands)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HsidentError as exc:
        print(f"hsident {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hsident {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
