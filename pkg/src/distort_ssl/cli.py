"""Command-line entry point: ``distort-ssl <subcommand> ...``.

Settings are merged from built-in defaults, an optional JSON ``--config``
file, the environment and flags (later wins). Each resolved key remembers
where its value came from; runs write ``resolved_config.json`` next to their
outputs.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .core_types import ValidationError
from .dataset import atomic_write_bytes, atomic_write_json, atomic_write_text, read_manifest

log = logging.getLogger("distort_ssl")

CACHE_ENV = "DISTORT_SSL_CACHE"
TOP_KEYS = ("seed", "image_size", "workers", "deterministic", "cache_dir")
SECTIONS = ("phantom", "distortion", "net", "pretrain", "finetune", "grid")
# Train fields that come from the top level or from flags, not from the sections.
TRAIN_RESERVED = ("phase", "seed", "data", "out", "net", "distortion", "workers", "deterministic")


class UsageError(Exception):
    pass


# Config.

def _train_defaults(phase: str) -> dict[str, Any]:
    from .trainer import TrainConfig

    base = TrainConfig(phase=phase)
    d = {k: v for k, v in base.to_dict().items() if k not in TRAIN_RESERVED}
    if phase == "downstream":
        d.update(steps=300, batch_size=5)
    return d


def default_config(image_size: int = 320) -> dict[str, Any]:
    from .distortions import DistortionConfig
    from .phantom import PhantomParams
    from .trainer import ExperimentGrid, desk_config

    return {
        "seed": 0,
        "image_size": image_size,
        "workers": 1,
        "deterministic": False,
        "cache_dir": None,
        "phantom": replace(PhantomParams(), image_size=image_size).to_dict(),
        "distortion": DistortionConfig().scaled(image_size).to_dict(),
        "net": desk_config(image_size).net.to_dict(),
        "pretrain": _train_defaults("pretext"),
        "finetune": _train_defaults("downstream"),
        "grid": ExperimentGrid().to_dict(),
    }


@dataclass
class CliConfig:
    values: dict[str, Any]
    provenance: dict[str, str] = field(default_factory=dict)

    def get(self, key: str) -> Any:
        return self.values[key]

    def to_dict(self) -> dict[str, Any]:
        return {"values": self.values, "provenance": self.provenance}

    # Typed views.

    def phantom(self):
        from .phantom import PhantomParams

        return PhantomParams.from_dict(self.values["phantom"])

    def distortion(self):
        from .distortions import DistortionConfig

        return DistortionConfig.from_dict(self.values["distortion"])

    def net(self):
        from .model.net import NetConfig

        return NetConfig.from_dict(self.values["net"])

    def train(self, phase: str, data: str = "", out: str = ""):
        from .trainer import TrainConfig

        section = self.values["pretrain" if phase == "pretext" else "finetune"]
        return TrainConfig.from_dict(
            {
                **section,
                "phase": phase,
                "seed": self.values["seed"],
                "data": data,
                "out": out,
                "workers": self.values["workers"],
                "deterministic": self.values["deterministic"],
                "net": self.values["net"],
                "distortion": self.values["distortion"],
            }
        )

    def grid(self):
        from .trainer import ExperimentGrid

        return ExperimentGrid.from_dict(self.values["grid"])


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k in SECTIONS and not prefix:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(values: dict[str, Any], key: str, value: Any, source: str, provenance: dict[str, str]) -> None:
    if "." in key:
        section, sub = key.split(".", 1)
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section {section!r} in {source}")
        if sub not in values[section]:
            raise ValidationError(f"unknown config key {key!r} in {source}")
        values[section][sub] = value
    else:
        if key not in TOP_KEYS:
            raise ValidationError(f"unknown config key {key!r} in {source}")
        values[key] = value
    provenance[key] = source


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return raw


def resolve_config(
    config_path: str | None = None,
    flags: dict[str, Any] | None = None,
    env: dict[str, str] | None = None,
) -> CliConfig:
    """Defaults < config file < environment < flags; unknown keys raise ``ValidationError``."""
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    env = dict(os.environ if env is None else env)
    raw = read_config_file(config_path) if config_path else {}
    for k, v in raw.items():
        if k not in TOP_KEYS and k not in SECTIONS:
            raise ValidationError(f"unknown config key {k!r} in {config_path}")
        if k in SECTIONS and not isinstance(v, dict):
            raise ValidationError(f"config section {k!r} must be an object")
    size = flags.get("image_size", raw.get("image_size", 320))
    values = default_config(int(size))
    provenance = {k: "default" for k in _flatten(values)}
    for k, v in _flatten(raw).items():
        _set(values, k, v, f"file:{config_path}", provenance)
    if env.get(CACHE_ENV):
        _set(values, "cache_dir", env[CACHE_ENV], f"env:{CACHE_ENV}", provenance)
    for k, v in flags.items():
        _set(values, k, v, f"flag:--{k.split('.')[-1].replace('_', '-')}", provenance)
    if values["deterministic"]:
        values["workers"] = 1
    return CliConfig(values, provenance)


def config_violations(cfg: CliConfig) -> list[str]:
    """Every invariant violation of a resolved config, without side effects."""
    out: list[str] = []

    def collect(name: str, build) -> Any:
        try:
            return build()
        except (ValidationError, TypeError, ValueError) as exc:
            out.append(f"{name}: {exc}")
            return None

    size = cfg.get("image_size")
    if not isinstance(size, int) or size < 1:
        out.append(f"image_size: must be a positive integer, got {size!r}")
    if not isinstance(cfg.get("workers"), int) or cfg.get("workers") < 1:
        out.append("workers: must be >= 1")
    ph = collect("phantom", cfg.phantom)
    if ph is not None:
        out += [f"phantom.{v}" for v in ph.violations()]
        if ph.image_size != size:
            out.append(f"phantom.image_size: {ph.image_size} differs from image_size {size}")
    dist = collect("distortion", cfg.distortion)
    if dist is not None:
        out += [f"distortion.{v}" for v in dist.violations((size, size))]
    net = collect("net", cfg.net)
    if net is not None and net.input_size != size:
        out.append(f"net.input_size: {net.input_size} differs from image_size {size}")
    for phase, section in (("pretext", "pretrain"), ("downstream", "finetune")):
        tc = collect(section, lambda: cfg.train(phase))
        if tc is not None:
            out += [f"{section}.{v}" if not v.startswith(("net.", "distortion.")) else v for v in tc.violations()]
        init = cfg.values[section].get("init", "random")
        if init != "random" and not Path(str(init)).with_suffix(".json").exists():
            out.append(f"{section}.init: checkpoint {init} does not exist")
    grid = collect("grid", cfg.grid)
    if grid is not None:
        out += [f"grid.{v}" for v in grid.violations()]
    return sorted(set(out), key=out.index)


# Helpers.

def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _write_resolved(out: Path, cfg: CliConfig, command: str) -> None:
    atomic_write_json(out / "resolved_config.json", {"command": command, **cfg.to_dict()})


def _require_dataset(path: str, name: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ValidationError(f"{name}: {p} has no manifest.json")
    read_manifest(p)
    return p


def _default_distort_out(cfg: CliConfig, src: Path, seed: int) -> Path:
    root = Path(cfg.get("cache_dir")) if cfg.get("cache_dir") else src.resolve().parent
    return root / f"{src.resolve().name}-distorted-s{seed}"


# Subcommands.

def cmd_gen_phantoms(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    from .phantom import generate_corpus

    ratios = tuple(float(x) for x in args.split.split(","))
    if abs(sum(ratios) - 1) > 1e-9 or any(r < 0 for r in ratios):
        raise ValidationError(f"--split ratios must be non-negative and sum to 1, got {args.split}")
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    params = cfg.phantom()
    manifest = generate_corpus(cfg.get("seed"), params, args.n, args.out, ratios, force=args.force, workers=cfg.get("workers"))
    _write_resolved(Path(args.out), cfg, "gen-phantoms")
    return {"out": args.out, "n": len(manifest["ids"]), "splits": {k: len(v) for k, v in manifest["splits"].items()}}


def cmd_distort(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    from .distortions import distort_dataset

    src = _require_dataset(args.input, "--in")
    out = Path(args.out) if args.out else _default_distort_out(cfg, src, cfg.get("seed"))
    manifest = distort_dataset(src, out, cfg.distortion(), cfg.get("seed"), force=args.force, preview=args.preview or 0)
    _write_resolved(out, cfg, "distort")
    return {"out": str(out), "n": len(manifest["ids"]), "previews": min(args.preview or 0, len(manifest["ids"]))}


def cmd_pretrain(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    from .model.checkpoint import save_checkpoint
    from .trainer import pretrain

    _require_dataset(args.data, "--data")
    tc = cfg.train("pretext", data=args.data, out=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, cfg, "pretrain")
    ckpt = pretrain(tc)
    path = save_checkpoint(ckpt, out / "checkpoint")
    return {"checkpoint": str(path), "step": ckpt.header["step"], "config_hash": ckpt.header["config_hash"]}


def cmd_finetune(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    from .model.checkpoint import save_checkpoint
    from .trainer import evaluate, finetune

    _require_dataset(args.data, "--data")
    tc = cfg.train("downstream", data=args.data, out=args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, cfg, "finetune")
    ckpt = finetune(tc, tc.init)
    path = save_checkpoint(ckpt, out / "checkpoint")
    result: dict[str, Any] = {"checkpoint": str(path), "step": ckpt.header["step"]}
    if args.eval_split:
        report = evaluate(ckpt, args.data, "seg", args.eval_split, out=out)
        result["dice"] = report["aggregate"]["dice"]
    return result


def _cmd_eval(args: argparse.Namespace, cfg: CliConfig, kind: str) -> dict[str, Any]:
    from .trainer import evaluate

    _require_dataset(args.data, "--data")
    out = Path(args.out)
    override = None
    if args.config and kind == "ssl":
        override = cfg.train("pretext", data=args.data)
    report = evaluate(args.checkpoint, args.data, kind, args.split, out=out, config=override, limit=args.limit, dump=getattr(args, "dump", 0))
    _write_resolved(out, cfg, f"eval-{kind}")
    if kind == "ssl":
        return {"out": str(out / "ssl_eval.json"), "mean": report["mean"], "roi_type_accuracy": report["roi_type_accuracy"]}
    return {"out": str(out / "seg_eval.json"), "aggregate": report["aggregate"]}


def cmd_run_grid(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    from .trainer import run_grid

    _require_dataset(args.data, "--data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, cfg, "run-grid")
    pre = cfg.train("pretext", data=args.data)
    ft = cfg.train("downstream", data=args.data)
    report = run_grid(cfg.grid(), pre, ft, out, test_split=args.split)
    failed = [f"{c['arm']}/{c['label_size']}" for c in report["cells"] if c["status"] != "ok"]
    return {"out": str(out / "grid_report.json"), "cells": len(report["cells"]), "failed_cells": failed}


def cmd_validate(args: argparse.Namespace, cfg: CliConfig | None) -> dict[str, Any]:
    read_config_file(args.path)
    try:
        resolved = resolve_config(args.path, env={})
    except (ValidationError, TypeError) as exc:
        return {"path": args.path, "violations": [str(exc)]}
    return {"path": args.path, "violations": config_violations(resolved)}


def _png_bytes(img) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def render_report(path: str | os.PathLike, out: str | os.PathLike | None = None) -> list[str]:
    """Render an ``ssl_eval``/``seg_eval``/``grid_report`` JSON into CSV tables and PNG figures."""
    from . import render
    from .core_types import BBox
    from .dataset import read_png16

    path = Path(path)
    try:
        report = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read report {path}: {exc}") from exc
    out = Path(out) if out else path.parent
    written: list[Path] = []

    def text(name: str, body: str) -> None:
        atomic_write_text(out / name, body)
        written.append(out / name)

    if report.get("kind") == "ssl":
        text("table2.csv", render.table2_csv(report, label=report.get("split", "test")))
        text("ssl_rows.csv", render.ssl_rows_csv(report))
        dump = path.parent / "dump"
        for meta in sorted(dump.glob("*.json")) if dump.is_dir() else []:
            d = json.loads(meta.read_text())
            sid = d["sample_id"]
            imgs = {t: read_png16(dump / f"{sid}_{t}.png") for t in ("original", "distorted", "recovered")}
            gt = [(BBox(*g["box"]), g["class_id"]) for g in d["ground_truth"]]
            pred = [(BBox(*p["box"]), p["class_id"]) for p in d["detections"]]
            panel = render.fig2_from_boxes(imgs["original"], imgs["distorted"], gt, pred, imgs["recovered"])
            atomic_write_bytes(out / f"fig2_{sid}.png", _png_bytes(panel))
            written.append(out / f"fig2_{sid}.png")
    elif report.get("kind") == "seg":
        text("seg.csv", render.seg_csv(report))
    elif "cells" in report and "arms" in report:
        text("table3.csv", render.table3_csv(report))
        atomic_write_bytes(out / "table3_dice.png", _png_bytes(render.table3_figure(report, "dice")))
        written.append(out / "table3_dice.png")
    else:
        raise ValidationError(f"{path}: not an ssl_eval, seg_eval or grid_report file")
    return [str(p) for p in written]


def cmd_report(args: argparse.Namespace, cfg: CliConfig) -> dict[str, Any]:
    return {"written": render_report(args.input, args.out)}


# Parser.

class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required)
    p.add_argument("--workers", type=int)
    p.add_argument("--deterministic", action="store_true", default=None, help="single-threaded, bit-reproducible")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=JSON", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distort-ssl", description="Distortion-based self-supervised pretraining on synthetic phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-phantoms", help="generate a phantom corpus")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test ratios")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("distort", help="write a distorted (pretext) dataset")
    _common(p, out_required=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--preview", type=int, nargs="?", const=4, default=0, help="write N preview PNGs (default 4)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, dest="pretrain.steps")

    p = sub.add_parser("finetune", help="fine-tune for segmentation")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", dest="finetune.init", help="checkpoint path or 'random'")
    p.add_argument("--steps", type=int, dest="finetune.steps")
    p.add_argument("--label-size", type=int, dest="finetune.train_size")
    p.add_argument("--no-freeze", action="store_false", default=None, dest="finetune.freeze_backbone")
    p.add_argument("--eval-split", default=None, help="also evaluate on this split")

    for name, kind in (("eval-ssl", "ssl"), ("eval-seg", "seg")):
        p = sub.add_parser(name, help=f"{kind} evaluation of a checkpoint")
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--limit", type=int)
        if kind == "ssl":
            p.add_argument("--dump", type=int, default=4, help="write an inference dump for the first N images")
        p.set_defaults(kind=kind)

    p = sub.add_parser("run-grid", help="pretrain-size x label-size x seed experiment grid")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("validate", help="list config violations")
    p.add_argument("path")

    p = sub.add_parser("report", help="render JSON reports to CSV/PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    return parser


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "distort": cmd_distort,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval-ssl": lambda a, c: _cmd_eval(a, c, "ssl"),
    "eval-seg": lambda a, c: _cmd_eval(a, c, "seg"),
    "run-grid": cmd_run_grid,
    "validate": cmd_validate,
    "report": cmd_report,
}


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    flags: dict[str, Any] = {}
    for key in ("seed", "workers", "deterministic", "image_size"):
        if getattr(args, key, None) is not None:
            flags[key] = getattr(args, key)
    for key, v in vars(args).items():
        if "." in key and v is not None:
            flags[key] = v
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects SECTION.KEY=JSON, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            flags[key] = json.loads(raw)
        except json.JSONDecodeError:
            flags[key] = raw
    return flags


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write("distort-ssl: error: a subcommand is required\n")
        return 1
    try:
        cfg = None
        if args.command not in ("validate", "report"):
            cfg = resolve_config(getattr(args, "config", None), _flag_overrides(args))
            problems = config_violations(cfg)
            if problems:
                raise ValidationError("; ".join(problems))
            log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
        result = COMMANDS[args.command](args, cfg)
    except (ValidationError, FileExistsError) as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 2
    _emit(result)
    if args.command == "validate" and result["violations"]:
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
