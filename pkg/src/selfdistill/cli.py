"""Command line entry point: ``selfdistill {train,eval,sweep,report}``.

Run configs are INI files::

    [dataset]
    name = synthetic-gaussian-10

    [model]
    name = tiny-resnet-3block
    tap = 2

    [method]
    name = combined
    alpha = 0.2
    beta = 1.0

    [schedule]
    epochs = 30
    milestones = 15, 25

    [run]
    seed = 0
    output_dir = runs

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime as _dt
import hashlib
import itertools
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .analysis import MetricsLog, top1_accuracy, collect_logits
from .data import DatasetMissingError, load_dataset
from .models import MODEL_REGISTRY
from .training import CHECKPOINT_FILE, Trainer, TrainingConfig, TrainingDiverged, build_model, load_checkpoint

log = logging.getLogger("selfdistill")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# section -> {ini key: (target, field name)}; target is "train", "data" or "run"
_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "dataset": {
        "name": ("data", "dataset"),
        "root": ("data", "data_root"),
        "n_train": ("data", "n_train"),
        "n_test": ("data", "n_test"),
        "image_size": ("data", "image_size"),
        "noise": ("data", "noise"),
        "data_seed": ("data", "seed"),
    },
    "model": {
        "name": ("train", "model"),
        "tap": ("train", "tap"),
        "ac_channels": ("train", "ac_channels"),
    },
    "method": {
        "name": ("train", "method"),
        "alpha": ("train", "alpha"),
        "beta": ("train", "beta"),
        "tau_drg": ("train", "tau_drg"),
        "tau_dsr": ("train", "tau_dsr"),
        "teacher_detach": ("train", "teacher_detach"),
        "sr_first_step": ("train", "sr_first_step"),
    },
    "schedule": {
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "lr": ("train", "lr"),
        "milestones": ("train", "milestones"),
        "lr_decay": ("train", "lr_decay"),
        "momentum": ("train", "momentum"),
        "weight_decay": ("train", "weight_decay"),
    },
    "run": {
        "seed": ("train", "seed"),
        "output_dir": ("run", "output_dir"),
        "deterministic": ("train", "deterministic"),
        "variance_space": ("train", "variance_space"),
        "augment": ("train", "augment"),
        "padding": ("train", "padding"),
        "flip_probability": ("train", "flip_probability"),
    },
}

# flat key used by --axis -> (section, ini key); the "name" keys take their section's name
AXIS_KEYS: dict[str, tuple[str, str]] = {}
for _section, _keys in _SCHEMA.items():
    for _key in _keys:
        AXIS_KEYS[_section if _key == "name" else _key] = (_section, _key)

_DATA_INT = {"n_train", "n_test", "image_size", "seed"}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    training: TrainingConfig
    dataset: str = "synthetic-gaussian-10"
    dataset_options: dict = field(default_factory=dict)
    data_root: str | None = None
    output_dir: str = "runs"

    def resolved(self) -> dict[str, dict[str, str]]:
        """Every known key with its effective value, grouped by section."""
        t = self.training
        out: dict[str, dict[str, str]] = {}
        for section, keys in _SCHEMA.items():
            out[section] = {}
            for key, (target, name) in keys.items():
                if target == "train":
                    value = getattr(t, name)
                elif target == "run":
                    value = getattr(self, name)
                elif name == "dataset":
                    value = self.dataset
                elif name == "data_root":
                    value = self.data_root
                else:
                    value = self.dataset_options.get(name)
                if value is None:
                    continue
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, (tuple, list)):
                    value = ", ".join(str(v) for v in value)
                out[section][key] = str(value)
        return out

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, values in self.resolved().items():
            parser[section] = values
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def run_id(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return "run-" + hashlib.sha256(blob).hexdigest()[:12]

    def load_data(self):
        return load_dataset(self.dataset, self.data_root, **self.dataset_options)


def _locate(text: str, section: str, key: str) -> int | None:
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return lineno
    return None


def _convert(kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "ints":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


_KIND_BY_TYPE = {"bool": bool, "int": int, "float": float, "str": str}
_TRAIN_KINDS = {
    f.name: "ints" if f.name == "milestones" else _KIND_BY_TYPE[str(f.type)] for f in fields(TrainingConfig)
}
_TRAIN_KEYS = {name: (section, key) for section, keys in _SCHEMA.items() for key, (t, name) in keys.items() if t == "train"}


def parse_config_text(text: str, path: str | os.PathLike = "<config>") -> RunConfig:
    """Parse and validate a run config; errors carry the offending line."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", path, line) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], path, getattr(exc, "lineno", None)) from None

    train_kwargs: dict = {}
    run = RunConfig(TrainingConfig())
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown section [{section}]; known: {', '.join(_SCHEMA)}", path, _section_line(text, section)
            )
        for key, raw in parser[section].items():
            line = _locate(text, section, key)
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; known: {', '.join(_SCHEMA[section])}", path, line
                )
            target, name = _SCHEMA[section][key]
            try:
                if target == "train":
                    train_kwargs[name] = _convert(_TRAIN_KINDS[name], raw)
                elif target == "run":
                    setattr(run, name, raw.strip())
                elif name == "dataset":
                    run.dataset = raw.strip()
                elif name == "data_root":
                    run.data_root = raw.strip()
                else:
                    kind = int if name in _DATA_INT else float
                    run.dataset_options[name] = _convert(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}", path, line) from None

    if run.dataset_options and not run.dataset.startswith("synthetic-"):
        raise ConfigError(f"dataset options {sorted(run.dataset_options)} only apply to synthetic datasets", path)
    if "model" in train_kwargs and train_kwargs["model"] not in MODEL_REGISTRY:
        raise ConfigError(
            f"unknown model {train_kwargs['model']!r}; available: {', '.join(sorted(MODEL_REGISTRY))}",
            path,
            _locate(text, "model", "name"),
        )
    training = TrainingConfig(**train_kwargs)
    try:
        training.validate()
    except ValueError as exc:
        name = str(exc).split(" ", 1)[0]
        line = _locate(text, *_TRAIN_KEYS[name]) if name in _TRAIN_KEYS else None
        raise ConfigError(str(exc), path, line) from None
    run.training = training
    return run


def _section_line(text: str, section: str) -> int | None:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip() == f"[{section}]":
            return lineno
    return None


def parse_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config_text(text, path)


# ---------------------------------------------------------------------------
# manifest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# commands


def run_training(cfg: RunConfig, out_root: Path, force: bool = False) -> tuple[int, Path]:
    """Train one configuration under ``out_root/<run-id>``; returns (exit code, run dir)."""
    run_dir = out_root / cfg.run_id()
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists() and not force:
        status = json.loads(manifest_path.read_text()).get("status")
        if status == "completed":
            log.warning("%s already completed with identical config; skipping (use --force to rerun)", run_dir)
            return EXIT_OK, run_dir
    data = cfg.load_data()
    try:
        model = build_model(cfg.training, data.num_classes, data.train.image_shape[0])
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from None
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    manifest = {
        "run_id": run_dir.name,
        "config_hash": cfg.training.hash(),
        "code_version": __version__,
        "dataset": data.stats(),
        "seeds": {"torch_init": cfg.training.seed, "shuffle": cfg.training.seed, "augment": cfg.training.seed},
        "start": _now(),
        "end": None,
        "status": "running",
        "artifacts": {
            "config": "config.ini",
            "metrics": "metrics.csv",
            "checkpoint": CHECKPOINT_FILE,
            "checkpoint_manifest": "checkpoint.txt",
        },
    }
    _write_json_atomic(manifest_path, manifest)
    trainer = Trainer(model, data, cfg.training, out_dir=run_dir)
    try:
        trainer.fit()
    except TrainingDiverged as exc:
        manifest.update(status="diverged", end=_now(), error=str(exc))
        _write_json_atomic(manifest_path, manifest)
        trainer.metrics.to_csv(run_dir / "metrics.csv")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED, run_dir
    manifest.update(
        status="completed",
        end=_now(),
        seconds_per_iteration=trainer.step_seconds / max(trainer.timed_steps, 1),
    )
    _write_json_atomic(manifest_path, manifest)
    return EXIT_OK, run_dir


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.training = replace(cfg.training, seed=args.seed)
    out_root = Path(args.out or cfg.output_dir)
    code, run_dir = run_training(cfg, out_root, force=args.force)
    if code == EXIT_OK:
        final = MetricsLog.from_csv(run_dir / "metrics.csv").split("test")
        acc = f"{final[-1]['top1_accuracy']:.4f}" if final else "n/a"
        print(f"{run_dir}  test top-1 {acc}")
    return code


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return EXIT_IO
    config_path = Path(args.config) if args.config else ckpt.parent / "config.ini"
    cfg = parse_config(config_path)
    model, _, manifest = load_checkpoint(ckpt)
    data = cfg.load_data()
    k = model.num_classes
    if k != data.num_classes:
        raise ConfigError(f"checkpoint has {k} classes but dataset {cfg.dataset!r} has {data.num_classes}", config_path)
    dataset = data.test if args.split == "test" else data.train
    logits, labels = collect_logits(model, dataset)
    acc = top1_accuracy(logits, labels)
    print(f"top-1 accuracy ({args.split}): {acc:.6f}")
    metrics_path = ckpt.parent / "metrics.csv"
    metrics = MetricsLog.from_csv(metrics_path) if metrics_path.exists() else MetricsLog()
    metrics.append(epoch=int(manifest.get("epoch", 0)), split=f"eval-{args.split}", top1_accuracy=acc)
    metrics.to_csv(metrics_path)
    return EXIT_OK


def parse_axis(spec: str) -> tuple[str, list[str]]:
    key, sep, values = spec.partition("=")
    key = key.strip()
    if not sep:
        raise ConfigError(f"axis {spec!r} must look like key=v1,v2")
    if key not in AXIS_KEYS:
        raise ConfigError(f"unknown axis key {key!r}; known: {', '.join(sorted(AXIS_KEYS))}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"axis {key!r} has no values")
    return key, items


def _with_overrides(base_text: str, overrides: dict[str, str], path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.read_string(base_text)
    for key, value in overrides.items():
        section, ini_key = AXIS_KEYS[key]
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][ini_key] = value
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
    return parse_config_text("\n".join(lines) + "\n", path)


def cmd_sweep(args) -> int:
    base_path = Path(args.config)
    base_text = base_path.read_text()
    base = parse_config_text(base_text, base_path)
    axes = [parse_axis(a) for a in args.axis]
    if not axes:
        raise ConfigError("sweep needs at least one --axis key=v1,v2")
    out_root = Path(args.out or base.output_dir)
    sweep_dir = out_root / ("sweep-" + hashlib.sha256(json.dumps([base_text, axes]).encode()).hexdigest()[:10])
    sweep_dir.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    rows = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        overrides = dict(zip(keys, combo))
        row = {**overrides, "run_dir": "", "status": "", "final_test_accuracy": "", "best_test_accuracy": ""}
        try:
            cfg = _with_overrides(base_text, overrides, base_path)
            code, run_dir = run_training(cfg, out_root, force=args.force)
            row["run_dir"] = str(run_dir)
            row["status"] = {EXIT_OK: "completed", EXIT_DIVERGED: "diverged"}.get(code, f"exit {code}")
            test = MetricsLog.from_csv(run_dir / "metrics.csv").split("test")
            if test:
                row["final_test_accuracy"] = repr(test[-1]["top1_accuracy"])
                row["best_test_accuracy"] = repr(max(r["top1_accuracy"] for r in test))
        except (ConfigError, ValueError, KeyError, OSError) as exc:
            row["status"] = f"failed: {exc}"
            log.warning("grid point %s failed: %s", overrides, exc)
        rows.append(row)
        print(f"{overrides} -> {row['status']} {row['final_test_accuracy']}")
    columns = keys + ["run_dir", "status", "final_test_accuracy", "best_test_accuracy"]
    with open(sweep_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    done = [r for r in rows if r["final_test_accuracy"] != ""]
    if done:
        best = max(done, key=lambda r: float(r["final_test_accuracy"]))
        desc = ", ".join(f"{k}={best[k]}" for k in keys)
        (sweep_dir / "best.txt").write_text(f"best: {desc} final_test_accuracy={best['final_test_accuracy']}\n")
    print(f"summary: {sweep_dir / 'summary.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report([Path(p) for p in args.runs], out)
    print(report.markdown)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output root (overrides [run] output_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="rerun even if an identical run completed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--config", help="run config (default: config.ini next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid of runs over config axes")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2,...")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="comparison table and plots from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetMissingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
