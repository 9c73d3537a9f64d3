"""Comparison tables and plots built purely from run directories."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import MetricsLog, UndefinedCorrelationError, pearson

METHOD_LABELS = {"vanilla": "Vanilla", "drg": "DRG", "dsr": "DSR", "combined": "DRG+DSR"}


@dataclass
class RunRecord:
    path: Path
    method: str
    model: str
    dataset: str
    seed: int
    metrics: MetricsLog
    status: str
    model_bytes: int | None = None
    seconds_per_iteration: float | None = None

    @property
    def complete(self) -> bool:
        return self.status == "completed"

    @property
    def final_accuracy(self) -> float | None:
        test = self.metrics.split("test")
        return test[-1]["top1_accuracy"] if test else None


@dataclass
class Report:
    markdown: str
    table: list[dict]
    incomplete: list[str] = field(default_factory=list)


def load_run(path: Path) -> RunRecord:
    from .cli import parse_config

    cfg = parse_config(path / "config.ini")
    metrics_path = path / "metrics.csv"
    metrics = MetricsLog.from_csv(metrics_path) if metrics_path.exists() else MetricsLog()
    status = "missing manifest"
    seconds = None
    manifest = path / "manifest.json"
    if manifest.exists():
        info = json.loads(manifest.read_text())
        status = info.get("status", "unknown")
        seconds = info.get("seconds_per_iteration")
    model_bytes = None
    ckpt = path / "checkpoint.pt"
    if ckpt.exists():
        import torch

        state = torch.load(ckpt, weights_only=False)
        buf = io.BytesIO()
        torch.save(state["model"], buf)
        model_bytes = buf.tell()
    t = cfg.training
    return RunRecord(path, t.method, t.model, cfg.dataset, t.seed, metrics, status, model_bytes, seconds)


def _fmt_acc(value: float) -> str:
    return f"{100 * value:.2f}%"


def comparison_table(runs: list[RunRecord]) -> tuple[list[dict], list[str]]:
    """One row per method; one column per (model, dataset) with seed-mean accuracy.

    Non-vanilla cells get a ``(+x.xx%)`` delta when a vanilla group with the
    same model, dataset and seed set exists.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for r in runs:
        if r.complete and r.final_accuracy is not None:
            groups.setdefault((r.method, r.model, r.dataset), []).append(r)
    columns = sorted({(m, d) for (_, m, d) in groups})
    rows = []
    for method, label in METHOD_LABELS.items():
        row = {"method": label}
        present = False
        for model, dataset in columns:
            col = f"{model} / {dataset}"
            members = groups.get((method, model, dataset))
            if not members:
                row[col] = ""
                continue
            present = True
            mean = float(np.mean([r.final_accuracy for r in members]))
            cell = _fmt_acc(mean)
            base = groups.get(("vanilla", model, dataset))
            if method != "vanilla" and base and {r.seed for r in base} == {r.seed for r in members}:
                delta = mean - float(np.mean([r.final_accuracy for r in base]))
                cell += f" ({100 * delta:+.2f}%)"
            row[col] = cell
        if present:
            rows.append(row)
    return rows, [f"{m} / {d}" for m, d in columns]


def _markdown(rows: list[dict], columns: list[str]) -> str:
    head = "| Methods | " + " | ".join(columns) + " |"
    sep = "|---|" + "---|" * len(columns)
    body = ["| " + r["method"] + " | " + " | ".join(r[c] for c in columns) + " |" for r in rows]
    return "\n".join([head, sep, *body])


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def variance_series(runs: list[RunRecord]) -> list[list]:
    out = []
    for r in runs:
        for row in r.metrics.split("test"):
            out.append([r.path.name, METHOD_LABELS[r.method], row["epoch"], row["ranked_output_variance"], row["top1_accuracy"]])
    return out


def time_series(runs: list[RunRecord]) -> list[list]:
    out = []
    for r in runs:
        timings = [row["seconds_per_iteration"] for row in r.metrics.split("train") if row["seconds_per_iteration"] is not None]
        # deterministic runs leave timing out of the log; the manifest keeps the measured value
        sec = float(np.mean(timings)) if timings else r.seconds_per_iteration
        out.append([r.path.name, METHOD_LABELS[r.method], r.model, "" if sec is None else repr(sec), r.model_bytes or ""])
    return out


def _plot(out: Path, var_rows: list[list], time_rows: list[list]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run in sorted({r[0] for r in var_rows}):
        pts = [r for r in var_rows if r[0] == run]
        ax.plot([p[2] for p in pts], [p[3] for p in pts], marker="o", ms=3, label=f"{pts[0][1]} ({run[-6:]})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("ranked output variance (test)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "variance_vs_epoch.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for row in time_rows:
        if row[3] != "" and row[4] != "":
            ax.scatter(float(row[3]), row[4] / 1e6)
            ax.annotate(row[1], (float(row[3]), row[4] / 1e6), fontsize=7)
    ax.set_xlabel("seconds / iteration")
    ax.set_ylabel("model size (MB)")
    fig.tight_layout()
    fig.savefig(out / "time_cost.png", dpi=120)
    plt.close(fig)


def build_report(run_dirs: list[Path], out: Path) -> Report:
    """Write report.md, report.csv, the plot series CSVs and the plots into ``out``."""
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    runs = [load_run(Path(p)) for p in run_dirs]
    incomplete = [f"{r.path} ({r.status})" for r in runs if not r.complete]
    rows, columns = comparison_table(runs)
    md = ["# Top-1 test accuracy", "", _markdown(rows, columns)]

    corr_lines = []
    for r in runs:
        acc = r.metrics.series("top1_accuracy")
        var = r.metrics.series("ranked_output_variance")
        try:
            corr_lines.append(f"- {r.path.name} ({METHOD_LABELS[r.method]}): {pearson(acc, var):+.3f}")
        except (ValueError, UndefinedCorrelationError) as exc:
            corr_lines.append(f"- {r.path.name} ({METHOD_LABELS[r.method]}): undefined ({exc})")
    md += ["", "## Pearson(accuracy, ranked output variance)", "", *corr_lines]
    if incomplete:
        md += ["", "## Incomplete runs (excluded from the table)", "", *(f"- {s}" for s in incomplete)]
    markdown = "\n".join(md) + "\n"

    (out / "report.md").write_text(markdown)
    _write_csv(out / "report.csv", ["method", *columns], [[r["method"], *(r[c] for c in columns)] for r in rows])
    var_rows = variance_series(runs)
    time_rows = time_series(runs)
    _write_csv(out / "variance_vs_epoch.csv", ["run", "method", "epoch", "ranked_output_variance", "top1_accuracy"], var_rows)
    _write_csv(out / "time_cost.csv", ["run", "method", "model", "seconds_per_iteration", "model_bytes"], time_rows)
    _plot(out, var_rows, time_rows)
    return Report(markdown, rows, incomplete)
