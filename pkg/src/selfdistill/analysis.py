"""Evaluation metrics, ranked-output diagnostics and cost profiling."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

__all__ = [
    "METRIC_COLUMNS",
    "MetricsLog",
    "VarianceReport",
    "UndefinedCorrelationError",
    "top1_accuracy",
    "ranked_output_variance",
    "pearson",
    "ProfileReport",
    "profile_run",
    "export_logits",
    "read_logits",
    "collect_logits",
]

METRIC_COLUMNS = (
    "epoch",
    "split",
    "top1_accuracy",
    "mean_loss",
    "ranked_output_variance",
    "seconds_per_iteration",
    "learning_rate",
)


class UndefinedCorrelationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics log


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(column: str, text: str):
    if column == "split":
        return text
    if text == "":
        return None
    if column == "epoch":
        return int(text)
    return float(text)


class MetricsLog:
    """Append-only table with one row per ``(epoch, split)``."""

    def __init__(self, rows: Iterable[dict] = ()):
        self._rows: list[dict] = []
        for row in rows:
            self.append(**row)

    def append(
        self,
        epoch: int,
        split: str,
        top1_accuracy: float,
        mean_loss: float | None = None,
        ranked_output_variance: float | None = None,
        seconds_per_iteration: float | None = None,
        learning_rate: float | None = None,
    ) -> dict:
        row = {
            "epoch": int(epoch),
            "split": str(split),
            "top1_accuracy": float(top1_accuracy),
            "mean_loss": None if mean_loss is None else float(mean_loss),
            "ranked_output_variance": None if ranked_output_variance is None else float(ranked_output_variance),
            "seconds_per_iteration": None if seconds_per_iteration is None else float(seconds_per_iteration),
            "learning_rate": None if learning_rate is None else float(learning_rate),
        }
        for existing in self._rows:
            if (existing["epoch"], existing["split"]) == (row["epoch"], row["split"]):
                if existing == row:
                    return existing
                raise ValueError(f"metrics row for epoch {epoch}, split {split!r} already recorded")
        self._rows.append(row)
        return row

    @property
    def rows(self) -> list[dict]:
        return [dict(r) for r in self._rows]

    def __len__(self) -> int:
        return len(self._rows)

    def split(self, name: str) -> list[dict]:
        return [dict(r) for r in self._rows if r["split"] == name]

    def series(self, column: str, split: str = "test") -> np.ndarray:
        return np.array([r[column] for r in self.split(split)], dtype=float)

    def to_csv(self, path: str | os.PathLike | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self._rows:
            writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            path = Path(path)
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_text(text)
            os.replace(tmp, path)
        return text

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "MetricsLog":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            return cls({c: _parse(c, r[c]) for c in METRIC_COLUMNS} for r in reader)


# ---------------------------------------------------------------------------
# metrics


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    logits = _as_numpy(logits)
    labels = _as_numpy(labels)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need a non-empty (N, K) logit batch")
    if labels.shape != (len(logits),):
        raise ValueError(f"labels of shape {labels.shape} do not match {len(logits)} rows")
    # np.argmax returns the first maximal index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass(frozen=True)
class VarianceReport:
    per_rank: np.ndarray
    mean: float


def ranked_output_variance(logits, space: str = "logits", tau: float = 1.0) -> VarianceReport:
    """Population variance of each rank position after sorting every row ascending.

    ``space="probs"`` softens rows at ``tau`` before ranking.
    """
    z = _as_numpy(logits).astype(np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ValueError("need at least 2 samples of shape (N, K)")
    if space == "probs":
        s = z / tau
        s = np.exp(s - s.max(axis=1, keepdims=True))
        z = s / s.sum(axis=1, keepdims=True)
    elif space != "logits":
        raise ValueError(f"space must be 'logits' or 'probs', got {space!r}")
    ranked = np.sort(z, axis=1)
    per_rank = ranked.var(axis=0)
    return VarianceReport(per_rank, float(per_rank.mean()))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson product-moment correlation of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be 1-D and of equal length")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# logits dump


@torch.no_grad()
def collect_logits(model: torch.nn.Module, dataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits for every sample, in dataset order."""
    from .data import iterate_eval

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs, labels = [], []
    try:
        for x, y in iterate_eval(dataset, batch_size, dtype):
            outs.append(model(x).double().numpy())
            labels.append(y.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(outs), np.concatenate(labels)


def export_logits(model: torch.nn.Module, dataset, path: str | os.PathLike) -> Path:
    """Write ``label logit_0 .. logit_{K-1}`` rows, space separated, 17 significant digits."""
    logits, labels = collect_logits(model, dataset)
    k = logits.shape[1]
    lines = ["# label " + " ".join(f"logit_{i}" for i in range(k))]
    for y, row in zip(labels, logits):
        lines.append(f"{int(y)} " + " ".join(format(float(v), ".17g") for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_logits(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, comments="#", ndmin=2)
    return data[:, 1:], data[:, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# profiling


@dataclass(frozen=True)
class ProfileReport:
    seconds_per_iteration: float
    parameter_count: int
    checkpoint_bytes: int
    iterations: int


def profile_run(trainer, iterations: int = 50, warmup: int = 10) -> ProfileReport:
    """Time ``trainer.train_step`` over ``iterations`` steps after ``warmup`` steps.

    Batches are materialised up front so data loading is excluded. The
    trainer's parameters are updated as in normal training.
    """
    if iterations < 50:
        raise ValueError("profile_run needs at least 50 timed iterations")
    if warmup < 10:
        raise ValueError("profile_run needs at least 10 warmup iterations")
    batches = trainer.sample_batches(iterations + warmup)
    for x, y in batches[:warmup]:
        trainer.train_step(x, y)
    start = time.perf_counter()
    for x, y in batches[warmup:]:
        trainer.train_step(x, y)
    elapsed = time.perf_counter() - start
    buf = io.BytesIO()
    torch.save(trainer.model.state_dict(), buf)
    n_params = sum(p.numel() for p in trainer.model.parameters())
    return ProfileReport(elapsed / iterations, n_params, buf.tell(), iterations)
