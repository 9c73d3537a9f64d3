"""Training loops for vanilla, reverse-guidance, shape-regularised and combined runs.

All four methods share one :class:`Trainer`. The method picks which terms
enter the per-iteration loss:

* ``vanilla``  -- cross-entropy of the whole model;
* ``drg``      -- auxiliary + model cross-entropy, plus ``alpha`` times the
  temperature-scaled KL from the auxiliary teacher to the model;
* ``dsr``      -- model cross-entropy plus ``beta`` times the KL between the
  previous iteration's ranked logits and the current ranked logits;
* ``combined`` -- both of the above.

Parameters of the model and the auxiliary classifier share one SGD optimiser.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import losses as L
from .analysis import MetricsLog, collect_logits, ranked_output_variance, top1_accuracy
from .data import AugmentationPolicy, BatchPlan, DatasetPair, LabeledImageDataset, iterate_batches
from .models import ACSpec, BlockSequentialModel, Scaffold, attach_auxiliary, model_registry

__all__ = [
    "METHODS",
    "TrainingConfig",
    "RankedLogitsCache",
    "TrainingDiverged",
    "Trainer",
    "TrainResult",
    "lr_at",
    "build_model",
    "set_deterministic",
    "train_vanilla",
    "train_drg",
    "train_dsr",
    "train_combined",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

METHODS = ("vanilla", "drg", "dsr", "combined")
CHECKPOINT_FILE = "checkpoint.pt"
CHECKPOINT_MANIFEST = "checkpoint.txt"


@dataclass
class TrainingConfig:
    method: str = "combined"
    model: str = "tiny-resnet-3block"
    epochs: int = 30
    lr: float = 0.1
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau_drg: float = 1.0
    tau_dsr: float = 4.0
    alpha: float = 0.2
    beta: float = 1.0
    tap: int = 2
    ac_channels: int = 64
    batch_size: int = 128
    seed: int = 0
    teacher_detach: bool = False
    sr_first_step: str = "skip"
    augment: bool = True
    padding: int = 4
    flip_probability: float = 0.5
    variance_space: str = "logits"
    deterministic: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)

    def validate(self) -> "TrainingConfig":
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        for name in ("lr", "momentum", "weight_decay", "alpha", "beta", "lr_decay"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite value >= 0, got {value!r}")
        for name in ("tau_drg", "tau_dsr"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be > 0, got {value!r}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {list(ms)}")
        if ms and (ms[0] <= 0 or ms[-1] >= self.epochs):
            raise ValueError(f"milestones must lie in (0, epochs={self.epochs}), got {list(ms)}")
        if self.tap < 1:
            raise ValueError("tap must be >= 1")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.sr_first_step not in ("skip", "uniform"):
            raise ValueError("sr_first_step must be 'skip' or 'uniform'")
        if self.variance_space not in ("logits", "probs"):
            raise ValueError("variance_space must be 'logits' or 'probs'")
        return self

    @property
    def uses_aux(self) -> bool:
        return self.method in ("drg", "combined")

    @property
    def uses_sr(self) -> bool:
        return self.method in ("dsr", "combined")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def lr_at(epoch: int, config: TrainingConfig) -> float:
    """Step schedule: ``lr * lr_decay ** (number of milestones <= epoch)``."""
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_decay**passed


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled


def build_model(config: TrainingConfig, num_classes: int, in_channels: int = 3) -> nn.Module:
    """Seeded model construction; the AC is attached after the backbone is built.

    Because the AC's parameters are drawn last, the backbone's initial weights
    are the same for every method under one seed.
    """
    torch.manual_seed(config.seed)
    model = model_registry(config.model, num_classes, in_channels)
    if config.uses_aux:
        return attach_auxiliary(model, config.tap, ACSpec(channels=config.ac_channels))
    return model


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class RankedLogitsCache:
    """Ranked logits of the previous iteration, stored without gradient."""

    ranked: Tensor | None = None
    iteration: int = -1

    def store(self, ranked: Tensor, iteration: int) -> None:
        self.ranked = ranked.detach().clone()
        self.iteration = iteration

    @property
    def empty(self) -> bool:
        return self.ranked is None


@dataclass
class TrainResult:
    model: nn.Module
    metrics: MetricsLog
    iteration_losses: list[float]
    config: TrainingConfig


@dataclass
class _EpochAccumulator:
    loss_sum: float = 0.0
    correct: int = 0
    seen: int = 0
    steps: int = 0
    seconds: float = 0.0
    logits: list = field(default_factory=list)


class Trainer:
    """Owns a model, its optimiser and the shape-regularisation cache.

    ``model`` must be a :class:`Scaffold` for ``drg``/``combined`` runs and
    a plain module otherwise.
    """

    def __init__(
        self,
        model: nn.Module,
        data: DatasetPair | LabeledImageDataset,
        config: TrainingConfig,
        out_dir: str | os.PathLike | None = None,
    ):
        self.config = config.validate()
        if config.uses_aux and not isinstance(model, Scaffold):
            raise TypeError(f"method {config.method!r} needs a Scaffold with an auxiliary classifier")
        if isinstance(model, Scaffold) and config.uses_aux and model.tap != config.tap:
            raise ValueError(f"scaffold tap {model.tap} differs from config tap {config.tap}")
        if isinstance(data, DatasetPair):
            self.train_set, self.test_set = data.train, data.test
        else:
            self.train_set, self.test_set = data, None
        num_classes = getattr(model, "num_classes", None)
        if num_classes is not None and num_classes != self.train_set.num_classes:
            raise ValueError(f"model has {num_classes} classes, dataset has {self.train_set.num_classes}")
        if config.deterministic:
            set_deterministic(True)
        self.model = model
        self.dtype = next(model.parameters()).dtype
        self.optimizer = torch.optim.SGD(
            model.parameters(),
            lr=lr_at(0, config),
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.plan = BatchPlan(config.batch_size, config.seed)
        self.policy = (
            AugmentationPolicy(self.train_set.image_shape[-1], config.padding, config.flip_probability)
            if config.augment
            else None
        )
        self.cache = RankedLogitsCache()
        self.epoch = 0
        self.iteration = 0
        self.metrics = MetricsLog()
        self.iteration_losses: list[float] = []
        self.sr_target_stamps: list[int] = []
        # wall-clock spent inside train_step; kept out of the metrics log so deterministic logs stay byte-identical
        self.step_seconds = 0.0
        self.timed_steps = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None

    # ------------------------------------------------------------------
    # one step

    def compute_loss(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor, dict]:
        """Forward pass and loss for the configured method.

        Returns ``(loss, main_logits, parts)``; ``parts`` holds the detached
        ranked logits (if any) for the cache.
        """
        cfg = self.config
        parts: dict = {}
        if cfg.uses_aux:
            main, aux = self.model.forward_dual(x)
        else:
            main, aux = self.model(x), None
        for name, z in (("logits", main), ("auxiliary logits", aux)):
            if z is not None and not torch.isfinite(z).all():
                raise TrainingDiverged(
                    f"non-finite {name} at epoch {self.epoch}, iteration {self.iteration}",
                    self._snapshot_divergence(),
                )
        sr = None
        if cfg.uses_sr:
            ranked = L.rank_ascending(main).values
            parts["ranked"] = ranked
            target = self.cache.ranked
            if target is None and cfg.sr_first_step == "uniform":
                target = torch.zeros_like(ranked)
            if target is None:
                sr = torch.zeros((), dtype=main.dtype)
                parts["sr_stamp"] = None
            else:
                n = min(len(target), len(ranked))
                sr = L.shape_regularization_loss(target[:n], ranked[:n], cfg.tau_dsr)
                parts["sr_stamp"] = self.cache.iteration
        if cfg.method == "vanilla":
            loss = L.classification_loss(main, y)
        elif cfg.method == "drg":
            loss = L.drg_loss(aux, main, y, cfg.tau_drg, cfg.alpha, detach_teacher=cfg.teacher_detach)
        elif cfg.method == "dsr":
            loss = L.dsr_loss(main, y, sr, cfg.beta)
        else:
            loss = L.combined_loss(
                aux, main, y, sr, cfg.tau_drg, cfg.alpha, cfg.beta, detach_teacher=cfg.teacher_detach
            )
        return loss, main, parts

    def train_step(self, x: Tensor, y: Tensor) -> tuple[float, Tensor]:
        """One SGD step on a batch. Returns the loss value and the detached logits."""
        self.model.train()
        x = x.to(self.dtype)
        loss, main, parts = self.compute_loss(x, y)
        value = loss.item()
        if not math.isfinite(value):
            snapshot = self._snapshot_divergence()
            raise TrainingDiverged(
                f"non-finite loss {value} at epoch {self.epoch}, iteration {self.iteration}", snapshot
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        if "ranked" in parts:
            self.sr_target_stamps.append(parts["sr_stamp"])
            self.cache.store(parts["ranked"], self.iteration)
        self.iteration += 1
        self.iteration_losses.append(value)
        return value, main.detach()

    def sample_batches(self, count: int) -> list[tuple[Tensor, Tensor]]:
        """Materialise ``count`` training batches (cycling epochs) without training."""
        out: list = []
        epoch = self.epoch
        while len(out) < count:
            for x, y in iterate_batches(self.train_set, self.plan, epoch, self.policy, self.dtype):
                out.append((x, y))
                if len(out) == count:
                    break
            epoch += 1
        return out

    # ------------------------------------------------------------------
    # epochs

    def _set_lr(self, epoch: int) -> float:
        lr = lr_at(epoch, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        return lr

    def _variance(self, logits: np.ndarray) -> float:
        space = self.config.variance_space
        return ranked_output_variance(logits, space=space).mean

    def train_epoch(self) -> dict:
        lr = self._set_lr(self.epoch)
        acc = _EpochAccumulator()
        for x, y in iterate_batches(self.train_set, self.plan, self.epoch, self.policy, self.dtype):
            start = time.perf_counter()
            value, logits = self.train_step(x, y)
            acc.seconds += time.perf_counter() - start
            acc.loss_sum += value * len(y)
            acc.correct += int((logits.argmax(dim=1) == y).sum())
            acc.seen += len(y)
            acc.steps += 1
            acc.logits.append(logits.double().numpy())
        self.step_seconds += acc.seconds
        self.timed_steps += acc.steps
        timing = None if self.config.deterministic else acc.seconds / acc.steps
        row = self.metrics.append(
            epoch=self.epoch + 1,
            split="train",
            top1_accuracy=acc.correct / acc.seen,
            mean_loss=acc.loss_sum / acc.seen,
            ranked_output_variance=self._variance(np.concatenate(acc.logits)),
            seconds_per_iteration=timing,
            learning_rate=lr,
        )
        if self.test_set is not None:
            self.evaluate_epoch(lr)
        self.epoch += 1
        return row

    def evaluate(self, dataset: LabeledImageDataset | None = None) -> dict:
        """Eval-mode accuracy, mean CE and ranked-output variance on ``dataset``."""
        dataset = dataset or self.test_set
        if dataset is None:
            raise ValueError("no evaluation dataset")
        start = time.perf_counter()
        logits, labels = collect_logits(self.model, dataset)
        seconds = time.perf_counter() - start
        ce = L.classification_loss(torch.from_numpy(logits), torch.from_numpy(labels)).item()
        return {
            "top1_accuracy": top1_accuracy(logits, labels),
            "mean_loss": ce,
            "ranked_output_variance": self._variance(logits),
            "seconds": seconds,
            "batches": math.ceil(len(labels) / 256),
        }

    def evaluate_epoch(self, lr: float) -> dict:
        ev = self.evaluate()
        timing = None if self.config.deterministic else ev["seconds"] / ev["batches"]
        return self.metrics.append(
            epoch=self.epoch + 1,
            split="test",
            top1_accuracy=ev["top1_accuracy"],
            mean_loss=ev["mean_loss"],
            ranked_output_variance=ev["ranked_output_variance"],
            seconds_per_iteration=timing,
            learning_rate=lr,
        )

    def fit(self, until_epoch: int | None = None, checkpoint_every: int = 0) -> TrainResult:
        """Train from the current epoch up to ``until_epoch`` (default: ``config.epochs``)."""
        stop = self.config.epochs if until_epoch is None else min(until_epoch, self.config.epochs)
        while self.epoch < stop:
            row = self.train_epoch()
            log.info(
                "epoch %d/%d loss %.4f train-acc %.4f",
                self.epoch,
                self.config.epochs,
                row["mean_loss"],
                row["top1_accuracy"],
            )
            if self.out_dir is not None:
                self.metrics.to_csv(self.out_dir / "metrics.csv")
                if checkpoint_every and self.epoch % checkpoint_every == 0:
                    self.save(self.out_dir)
        if self.out_dir is not None:
            self.save(self.out_dir)
        return TrainResult(self.model, self.metrics, list(self.iteration_losses), self.config)

    # ------------------------------------------------------------------
    # checkpoints

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "cache_ranked": self.cache.ranked,
            "cache_iteration": self.cache.iteration,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "metrics": self.metrics.rows,
            "iteration_losses": list(self.iteration_losses),
            "sr_target_stamps": list(self.sr_target_stamps),
            "config": self.config.to_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.cache = RankedLogitsCache(state["cache_ranked"], state["cache_iteration"])
        self.epoch = state["epoch"]
        self.iteration = state["iteration"]
        self.metrics = MetricsLog(state["metrics"])
        self.iteration_losses = list(state["iteration_losses"])
        self.sr_target_stamps = list(state["sr_target_stamps"])
        torch.set_rng_state(state["torch_rng"])

    def manifest(self) -> dict:
        model = self.model.model if isinstance(self.model, Scaffold) else self.model
        info = {
            "model": getattr(model, "name", type(model).__name__),
            "num_classes": self.train_set.num_classes,
            "tap": self.model.tap if isinstance(self.model, Scaffold) else "none",
            "epoch": self.epoch,
            "iteration": self.iteration,
            "method": self.config.method,
            "config_hash": self.config.hash(),
            "dataset": self.train_set.name,
        }
        if isinstance(self.model, Scaffold):
            info["ac_spec"] = self.model.aux.spec.describe()
        return info

    def save(self, directory: str | os.PathLike, name: str = CHECKPOINT_FILE) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / name
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)
        manifest = path.with_suffix(".txt")
        manifest.write_text("".join(f"{k}: {v}\n" for k, v in self.manifest().items()))
        return path

    def _snapshot_divergence(self) -> Path | None:
        if self.out_dir is None:
            return None
        try:
            return self.save(self.out_dir, "diverged.pt")
        except OSError:
            return None

    @classmethod
    def resume(
        cls,
        checkpoint: str | os.PathLike,
        data: DatasetPair | LabeledImageDataset,
        out_dir: str | os.PathLike | None = None,
    ) -> "Trainer":
        state = torch.load(Path(checkpoint), weights_only=False)
        config = TrainingConfig.from_dict(state["config"])
        num_classes = (data.train if isinstance(data, DatasetPair) else data).num_classes
        model = build_model(config, num_classes)
        trainer = cls(model, data, config, out_dir)
        trainer.load_state_dict(state)
        return trainer


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, TrainingConfig, dict]:
    """Rebuild a model from a checkpoint file. Returns ``(model, config, manifest)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, weights_only=False)
    config = TrainingConfig.from_dict(state["config"])
    manifest_path = path.with_suffix(".txt")
    manifest = {}
    if manifest_path.exists():
        for line in manifest_path.read_text().splitlines():
            key, _, value = line.partition(": ")
            manifest[key] = value
    num_classes = state["model"][_head_key(state["model"])].shape[0]
    model = build_model(config, num_classes)
    model.load_state_dict(state["model"])
    model.eval()
    return model, config, manifest


def _head_key(sd: dict) -> str:
    for key in ("head.2.bias", "model.head.2.bias"):
        if key in sd:
            return key
    raise KeyError("checkpoint has no classifier head")


# ---------------------------------------------------------------------------
# functional entry points


def _run(model, data, config, method: str, out_dir=None) -> TrainResult:
    if config.method != method:
        raise ValueError(f"config.method is {config.method!r}, expected {method!r}")
    return Trainer(model, data, config, out_dir).fit()


def train_vanilla(model: nn.Module, data, config: TrainingConfig, out_dir=None) -> TrainResult:
    """Plain cross-entropy training."""
    return _run(model, data, config, "vanilla", out_dir)


def train_drg(scaffold: Scaffold, data, config: TrainingConfig, out_dir=None) -> TrainResult:
    """Reverse-guidance training with the auxiliary classifier as teacher."""
    return _run(scaffold, data, config, "drg", out_dir)


def train_dsr(model: nn.Module, data, config: TrainingConfig, out_dir=None) -> TrainResult:
    """Shape-regularised training against the previous iteration's ranked logits."""
    return _run(model, data, config, "dsr", out_dir)


def train_combined(scaffold: Scaffold, data, config: TrainingConfig, out_dir=None) -> TrainResult:
    return _run(scaffold, data, config, "combined", out_dir)


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
