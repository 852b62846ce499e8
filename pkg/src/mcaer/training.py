"""Training loop, step schedule and accuracy/confusion evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .data import CueDataset
from .errors import ConfigError, TrainingAborted, ValidationError
from .model import CLASS_NAMES, MCAERModel
from .optim import RMSProp, step_lr
from .params import make_rng
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 4e-3
    lr_decay: float = 0.4
    lr_every: int = 40
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    enabled_streams: tuple[str, ...] = ("face", "context", "body")
    lenient: bool = True
    precision: str = "float32"
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    keypoint_weight: float = 0.0
    early_stop_acc: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "enabled_streams", tuple(self.enabled_streams))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.lr_every < 1 or self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("invalid learning-rate schedule")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def lr_at(self, epoch: int) -> float:
        return step_lr(epoch, self.lr0, self.lr_decay, self.lr_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enabled_streams"] = list(self.enabled_streams)
        return d


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    lr: float
    steps: int

    def line(self) -> str:
        return f"{self.epoch} {self.loss!r} {self.val_acc!r} {self.lr!r}"


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    steps: int = 0

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows = truth, cols = prediction
    per_class: list[Optional[float]]

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    def format(self) -> str:
        lines = [f"accuracy {self.accuracy:.6f} ({int(np.trace(self.confusion))}/{self.count})"]
        lines.append("confusion (rows=truth, cols=prediction; order " + " ".join(CLASS_NAMES) + ")")
        lines += [" ".join(str(int(v)) for v in row) for row in self.confusion]
        lines.append(
            "per-class "
            + " ".join(f"{n}={'nan' if a is None else format(a, '.4f')}" for n, a in zip(CLASS_NAMES, self.per_class))
        )
        return "\n".join(lines)


def report_from_predictions(truth: np.ndarray, pred: np.ndarray, k: int = len(CLASS_NAMES)) -> EvalReport:
    if len(truth) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    rows = conf.sum(axis=1)
    per_class = [float(conf[i, i] / rows[i]) if rows[i] else None for i in range(k)]
    return EvalReport(float(np.trace(conf) / conf.sum()), conf, per_class)


def predict(model: MCAERModel, dataset: CueDataset, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for every sample, in dataset order."""
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            b = dataset.batch(range(start, min(start + batch_size, len(dataset))))
            out.append(model.forward(b.inputs, train=False, body_present=b.body_present).logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: MCAERModel, dataset: CueDataset, batch_size: int = 32) -> EvalReport:
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    logits = predict(model, dataset, batch_size)
    return report_from_predictions(dataset.labels, np.argmax(logits, axis=1))


def train(
    model: MCAERModel,
    train_set: CueDataset,
    val_set: Optional[CueDataset],
    config: TrainConfig,
    checkpoint_path: Optional[str] = None,
    history_path: Optional[str] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> History:
    """Shuffled minibatch RMSProp on cross-entropy with the step schedule.

    When ``val_set`` is given, the best validation accuracy (earliest epoch on
    ties) is checkpointed to ``checkpoint_path``. The last partial batch is kept.
    """
    from .checkpoint import save_checkpoint

    if tuple(model.config.streams) != tuple(s for s in ("face", "context", "body") if s in config.enabled_streams):
        raise ConfigError(
            f"model streams {model.config.streams} differ from training streams {config.enabled_streams}"
        )
    if len(train_set) == 0:
        raise ValidationError("training set is empty")
    use_heat = config.keypoint_weight > 0 and "body.heatmap.weight" in model.params
    params = model.trainable_params(include_heatmap=use_heat)
    opt = RMSProp(params, config.lr0, config.rms_alpha, config.rms_eps)
    history = History()
    best = -1.0
    hist_fh = open(history_path, "w", encoding="utf-8") if history_path else None
    try:
        for epoch in range(config.epochs):
            opt.lr = config.lr_at(epoch)
            order = make_rng(config.seed, 1, epoch).permutation(len(train_set))
            total, seen = 0.0, 0
            for bi, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start : start + config.batch_size]
                batch = train_set.batch(idx, train=True, seed=config.seed, epoch=epoch)
                out = model.forward(batch.inputs, train=True, body_present=batch.body_present)
                loss = F.cross_entropy(out.logits, batch.labels)
                if use_heat and batch.heatmaps is not None and out.heatmaps is not None:
                    loss = loss + F.mse_loss(out.heatmaps, batch.heatmaps) * config.keypoint_weight
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingAborted(epoch, bi, value)
                params.zero_grad()
                loss.backward()
                opt.step()
                params.zero_grad()
                history.steps += 1
                total += value * len(idx)
                seen += len(idx)
            val_acc = evaluate(model, val_set, config.batch_size).accuracy if val_set is not None and len(val_set) else float("nan")
            rec = EpochRecord(epoch, total / seen, val_acc, opt.lr, history.steps)
            history.records.append(rec)
            if hist_fh:
                hist_fh.write(rec.line() + "\n")
                hist_fh.flush()
            log.info("epoch %d loss %.5f val_acc %.4f lr %.2e", epoch, rec.loss, val_acc, opt.lr)
            if on_epoch:
                on_epoch(rec)
            if val_set is not None and val_acc > best:
                best = val_acc
                history.best_epoch = epoch
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path, config)
            if config.early_stop_acc is not None and val_acc >= config.early_stop_acc:
                break
        if checkpoint_path and val_set is None:
            save_checkpoint(model, checkpoint_path, config)
    finally:
        if hist_fh:
            hist_fh.close()
    return history
