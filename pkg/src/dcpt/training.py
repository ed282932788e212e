"""Mini-batch training and frame-level evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import DataError, apply_symmetry, manifest_arrays
from .metrics import EvalReport
from .optim import Adam
from .rng import RandomSource
from .tensor import Tensor, softmax
from .transformer import DeepfakeDetector, cross_entropy

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


@dataclass
class TrainHyper:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0


def _batches(order: list[int], size: int) -> list[list[int]]:
    # a trailing singleton batch is folded into the previous one: batch norm needs two samples
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = chunks[-1] + tail
    return chunks


def fit(
    model: DeepfakeDetector,
    images: np.ndarray,
    labels: np.ndarray,
    hyper: TrainHyper,
    augment_flags=None,
    log_path=None,
) -> list[dict]:
    """Train in place; returns one record per epoch.

    Rows with a non-zero ``augment_flags`` entry get a fresh random symmetry
    each time they are drawn.
    """
    n = len(images)
    if n == 0:
        raise DataError("training split is empty")
    labels = np.asarray(labels, dtype=np.int64)
    dtype = model.cfg.dtype
    base = RandomSource(hyper.seed)
    order_rng, aug_rng = base.spawn(1), base.spawn(2)
    opt = Adam(model.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    model.train()
    records = []
    sink = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(hyper.epochs):
            order = order_rng.permutation(n)
            total, correct = 0.0, 0
            for idx in _batches(order, hyper.batch_size):
                batch = images[idx].astype(dtype, copy=True)
                if augment_flags is not None:
                    for j, row in enumerate(idx):
                        if augment_flags[row]:
                            batch[j] = apply_symmetry(batch[j], aug_rng.randbelow(8))
                logits = model(Tensor(batch))
                loss = cross_entropy(logits, labels[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(step, value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += value * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
                step += 1
            rec = {"epoch": epoch, "loss": total / n, "train_acc": correct / n, "steps": step}
            records.append(rec)
            log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["train_acc"])
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
    finally:
        if sink:
            sink.close()
    return records


def predict_proba(model: DeepfakeDetector, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size].astype(model.cfg.dtype, copy=False)
        out.append(softmax(model(Tensor(chunk)), axis=-1).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def evaluate_arrays(model: DeepfakeDetector, images: np.ndarray, labels) -> EvalReport:
    return EvalReport.from_predictions(predict_proba(model, images), labels)


def train(entries, cfg: ModelConfig, hyper: TrainHyper, log_path=None) -> tuple[DeepfakeDetector, list[dict]]:
    rows = [e for e in entries if e.split == "train"]
    if not rows:
        raise DataError("manifest has no train split entries")
    images, labels = manifest_arrays(rows, cfg.image_size)
    flags = np.array([e.augment > 0 for e in rows])
    model = DeepfakeDetector(cfg, seed=hyper.seed)
    records = fit(model, images, labels, hyper, flags if flags.any() else None, log_path)
    return model, records


def evaluate(entries, model: DeepfakeDetector, split: str = "test") -> EvalReport:
    rows = [e for e in entries if e.split == split]
    if not rows:
        raise DataError(f"manifest has no {split!r} entries")
    images, labels = manifest_arrays(rows, model.cfg.image_size)
    return evaluate_arrays(model, images, labels)
