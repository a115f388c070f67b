"""Adam training loop, evaluation metrics, finite-difference gradient audit."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from ..data import DatasetSample, jitter
from ..errors import InvalidInputError, TrainingDivergedError
from ..geom import random_rotation
from .layers import softmax_cross_entropy
from .model import Model, encode_cloud, forward_batch, loss_and_grads, stack_encoded


@dataclass
class TrainConfig:
    """Optimizer and augmentation settings.

    The learning rate starts at lr0 and is multiplied by lr_decay every
    lr_step epochs, floored at lr_floor.
    """

    epochs: int = 60
    batch_size: int = 16
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.3
    lr_step: int = 20
    lr_floor: float = 1e-5
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        # exactly zero is allowed as a no-op debugging run
        if self.lr0 < 0:
            raise InvalidInputError("lr0 must be nonnegative")
        if self.epochs < 1:
            raise InvalidInputError("need at least one epoch")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr0 == 0.0:
        return 0.0
    return max(cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_step), cfg.lr_floor)


def init_adam(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              cfg: TrainConfig) -> None:
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        m = state["m"][name] = b1 * state["m"][name] + (1 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _labels_for(batch: list[DatasetSample], task: str):
    if task == "classify":
        return np.array([s.class_id for s in batch], dtype=np.int64)
    parts = [s.cloud.part_labels for s in batch]
    if any(p is None for p in parts):
        raise InvalidInputError("segmentation training needs part labels")
    return np.stack(parts)


def _batches_by_size(dataset, order, batch_size):
    """Group the shuffled indices by point count so batches stack cleanly."""
    groups: dict[int, list[int]] = {}
    for i in order:
        groups.setdefault(dataset[i].cloud.n, []).append(i)
    for n in sorted(groups):
        idx = groups[n]
        for start in range(0, len(idx), batch_size):
            yield idx[start:start + batch_size]


def train(model: Model, dataset: list[DatasetSample], cfg: TrainConfig,
          eval_data: list[DatasetSample] | None = None,
          start_epoch: int = 0, opt_state: dict | None = None,
          verbose: bool = False):
    """Adam training over shuffled mini-batches with jitter augmentation.

    Deterministic per seed: the shuffle order and jitter noise of epoch e
    depend only on (cfg.seed, e), so resuming from a checkpoint replays the
    exact remaining schedule. Returns (metrics rows, optimizer state); the
    model parameters are updated in place. Rows are dicts with keys epoch /
    split / loss / accuracy / iou.
    """
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    if opt_state is None:
        opt_state = init_adam(model.params)
    metrics: list[dict] = []
    task = model.config.task

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, epoch])))
        order = rng.permutation(len(dataset))
        lr = learning_rate(cfg, epoch)

        total_loss = 0.0
        total_hits = 0
        total_count = 0
        for batch_idx in _batches_by_size(dataset, order, cfg.batch_size):
            batch = [dataset[i] for i in batch_idx]
            clouds = [s.cloud for s in batch]
            if cfg.jitter_sigma > 0:
                seeds = rng.integers(0, 2**63 - 1, size=len(clouds))
                clouds = [jitter(c, cfg.jitter_sigma, cfg.jitter_clip, int(sd))
                          for c, sd in zip(clouds, seeds)]
            encoded = [encode_cloud(c, model.config) for c in clouds]
            x, s, r = stack_encoded(encoded)
            labels = _labels_for(batch, task)
            with np.errstate(invalid="ignore", over="ignore"):
                loss, grads, logits = loss_and_grads(model, x, s, r, labels)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            adam_step(model.params, grads, opt_state, lr, cfg)
            pred = logits.argmax(axis=-1)
            total_hits += int((pred == labels).sum())
            total_count += labels.size
            total_loss += loss * len(batch)

        row = {"epoch": epoch, "split": "train",
               "loss": total_loss / len(dataset),
               "accuracy": total_hits / max(total_count, 1), "iou": None}
        metrics.append(row)
        if verbose:
            print(f"epoch {epoch:3d} lr {lr:.2e} loss {row['loss']:.4f} "
                  f"acc {row['accuracy']:.3f} ({time.time() - t0:.1f}s)")

        if eval_data and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            ev = evaluate(model, eval_data)
            metrics.append({"epoch": epoch, "split": "test",
                            "loss": ev["loss"], "accuracy": ev["accuracy"],
                            "iou": ev["iou"]})
    return metrics, opt_state


def _parts_by_category(dataset):
    cats: dict[int, set] = {}
    for s in dataset:
        if s.cloud.part_labels is not None:
            cats.setdefault(s.class_id, set()).update(
                int(p) for p in np.unique(s.cloud.part_labels))
    return cats


def _shape_iou(pred, gt, parts):
    ious = []
    for p in sorted(parts):
        inter = int(np.sum((pred == p) & (gt == p)))
        union = int(np.sum((pred == p) | (gt == p)))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious)) if ious else 1.0


def evaluate(model: Model, dataset: list[DatasetSample],
             rotate: bool = False, seed: int = 0) -> dict:
    """Accuracy (and per-shape mean IoU for segmentation) over a dataset.

    rotate=True applies an independent random rotation per example before
    the forward pass, deterministic in `seed`. Per-shape IoU averages the
    part IoUs of the shape's category, then averages over shapes.
    """
    if not dataset:
        raise InvalidInputError("evaluation dataset is empty")
    task = model.config.task
    cats = _parts_by_category(dataset) if task == "segment" else {}

    predictions: list[np.ndarray] = [None] * len(dataset)
    losses = np.zeros(len(dataset))
    order = list(range(len(dataset)))
    for batch_idx in _batches_by_size(dataset, order, 32):
        batch = [dataset[i] for i in batch_idx]
        clouds = [s.cloud for s in batch]
        if rotate:
            clouds = [random_rotation(seed * 1_000_003 + i).apply_cloud(c)
                      for i, c in zip(batch_idx, clouds)]
        encoded = [encode_cloud(c, model.config) for c in clouds]
        x, s, r = stack_encoded(encoded)
        logits, _ = forward_batch(model, x, s, r)
        labels = _labels_for(batch, task)
        for j, i in enumerate(batch_idx):
            predictions[i] = logits[j].argmax(axis=-1)
            losses[i], _ = softmax_cross_entropy(logits[j], labels[j])

    if task == "classify":
        hits = sum(int(predictions[i] == dataset[i].class_id)
                   for i in range(len(dataset)))
        return {"accuracy": hits / len(dataset), "iou": None,
                "loss": float(losses.mean()),
                "predictions": np.array(predictions, dtype=np.int64)}

    accs = []
    ious = []
    for i, s in enumerate(dataset):
        gt = s.cloud.part_labels
        accs.append(float(np.mean(predictions[i] == gt)))
        ious.append(_shape_iou(predictions[i], gt, cats.get(s.class_id, set())))
    return {"accuracy": float(np.mean(accs)), "iou": float(np.mean(ious)),
            "loss": float(losses.mean()), "predictions": predictions}


def gradient_check(model: Model, batch: list[DatasetSample],
                   per_layer: int = 20, h: float = 1e-5, seed: int = 0) -> dict:
    """Compare analytic gradients against central finite differences.

    Samples up to `per_layer` entries of every parameter array and returns
    the max relative error per parameter plus the overall worst case under
    key "max". The denominator is max(|analytic|, |numeric|, 1e-6); the
    floor absorbs entries whose true gradient sits below what a central
    difference of an O(1) loss can resolve in double precision.
    """
    encoded = [encode_cloud(s.cloud, model.config) for s in batch]
    x, s, r = stack_encoded(encoded)
    labels = _labels_for(batch, model.config.task)

    _, grads, _ = loss_and_grads(model, x, s, r, labels)

    def loss_only():
        logits, _ = forward_batch(model, x, s, r)
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss

    rng = np.random.Generator(np.random.PCG64(seed))
    report: dict[str, float] = {}
    worst = 0.0
    for name in sorted(model.params):
        arr = model.params[name]
        flat = arr.reshape(-1)
        count = min(per_layer, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        err = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_only()
            flat[idx] = orig - h
            down = loss_only()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[idx]
            denom = max(abs(analytic), abs(numeric), 1e-6)
            err = max(err, abs(analytic - numeric) / denom)
        report[name] = err
        worst = max(worst, err)
    report["max"] = worst
    return report


def write_metrics_csv(path, rows) -> None:
    """CSV with the fixed header epoch,split,loss,accuracy,iou; missing IoU
    cells are left empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "accuracy", "iou"])
        for row in rows:
            iou = "" if row.get("iou") is None else f"{row['iou']:.6f}"
            writer.writerow([row["epoch"], row["split"],
                             f"{row['loss']:.6f}", f"{row['accuracy']:.6f}", iou])
