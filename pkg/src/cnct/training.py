"""SGD-with-momentum training loop and split evaluation.

The loop is deterministic end to end for a fixed seed: batch composition
comes from the rebalanced sampler keyed on (seed, epoch), per-sample
augmentation draws come from generators keyed on (seed, epoch, sample
index), and the optimizer touches weights in a fixed node order. Worker
count only parallelizes augmentation and never changes any result.
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import load_weights
from .data.imaging import AugmentationConfig, apply_body_mask, augment_sample, \
    load_image, rng_for_sample
from .data.sampler import rebalanced_batches
from .errors import ConfigError, DataError, NonFiniteGradientError
from .graph import check_weights, copy_weights, graph_backward, graph_forward, \
    init_weights, predict_probs
from .metrics import ConfusionMatrix, metrics_from_confusion


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    The defaults are the published operating point: learning rate 5e-3,
    momentum 0.9, 17 epochs, batch size 8. Weight decay and learning-rate
    decay are available but default to off.
    """

    learning_rate: float = 5e-3
    momentum: float = 0.9
    epochs: int = 17
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    initial_checkpoint: str = None
    weight_decay: float = 0.0
    lr_decay: float = 1.0
    batches_per_epoch: int = None
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(
                f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(
                f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(
                f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


def make_loader(root=None, resolution=None):
    """A record -> (h, w) float image callable reading files from disk."""

    def load(record):
        path = record.filepath
        if root is not None and not os.path.isabs(path):
            path = os.path.join(root, path)
        return load_image(path, resolution=resolution)

    return load


def images_to_batch(images, channels):
    """Stack (h, w) grayscale images into an (n, h, w, c) network batch.

    Multi-channel inputs receive the gray plane replicated across
    channels, matching how RGB-pretrained stems consume CT slices.
    """
    x = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if x.ndim != 3:
        raise DataError(f"expected (h, w) images, got a stack of shape {x.shape}")
    return np.repeat(x[..., None], channels, axis=3)


def new_velocity(grads):
    return {node: {p: np.zeros_like(g) for p, g in entry.items()}
            for node, entry in grads.items()}


def sgd_momentum_step(weights, grads, velocity, lr, momentum,
                      weight_decay=0.0):
    """One classical-momentum update, in place.

    v <- momentum * v + g (+ weight_decay * w); w <- w - lr * v.

    Raises:
        NonFiniteGradientError naming the parameter if any gradient entry
        is NaN or infinite; weights are untouched in that case.
    """
    for node, entry in grads.items():
        for param, g in entry.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient for {node}/{param}; aborting the "
                    f"update step")
    for node, entry in grads.items():
        for param, g in entry.items():
            w = weights[node][param]
            if weight_decay:
                g = g + weight_decay * w
            v = velocity[node][param]
            v *= momentum
            v += g
            w -= lr * v
    return weights, velocity


@dataclass
class EpochLog:
    """One training epoch's record for the line-oriented log."""

    epoch: int
    epochs: int
    train_loss: float
    val_accuracy: float
    sensitivity: tuple
    ppv: tuple

    def format_line(self):
        def pct(values):
            return "/".join("n/a" if v is None else f"{v:.2f}" for v in values)

        return (f"epoch {self.epoch}/{self.epochs} "
                f"train_loss {self.train_loss:.6f} "
                f"val_acc {self.val_accuracy:.2f} "
                f"sens {pct(self.sensitivity)} "
                f"ppv {pct(self.ppv)}")


def format_log(logs):
    return "\n".join(log.format_line() for log in logs)


@dataclass
class TrainResult:
    """Outcome of a training run.

    weights holds the best-validation-accuracy parameters (the ones worth
    checkpointing); final_weights the state after the last completed step.
    """

    weights: dict
    final_weights: dict
    best_epoch: int
    best_val_accuracy: float
    step: int
    logs: list
    aborted: bool = False
    abort_reason: str = None

    @property
    def log_text(self):
        return format_log(self.logs)


def _augment_all(images, config, seed, epoch, first_index, workers):
    """Augment a batch; sample index, not worker id, keys each rng."""
    jobs = [(im, rng_for_sample(seed, epoch, first_index + i))
            for i, im in enumerate(images)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: augment_sample(j[0], config, j[1]),
                                 jobs))
    return [augment_sample(im, config, rng) for im, rng in jobs]


def train(graph, records, config, loader=None, root=None, on_epoch=None):
    """Train a network on the manifest's train split, validating per epoch.

    Args:
        graph: parsed ArchitectureGraph ending in a softmax head.
        records: ImageRecords carrying split assignments, or a dict with
            "train" and "val" lists.
        config: TrainConfig.
        loader: record -> (h, w) float image; defaults to reading files
            under root at the graph's input resolution.
        root: base directory for relative manifest paths.
        on_epoch: optional callback receiving each EpochLog as it is made.

    Returns:
        TrainResult with best-validation weights, the full epoch log, and
        an aborted flag if the loss went non-finite (the best weights seen
        so far are still returned).
    """
    if isinstance(records, dict):
        split = records
    else:
        split = {}
        for rec in records:
            split.setdefault(rec.split, []).append(rec)
    train_records = split.get("train", [])
    val_records = split.get("val", [])
    if not train_records:
        raise DataError("training needs a non-empty train split")
    if not val_records:
        raise DataError("training needs a non-empty val split for "
                        "checkpoint selection")

    h, w, channels = graph.input_shape
    if loader is None:
        loader = make_loader(root=root, resolution=(h, w))

    if config.initial_checkpoint:
        weights, _ = load_weights(config.initial_checkpoint, graph)
    else:
        weights = init_weights(graph, seed=config.seed)

    train_labels = np.array([int(r.label) for r in train_records])
    train_images = [loader(r) for r in train_records]
    val_images = [loader(r) for r in val_records]
    val_x = images_to_batch(val_images, channels)
    val_y = np.array([int(r.label) for r in val_records])

    velocity = None
    best = copy_weights(weights)
    best_acc = -1.0
    best_epoch = 0
    best_step = 0
    step = 0
    logs = []
    aborted = False
    abort_reason = None

    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        batches = rebalanced_batches(
            train_labels, batch_size=config.batch_size, seed=config.seed,
            epoch=epoch, num_batches=config.batches_per_epoch)
        loss_sum = 0.0
        loss_count = 0
        for batch_index, idx in enumerate(batches):
            images = [train_images[i] for i in idx]
            images = _augment_all(images, config.augmentation, config.seed,
                                  epoch, batch_index * config.batch_size,
                                  config.workers)
            x = images_to_batch(images, channels)
            y = train_labels[idx]
            res = graph_forward(graph, weights, x, mode="train")
            loss, _ = ops.softmax_xent(res.logits, y)
            if not np.isfinite(loss):
                aborted = True
                abort_reason = (f"training loss became non-finite at epoch "
                                f"{epoch} batch {batch_index}")
                break
            loss_sum += float(loss)
            loss_count += 1
            grads = graph_backward(graph, weights, res.cache, y)
            if velocity is None:
                velocity = new_velocity(grads)
            try:
                sgd_momentum_step(weights, grads, velocity, lr,
                                  config.momentum, config.weight_decay)
            except NonFiniteGradientError as e:
                aborted = True
                abort_reason = f"{e} (epoch {epoch} batch {batch_index})"
                break
            step += 1
        if aborted:
            break

        probs = predict_probs(graph, weights, val_x)
        preds = np.argmax(probs, axis=1)
        cm = ConfusionMatrix()
        cm.update(val_y, preds)
        report = metrics_from_confusion(cm)
        log = EpochLog(epoch=epoch, epochs=config.epochs,
                       train_loss=loss_sum / max(loss_count, 1),
                       val_accuracy=report.accuracy,
                       sensitivity=report.sensitivity, ppv=report.ppv)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if report.accuracy > best_acc:
            best_acc = report.accuracy
            best = copy_weights(weights)
            best_epoch = epoch
            best_step = step

    return TrainResult(weights=best, final_weights=weights,
                       best_epoch=best_epoch,
                       best_val_accuracy=max(best_acc, 0.0), step=best_step,
                       logs=logs, aborted=aborted, abort_reason=abort_reason)


@dataclass
class EvalResult:
    """Confusion matrix over the evaluated images, plus any skipped files."""

    confusion: ConfusionMatrix
    skipped: list = field(default_factory=list)

    @property
    def total(self):
        return self.confusion.total


def _predict_chunk(graph, weights, x, batch_size):
    probs = predict_probs(graph, weights, x, batch_size=batch_size)
    return np.argmax(probs, axis=1)


def evaluate(graph, weights, records, loader=None, root=None, batch_size=32,
             body_mask=False, workers=1):
    """Inference over a record list, accumulating a confusion matrix.

    Images are never augmented here; body masking can be enabled to match
    a masked training pipeline. Unreadable files are skipped with a
    warning and excluded from the matrix total. Prediction is the argmax
    of the class probabilities, ties resolving to the lower class index.

    Returns an EvalResult; the matrix is identical for any worker count
    (chunks merge in input order and counts add exactly).
    """
    check_weights(graph, weights)
    h, w, channels = graph.input_shape
    if loader is None:
        loader = make_loader(root=root, resolution=(h, w))

    images = []
    labels = []
    skipped = []
    for rec in records:
        try:
            img = loader(rec)
        except DataError as e:
            warnings.warn(f"skipping unreadable image: {e}")
            skipped.append(rec.filepath)
            continue
        if body_mask:
            img = apply_body_mask(img)
        images.append(img)
        labels.append(int(rec.label))

    cm = ConfusionMatrix()
    if not images:
        return EvalResult(confusion=cm, skipped=skipped)
    x = images_to_batch(images, channels)
    y = np.array(labels)

    if workers > 1 and x.shape[0] > batch_size:
        bounds = np.linspace(0, x.shape[0], workers + 1).astype(int)
        chunks = [(x[a:b],) for a, b in zip(bounds, bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda c: _predict_chunk(graph, weights, c[0], batch_size),
                chunks))
        preds = np.concatenate(parts)
    else:
        preds = _predict_chunk(graph, weights, x, batch_size)
    cm.update(y, preds)
    return EvalResult(confusion=cm, skipped=skipped)


def evaluate_checkpoint(graph, checkpoint_path, records, **kwargs):
    """Evaluate weights stored in a checkpoint file."""
    weights, _ = load_weights(checkpoint_path, graph)
    return evaluate(graph, weights, records, **kwargs)
