"""Class-rebalanced batch sampling.

Every batch holds an equal share of each class up to integer rounding:
with batch size 8 over 3 classes the per-class counts are a permutation of
(3, 3, 2), and the class receiving the short count rotates across batches
so no class is systematically underfed. Minority classes are oversampled
by reshuffling and drawing again whenever their pool runs dry.
"""

import numpy as np

from ..errors import SamplerError
from .manifest import CLASS_NAMES, ClassLabel


def _labels_of(records_or_labels):
    labels = []
    for item in records_or_labels:
        labels.append(int(item.label) if hasattr(item, "label") else int(item))
    return np.asarray(labels, dtype=np.int64)


class _Pool:
    """Endless shuffled draws over one class's record indices."""

    def __init__(self, indices, rng):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.queue = self.rng.permutation(self.indices)
        self.pos = 0

    def draw(self, count):
        out = []
        while count:
            if self.pos == len(self.queue):
                self.queue = self.rng.permutation(self.indices)
                self.pos = 0
            take = min(count, len(self.queue) - self.pos)
            out.append(self.queue[self.pos:self.pos + take])
            self.pos += take
            count -= take
        return np.concatenate(out)


def batch_class_counts(batch_size, num_classes, batch_index):
    """Per-class counts for one batch; the remainder rotates."""
    base = batch_size // num_classes
    rem = batch_size % num_classes
    counts = np.full(num_classes, base, dtype=np.int64)
    for i in range(rem):
        counts[(batch_index + i) % num_classes] += 1
    return counts


def rebalanced_batches(records_or_labels, batch_size=8, seed=0, epoch=0,
                       num_batches=None):
    """Yield index arrays forming class-rebalanced batches.

    Args:
        records_or_labels: ImageRecords (with .label) or plain int labels.
        batch_size: images per batch.
        seed, epoch: together they key the deterministic shuffle stream.
        num_batches: batches to emit; defaults to ceil(len / batch_size),
            one nominal epoch.

    Yields:
        np.int64 arrays of length batch_size indexing the input sequence.

    Raises:
        SamplerError if any class has no records, naming the class.
    """
    labels = _labels_of(records_or_labels)
    if batch_size < 1:
        raise SamplerError(f"batch_size must be positive, got {batch_size}")
    classes = [int(c) for c in ClassLabel]
    rng = np.random.default_rng([int(seed), int(epoch)])
    pools = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise SamplerError(
                f"class {CLASS_NAMES[ClassLabel(c)]!r} has no records; "
                f"rebalanced batches need every class present")
        pools[c] = _Pool(idx, rng)

    if num_batches is None:
        num_batches = -(-len(labels) // batch_size)

    for t in range(num_batches):
        counts = batch_class_counts(batch_size, len(classes), t)
        parts = [pools[c].draw(counts[i]) for i, c in enumerate(classes)]
        batch = np.concatenate(parts)
        yield rng.permutation(batch)  # mix classes within the batch
