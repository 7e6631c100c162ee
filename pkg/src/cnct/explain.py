"""Occlusion-based critical-factor search and red-overlay rendering.

The method is deliberately simple and labeled for what it is: a greedy
occlusion search over a coarse grid. Each round occludes (sets to the
background value 0) whichever remaining cell most reduces the target
class confidence, keeping it only if the reduction is strict, and stops
once confidence falls below a fraction of its starting value, the cell
budget runs out, or no cell helps. Scores within a round are computed in
one batched forward pass, so the search is deterministic with row-major
tie-breaking.
"""

from dataclasses import dataclass, field

import numpy as np

from .data.imaging import find_body_region
from .errors import ConfigError, PreconditionError
from .graph import predict_probs
from .training import images_to_batch

OVERLAY_ALPHA = 0.45


def cell_bounds(length, count, index):
    """Pixel range [lo, hi) of grid cell `index` along one axis."""
    return (index * length) // count, ((index + 1) * length) // count


@dataclass
class CriticalFactorMask:
    """Result of a critical-factor search.

    cells marks the selected grid cells; selection lists them in the
    order chosen. confidence_after < confidence_before whenever any cell
    is set, because only strictly confidence-reducing cells are kept.
    """

    grid: tuple
    cells: np.ndarray
    confidence_before: float
    confidence_after: float
    target: int
    achieved: bool
    selection: list = field(default_factory=list)

    @property
    def num_cells(self):
        return int(self.cells.sum())

    def pixel_mask(self, shape):
        """Upsample the cell map to a boolean pixel mask of `shape`."""
        h, w = shape
        gh, gw = self.grid
        mask = np.zeros((h, w), dtype=bool)
        for i, j in np.argwhere(self.cells):
            r0, r1 = cell_bounds(h, gh, i)
            c0, c1 = cell_bounds(w, gw, j)
            mask[r0:r1, c0:c1] = True
        return mask

    def format(self):
        gh, gw = self.grid
        lines = [
            "method occlusion-based critical factors",
            f"grid {gh}x{gw}",
            f"target_class {self.target}",
            f"confidence_before {self.confidence_before:.6f}",
            f"confidence_after {self.confidence_after:.6f}",
            f"achieved {str(self.achieved).lower()}",
            f"cells {self.num_cells}",
        ]
        lines += [f"cell {i},{j}" for i, j in self.selection]
        return "\n".join(lines)


def make_network_scorer(graph, weights, batch_size=32):
    """Wrap a network as an (n, h, w) batch -> (n, k) probability callable."""
    channels = graph.input_shape[2]

    def score(images):
        x = images_to_batch(list(images), channels)
        return predict_probs(graph, weights, x, batch_size=batch_size)

    return score


def _occlude(image, grid, cell):
    gh, gw = grid
    i, j = cell
    r0, r1 = cell_bounds(image.shape[0], gh, i)
    c0, c1 = cell_bounds(image.shape[1], gw, j)
    out = image.copy()
    out[r0:r1, c0:c1] = 0.0
    return out


def critical_factors(model, image, target, grid=(16, 16), drop_threshold=0.5,
                     budget=None):
    """Greedy occlusion search for the cells driving a prediction.

    Args:
        model: callable mapping an (n, h, w) image batch to (n, k) class
            probabilities (see make_network_scorer for networks).
        image: (h, w) float array in [0, 1].
        target: class index the explanation is about.
        grid: (gh, gw) cell resolution.
        drop_threshold: stop once confidence < drop_threshold * initial.
        budget: maximum cells to select; default the whole grid.

    Returns:
        CriticalFactorMask; achieved is False when the threshold was not
        reached before the budget ran out or no remaining cell reduced
        confidence.

    Raises:
        PreconditionError if the model does not predict `target` on the
        unmodified image.
        ConfigError for an unusable grid or threshold.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ConfigError(f"expected a (h, w) image, got shape {image.shape}")
    h, w = image.shape
    gh, gw = grid
    if not (1 <= gh <= h and 1 <= gw <= w):
        raise ConfigError(f"grid {grid} does not fit a {h}x{w} image")
    if not 0 < drop_threshold < 1:
        raise ConfigError(
            f"drop_threshold must be in (0, 1), got {drop_threshold}")
    if budget is None:
        budget = gh * gw
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")

    probs = np.asarray(model(image[None]))[0]
    predicted = int(np.argmax(probs))
    target = int(target)
    if predicted != target:
        raise PreconditionError(
            f"model predicts class {predicted} on the unmodified image, not "
            f"the requested target {target}; explanation needs a correctly "
            f"classified input")
    before = float(probs[target])
    stop_at = drop_threshold * before

    cells = np.zeros((gh, gw), dtype=bool)
    selection = []
    remaining = [(i, j) for i in range(gh) for j in range(gw)]  # row-major
    work = image.copy()
    confidence = before

    while confidence >= stop_at and len(selection) < budget and remaining:
        candidates = np.stack([_occlude(work, grid, cell)
                               for cell in remaining])
        scores = np.asarray(model(candidates))[:, target]
        pick = int(np.argmin(scores))  # first minimum: row-major tie-break
        if not scores[pick] < confidence:
            break  # no remaining cell strictly reduces confidence
        i, j = remaining.pop(pick)
        cells[i, j] = True
        selection.append((i, j))
        work = _occlude(work, grid, (i, j))
        confidence = float(scores[pick])

    return CriticalFactorMask(grid=(gh, gw), cells=cells,
                              confidence_before=before,
                              confidence_after=confidence, target=target,
                              achieved=confidence < stop_at,
                              selection=selection)


def outside_body_fraction(image, mask):
    """Fraction of selected pixels outside the body region.

    A proxy for "the model keys on scanner artifacts": high values mean
    the explanation lives outside the patient. None if nothing selected.
    """
    pixel = mask.pixel_mask(image.shape) \
        if isinstance(mask, CriticalFactorMask) else np.asarray(mask, bool)
    total = int(pixel.sum())
    if total == 0:
        return None
    body, found = find_body_region(np.asarray(image, np.float32))
    if not found:
        return 1.0
    return float((pixel & ~body).sum()) / total


def render_overlay(image, mask, alpha=OVERLAY_ALPHA):
    """Blend selected pixels toward red on a grayscale image.

    Returns an (h, w, 3) float array. Unselected pixels are the input
    gray replicated across channels, byte for byte.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ConfigError(f"expected a (h, w) image, got shape {image.shape}")
    if isinstance(mask, CriticalFactorMask):
        pixel = mask.pixel_mask(image.shape)
    else:
        pixel = np.asarray(mask, dtype=bool)
        if pixel.shape != image.shape:
            raise ConfigError(
                f"mask shape {pixel.shape} does not match image shape "
                f"{image.shape}")
    out = np.repeat(image[..., None], 3, axis=2)
    red = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    out[pixel] = (1.0 - alpha) * out[pixel] + alpha * red
    return out
