"""Image IO, body-region masking, and training-time augmentation.

Images move through the pipeline as float32 (height, width) arrays scaled
to [0, 1]. The body-region mask keeps the largest bright connected
component (the patient cross-section) and zeroes everything else: scanner
table, padding, air. Augmentation applies, in order, body masking, crop
jitter with resize back, rotation, shear, horizontal flip, and intensity
scale/shift, then clamps to [0, 1].
"""

import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from ..errors import DataError

BODY_THRESHOLD = 0.15
_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def load_image(path, resolution=None):
    """Read a grayscale image file to float32 in [0, 1].

    8-bit and 16-bit grayscale PNGs are supported; color inputs are
    converted to luminance. resolution, if given, is the target (height,
    width) and uses bilinear resampling.
    """
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    else:
        if img.mode != "L":
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if resolution is not None:
        h, w = resolution
        if arr.shape != (h, w):
            pil = Image.fromarray(arr.astype(np.float32), mode="F")
            pil = pil.resize((w, h), Image.BILINEAR)
            arr = np.asarray(pil, dtype=np.float32)
    return np.clip(arr, 0.0, 1.0)


def save_image_png(path, image):
    """Write a [0, 1] float array as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def save_color_png(path, image):
    """Write an (h, w, 3) [0, 1] float array as an RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an (h, w, 3) image, got shape {arr.shape}")
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def find_body_region(image, threshold=BODY_THRESHOLD):
    """Locate the body as the largest bright 8-connected component.

    Returns (mask, found): a boolean array that is hole-filled (lungs and
    airways belong to the body even though they are dark), and whether any
    foreground existed at all.
    """
    fg = image >= threshold
    if not fg.any():
        return np.zeros(image.shape, dtype=bool), False
    labels, count = ndimage.label(fg, structure=_EIGHT_CONNECTED)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0  # background
    largest = int(sizes.argmax())  # ties resolve to the lowest label id
    mask = ndimage.binary_fill_holes(labels == largest)
    return mask, True


def apply_body_mask(image, threshold=BODY_THRESHOLD):
    """Zero everything outside the body region.

    Idempotent: masking a masked image changes nothing. When no pixel
    clears the threshold the image is returned unchanged with a warning,
    since an all-zero "masked" slice would silently poison training.
    """
    mask, found = find_body_region(image, threshold)
    if not found:
        warnings.warn("no foreground found above the body threshold; "
                      "returning the image unmasked", stacklevel=2)
        return image
    return np.where(mask, image, np.float32(0.0)).astype(image.dtype, copy=False)


@dataclass
class AugmentationConfig:
    """Ranges for the stochastic training augmentations.

    All ranges are symmetric around the identity; setting every field to
    its identity value (and body_mask off) makes augment_sample return its
    input bit for bit.
    """

    enabled: bool = True
    body_mask: bool = True
    body_threshold: float = BODY_THRESHOLD
    crop_jitter: float = 0.05        # fraction of the crop box, per side
    rotation_degrees: float = 10.0
    shear_degrees: float = 5.0
    hflip_prob: float = 0.5
    intensity_scale: tuple = (0.9, 1.1)
    intensity_shift: float = 0.1
    seed: int = 0

    @classmethod
    def disabled(cls):
        return cls(enabled=False)

    def identity_ranges(self):
        lo, hi = self.intensity_scale
        return (self.crop_jitter == 0 and self.rotation_degrees == 0
                and self.shear_degrees == 0 and self.hflip_prob == 0
                and lo == 1 and hi == 1 and self.intensity_shift == 0
                and not self.body_mask)


def rng_for_sample(seed, epoch, index):
    """Deterministic per-sample generator; identical regardless of which
    worker or batch position handles the sample."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def _bounding_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def augment_sample(image, config, rng):
    """One stochastic augmentation draw applied to one image.

    Args:
        image: (h, w) float32 array in [0, 1].
        config: AugmentationConfig with the ranges.
        rng: numpy Generator; the draw order is fixed (crop box deltas,
            rotation, shear y, shear x, flip, scale, shift) so streams
            stay reproducible across configurations.

    Returns:
        A new (h, w) float32 array; the input is never modified. With
        augmentation disabled, or every range at its identity value, the
        input array is returned unchanged.
    """
    if not config.enabled:
        return image
    if image.ndim != 2:
        raise DataError(f"augmentation expects a (h, w) image, got shape "
                        f"{image.shape}")
    h, w = image.shape

    work = image
    if config.body_mask:
        work = apply_body_mask(work, config.body_threshold)
        mask, found = find_body_region(work, config.body_threshold)
        box = _bounding_box(mask) if found else (0, h, 0, w)
    else:
        box = (0, h, 0, w)

    # Fixed draw order, every parameter drawn on every call.
    r0, r1, c0, c1 = box
    bh, bw = r1 - r0, c1 - c0
    j = config.crop_jitter
    dr0 = rng.uniform(-j, j) * bh
    dr1 = rng.uniform(-j, j) * bh
    dc0 = rng.uniform(-j, j) * bw
    dc1 = rng.uniform(-j, j) * bw
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees)
    shear_y = rng.uniform(-config.shear_degrees, config.shear_degrees)
    shear_x = rng.uniform(-config.shear_degrees, config.shear_degrees)
    flip_draw = rng.random()
    lo, hi = config.intensity_scale
    scale = rng.uniform(lo, hi)
    shift = rng.uniform(-config.intensity_shift, config.intensity_shift)

    nr0 = min(max(r0 + dr0, 0.0), h - 1.0)
    nr1 = max(min(r1 + dr1, float(h)), nr0 + 1.0)
    nc0 = min(max(c0 + dc0, 0.0), w - 1.0)
    nc1 = max(min(c1 + dc1, float(w)), nc0 + 1.0)

    crop_is_identity = (nr0, nr1, nc0, nc1) == (0.0, float(h), 0.0, float(w))
    geo_is_identity = crop_is_identity and angle == 0 and shear_y == 0 \
        and shear_x == 0

    out = work
    if not geo_is_identity:
        # Compose output->input coordinate maps: shear^-1, then rotation^-1
        # about the center, then the crop-resize map, as one affine so the
        # image is resampled exactly once.
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

        def about_center(m):
            full = np.eye(3)
            full[:2, :2] = m
            full[:2, 2] = [cy - m[0, 0] * cy - m[0, 1] * cx,
                           cx - m[1, 0] * cy - m[1, 1] * cx]
            return full

        theta = np.deg2rad(angle)
        rot_inv = about_center(np.array([
            [np.cos(theta), -np.sin(theta)],
            [np.sin(theta), np.cos(theta)],
        ]))
        ty = np.tan(np.deg2rad(shear_y))
        tx = np.tan(np.deg2rad(shear_x))
        shear_inv = about_center(np.linalg.inv(np.array([
            [1.0, ty],
            [tx, 1.0],
        ])))
        crop = np.eye(3)
        crop[0, 0] = (nr1 - nr0) / h
        crop[1, 1] = (nc1 - nc0) / w
        crop[:2, 2] = [nr0, nc0]
        total = crop @ rot_inv @ shear_inv
        out = ndimage.affine_transform(
            work.astype(np.float32), total[:2, :2], offset=total[:2, 2],
            output_shape=(h, w), order=1, mode="constant", cval=0.0,
            prefilter=False)

    if config.hflip_prob > 0 and flip_draw < config.hflip_prob:
        out = out[:, ::-1]

    if scale != 1.0 or shift != 0.0:
        out = out * np.float32(scale) + np.float32(shift)
        out = np.clip(out, 0.0, 1.0)

    if out is work is image:
        return image
    return np.ascontiguousarray(out, dtype=np.float32)


def horizontal_flip(image):
    """Mirror left-right; applying it twice restores the input exactly."""
    return np.ascontiguousarray(image[:, ::-1])
