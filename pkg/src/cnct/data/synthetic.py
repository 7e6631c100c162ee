"""Synthetic chest-CT-like dataset for smoke tests and demos.

Each image is a bright disk (the "body") on a dark background. Class 0 is
uniform, class 1 brightens the top half of the disk, class 2 brightens the
left half, so quadrant intensity means separate the classes linearly while
single-pixel statistics do not separate classes 1 and 2. Optionally a
bright bar near the bottom edge imitates a scanner table outside the body.

Generation is fully deterministic: the same seed produces byte-identical
PNGs and metadata.
"""

import csv
import os

import numpy as np

from .imaging import save_image_png
from .manifest import CLASS_NAMES, METADATA_COLUMNS, ClassLabel

CLASS_SIGNAL = 0.25
NOISE_SIGMA = 0.03


def _render_slice(resolution, center, radius, body_level, label, rng,
                  table_artifact):
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    cy, cx = center
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    img = np.zeros((res, res), dtype=np.float32)
    img[disk] = body_level
    if label == ClassLabel.PNEUMONIA:
        img[disk & (yy < cy)] += CLASS_SIGNAL
    elif label == ClassLabel.COVID19:
        img[disk & (xx < cx)] += CLASS_SIGNAL
    noise = rng.normal(0.0, NOISE_SIGMA, size=(res, res)).astype(np.float32)
    img[disk] += noise[disk]
    if table_artifact:
        top = int(round(0.92 * res))
        bottom = int(round(0.96 * res))
        left = int(round(0.15 * res))
        right = int(round(0.85 * res))
        img[top:bottom, left:right] = 0.8
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(out_dir, patients_per_class=20,
                               slices_per_patient=4, resolution=64, seed=0,
                               table_artifact=False):
    """Write images plus a metadata CSV under out_dir.

    Layout: out_dir/images/<patient_id>/<slice>.png and out_dir/metadata.csv
    with the standard metadata columns. Pneumonia and covid slices are all
    abnormality-marked; nothing is background-removed.

    Returns the path to the metadata CSV.
    """
    os.makedirs(out_dir, exist_ok=True)
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)

    rows = []
    for label in ClassLabel:
        name = CLASS_NAMES[label]
        for p in range(patients_per_class):
            pid = f"{name}-{p:03d}"
            patient_rng = np.random.default_rng([seed, int(label), p])
            cy = resolution * (0.5 + patient_rng.uniform(-0.01, 0.01))
            cx = resolution * (0.5 + patient_rng.uniform(-0.01, 0.01))
            radius = resolution * patient_rng.uniform(0.32, 0.35)
            body_level = patient_rng.uniform(0.42, 0.48)
            patient_dir = os.path.join(images_dir, pid)
            os.makedirs(patient_dir, exist_ok=True)
            for s in range(slices_per_patient):
                slice_rng = np.random.default_rng([seed, int(label), p, s])
                img = _render_slice(resolution, (cy, cx), radius, body_level,
                                    label, slice_rng, table_artifact)
                rel = os.path.join("images", pid, f"{s:02d}.png")
                save_image_png(os.path.join(out_dir, rel), img)
                rows.append({
                    "patient_id": pid,
                    "volume_id": f"{pid}-v0",
                    "slice_path": rel,
                    "class": name,
                    "abnormality_marked":
                        "true" if label != ClassLabel.NORMAL else "false",
                    "background_removed": "false",
                })

    metadata_path = os.path.join(out_dir, "metadata.csv")
    with open(metadata_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(METADATA_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    return metadata_path


def quadrant_means(image):
    """Mean intensity of each quadrant; a linearly separating feature for
    the synthetic classes, used by sanity probes."""
    h, w = image.shape
    return np.array([
        image[:h // 2, :w // 2].mean(),
        image[:h // 2, w // 2:].mean(),
        image[h // 2:, :w // 2].mean(),
        image[h // 2:, w // 2:].mean(),
    ], dtype=np.float64)
