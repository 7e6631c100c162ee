"""Study metadata ingestion, manifest files, and patient-level splits.

A metadata table (CSV) describes CT slices with columns patient_id,
volume_id, slice_path, class, abnormality_marked, background_removed.
build_manifest turns it into per-image records under the selection rules:
pneumonia and covid slices are kept only when radiologist-marked abnormal,
normal slices unconditionally, volumes with removed backgrounds are dropped
entirely, and referenced files must exist on disk.

The manifest CSV itself has exactly the columns
filepath,patient_id,class,split and is the interchange format between the
build, train, and eval stages.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from ..errors import DataError


class ClassLabel(IntEnum):
    NORMAL = 0
    PNEUMONIA = 1
    COVID19 = 2


CLASS_NAMES = {
    ClassLabel.NORMAL: "normal",
    ClassLabel.PNEUMONIA: "pneumonia",
    ClassLabel.COVID19: "covid19",
}

DISPLAY_NAMES = {
    ClassLabel.NORMAL: "Normal",
    ClassLabel.PNEUMONIA: "Non-COVID-19",
    ClassLabel.COVID19: "COVID-19",
}

_ALIASES = {
    "normal": ClassLabel.NORMAL,
    "0": ClassLabel.NORMAL,
    "pneumonia": ClassLabel.PNEUMONIA,
    "cp": ClassLabel.PNEUMONIA,
    "non-covid": ClassLabel.PNEUMONIA,
    "non-covid-19": ClassLabel.PNEUMONIA,
    "1": ClassLabel.PNEUMONIA,
    "covid19": ClassLabel.COVID19,
    "covid-19": ClassLabel.COVID19,
    "ncp": ClassLabel.COVID19,
    "2": ClassLabel.COVID19,
}

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("filepath", "patient_id", "class", "split")
METADATA_COLUMNS = ("patient_id", "volume_id", "slice_path", "class",
                    "abnormality_marked", "background_removed")


def parse_class(text):
    try:
        return _ALIASES[str(text).strip().lower()]
    except KeyError:
        raise DataError(
            f"unknown class label {text!r}; expected one of "
            f"{sorted(set(_ALIASES))}") from None


def _parse_bool(text, column, line):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "y"):
        return True
    if t in ("0", "false", "no", "n", ""):
        return False
    raise DataError(f"line {line}: column {column!r} has non-boolean value {text!r}")


@dataclass
class ImageRecord:
    """One usable CT slice."""

    filepath: str
    patient_id: str
    label: ClassLabel
    split: str = ""

    def as_row(self):
        return [self.filepath, self.patient_id, CLASS_NAMES[self.label],
                self.split]


@dataclass
class ExclusionReport:
    """What build_manifest dropped, and why."""

    total_rows: int = 0
    kept: int = 0
    background_removed_volumes: list = field(default_factory=list)
    slices_in_removed_volumes: int = 0
    unmarked_slices: int = 0
    missing_files: list = field(default_factory=list)

    def summary(self):
        lines = [
            f"metadata rows:               {self.total_rows}",
            f"kept:                        {self.kept}",
            f"volumes dropped (background removed): "
            f"{len(self.background_removed_volumes)} "
            f"({self.slices_in_removed_volumes} slices)",
            f"abnormality-unmarked slices dropped: {self.unmarked_slices}",
            f"missing files:               {len(self.missing_files)}",
        ]
        for path in self.missing_files[:10]:
            lines.append(f"  missing: {path}")
        if len(self.missing_files) > 10:
            lines.append(f"  ... and {len(self.missing_files) - 10} more")
        return "\n".join(lines)


def read_metadata(path):
    """Rows of a metadata CSV as dicts, validating the header."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty")
        missing = set(METADATA_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise DataError(
                f"{path} is missing metadata columns: {', '.join(sorted(missing))}")
        return list(reader)


def build_manifest(metadata, image_root):
    """Select usable slices from metadata rows.

    Args:
        metadata: path to a metadata CSV, or an iterable of row dicts.
        image_root: directory slice_path values are relative to.

    Returns:
        (records, report): kept ImageRecords (split unset) and an
        ExclusionReport accounting for every dropped row.
    """
    if isinstance(metadata, (str, os.PathLike)):
        rows = read_metadata(metadata)
    else:
        rows = list(metadata)
    report = ExclusionReport(total_rows=len(rows))

    # First pass: a volume flagged background_removed on any row is dropped
    # as a whole, so collect the flags before filtering.
    removed_volumes = set()
    for i, row in enumerate(rows, start=2):
        if _parse_bool(row["background_removed"], "background_removed", i):
            removed_volumes.add(row["volume_id"])
    report.background_removed_volumes = sorted(removed_volumes)

    records = []
    for i, row in enumerate(rows, start=2):
        if row["volume_id"] in removed_volumes:
            report.slices_in_removed_volumes += 1
            continue
        label = parse_class(row["class"])
        if label in (ClassLabel.PNEUMONIA, ClassLabel.COVID19):
            if not _parse_bool(row["abnormality_marked"], "abnormality_marked", i):
                report.unmarked_slices += 1
                continue
        path = os.path.join(image_root, row["slice_path"])
        if not os.path.isfile(path):
            report.missing_files.append(row["slice_path"])
            continue
        # Store the root-relative path so the manifest stays portable;
        # consumers join it with their own data root.
        records.append(ImageRecord(filepath=row["slice_path"],
                                   patient_id=row["patient_id"], label=label))
    report.kept = len(records)
    return records, report


def _allocate(n, fractions):
    """Largest-remainder split of n items into len(fractions) buckets."""
    quotas = [n * f for f in fractions]
    base = [int(q) for q in quotas]
    leftover = n - sum(base)
    remainders = sorted(range(len(fractions)),
                        key=lambda i: (-(quotas[i] - base[i]), i))
    for i in remainders[:leftover]:
        base[i] += 1
    return base


def patient_level_split(records, fractions=(0.6, 0.2, 0.2), seed=0):
    """Assign train/val/test splits so no patient straddles splits.

    Patients are grouped per class, shuffled deterministically (sorted ids,
    then a seeded permutation), and divided by largest-remainder allocation
    of the fractions. Classes with fewer than 3 patients trigger a warning
    and a global (unstratified) fallback so tiny datasets still split.

    Returns a new list of records with split set; input records are not
    modified.
    """
    if len(fractions) != 3:
        raise DataError("fractions must be (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise DataError(f"fractions must be non-negative and sum to 1, got "
                        f"{fractions}")

    by_patient = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)

    def patient_class(recs):
        # Patients are expected to carry one class; if not, majority rules
        # with ties to the lowest label so the outcome stays deterministic.
        counts = {}
        for r in recs:
            counts[r.label] = counts.get(r.label, 0) + 1
        return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]

    groups = {}
    for pid in sorted(by_patient):
        groups.setdefault(patient_class(by_patient[pid]), []).append(pid)

    rng = np.random.default_rng(seed)
    assignment = {}

    def assign(patients):
        patients = list(patients)  # already sorted
        perm = rng.permutation(len(patients))
        shuffled = [patients[i] for i in perm]
        counts = _allocate(len(shuffled), fractions)
        start = 0
        for split, count in zip(SPLITS, counts):
            for pid in shuffled[start:start + count]:
                assignment[pid] = split
            start += count

    tiny = [label for label, pids in sorted(groups.items()) if len(pids) < 3]
    if tiny:
        names = ", ".join(CLASS_NAMES[t] for t in tiny)
        warnings.warn(
            f"class(es) {names} have fewer than 3 patients; falling back to "
            f"a global unstratified patient split", stacklevel=2)
        assign(sorted(by_patient))
    else:
        for label in sorted(groups):
            assign(groups[label])

    out = []
    for rec in records:
        out.append(ImageRecord(filepath=rec.filepath,
                               patient_id=rec.patient_id, label=rec.label,
                               split=assignment[rec.patient_id]))
    return out


def write_manifest(path, records):
    """Write records as the four-column manifest CSV."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            writer.writerow(rec.as_row())


def read_manifest(path):
    """Read a manifest CSV back into ImageRecords."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or list(reader.fieldnames) != list(MANIFEST_COLUMNS):
            raise DataError(
                f"{path} is not a manifest: expected columns "
                f"{','.join(MANIFEST_COLUMNS)}, got "
                f"{','.join(reader.fieldnames or ['<empty>'])}")
        records = []
        for i, row in enumerate(reader, start=2):
            split = row["split"]
            if split not in ("",) + SPLITS:
                raise DataError(f"{path} line {i}: unknown split {split!r}")
            records.append(ImageRecord(filepath=row["filepath"],
                                       patient_id=row["patient_id"],
                                       label=parse_class(row["class"]),
                                       split=split))
    return records


def split_records(records):
    """Group manifest records by split name."""
    out = {s: [] for s in SPLITS}
    for rec in records:
        if rec.split not in out:
            raise DataError(
                f"record {rec.filepath} has no split assigned; run the "
                f"splitter or build the manifest first")
        out[rec.split].append(rec)
    return out
