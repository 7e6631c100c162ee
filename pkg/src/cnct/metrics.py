"""Confusion matrices, per-class metrics, and the screening constraints.

Sensitivity is computed row-wise (per true class), positive predictive
value column-wise (per predicted class), both in percent. A class with no
true examples has undefined sensitivity, and one never predicted has
undefined PPV; undefined stays None rather than masquerading as zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .data.manifest import DISPLAY_NAMES, ClassLabel
from .errors import ConfigError, DataError

NUM_CLASSES = 3
COVID = int(ClassLabel.COVID19)

SENSITIVITY_FLOOR = 95.0
PPV_FLOOR = 95.0


@dataclass
class ConfusionMatrix:
    """Counts[true, predicted] over the three classes."""

    counts: np.ndarray = field(
        default_factory=lambda: np.zeros((NUM_CLASSES, NUM_CLASSES), np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ConfigError(
                f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, got "
                f"{self.counts.shape}")

    def update(self, true_labels, predicted_labels):
        true_labels = np.asarray(true_labels).ravel()
        predicted_labels = np.asarray(predicted_labels).ravel()
        if true_labels.shape != predicted_labels.shape:
            raise ConfigError("label arrays must have matching lengths")
        for t, p in zip(true_labels, predicted_labels):
            self.counts[int(t), int(p)] += 1

    @property
    def total(self):
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and \
            np.array_equal(self.counts, other.counts)

    def format(self):
        names = [DISPLAY_NAMES[c] for c in ClassLabel]
        width = max(len(n) for n in names) + 2
        header = " " * width + "".join(n.rjust(width) for n in names)
        lines = [header]
        for i, name in enumerate(names):
            row = name.rjust(width) + "".join(
                str(int(v)).rjust(width) for v in self.counts[i])
            lines.append(row)
        return "\n".join(lines)


def confusion_from_predictions(true_labels, predicted_labels):
    cm = ConfusionMatrix()
    cm.update(true_labels, predicted_labels)
    return cm


@dataclass
class MetricsReport:
    """Accuracy plus per-class sensitivity and PPV, all in percent."""

    accuracy: float
    sensitivity: tuple
    ppv: tuple
    confusion: ConfusionMatrix

    def format(self):
        lines = [f"accuracy: {self.accuracy:.2f}%", ""]
        width = max(len(DISPLAY_NAMES[c]) for c in ClassLabel) + 2
        lines.append(" " * 14 + "".join(
            DISPLAY_NAMES[c].rjust(width) for c in ClassLabel))

        def fmt(v):
            return ("n/a" if v is None else f"{v:.2f}").rjust(width)

        lines.append("sensitivity % " + "".join(fmt(v) for v in self.sensitivity))
        lines.append("ppv %         " + "".join(fmt(v) for v in self.ppv))
        return "\n".join(lines)


def metrics_from_confusion(cm):
    """Accuracy, sensitivity, and PPV from a ConfusionMatrix."""
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise DataError("cannot compute metrics from an empty confusion matrix")
    diag = np.diag(counts)
    accuracy = 100.0 * float(diag.sum()) / float(total)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    sensitivity = tuple(
        100.0 * float(diag[i]) / float(row[i]) if row[i] else None
        for i in range(NUM_CLASSES))
    ppv = tuple(
        100.0 * float(diag[i]) / float(col[i]) if col[i] else None
        for i in range(NUM_CLASSES))
    return MetricsReport(accuracy=accuracy, sensitivity=sensitivity, ppv=ppv,
                         confusion=cm)


@dataclass
class ConstraintReport:
    """Outcome of the screening deployment gate."""

    passed: bool
    reasons: list = field(default_factory=list)

    def format(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"operational constraints: {status}"]
        lines += [f"  - {r}" for r in self.reasons]
        return "\n".join(lines)


def check_operational_constraints(report, sensitivity_floor=SENSITIVITY_FLOOR,
                                  ppv_floor=PPV_FLOOR):
    """Gate a MetricsReport on the covid class: sensitivity and PPV must
    both reach their floors (inclusive). Undefined values fail the gate."""
    reasons = []
    name = DISPLAY_NAMES[ClassLabel.COVID19]
    sens = report.sensitivity[COVID]
    ppv = report.ppv[COVID]
    if sens is None:
        reasons.append(f"{name} sensitivity undefined (no true cases evaluated)")
    elif sens < sensitivity_floor:
        reasons.append(f"{name} sensitivity {sens:.2f}% below "
                       f"{sensitivity_floor:.1f}%")
    if ppv is None:
        reasons.append(f"{name} PPV undefined (never predicted)")
    elif ppv < ppv_floor:
        reasons.append(f"{name} PPV {ppv:.2f}% below {ppv_floor:.1f}%")
    if not reasons:
        reasons.append(
            f"{name} sensitivity {sens:.2f}% >= {sensitivity_floor:.1f}% and "
            f"PPV {ppv:.2f}% >= {ppv_floor:.1f}%")
        return ConstraintReport(passed=True, reasons=reasons)
    return ConstraintReport(passed=False, reasons=reasons)
