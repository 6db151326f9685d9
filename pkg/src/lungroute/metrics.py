"""Evaluation suite: confusion matrix, per-class precision/recall/F1,
macro averages, and macro one-vs-rest AUC via the Mann-Whitney statistic
with 0.5 credit for ties.

Undefined quantities follow documented conventions: 0/0 precision, recall,
or F1 is reported as 0 with a degeneracy flag; a class with no positives or
no negatives has undefined AUC and is excluded from the macro average, with
the exclusion recorded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lungroute.data import DISEASES, NUM_CLASSES
from lungroute.errors import ValidationError

AUC_VARIANT = "one-vs-rest macro, Mann-Whitney with 0.5 tie credit"


def confusion(true_labels, predicted_labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """counts[t][p] = number of samples with true class t predicted as p."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValidationError(f"label lengths differ: {t.shape[0]} vs {p.shape[0]}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    if t.size == 0:
        return counts
    if t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValidationError(f"labels out of range for {num_classes} classes")
    np.add.at(counts, (t, p), 1)
    return counts


@dataclass
class ClassPRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool  # any of the three hit the 0/0 convention


def class_prf(counts: np.ndarray, c: int) -> ClassPRF:
    counts = np.asarray(counts)
    if not 0 <= c < counts.shape[0]:
        raise ValidationError(f"class {c} out of range")
    tp = float(counts[c, c])
    fp = float(counts[:, c].sum() - tp)
    fn = float(counts[c, :].sum() - tp)
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ClassPRF(precision, recall, f1, degenerate)


@dataclass
class MacroMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[ClassPRF]


def macro_prf(counts: np.ndarray) -> MacroMetrics:
    """Unweighted per-class means plus overall accuracy (trace/total)."""
    counts = np.asarray(counts)
    total = int(counts.sum())
    if total == 0:
        raise ValidationError("cannot compute metrics over zero samples")
    per_class = [class_prf(counts, c) for c in range(counts.shape[0])]
    return MacroMetrics(
        accuracy=float(np.trace(counts)) / total,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        per_class=per_class,
    )


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_binary(scores, positives):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Returns None when the input contains only one class (undefined AUC).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    if scores.shape != positives.shape:
        raise ValidationError(f"lengths differ: {scores.shape[0]} vs {positives.shape[0]}")
    n_pos = int(positives.sum())
    n_neg = int(len(positives) - n_pos)
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[positives].sum())
    u = rank_sum - 0.5 * n_pos * (n_pos + 1)
    return u / (n_pos * n_neg)


@dataclass
class AucResult:
    macro_auc: float
    per_class: list  # float per class, None where undefined
    skipped_classes: tuple[int, ...]


def macro_auc_ovr(prob_matrix, true_labels) -> AucResult:
    """Mean one-vs-rest AUC over classes; undefined classes are skipped."""
    P = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64).ravel()
    if P.ndim != 2 or P.shape[0] != y.shape[0]:
        raise ValidationError(
            f"probability matrix {P.shape} does not match {y.shape[0]} labels"
        )
    if len(np.unique(y)) < 2:
        raise ValidationError("one-vs-rest AUC needs at least two classes present")
    per_class = []
    skipped = []
    for c in range(P.shape[1]):
        auc = auc_binary(P[:, c], y == c)
        per_class.append(auc)
        if auc is None:
            skipped.append(c)
    defined = [a for a in per_class if a is not None]
    return AucResult(float(np.mean(defined)), per_class, tuple(skipped))


@dataclass
class MetricsReport:
    """Everything the comparison table needs, plus degeneracy bookkeeping."""

    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float
    per_class: list[ClassPRF]
    confusion: np.ndarray
    auc_per_class: list
    auc_skipped_classes: tuple[int, ...]
    auc_variant: str = AUC_VARIANT
    probability_source: str = "direct"
    gender_accuracy: float | None = None

    def validate(self) -> None:
        values = [self.accuracy, self.macro_precision, self.macro_recall,
                  self.macro_f1, self.macro_auc]
        for m in self.per_class:
            values += [m.precision, m.recall, m.f1]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValidationError("metric values must lie in [0, 1]")
        per = self.per_class
        if abs(self.macro_f1 - np.mean([m.f1 for m in per])) > 1e-12:
            raise ValidationError("macro_f1 is not the mean of per-class F1")
        if abs(self.macro_precision - np.mean([m.precision for m in per])) > 1e-12:
            raise ValidationError("macro_precision is not the mean of per-class precision")
        if abs(self.macro_recall - np.mean([m.recall for m in per])) > 1e-12:
            raise ValidationError("macro_recall is not the mean of per-class recall")

    def to_json(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "auc_variant": self.auc_variant,
            "probability_source": self.probability_source,
            "auc_per_class": [a for a in self.auc_per_class],
            "auc_skipped_classes": list(self.auc_skipped_classes),
            "per_class": {
                DISEASES[c]: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "degenerate": m.degenerate,
                }
                for c, m in enumerate(self.per_class)
            },
            "confusion": np.asarray(self.confusion).tolist(),
        }
        if self.gender_accuracy is not None:
            out["gender_accuracy"] = self.gender_accuracy
        return out


def build_report(true_labels, predicted_labels, prob_matrix,
                 gender_accuracy=None, probability_source="direct") -> MetricsReport:
    """Assemble the full report from labels and class probabilities."""
    counts = confusion(true_labels, predicted_labels)
    macro = macro_prf(counts)
    auc = macro_auc_ovr(prob_matrix, true_labels)
    report = MetricsReport(
        accuracy=macro.accuracy,
        macro_precision=macro.macro_precision,
        macro_recall=macro.macro_recall,
        macro_f1=macro.macro_f1,
        macro_auc=auc.macro_auc,
        per_class=macro.per_class,
        confusion=counts,
        auc_per_class=auc.per_class,
        auc_skipped_classes=auc.skipped_classes,
        probability_source=probability_source,
        gender_accuracy=gender_accuracy,
    )
    report.validate()
    return report


def format_table(rows) -> str:
    """Two-or-more-row comparison table: Method | Accuracy | Macro-F1 | Macro-AUC."""
    lines = ["Method | Accuracy | Macro-F1 | Macro-AUC"]
    lines.append("-" * len(lines[0]))
    for name, report in rows:
        lines.append(
            f"{name} | {report.accuracy:.4f} | {report.macro_f1:.4f} | {report.macro_auc:.4f}"
        )
    return "\n".join(lines)


def format_report_text(name: str, report: MetricsReport) -> str:
    """One model's table row plus its per-class breakdown."""
    lines = [format_table([(name, report)]), ""]
    lines.append("class | precision | recall | f1")
    for c, m in enumerate(report.per_class):
        flag = "  (degenerate)" if m.degenerate else ""
        lines.append(f"{DISEASES[c]} | {m.precision:.4f} | {m.recall:.4f} | {m.f1:.4f}{flag}")
    if report.auc_skipped_classes:
        skipped = ", ".join(DISEASES[c] for c in report.auc_skipped_classes)
        lines.append(f"macro-AUC excludes undefined classes: {skipped}")
    lines.append(f"AUC variant: {report.auc_variant} ({report.probability_source})")
    if report.gender_accuracy is not None:
        lines.append(f"gender accuracy: {report.gender_accuracy:.4f}")
    return "\n".join(lines)
