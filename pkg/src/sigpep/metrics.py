"""Evaluation metrics: MCC variants, Cohen's kappa, balanced accuracy, and
exact-match cleavage-site precision/recall, reported per SP type and
organism group.

MCC1 restricts the negative set of a type to NO-SP proteins of the group;
MCC2 adds every remaining sequence of the group to the negatives.  The
overall multiclass MCC is the generalized R_K statistic over the 6x6
confusion table.  Empty evaluation cells report as absent (None), never 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .seqio import NUM_TYPES, OrganismGroup, SpType


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class LabeledPrediction:
    """One evaluated record: gold vs predicted type (and CS when applicable)."""
    gold_type: SpType
    pred_type: SpType
    group: OrganismGroup = OrganismGroup.UNKNOWN
    gold_cs: int | None = None
    pred_cs: int | None = None


def mcc(c: ConfusionCounts) -> float:
    """Binary Matthews correlation; zero-denominator cells report 0."""
    num = c.tp * c.tn - c.fp * c.fn
    den = ((c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn))
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


def confusion_for_target(pairs: Iterable[tuple[SpType, SpType]],
                         target: SpType) -> ConfusionCounts:
    c = ConfusionCounts()
    for gold, pred in pairs:
        pos_gold = gold == target
        pos_pred = pred == target
        if pos_gold and pos_pred:
            c.tp += 1
        elif pos_gold:
            c.fn += 1
        elif pos_pred:
            c.fp += 1
        else:
            c.tn += 1
    return c


def mcc1_mcc2(records: Sequence[LabeledPrediction], target: SpType,
              group: OrganismGroup | None = None) -> tuple[float | None, float | None]:
    """(MCC1, MCC2) for one SP type, optionally restricted to one group.

    Returns (None, None) when the cell has no gold records of the target type.
    """
    if group is not None:
        records = [r for r in records if r.group == group]
    golds_of_type = [r for r in records if r.gold_type == target]
    if not golds_of_type:
        return None, None
    set1 = [(r.gold_type, r.pred_type) for r in records
            if r.gold_type in (target, SpType.NO_SP)]
    set2 = [(r.gold_type, r.pred_type) for r in records]
    return (mcc(confusion_for_target(set1, target)),
            mcc(confusion_for_target(set2, target)))


def multiclass_mcc(golds: Sequence[int], preds: Sequence[int],
                   k: int = NUM_TYPES) -> float:
    """Generalized R_K correlation over the full confusion table."""
    cm = np.zeros((k, k), dtype=np.int64)
    for g, p in zip(golds, preds):
        cm[int(g), int(p)] += 1
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1).astype(np.float64)  # gold marginals
    p = cm.sum(axis=0).astype(np.float64)  # predicted marginals
    num = c * s - float(t @ p)
    den = math.sqrt(float(s * s - p @ p)) * math.sqrt(float(s * s - t @ t))
    if den == 0:
        return 0.0
    return num / den


def kappa(golds: Sequence[int], preds: Sequence[int], k: int = NUM_TYPES) -> float:
    """Cohen's kappa: (p_o - p_e) / (1 - p_e); p_e == 1 reports 0."""
    golds = np.asarray(golds, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    n = len(golds)
    if n == 0:
        return 0.0
    po = float(np.mean(golds == preds))
    pe = 0.0
    for j in range(k):
        pe += float(np.mean(golds == j)) * float(np.mean(preds == j))
    if pe == 1.0:
        return 0.0
    return (po - pe) / (1.0 - pe)


def balanced_accuracy_binary(c: ConfusionCounts) -> float:
    tpr = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    tnr = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else 0.0
    return (tpr + tnr) / 2.0


def balanced_accuracy(golds: Sequence[int], preds: Sequence[int],
                      k: int = NUM_TYPES) -> float:
    """Multiclass variant: mean per-class recall over classes present in gold."""
    golds = np.asarray(golds, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    recalls = []
    for j in range(k):
        sel = golds == j
        if sel.any():
            recalls.append(float(np.mean(preds[sel] == j)))
    if not recalls:
        return 0.0
    return float(np.mean(recalls))


def cs_precision_recall(records: Sequence[LabeledPrediction],
                        target: SpType | None = None,
                        group: OrganismGroup | None = None
                        ) -> tuple[float | None, float | None]:
    """Exact-position CS precision/recall; a site counts only when the
    predicted type also matches gold."""
    recs = list(records)
    if group is not None:
        recs = [r for r in recs if r.group == group]
    if target is not None:
        predicted = [r for r in recs if r.pred_type == target and r.pred_cs is not None]
        golds = [r for r in recs if r.gold_type == target]
    else:
        predicted = [r for r in recs if r.pred_type != SpType.NO_SP and r.pred_cs is not None]
        golds = [r for r in recs if r.gold_type != SpType.NO_SP]
    correct = sum(
        1 for r in predicted
        if r.gold_type == r.pred_type and r.gold_cs is not None and r.pred_cs == r.gold_cs)
    precision = correct / len(predicted) if predicted else None
    recall = correct / len(golds) if golds else None
    return precision, recall


@dataclass
class MetricsReport:
    overall_mcc: float = 0.0
    overall_kappa: float = 0.0
    overall_balanced_accuracy: float = 0.0
    # (group, type) -> metric name -> value or None
    cells: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # (group, type) -> gold count

    def to_tsv(self) -> str:
        lines = [
            f"OVERALL\tALL\tmcc\t{_fmt(self.overall_mcc)}",
            f"OVERALL\tALL\tkappa\t{_fmt(self.overall_kappa)}",
            f"OVERALL\tALL\tbalanced_accuracy\t{_fmt(self.overall_balanced_accuracy)}",
        ]
        for (grp, sp), metrics in self.cells.items():
            for mname, value in metrics.items():
                lines.append(f"{grp.name}\t{sp.name}\t{mname}\t{_fmt(value)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "absent" if v is None else f"{v:.6f}"


def evaluate(records: Sequence[LabeledPrediction]) -> MetricsReport:
    """The full report: overall metrics plus per (group, SP type) cells."""
    golds = [int(r.gold_type) for r in records]
    preds = [int(r.pred_type) for r in records]
    report = MetricsReport(
        overall_mcc=multiclass_mcc(golds, preds),
        overall_kappa=kappa(golds, preds),
        overall_balanced_accuracy=balanced_accuracy(golds, preds),
    )
    groups = sorted({r.group for r in records}, key=lambda g: g.value)
    for grp in groups:
        grp_records = [r for r in records if r.group == grp]
        for sp in SpType:
            if sp == SpType.NO_SP:
                continue
            m1, m2 = mcc1_mcc2(grp_records, sp)
            p, rec = cs_precision_recall(grp_records, target=sp)
            n_gold = sum(1 for r in grp_records if r.gold_type == sp)
            if n_gold == 0 and m1 is None and p is None and rec is None:
                continue
            report.cells[(grp, sp)] = {
                "mcc1": m1, "mcc2": m2, "cs_precision": p, "cs_recall": rec,
            }
            report.counts[(grp, sp)] = n_gold
    return report


def score_label_pairs(records: Sequence[LabeledPrediction],
                      probs: Sequence[np.ndarray]) -> list[tuple[str, float, int]]:
    """Raw (type, score, is-gold) rows for external ROC/PR plotting."""
    rows = []
    for r, p in zip(records, probs):
        for sp in SpType:
            if sp == SpType.NO_SP:
                continue
            rows.append((sp.name, float(p[int(sp)]), int(r.gold_type == sp)))
    return rows
