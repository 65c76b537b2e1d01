"""Agreement statistics and evaluation reports: Cohen's kappa (overall and
one-vs-rest per label), accuracy, precision/recall/F1, confusion matrices,
paired significance tests, retrieval label-match rates and confidence
triage curves.

Only targets with gold labels are evaluated; invalid and null predictions
are excluded from agreement metrics but reported as coverage so that
conditions failing on harder examples cannot silently inflate scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats

from . import _kernels
from .corpus import Label

LABELS = tuple(Label)
_LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    gold: Label
    predicted: Optional[Label]
    confidence: float
    valid: bool
    ref: tuple[str, int]


def evaluated_pairs(pairs: Sequence[EvalPair]) -> list[EvalPair]:
    """Pairs entering agreement metrics: valid with a non-null prediction."""
    return [p for p in pairs if p.valid and p.predicted is not None]


def coverage(pairs: Sequence[EvalPair]) -> float:
    """Valid non-null fraction of all gold-labeled targets."""
    if not pairs:
        return 0.0
    return len(evaluated_pairs(pairs)) / len(pairs)


def confusion_counts(pairs: Sequence[EvalPair]) -> np.ndarray:
    """6x6 gold x predicted counts over evaluated pairs."""
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    for pair in evaluated_pairs(pairs):
        counts[_LABEL_INDEX[pair.gold], _LABEL_INDEX[pair.predicted]] += 1
    return counts


def normalized_confusion(counts: np.ndarray) -> np.ndarray:
    """Row-normalized view: each gold row sums to 1, all-zero rows stay 0."""
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.where(sums > 0, counts / np.maximum(sums, 1.0), 0.0)


def _kappa_from_confusion(counts: np.ndarray) -> float:
    """Cohen's kappa from a square confusion matrix.

        kappa = (p_o - p_e) / (1 - p_e)

    where p_o is the observed agreement (diagonal mass) and p_e the chance
    agreement from the marginal products.  Degenerate case p_e = 1 (both
    raters constant): kappa is 1 for perfect agreement, else 0.
    """
    total = counts.sum()
    if total == 0:
        raise EvaluationError("kappa needs at least one evaluated pair")
    p_o = float(np.trace(counts)) / total
    gold_marg = counts.sum(axis=1) / total
    pred_marg = counts.sum(axis=0) / total
    p_e = float(np.dot(gold_marg, pred_marg))
    if p_e >= 1.0:
        return 1.0 if p_o >= 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def cohens_kappa(pairs: Sequence[EvalPair]) -> float:
    return _kappa_from_confusion(confusion_counts(pairs))


def per_label_kappa(pairs: Sequence[EvalPair], label: Label) -> Optional[float]:
    """One-vs-rest kappa for a single label.

    Gold and predictions are binarized against the label and fed through
    the same kappa formula.  When the label appears in neither gold nor
    predictions the statistic is degenerate and reported as None.
    """
    evaluated = evaluated_pairs(pairs)
    if not evaluated:
        raise EvaluationError("kappa needs at least one evaluated pair")
    counts = np.zeros((2, 2), dtype=np.int64)
    for pair in evaluated:
        counts[int(pair.gold is label), int(pair.predicted is label)] += 1
    if counts[1].sum() == 0 and counts[:, 1].sum() == 0:
        return None
    return _kappa_from_confusion(counts)


def accuracy(pairs: Sequence[EvalPair]) -> float:
    evaluated = evaluated_pairs(pairs)
    if not evaluated:
        raise EvaluationError("accuracy needs at least one evaluated pair")
    return sum(1 for p in evaluated if p.predicted is p.gold) / len(evaluated)


@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    kappa: float
    accuracy: float
    per_label: dict[str, LabelMetrics]
    per_label_kappa: dict[str, Optional[float]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    evaluated_n: int
    total_n: int
    coverage: float
    confusion: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "accuracy": self.accuracy,
            "per_label": {
                code: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for code, m in self.per_label.items()
            },
            "per_label_kappa": self.per_label_kappa,
            "macro_avg": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "weighted_avg": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "evaluated_n": self.evaluated_n,
            "total_n": self.total_n,
            "coverage": self.coverage,
            "confusion": [list(row) for row in self.confusion],
        }


def classification_report(pairs: Sequence[EvalPair]) -> MetricsReport:
    """Per-label precision/recall/F1/support plus accuracy, macro averages
    (unweighted means) and weighted averages (support-weighted means)."""
    evaluated = evaluated_pairs(pairs)
    if not evaluated:
        raise EvaluationError("classification report needs at least one evaluated pair")
    counts = confusion_counts(pairs)
    per_label: dict[str, LabelMetrics] = {}
    precisions, recalls, f1s, supports = [], [], [], []
    for i, label in enumerate(LABELS):
        tp = float(counts[i, i])
        fp = float(counts[:, i].sum() - counts[i, i])
        fn = float(counts[i, :].sum() - counts[i, i])
        support = int(counts[i, :].sum())
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_label[label.code] = LabelMetrics(precision, recall, f1, support)
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)
    total = sum(supports)
    weights = [s / total for s in supports]
    return MetricsReport(
        kappa=_kappa_from_confusion(counts),
        accuracy=float(np.trace(counts)) / total,
        per_label=per_label,
        per_label_kappa={label.code: per_label_kappa(pairs, label) for label in LABELS},
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
        weighted_precision=float(np.dot(weights, precisions)),
        weighted_recall=float(np.dot(weights, recalls)),
        weighted_f1=float(np.dot(weights, f1s)),
        evaluated_n=total,
        total_n=len(pairs),
        coverage=len(evaluated) / len(pairs),
        confusion=tuple(tuple(int(x) for x in row) for row in counts),
    )


def format_report(report: MetricsReport) -> str:
    """Aligned-text table mirroring classification-report layouts."""
    lines = [f"{'':6s} {'Precision':>9s} {'Recall':>8s} {'F1':>6s} {'Support':>8s} {'Kappa':>7s}"]
    for code, m in report.per_label.items():
        kap = report.per_label_kappa.get(code)
        kap_text = f"{kap:7.3f}" if kap is not None else "      -"
        lines.append(
            f"{code:6s} {m.precision:9.2f} {m.recall:8.2f} {m.f1:6.2f} {m.support:8d} {kap_text}"
        )
    lines.append("")
    lines.append(f"Accuracy      {report.accuracy:.3f}  (n = {report.evaluated_n})")
    lines.append(
        f"Macro avg     P {report.macro_precision:.2f}  R {report.macro_recall:.2f}  F1 {report.macro_f1:.2f}"
    )
    lines.append(
        f"Weighted avg  P {report.weighted_precision:.2f}  R {report.weighted_recall:.2f}  F1 {report.weighted_f1:.2f}"
    )
    lines.append(f"Cohen's kappa {report.kappa:.3f}")
    lines.append(f"Coverage      {report.coverage:.3f}  ({report.evaluated_n}/{report.total_n})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# paired significance tests


def align_pairs(
    pairs_a: Sequence[EvalPair], pairs_b: Sequence[EvalPair]
) -> list[tuple[EvalPair, EvalPair]]:
    """Match the two conditions on targets where both are valid non-null."""
    by_ref = {p.ref: p for p in evaluated_pairs(pairs_b)}
    aligned = []
    for pair in evaluated_pairs(pairs_a):
        other = by_ref.get(pair.ref)
        if other is not None:
            aligned.append((pair, other))
    return aligned


@dataclass(frozen=True)
class PermutationReport:
    delta_kappa: float
    p_value: float
    n_permutations: int
    n_targets: int


def permutation_test(
    pairs_a: Sequence[EvalPair],
    pairs_b: Sequence[EvalPair],
    n: int = 2000,
    seed: int = 0,
) -> PermutationReport:
    """Two-sided permutation test for the kappa difference.

    The null distribution swaps the two conditions' predictions per target
    with probability 1/2, n times;

        p = (#{|delta_perm| >= |delta_obs|} + 1) / (n + 1).
    """
    aligned = align_pairs(pairs_a, pairs_b)
    if not aligned:
        raise EvaluationError("permutation test needs a non-empty aligned target set")
    gold = np.array([_LABEL_INDEX[a.gold] for a, _ in aligned], dtype=np.int64)
    pred_a = np.array([_LABEL_INDEX[a.predicted] for a, _ in aligned], dtype=np.int64)
    pred_b = np.array([_LABEL_INDEX[b.predicted] for _, b in aligned], dtype=np.int64)
    observed = _kernels._kappa_from_rows(gold, pred_a, len(LABELS)) - _kernels._kappa_from_rows(
        gold, pred_b, len(LABELS)
    )
    rng = np.random.default_rng(seed)
    swaps = rng.random((n, gold.shape[0])) < 0.5
    deltas = _kernels.permutation_deltas(gold, pred_a, pred_b, swaps, len(LABELS))
    extreme = int(np.count_nonzero(np.abs(deltas) >= abs(observed) - 1e-15))
    return PermutationReport(
        delta_kappa=float(observed),
        p_value=(extreme + 1) / (n + 1),
        n_permutations=n,
        n_targets=gold.shape[0],
    )


@dataclass(frozen=True)
class McNemarReport:
    b: int
    c: int
    p_value: float
    method: str  # "exact" | "chi2"
    degenerate: bool


def mcnemar(pairs_a: Sequence[EvalPair], pairs_b: Sequence[EvalPair]) -> McNemarReport:
    """McNemar's test on the discordant counts b (A right, B wrong) and
    c (A wrong, B right).

    Exact two-sided binomial on b out of b+c at p = 1/2; the chi-square
    approximation (b-c)^2 / (b+c) on 1 dof replaces it only when
    b + c > 25, flagged in the method field.  b + c = 0 is degenerate and
    reports p = 1.
    """
    aligned = align_pairs(pairs_a, pairs_b)
    if not aligned:
        raise EvaluationError("mcnemar needs a non-empty aligned target set")
    b = sum(1 for a, other in aligned if a.predicted is a.gold and other.predicted is not other.gold)
    c = sum(1 for a, other in aligned if a.predicted is not a.gold and other.predicted is other.gold)
    if b + c == 0:
        return McNemarReport(b=b, c=c, p_value=1.0, method="exact", degenerate=True)
    if b + c > 25:
        statistic = (b - c) ** 2 / (b + c)
        p_value = float(scipy_stats.chi2.sf(statistic, df=1))
        return McNemarReport(b=b, c=c, p_value=p_value, method="chi2", degenerate=False)
    p_value = float(scipy_stats.binomtest(min(b, c), n=b + c, p=0.5).pvalue)
    return McNemarReport(b=b, c=c, p_value=p_value, method="exact", degenerate=False)


# ---------------------------------------------------------------------------
# retrieval quality and confidence triage


@dataclass(frozen=True)
class MatchRate:
    top1: float
    any_k: float
    n: int


def retrieval_match_rate(
    traces: Sequence[tuple[Label, Sequence[Optional[Label]]]], k: int
) -> dict[str, MatchRate]:
    """Label-match rates between targets and their ranked retrieval labels.

    Each item pairs a target's gold label with the entry labels of its
    ranked hits.  top1 is the rank-1 match fraction; any_k counts a match
    anywhere in the first k hits.  Unlabeled hits never match.  Returns
    per-label rates keyed by code plus an "overall" row.
    """
    if any(labels is None for _, labels in traces):
        raise EvaluationError("retrieval traces must carry entry labels")
    top1_hits: dict[str, int] = {}
    any_hits: dict[str, int] = {}
    totals: dict[str, int] = {}
    for gold, ranked in traces:
        keys = ("overall", gold.code)
        ranked_k = list(ranked)[:k]
        top1 = bool(ranked_k) and ranked_k[0] is gold
        any_k = any(label is gold for label in ranked_k)
        for key in keys:
            totals[key] = totals.get(key, 0) + 1
            top1_hits[key] = top1_hits.get(key, 0) + int(top1)
            any_hits[key] = any_hits.get(key, 0) + int(any_k)
    return {
        key: MatchRate(
            top1=top1_hits[key] / totals[key],
            any_k=any_hits[key] / totals[key],
            n=totals[key],
        )
        for key in totals
    }


@dataclass(frozen=True)
class TriagePoint:
    threshold: float
    kappa: Optional[float]
    coverage: float
    retained: int


def confidence_triage(
    pairs: Sequence[EvalPair], thresholds: Sequence[float] = (0.9,)
) -> list[TriagePoint]:
    """Kappa and coverage of the subset with confidence >= threshold, for
    each requested threshold plus a 0.05-step curve over [0, 1]."""
    evaluated = evaluated_pairs(pairs)
    grid = sorted({round(t, 4) for t in thresholds} | {round(0.05 * i, 2) for i in range(21)})
    points = []
    for threshold in grid:
        retained = [p for p in evaluated if p.confidence >= threshold]
        kappa = _kappa_from_confusion(confusion_counts(retained)) if retained else None
        denominator = max(len(evaluated), 1)
        points.append(
            TriagePoint(
                threshold=threshold,
                kappa=kappa,
                coverage=len(retained) / denominator,
                retained=len(retained),
            )
        )
    return points
