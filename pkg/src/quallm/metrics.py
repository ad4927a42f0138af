"""Evaluation metrics: match ratios, label accuracy, multi-rater agreement,
and exact binomial significance.

The binomial test is computed with exact integer arithmetic so that tie
handling (outcomes whose probability equals the observed outcome's) is
unambiguous: the p-value is the sum of P(k) over every k with
P(k) <= P(observed), evaluated over the exact binary rational value of
the chance probability.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

SIGNIFICANCE_ALPHA = 0.05

DIRECTION_FACTUALITY = "candidate-vs-reference"
DIRECTION_COMPLETENESS = "reference-vs-candidate"


@dataclass(frozen=True)
class MatchJudgmentSet:
    """Binary yes/no judgments for one comparison direction."""

    direction: str
    judgments: tuple[tuple[str, str], ...]  # (item_id, "yes"|"no")

    def __post_init__(self) -> None:
        if self.direction not in (DIRECTION_FACTUALITY, DIRECTION_COMPLETENESS):
            raise ValueError(f"unknown direction {self.direction!r}")
        ids = [item_id for item_id, _ in self.judgments]
        if len(set(ids)) != len(ids):
            raise ValueError("judgment item_ids must be unique")
        for item_id, verdict in self.judgments:
            if verdict not in ("yes", "no"):
                raise ValueError(f"item {item_id}: verdict must be yes or no")

    @property
    def yes_count(self) -> int:
        return sum(1 for _, verdict in self.judgments if verdict == "yes")


@dataclass(frozen=True)
class MetricReport:
    """One named metric value with its sample size and optional significance."""

    name: str
    value: float
    sample_size: int
    p_value: Optional[float] = None
    significant: Optional[bool] = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        record: dict = {
            "name": self.name,
            "value": self.value,
            "sample_size": self.sample_size,
        }
        if self.p_value is not None:
            record["p_value"] = self.p_value
            record["significant_at_0.05"] = self.significant
        if self.details:
            record["details"] = self.details
        return record


def _ratio(judgments: MatchJudgmentSet, expected_direction: str, name: str) -> float:
    if judgments.direction != expected_direction:
        raise ValueError(
            f"{name} requires direction {expected_direction!r},"
            f" got {judgments.direction!r}"
        )
    if not judgments.judgments:
        raise ValueError(f"{name} is undefined on an empty judgment set")
    return judgments.yes_count / len(judgments.judgments)


def factuality(judgments: MatchJudgmentSet) -> float:
    """Precision-like share of candidate concerns confirmed in the reference."""
    return _ratio(judgments, DIRECTION_FACTUALITY, "factuality")


def completeness(judgments: MatchJudgmentSet) -> float:
    """Recall-like share of reference concerns recovered by the candidate."""
    return _ratio(judgments, DIRECTION_COMPLETENESS, "completeness")


def accuracy(gold: Mapping[str, str], predicted: Mapping[str, str]) -> float:
    """Exact-match proportion over identical item id sets."""
    missing = sorted(set(gold) ^ set(predicted))
    if missing:
        raise ValueError(
            f"gold and predicted item ids differ; mismatched ids: {missing[:10]}"
        )
    if not gold:
        raise ValueError("accuracy is undefined on empty label sets")
    matches = sum(1 for item_id in gold if gold[item_id] == predicted[item_id])
    return matches / len(gold)


def majority_label(labels: Sequence[str], catch_all: str = "Other") -> str:
    """Strict-majority label; the catch-all when no label has one."""
    if len(labels) < 2:
        raise ValueError("majority vote needs at least 2 annotators")
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    best_label, best_count = max(counts.items(), key=lambda kv: kv[1])
    if best_count * 2 > len(labels):
        return best_label
    return catch_all


# ---------------------------------------------------------------------------
# Fleiss' kappa
# ---------------------------------------------------------------------------


def fleiss_kappa(rows: Sequence[Sequence[str]]) -> float:
    """Chance-corrected multi-rater agreement over categorical labels.

    Each row holds one item's labels, one per rater; every item must be
    rated by the same number of raters. kappa = (P_bar - Pe_bar)/(1 - Pe_bar)
    with per-item agreement P_i = (sum_j n_ij^2 - r) / (r (r - 1)) and
    Pe_bar the sum of squared marginal category proportions. The
    degenerate case Pe_bar = 1 (every label identical) is defined as 1.0.
    """
    if len(rows) < 2:
        raise ValueError("fleiss_kappa needs at least 2 items")
    r = len(rows[0])
    if r < 2:
        raise ValueError("fleiss_kappa needs at least 2 raters")
    for i, row in enumerate(rows):
        if len(row) != r:
            raise ValueError(f"item {i} has {len(row)} ratings, expected {r}")

    categories = sorted({label for row in rows for label in row})
    index = {label: j for j, label in enumerate(categories)}
    table = np.zeros((len(rows), len(categories)), dtype=np.float64)
    for i, row in enumerate(rows):
        for label in row:
            table[i, index[label]] += 1

    p_items = (np.sum(table * table, axis=1) - r) / (r * (r - 1))
    p_bar = float(np.mean(p_items))
    marginals = np.sum(table, axis=0) / (len(rows) * r)
    pe_bar = float(np.sum(marginals * marginals))
    if pe_bar >= 1.0:
        return 1.0
    return (p_bar - pe_bar) / (1.0 - pe_bar)


# ---------------------------------------------------------------------------
# Exact two-sided binomial test
# ---------------------------------------------------------------------------


# Relative tie tolerance: outcomes whose probability exceeds the observed
# one by under a part in 10^10 count as ties. A decimal chance rate like
# 0.2 is not exactly 1/5 as a float, which perturbs mathematically tied
# outcome pairs by ~1 part in 10^16; genuinely distinct outcomes are
# separated by far more than this for any practical trial count.
_TIE_SCALE = 10**10


@lru_cache(maxsize=128)
def _binomial_weights(trials: int, p_num: int, p_den: int):
    """Integer outcome weights w[k] = C(n,k) a^k b^(n-k) over denominator d^n.

    All arithmetic is exact, so the tie rule behaves identically on
    every platform.
    """
    a = p_num
    b = p_den - p_num
    weights = [0] * (trials + 1)
    w = b**trials
    weights[0] = w
    for k in range(trials):
        # w(k+1) = w(k) * (n-k)/(k+1) * a/b, exact at every step
        w = w * (trials - k) * a // ((k + 1) * b)
        weights[k + 1] = w
    sorted_weights = sorted(weights)
    prefix = [0] * (trials + 2)
    for i, value in enumerate(sorted_weights):
        prefix[i + 1] = prefix[i] + value
    return weights, sorted_weights, prefix, p_den**trials


def binomial_significance(
    successes: int, trials: int, chance_p: float
) -> tuple[float, bool]:
    """Exact two-sided binomial test against a chance rate.

    Returns (p_value, significant at 0.05). The p-value sums the
    probabilities of all outcomes no more likely than the observed one
    (up to the relative tie tolerance above).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes must be within 0..trials")
    if not 0.0 < chance_p < 1.0:
        raise ValueError("chance_p must be inside (0, 1)")

    p = Fraction(chance_p)
    weights, sorted_weights, prefix, denominator = _binomial_weights(
        trials, p.numerator, p.denominator
    )
    bound = Fraction(weights[successes] * (_TIE_SCALE + 1), _TIE_SCALE)
    included = bisect_right(sorted_weights, bound)
    p_value = float(Fraction(prefix[included], denominator))
    return p_value, p_value < SIGNIFICANCE_ALPHA


def default_chance_p(option_count: int) -> float:
    """Chance rate for a judged task with *option_count* choices."""
    if option_count < 2:
        raise ValueError("a judged task needs at least 2 options")
    return 1.0 / option_count


# ---------------------------------------------------------------------------
# Annotation file formats
# ---------------------------------------------------------------------------


def load_judgments(path: Path, direction: str) -> MatchJudgmentSet:
    """Read a judgments CSV with header item_id,verdict."""
    judgments: list[tuple[str, str]] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"item_id", "verdict"} <= set(
            reader.fieldnames
        ):
            raise ValueError(f"{path}: expected header with item_id,verdict")
        for row in reader:
            judgments.append((row["item_id"], row["verdict"].strip().lower()))
    return MatchJudgmentSet(direction=direction, judgments=tuple(judgments))


def load_labels(path: Path) -> dict[str, dict[str, str]]:
    """Read a labels CSV with header item_id,annotator_id,label.

    Returns item_id -> {annotator_id -> label}.
    """
    items: dict[str, dict[str, str]] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"item_id", "annotator_id", "label"}
        if reader.fieldnames is None or not expected <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header with item_id,annotator_id,label")
        for row in reader:
            items.setdefault(row["item_id"], {})[row["annotator_id"]] = row["label"]
    return items


def single_annotator_labels(items: dict[str, dict[str, str]]) -> dict[str, str]:
    """Flatten a one-annotator label file to item_id -> label."""
    flat: dict[str, str] = {}
    for item_id, by_annotator in items.items():
        if len(by_annotator) != 1:
            raise ValueError(
                f"item {item_id} has {len(by_annotator)} annotators; expected 1"
            )
        (flat[item_id],) = by_annotator.values()
    return flat


def annotation_matrix(items: dict[str, dict[str, str]]) -> list[list[str]]:
    """Per-item label rows (annotators in sorted order) for fleiss_kappa."""
    annotators = sorted({a for labels in items.values() for a in labels})
    rows = []
    for item_id in sorted(items):
        labels = items[item_id]
        if set(labels) != set(annotators):
            raise ValueError(f"item {item_id} is not labeled by every annotator")
        rows.append([labels[a] for a in annotators])
    return rows


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def write_metrics(path: Path, reports: Sequence[MetricReport]) -> Path:
    path.write_text(
        json.dumps(
            {"metrics": [r.to_dict() for r in reports]},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return path


def render_metrics_markdown(reports: Sequence[MetricReport]) -> str:
    lines = [
        "| Metric | Value | Sample size | p-value | Significant (0.05) |",
        "| --- | --- | --- | --- | --- |",
    ]
    for report in reports:
        if report.p_value is None:
            p_text, sig_text = "", ""
        else:
            p_text = f"{report.p_value:.3g}"
            sig_text = "yes" if report.significant else "no"
        lines.append(
            f"| {report.name} | {report.value:.4f} | {report.sample_size}"
            f" | {p_text} | {sig_text} |"
        )
    return "\n".join(lines) + "\n"
