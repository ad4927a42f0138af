#!/usr/bin/env python3
"""Walkthrough: the human-comparison metrics and their significance tests.

Covers the yes/no match ratios (factuality, completeness), label accuracy,
majority voting, Fleiss' kappa agreement and the exact binomial test.
"""

import random

from quallm.metrics import (
    DIRECTION_COMPLETENESS,
    DIRECTION_FACTUALITY,
    MatchJudgmentSet,
    accuracy,
    binomial_significance,
    completeness,
    factuality,
    fleiss_kappa,
    majority_label,
)


def judgments(direction, yes, no):
    items = [(f"y{i}", "yes") for i in range(yes)] + [
        (f"n{i}", "no") for i in range(no)
    ]
    return MatchJudgmentSet(direction=direction, judgments=tuple(items))


def main() -> None:
    print("Match ratios over 100 judged items:")
    fact = factuality(judgments(DIRECTION_FACTUALITY, 55, 45))
    comp = completeness(judgments(DIRECTION_COMPLETENESS, 78, 22))
    print(f"  factuality (precision-like):  {fact:.2f}")
    print(f"  completeness (recall-like):   {comp:.2f}")

    print("\nClassification accuracy against a gold labeling:")
    gold = {f"i{k}": "A" for k in range(100)}
    predicted = {f"i{k}": ("A" if k < 74 else "B") for k in range(100)}
    acc = accuracy(gold, predicted)
    print(f"  accuracy: {acc:.2f}")

    print("\nMajority voting across three annotators:")
    for labels in (["A", "A", "B"], ["A", "B", "C"], ["B", "B", "B"]):
        print(f"  {labels} -> {majority_label(labels)}")

    print("\nFleiss' kappa (chance-corrected multi-rater agreement):")
    rng = random.Random(5)
    agreeing = [[rng.choice("AB")] * 3 for _ in range(100)]
    noisy = [[rng.choice("ABCD") for _ in range(3)] for _ in range(100)]
    print(f"  unanimous raters:      kappa = {fleiss_kappa(agreeing):+.3f}")
    print(f"  uniform random labels: kappa = {fleiss_kappa(noisy):+.3f}")

    print("\nExact two-sided binomial test against chance:")
    for successes, trials, chance in ((74, 100, 0.2), (20, 100, 0.2), (55, 100, 0.5)):
        p_value, significant = binomial_significance(successes, trials, chance)
        verdict = "significant" if significant else "not significant"
        print(
            f"  {successes}/{trials} vs chance {chance}:"
            f" p = {p_value:.3g} ({verdict} at 0.05)"
        )


if __name__ == "__main__":
    main()
