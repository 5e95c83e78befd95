"""Accuracy bookkeeping and the Wilcoxon signed-rank test."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

EXACT_MAX_N = 20


class InsufficientPairsError(ValueError):
    pass


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("accuracy needs two non-empty arrays of equal length")
    return float(np.mean(preds == labels))


@dataclass
class SubjectScore:
    subject_id: str
    n_pairs: int
    n_correct: int
    decoder: str = "baseline"

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_pairs


def per_subject(preds, labels, subject_ids: Sequence[str], decoder: str = "baseline") -> list[SubjectScore]:
    """One score per subject, ordered by subject id."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    subject_ids = np.asarray(subject_ids)
    if not (preds.shape == labels.shape == subject_ids.shape) or preds.size == 0:
        raise ValueError("preds, labels and subject ids must be non-empty and aligned")
    scores = []
    for sid in sorted(set(subject_ids.tolist())):
        mask = subject_ids == sid
        scores.append(SubjectScore(str(sid), int(mask.sum()), int((preds[mask] == labels[mask]).sum()), decoder))
    return scores


def pooled_accuracy(scores: Sequence[SubjectScore]) -> float:
    """Pair-count weighted mean of subject accuracies (equals accuracy over all pairs)."""
    total = sum(s.n_pairs for s in scores)
    return sum(s.accuracy * s.n_pairs for s in scores) / total


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    w_plus: float
    p_value: float
    n_effective: int
    method: str
    alternative: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Number of sign assignments giving each value of 2*W+, by dynamic programming.

    Ranks are passed doubled so that midranks (x.5) stay integral.
    """
    counts = np.zeros(int(sum(doubled_ranks)) + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


def _exact_p(doubled_ranks: np.ndarray, w2: int, alternative: str) -> float:
    counts = signed_rank_null_counts(doubled_ranks.tolist())
    total = counts.sum()
    upper = counts[w2:].sum() / total
    if alternative == "greater":
        return float(upper)
    if alternative == "less":
        return float(counts[: w2 + 1].sum() / total)
    lower = counts[: w2 + 1].sum() / total
    return float(min(1.0, 2.0 * min(upper, lower)))


def wilcoxon_signed_rank(
    pre,
    post,
    alternative: str = "two_sided",
    zero_method: str = "wilcox",
    method: str = "auto",
) -> WilcoxonResult:
    """Paired signed-rank test on d = post - pre.

    ``alternative="greater"`` tests whether post tends to exceed pre.
    ``zero_method="wilcox"`` drops zero differences before ranking; "pratt"
    ranks them and then discards their ranks. ``method="auto"`` enumerates
    the exact null for n <= 20 and otherwise uses the normal approximation
    with tie and continuity corrections.
    """
    if alternative not in ("two_sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    if zero_method not in ("wilcox", "pratt"):
        raise ValueError(f"unknown zero_method {zero_method!r}")
    d = np.asarray(post, dtype=np.float64) - np.asarray(pre, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("pre and post must be 1-D and of equal length")
    nonzero = d != 0
    if not nonzero.any():
        raise InsufficientPairsError("all differences are zero")
    if zero_method == "wilcox":
        d = d[nonzero]
        nonzero = np.ones(d.size, dtype=bool)
    n = int(nonzero.sum())
    if n < 5:
        raise InsufficientPairsError(f"insufficient pairs: {n} non-zero differences, need >= 5")

    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"

    if method == "exact":
        doubled = np.rint(2 * ranks[nonzero]).astype(np.int64)
        p = _exact_p(doubled, int(round(2 * w_plus)), alternative)
    elif method == "approx":
        p = _normal_p(d, ranks, w_plus, alternative)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w_plus, float(min(1.0, max(p, np.finfo(float).tiny))), n, method, alternative)


def _normal_p(d: np.ndarray, ranks: np.ndarray, w_plus: float, alternative: str) -> float:
    # under the null each non-zero rank joins W+ with probability 1/2, so the
    # moments follow directly from the ranks; this already folds in the tie
    # correction and, for pratt, the dropped zero ranks
    r = ranks[d != 0]
    mean = float(r.sum()) / 2.0
    sd = math.sqrt(float(np.sum(r * r)) / 4.0)
    if alternative == "greater":
        return float(stats.norm.sf((w_plus - mean - 0.5) / sd))
    if alternative == "less":
        return float(stats.norm.cdf((w_plus - mean + 0.5) / sd))
    z = max(abs(w_plus - mean) - 0.5, 0.0) / sd
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def write_prepost_csv(path, subject_ids, pre, post) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "accuracy_pre", "accuracy_post"])
        for sid, a, b in zip(subject_ids, pre, post):
            w.writerow([sid, f"{a:.6f}", f"{b:.6f}"])


def write_subject_csv(path, scores: Sequence[SubjectScore]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "decoder", "n_pairs", "accuracy"])
        for s in scores:
            w.writerow([s.subject_id, s.decoder, s.n_pairs, f"{s.accuracy:.6f}"])
