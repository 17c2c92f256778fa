"""Transcription and classification metrics.

Alignment is unit-cost Levenshtein with a fixed traceback preference
(match, then substitution, then deletion, then insertion, applied from the
end of the strings backwards) so identical inputs always yield the same
operation trace.  Error rate is (S + D + I) / N with N the reference
length; word and character rates differ only in tokenization, and spaces
count as characters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True)
class EditOp:
    """One alignment step; ``ref`` / ``hyp`` are None when not consumed."""

    op: str  # "match" | "sub" | "del" | "ins"
    ref: str | None
    hyp: str | None


@dataclass(frozen=True)
class Alignment:
    """Counts and operation trace from aligning a hypothesis to a reference."""

    substitutions: int
    deletions: int
    insertions: int
    correct: int
    ref_length: int
    ops: tuple[EditOp, ...]

    def __post_init__(self):
        for name in ("substitutions", "deletions", "insertions", "correct", "ref_length"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ref_length != self.substitutions + self.deletions + self.correct:
            raise ValueError("ref_length must equal substitutions + deletions + correct")

    @property
    def hyp_length(self) -> int:
        return self.substitutions + self.insertions + self.correct

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def align(ref: Sequence[str], hyp: Sequence[str]) -> Alignment:
    """Minimum-edit alignment of token sequences under unit costs."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int32)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ref_tok = ref[i - 1]
        row = cost[i]
        prev = cost[i - 1]
        for j in range(1, m + 1):
            same = ref_tok == hyp[j - 1]
            row[j] = min(
                prev[j - 1] + (0 if same else 1),
                prev[j] + 1,
                row[j - 1] + 1,
            )

    ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i, j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and cost[i - 1, j - 1] == here:
            ops.append(EditOp("match", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and cost[i - 1, j - 1] + 1 == here:
            ops.append(EditOp("sub", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i - 1, j] + 1 == here:
            ops.append(EditOp("del", ref[i - 1], None))
            i = i - 1
        else:
            ops.append(EditOp("ins", None, hyp[j - 1]))
            j = j - 1
    ops.reverse()

    tallies = {"match": 0, "sub": 0, "del": 0, "ins": 0}
    for op in ops:
        tallies[op.op] += 1
    return Alignment(
        substitutions=tallies["sub"],
        deletions=tallies["del"],
        insertions=tallies["ins"],
        correct=tallies["match"],
        ref_length=n,
        ops=tuple(ops),
    )


def error_rate(alignment: Alignment) -> float:
    """(S + D + I) / N; defined as 0 when both sides are empty."""
    if alignment.ref_length == 0:
        if alignment.hyp_length == 0:
            return 0.0
        raise ValueError(
            "error rate is undefined for an empty reference with a non-empty hypothesis"
        )
    return alignment.edits / alignment.ref_length


def word_error_rate(ref: str, hyp: str) -> float:
    return error_rate(align(ref.split(), hyp.split()))


def char_error_rate(ref: str, hyp: str) -> float:
    """Character-level rate; spaces are ordinary symbols."""
    return error_rate(align(list(ref), list(hyp)))


def corpus_error_rate(
    alignments: Iterable[Alignment], aggregation: str = "micro"
) -> float:
    """Pool alignments into one corpus rate.

    ``micro`` divides summed edits by summed reference length (the standard
    corpus rate); ``macro`` averages per-utterance rates, weighting every
    utterance equally.
    """
    alignments = list(alignments)
    if not alignments:
        raise ValueError("corpus_error_rate needs at least one alignment")
    if aggregation == "micro":
        total_edits = sum(a.edits for a in alignments)
        total_ref = sum(a.ref_length for a in alignments)
        if total_ref == 0:
            if total_edits == 0:
                return 0.0
            raise ValueError("corpus has empty references but non-empty hypotheses")
        return total_edits / total_ref
    if aggregation == "macro":
        return float(np.mean([error_rate(a) for a in alignments]))
    raise ValueError(f"unknown aggregation {aggregation!r}")


def accuracy(predicted: Sequence[T], expected: Sequence[T]) -> float:
    """Exact-match fraction over paired predictions."""
    if len(predicted) != len(expected):
        raise ValueError("predicted and expected must have equal length")
    if not predicted:
        raise ValueError("accuracy needs at least one pair")
    hits = sum(1 for p, e in zip(predicted, expected) if p == e)
    return hits / len(predicted)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Ties between a positive and a negative score count one half.  Raises
    when only one class is present.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = stats.rankdata(s)  # average ranks handle ties exactly
    rank_sum = float(np.sum(ranks[y == 1]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass(frozen=True)
class MetricReport:
    """A point estimate with its t-interval bounds."""

    metric: str
    point: float
    ci_low: float
    ci_high: float
    n_runs: int
    level: float

    def __post_init__(self):
        if self.n_runs > 1 and not self.ci_low <= self.point <= self.ci_high:
            raise ValueError("interval must bracket the point estimate")


def t_confidence_interval(
    values: Sequence[float], level: float = 0.95, metric: str = ""
) -> MetricReport:
    """Two-sided t-interval for the mean of ``values``.

    Uses the sample standard deviation with n - 1 degrees of freedom.  A
    zero-variance sample (or level 0) collapses to a point interval.  The
    interval is not clipped to [0, 1].
    """
    if not 0 <= level < 1:
        raise ValueError("level must be in [0, 1)")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("a t-interval needs at least two values")
    mean = float(np.mean(arr))
    sd = float(np.std(arr, ddof=1))
    quantile = float(stats.t.ppf(1 - (1 - level) / 2, arr.size - 1))
    half = quantile * sd / math.sqrt(arr.size)
    return MetricReport(
        metric=metric,
        point=mean,
        ci_low=mean - half,
        ci_high=mean + half,
        n_runs=int(arr.size),
        level=level,
    )


@dataclass(frozen=True)
class BootstrapResult:
    """Outcomes of repeated evaluation runs, failures excluded but counted."""

    values: tuple
    n_failed: int
    n_runs: int


def run_seeds(seed: int, n_runs: int) -> list[int]:
    """Derive independent per-run seeds from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_runs)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def bootstrap_runs(
    runner: Callable[[int], T],
    n_runs: int = 100,
    seed: int = 0,
) -> BootstrapResult:
    """Call ``runner`` once per derived seed and collect its results.

    The runner must be deterministic given its seed.  A run that raises is
    logged, excluded from the values, and counted in the result.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    values = []
    failed = 0
    for i, run_seed in enumerate(run_seeds(seed, n_runs)):
        try:
            values.append(runner(run_seed))
        except Exception:
            failed += 1
            logger.warning("bootstrap run %d failed", i, exc_info=True)
    return BootstrapResult(values=tuple(values), n_failed=failed, n_runs=n_runs)
