"""Shapley-value attribution of classifier outputs to transcript spans.

A value function maps an inclusion mask over the token spans to a real
number (typically the classifier's positive-class probability for the text
with excluded spans deleted).  Exact attribution enumerates all subsets;
the Monte Carlo path averages marginal contributions over sampled
permutations, caching subset evaluations.

Grouping assigns each attributed span to the first content unit (in
lexicon order) whose patterns share any token with it; leftovers fall into
a reserved non-content group.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from importlib import resources
from itertools import permutations
from pathlib import Path
from typing import IO, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

#: Reserved group name for spans matching no content unit.
NON_CONTENT = "non-content"

EXACT_TOKEN_LIMIT = 15

ValueFn = Callable[[Sequence[int]], float]


class AttributionFormatError(ValueError):
    """Raised when an attribution interchange file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class AttributionEntry:
    """One span's attribution; stderr present only for Monte Carlo runs."""

    span: str
    position: int
    value: float
    stderr: float | None = None


@dataclass(frozen=True)
class AttributionSet:
    """Per-span Shapley values for one participant transcript.

    ``base_value`` is the value of the empty token set and ``full_value``
    the value with every span present.  Externally loaded sets may omit
    them, in which case the efficiency identity cannot be checked.
    """

    participant_id: str
    base_value: float | None
    full_value: float | None
    entries: tuple[AttributionEntry, ...]

    def total(self) -> float:
        return math.fsum(e.value for e in self.entries)

    def efficiency_gap(self) -> float | None:
        """Σφ − (full − base), or None when the endpoints are unknown."""
        if self.base_value is None or self.full_value is None:
            return None
        return self.total() - (self.full_value - self.base_value)


def _mask_tuple(mask_int: int, n: int) -> tuple[int, ...]:
    return tuple((mask_int >> i) & 1 for i in range(n))


def shapley_exact(
    value_fn: ValueFn,
    tokens: Sequence[str],
    participant_id: str = "",
) -> AttributionSet:
    """Exact Shapley values by full subset enumeration.

    ``value_fn`` receives an inclusion mask aligned with ``tokens`` (1 keeps
    the span).  Limited to ``EXACT_TOKEN_LIMIT`` tokens; past that, use
    :func:`shapley_permutation`.
    """
    n = len(tokens)
    if n > EXACT_TOKEN_LIMIT:
        raise ValueError(
            f"{n} tokens exceed the exact enumeration limit of {EXACT_TOKEN_LIMIT}; "
            "use shapley_permutation instead"
        )
    values = [0.0] * (1 << n)
    for mask in range(1 << n):
        values[mask] = float(value_fn(_mask_tuple(mask, n)))

    fact = [math.factorial(k) for k in range(n + 1)]
    weights = [fact[s] * fact[n - 1 - s] / fact[n] for s in range(n)] if n else []
    phis = []
    for i in range(n):
        bit = 1 << i
        phi = 0.0
        for mask in range(1 << n):
            if mask & bit:
                continue
            size = bin(mask).count("1")
            phi += weights[size] * (values[mask | bit] - values[mask])
        phis.append(phi)

    entries = tuple(
        AttributionEntry(span=tok, position=i, value=phi)
        for i, (tok, phi) in enumerate(zip(tokens, phis))
    )
    return AttributionSet(
        participant_id=participant_id,
        base_value=values[0],
        full_value=values[(1 << n) - 1],
        entries=entries,
    )


def shapley_permutation(
    value_fn: ValueFn,
    tokens: Sequence[str],
    n_permutations: int = 2000,
    seed: int = 0,
    participant_id: str = "",
) -> AttributionSet:
    """Monte Carlo Shapley values from uniformly sampled permutations.

    Subset evaluations are cached, so repeated visits to the same prefix
    set cost nothing.  When ``n_permutations`` covers all n! orders (and n
    is small enough to enumerate), every order is swept once, making the
    estimate exact.  Per-token standard errors come from the spread of the
    marginal contributions.
    """
    n = len(tokens)
    if n_permutations < 1:
        raise ValueError("n_permutations must be at least 1")
    if n == 0:
        base = float(value_fn(()))
        return AttributionSet(participant_id, base, base, ())

    if n <= 9 and math.factorial(n) <= n_permutations:
        orders: Iterable[tuple[int, ...]] = permutations(range(n))
        n_used = math.factorial(n)
    else:
        rng = np.random.default_rng(seed)
        orders = (tuple(rng.permutation(n)) for _ in range(n_permutations))
        n_used = n_permutations

    cache: dict[int, float] = {}

    def value(mask_int: int) -> float:
        got = cache.get(mask_int)
        if got is None:
            got = float(value_fn(_mask_tuple(mask_int, n)))
            cache[mask_int] = got
        return got

    contribs: list[list[float]] = [[] for _ in range(n)]
    for order in orders:
        mask = 0
        prev = value(mask)
        for tok in order:
            mask |= 1 << tok
            now = value(mask)
            contribs[tok].append(now - prev)
            prev = now

    entries = []
    for i, tok in enumerate(tokens):
        arr = np.array(contribs[i])
        phi = float(np.mean(arr))
        stderr = (
            float(np.std(arr, ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        )
        entries.append(AttributionEntry(span=tok, position=i, value=phi, stderr=stderr))
    return AttributionSet(
        participant_id=participant_id,
        base_value=value(0),
        full_value=value((1 << n) - 1),
        entries=tuple(entries),
    )


def deletion_value_fn(
    predict: Callable[[str], float], tokens: Sequence[str]
) -> ValueFn:
    """Value function that deletes excluded spans and re-joins the rest."""

    def value(mask: Sequence[int]) -> float:
        text = " ".join(tok for tok, keep in zip(tokens, mask) if keep)
        return float(predict(text))

    return value


@dataclass(frozen=True)
class ContentUnit:
    name: str
    patterns: tuple[str, ...]

    def pattern_tokens(self) -> frozenset[str]:
        return frozenset(tok for pattern in self.patterns for tok in pattern.split())


@dataclass(frozen=True)
class ContentUnitLexicon:
    """Ordered content units; order is the tie-break for span assignment."""

    units: tuple[ContentUnit, ...]

    def __post_init__(self):
        names = [u.name for u in self.units]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate unit names: {dupes}")
        if any(u.name == NON_CONTENT for u in self.units):
            raise ValueError(f"{NON_CONTENT!r} is reserved for unmatched spans")


_PATTERN_SHAPE = re.compile(r"^[a-z'][a-z' ]*$")


def load_lexicon(source: str | Path | IO[str]) -> ContentUnitLexicon:
    """Parse a lexicon file: unit-name lines, indented pattern lines.

    Blank lines and ``#`` comments are skipped.  Patterns must already be
    in normalized-transcript form (lowercase letters, apostrophes, spaces).
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()

    units: list[ContentUnit] = []
    name: str | None = None
    patterns: list[str] = []

    def flush():
        nonlocal name, patterns
        if name is not None:
            units.append(ContentUnit(name=name, patterns=tuple(patterns)))
        name, patterns = None, []

    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line[0] in (" ", "\t"):
            pattern = line.strip()
            if name is None:
                raise ValueError(f"line {line_no}: pattern before any unit name")
            if not _PATTERN_SHAPE.match(pattern):
                raise ValueError(
                    f"line {line_no}: pattern {pattern!r} is not in normalized form"
                )
            patterns.append(pattern)
        else:
            flush()
            name = line.strip()
    flush()
    return ContentUnitLexicon(units=tuple(units))


def default_lexicon() -> ContentUnitLexicon:
    """The packaged picture-description content-unit inventory."""
    ref = resources.files("latticelab.data").joinpath("content_units.txt")
    with ref.open("r", encoding="utf-8") as fh:
        return load_lexicon(fh)


@dataclass(frozen=True)
class UnitAttribution:
    """Summed attribution for one content unit (or the non-content pool)."""

    name: str
    value: float
    entries: tuple[AttributionEntry, ...]

    def __post_init__(self):
        recomputed = math.fsum(e.value for e in self.entries)
        if not math.isclose(self.value, recomputed, rel_tol=0.0, abs_tol=1e-12):
            raise ValueError("unit value must equal the sum of its entries")


def group_content_units(
    attributions: AttributionSet, lexicon: ContentUnitLexicon
) -> list[UnitAttribution]:
    """Assign each span to the first unit sharing any token with it.

    Every attributed span lands in exactly one group, so the group sums
    conserve the total attribution.  Units that match nothing are omitted;
    the non-content group appears whenever at least one span is unmatched.
    """
    token_sets = [(unit.name, unit.pattern_tokens()) for unit in lexicon.units]
    buckets: dict[str, list[AttributionEntry]] = {}
    for entry in attributions.entries:
        span_tokens = set(entry.span.split())
        target = NON_CONTENT
        for unit_name, unit_tokens in token_sets:
            if span_tokens & unit_tokens:
                target = unit_name
                break
        buckets.setdefault(target, []).append(entry)

    ordered_names = [u.name for u in lexicon.units if u.name in buckets]
    if NON_CONTENT in buckets:
        ordered_names.append(NON_CONTENT)
    return [
        UnitAttribution(
            name=name,
            value=math.fsum(e.value for e in buckets[name]),
            entries=tuple(buckets[name]),
        )
        for name in ordered_names
    ]


def write_attributions(attributions: AttributionSet, sink: str | Path | IO[str]) -> None:
    """Write the interchange format: a header record, then one span record
    per line."""
    handle: IO[str]
    if isinstance(sink, (str, Path)):
        handle, owned = open(sink, "w", encoding="utf-8"), True
    else:
        handle, owned = sink, False
    try:
        header = {
            "participant_id": attributions.participant_id,
            "base_value": attributions.base_value,
            "full_value": attributions.full_value,
        }
        handle.write(json.dumps(header) + "\n")
        for entry in attributions.entries:
            record = {
                "participant_id": attributions.participant_id,
                "span": entry.span,
                "position": entry.position,
                "value": entry.value,
            }
            if entry.stderr is not None:
                record["stderr"] = entry.stderr
            handle.write(json.dumps(record) + "\n")
    finally:
        if owned:
            handle.close()


def read_external_attributions(source: str | Path | IO[str]) -> AttributionSet:
    """Read the interchange format, validating types and positions.

    A missing header (or a header without base/full values) is accepted;
    the efficiency identity is then unverifiable and a warning notes the
    skip.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()

    participant_id: str | None = None
    base_value: float | None = None
    full_value: float | None = None
    entries: list[AttributionEntry] = []

    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AttributionFormatError(f"bad JSON record: {exc}", line=line_no) from exc
        if not isinstance(record, dict) or "participant_id" not in record:
            raise AttributionFormatError("record needs a participant_id", line=line_no)
        pid = record["participant_id"]
        if participant_id is None:
            participant_id = pid
        elif pid != participant_id:
            raise AttributionFormatError(
                f"mixed participant ids {participant_id!r} and {pid!r}", line=line_no
            )
        if "span" not in record:
            base_value = _checked_number(record.get("base_value"), "base_value", line_no, optional=True)
            full_value = _checked_number(record.get("full_value"), "full_value", line_no, optional=True)
            continue
        position = record.get("position")
        if not isinstance(position, int) or position < 0:
            raise AttributionFormatError(
                f"position must be a non-negative integer, got {position!r}", line=line_no
            )
        entries.append(
            AttributionEntry(
                span=str(record["span"]),
                position=position,
                value=_checked_number(record.get("value"), "value", line_no),
                stderr=_checked_number(record.get("stderr"), "stderr", line_no, optional=True),
            )
        )

    if participant_id is None:
        raise AttributionFormatError("file holds no records")
    if base_value is None or full_value is None:
        logger.warning(
            "attribution set for %r lacks base/full values; efficiency check skipped",
            participant_id,
        )
    return AttributionSet(
        participant_id=participant_id,
        base_value=base_value,
        full_value=full_value,
        entries=tuple(entries),
    )


def _checked_number(
    value, field: str, line_no: int, optional: bool = False
) -> float | None:
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise AttributionFormatError(f"{field} must be a number, got {value!r}", line=line_no)
    if not math.isfinite(value):
        raise AttributionFormatError(f"{field} must be finite", line=line_no)
    return float(value)
