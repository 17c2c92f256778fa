"""Word n-gram language models with interpolated modified Kneser-Ney smoothing.

Counting pads each utterance with a single ``<s>`` and ``</s>``.  Estimation
follows the interpolated, modified-discount construction: three discounts
per order derived from counts-of-counts of adjusted counts (continuation
counts below the top order), a uniform base distribution over the predicted
vocabulary, and backoff weights equal to the redistributed discount mass.

Scores are log10 throughout, matching the ARPA interchange format.  Stored
log10 values are snapped to a 7-significant-digit grid at estimation time so
that writing and re-reading a model reproduces every score exactly.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

#: log10 probability recorded for events that are contexts only (never
#: predicted), following the ARPA convention.
LOG10_NEVER_PREDICTED = -99.0

FALLBACK_DISCOUNT = 0.75


class EstimationError(ValueError):
    """Raised when a model cannot be estimated from the given counts."""


class ArpaFormatError(ValueError):
    """Raised when an ARPA file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _q7(x: float) -> float:
    """Snap to the 7-significant-digit decimal grid (the printed precision)."""
    return float(f"{x:.7g}")


@dataclass
class CountTable:
    """Raw n-gram occurrence counts for orders 1..order.

    ``ngrams[k]`` maps k-token tuples to counts.  Continuation counts
    (distinct left contexts) derive from the next order up.
    """

    order: int
    ngrams: dict[int, dict[tuple[str, ...], int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be at least 1")
        for k in range(1, self.order + 1):
            self.ngrams.setdefault(k, {})
        for k, table in self.ngrams.items():
            for gram in table:
                if len(gram) != k:
                    raise ValueError(f"order-{k} table holds a {len(gram)}-gram: {gram!r}")

    def continuation_counts(self, k: int) -> dict[tuple[str, ...], int]:
        """Number of distinct tokens preceding each k-gram."""
        cont: dict[tuple[str, ...], int] = defaultdict(int)
        for gram in self.ngrams[k + 1]:
            cont[gram[1:]] += 1
        return dict(cont)


def _tokenize(utterance: str | Sequence[str]) -> list[str]:
    if isinstance(utterance, str):
        return utterance.split()
    return list(utterance)


def count_ngrams(corpus: Iterable[str | Sequence[str]], order: int) -> CountTable:
    """Count every k-gram (k = 1..order) over sentence-padded utterances."""
    if order < 1:
        raise ValueError("order must be at least 1")
    table = CountTable(order)
    for utterance in corpus:
        tokens = _tokenize(utterance)
        if not tokens:
            continue
        padded = [BOS, *tokens, EOS]
        for k in range(1, order + 1):
            grams = table.ngrams[k]
            for i in range(len(padded) - k + 1):
                gram = tuple(padded[i : i + k])
                grams[gram] = grams.get(gram, 0) + 1
    return table


def _discounts(counts_of_counts: Counter) -> tuple[float, float, float]:
    """Per-order discounts D1, D2, D3+ from counts-of-counts.

    Falls back to a flat absolute discount when the counts-of-counts are too
    sparse to estimate, or when a derived discount leaves (0, i].
    """
    n1 = counts_of_counts.get(1, 0)
    n2 = counts_of_counts.get(2, 0)
    n3 = counts_of_counts.get(3, 0)
    n4 = counts_of_counts.get(4, 0)
    flat = (FALLBACK_DISCOUNT,) * 3
    if min(n1, n2, n3, n4) == 0:
        return flat
    y = n1 / (n1 + 2 * n2)
    d1 = 1 - 2 * y * n2 / n1
    d2 = 2 - 3 * y * n3 / n2
    d3 = 3 - 4 * y * n4 / n3
    for i, d in enumerate((d1, d2, d3), start=1):
        if not 0 < d <= i:
            return flat
    return d1, d2, d3


def _apply_discount(count: int, discounts: tuple[float, float, float]) -> float:
    if count <= 0:
        return 0.0
    return discounts[min(count, 3) - 1]


@dataclass(frozen=True)
class NGramModel:
    """An estimated (or loaded) backoff model.

    ``tables[k-1]`` maps k-grams to ``(log10 prob, log10 backoff or None)``.
    A missing backoff means no discounted mass hangs off that context
    (weight 1, log10 0).
    """

    order: int
    tables: tuple[dict[tuple[str, ...], tuple[float, float | None]], ...]

    def __post_init__(self):
        if self.order != len(self.tables):
            raise ValueError("order must match the number of tables")
        if not self.tables[0]:
            raise ValueError("model needs at least one unigram")

    @property
    def vocab(self) -> frozenset[str]:
        return frozenset(gram[0] for gram in self.tables[0])

    def counts(self) -> list[int]:
        return [len(t) for t in self.tables]


def estimate_kneser_ney(counts: CountTable) -> NGramModel:
    """Interpolated modified Kneser-Ney estimation over a count table.

    Below the top order, adjusted counts are continuation counts, except for
    grams starting with the sentence marker, which keep raw counts (nothing
    can precede them).  The unigram distribution interpolates with a uniform
    base over the predicted vocabulary: every observed token plus the end
    marker and the unknown token, minus the start marker.
    """
    n = counts.order
    raw = counts.ngrams

    adjusted: dict[int, dict[tuple[str, ...], int]] = {n: dict(raw[n])}
    for k in range(n - 1, 0, -1):
        cont = counts.continuation_counts(k)
        adjusted[k] = {
            gram: (raw_count if gram[0] == BOS else cont.get(gram, 0))
            for gram, raw_count in raw[k].items()
        }

    discounts: dict[int, tuple[float, float, float]] = {}
    for k in range(1, n + 1):
        coc = Counter(
            c
            for gram, c in adjusted[k].items()
            if c > 0 and not (k == 1 and gram[0] == BOS)
        )
        discounts[k] = _discounts(coc)

    vocab_pred = sorted(
        ({gram[0] for gram in raw[1]} | {EOS, UNK}) - {BOS}
    )
    uniform = 1.0 / len(vocab_pred)

    # Unigram level: discounted adjusted counts over the predicted vocab,
    # with the leftover mass spread uniformly.
    events = {w: adjusted[1].get((w,), 0) for w in vocab_pred}
    total = sum(events.values())
    if total == 0:
        raise EstimationError("no countable events; corpus is empty")
    d1 = discounts[1]
    gamma_1 = sum(_apply_discount(c, d1) for c in events.values()) / total
    probs: dict[int, dict[tuple[str, ...], float]] = {
        1: {
            (w,): max(c - _apply_discount(c, d1), 0.0) / total + gamma_1 * uniform
            for w, c in events.items()
        }
    }
    gammas: dict[int, dict[tuple[str, ...], float]] = {}

    for k in range(2, n + 1):
        dk = discounts[k]
        by_context: dict[tuple[str, ...], list[tuple[str, int]]] = defaultdict(list)
        for gram, c in adjusted[k].items():
            if c > 0:
                by_context[gram[:-1]].append((gram[-1], c))
        probs[k] = {}
        gammas[k - 1] = {}
        for context, grams in by_context.items():
            denom = sum(c for _, c in grams)
            gamma = sum(_apply_discount(c, dk) for _, c in grams) / denom
            gammas[k - 1][context] = gamma
            lower = probs[k - 1]
            for w, c in grams:
                # The (k-1)-suffix of an observed k-gram is itself observed,
                # so the interpolation weight lands on a stored entry.
                p_low = lower[context[1:] + (w,)]
                probs[k][context + (w,)] = (
                    max(c - _apply_discount(c, dk), 0.0) / denom + gamma * p_low
                )

    tables: list[dict[tuple[str, ...], tuple[float, float | None]]] = []
    for k in range(1, n + 1):
        table: dict[tuple[str, ...], tuple[float, float | None]] = {}
        grams_at_k = set(probs[k]) | set(gammas.get(k, {}))
        if k == 1:
            grams_at_k.add((BOS,))
        for gram in sorted(grams_at_k):
            if gram in probs[k]:
                log_p = _q7(math.log10(probs[k][gram]))
            else:
                log_p = LOG10_NEVER_PREDICTED
            backoff = gammas.get(k, {}).get(gram)
            log_b = _q7(math.log10(backoff)) if backoff is not None else None
            table[gram] = (log_p, log_b)
        tables.append(table)
    return NGramModel(order=n, tables=tuple(tables))


def train(corpus: Iterable[str | Sequence[str]], order: int = 5) -> NGramModel:
    """Count and estimate in one step."""
    return estimate_kneser_ney(count_ngrams(corpus, order))


def score_token(
    model: NGramModel, context: Sequence[str], token: str
) -> float:
    """log10 p(token | context) with standard backoff-weight accumulation.

    Tokens absent from the model vocabulary (in the query or the context)
    are mapped to the unknown token first.
    """
    unigrams = model.tables[0]

    def known(tok: str) -> str:
        return tok if (tok,) in unigrams else UNK

    w = known(token)
    ctx = tuple(known(t) for t in context)[max(0, len(context) - (model.order - 1)) :]

    score = 0.0
    for k in range(min(model.order, len(ctx) + 1), 0, -1):
        sub_ctx = ctx[len(ctx) - (k - 1) :] if k > 1 else ()
        entry = model.tables[k - 1].get(sub_ctx + (w,))
        if entry is not None:
            return score + entry[0]
        if k >= 2:
            context_entry = model.tables[k - 2].get(sub_ctx)
            if context_entry is not None and context_entry[1] is not None:
                score += context_entry[1]
    raise EstimationError(f"no unigram entry for {w!r}; model is malformed")


def score(
    model: NGramModel,
    tokens: Sequence[str] | str,
    context_mode: str = "sentence",
) -> float:
    """Total log10 probability of a token sequence.

    ``sentence`` mode conditions the first token on the start marker and
    scores the end marker after the last; ``raw`` mode starts from an empty
    context and scores only the given tokens.
    """
    if context_mode not in ("sentence", "raw"):
        raise ValueError(f"unknown context_mode {context_mode!r}")
    toks = _tokenize(tokens)
    ctx: tuple[str, ...] = (BOS,) if context_mode == "sentence" else ()
    total = 0.0
    for tok in toks:
        total += score_token(model, ctx, tok)
        ctx = ctx + (tok,)
    if context_mode == "sentence":
        total += score_token(model, ctx, EOS)
    return total


def perplexity(model: NGramModel, corpus: Iterable[str | Sequence[str]]) -> float:
    """Per-token perplexity, end markers included in the event count."""
    total_log10 = 0.0
    events = 0
    for utterance in corpus:
        toks = _tokenize(utterance)
        if not toks:
            continue
        total_log10 += score(model, toks, context_mode="sentence")
        events += len(toks) + 1
    if events == 0:
        raise EstimationError("perplexity needs a non-empty corpus")
    return 10.0 ** (-total_log10 / events)


def write_arpa(model: NGramModel, sink: str | Path | IO[str]) -> None:
    """Serialize to the standard ARPA backoff layout.

    Fields are tab-separated: log10 probability, the space-joined gram, and
    the log10 backoff weight when one applies.  Probabilities carry 7
    significant digits, which reproduces the stored values exactly.
    """
    handle: IO[str]
    if isinstance(sink, (str, Path)):
        handle, owned = open(sink, "w", encoding="utf-8"), True
    else:
        handle, owned = sink, False
    try:
        handle.write("\\data\\\n")
        for k, count in enumerate(model.counts(), start=1):
            handle.write(f"ngram {k}={count}\n")
        for k in range(1, model.order + 1):
            handle.write(f"\n\\{k}-grams:\n")
            for gram in sorted(model.tables[k - 1]):
                log_p, log_b = model.tables[k - 1][gram]
                line = f"{log_p:.7g}\t{' '.join(gram)}"
                if log_b is not None:
                    line += f"\t{log_b:.7g}"
                handle.write(line + "\n")
        handle.write("\n\\end\\\n")
    finally:
        if owned:
            handle.close()


def read_arpa(source: str | Path | IO[str]) -> NGramModel:
    """Parse an ARPA file written by :func:`write_arpa` (or compatible)."""
    handle: IO[str]
    if isinstance(source, (str, Path)):
        handle, owned = open(source, "r", encoding="utf-8"), True
    else:
        handle, owned = source, False
    try:
        lines = handle.read().splitlines()
    finally:
        if owned:
            handle.close()

    it = iter(enumerate(lines, start=1))
    declared: dict[int, int] = {}
    for line_no, line in it:
        if line.strip() == "\\data\\":
            break
        if line.strip():
            raise ArpaFormatError("expected \\data\\ header", line=line_no)
    else:
        raise ArpaFormatError("missing \\data\\ header")

    for line_no, line in it:
        text = line.strip()
        if not text:
            break
        if not text.startswith("ngram "):
            raise ArpaFormatError(f"unexpected line in \\data\\ section: {text!r}", line=line_no)
        try:
            k_str, count_str = text[len("ngram ") :].split("=")
            declared[int(k_str)] = int(count_str)
        except ValueError as exc:
            raise ArpaFormatError(f"bad ngram count declaration: {exc}", line=line_no)

    if not declared or sorted(declared) != list(range(1, max(declared) + 1)):
        raise ArpaFormatError("\\data\\ section must declare orders 1..n")
    order = max(declared)
    tables: list[dict[tuple[str, ...], tuple[float, float | None]]] = [
        {} for _ in range(order)
    ]

    current_k: int | None = None
    ended = False
    for line_no, line in it:
        text = line.strip("\n")
        stripped = text.strip()
        if not stripped:
            continue
        if stripped == "\\end\\":
            ended = True
            break
        if stripped.endswith("-grams:") and stripped.startswith("\\"):
            try:
                current_k = int(stripped[1:].split("-")[0])
            except ValueError:
                raise ArpaFormatError(f"bad section header {stripped!r}", line=line_no)
            if not 1 <= current_k <= order:
                raise ArpaFormatError(
                    f"section order {current_k} not declared in header", line=line_no
                )
            continue
        if current_k is None:
            raise ArpaFormatError("gram line before any section header", line=line_no)
        fields = text.split("\t")
        if len(fields) not in (2, 3):
            raise ArpaFormatError(
                f"expected 2 or 3 tab-separated fields, got {len(fields)}", line=line_no
            )
        try:
            log_p = float(fields[0])
            log_b = float(fields[2]) if len(fields) == 3 else None
        except ValueError as exc:
            raise ArpaFormatError(f"malformed numeric field: {exc}", line=line_no)
        gram = tuple(fields[1].split())
        if len(gram) != current_k:
            raise ArpaFormatError(
                f"{len(gram)}-token gram in \\{current_k}-grams: section", line=line_no
            )
        tables[current_k - 1][gram] = (log_p, log_b)

    if not ended:
        raise ArpaFormatError("missing \\end\\ marker")
    for k in range(1, order + 1):
        if len(tables[k - 1]) != declared[k]:
            raise ArpaFormatError(
                f"header declares {declared[k]} {k}-grams, file lists {len(tables[k - 1])}"
            )
    return NGramModel(order=order, tables=tuple(tables))
