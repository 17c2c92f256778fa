"""CTC decoding over emission lattices.

Implements greedy best-path decoding, prefix beam search with optional
shallow fusion against a word-level n-gram model, and an exhaustive
reference decoder for small lattices.  Probabilities are natural-log
throughout; n-gram scores arrive in log10 and are converted at the fusion
boundary.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .lattice import BLANK_TOKEN, WORD_BOUNDARY, EmissionLattice
from .lm import NGramModel, score_token

NEG_INF = float("-inf")
LN_10 = math.log(10.0)

#: Largest path count exhaustive_decode will enumerate.
EXHAUSTIVE_PATH_LIMIT = 1_000_000


def _log_add(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) without leaving log space."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


@dataclass(frozen=True)
class DecoderConfig:
    """Knobs for beam decoding and language-model fusion.

    ``lm_weight`` scales the word log10 probability (converted to natural
    log) and ``word_bonus`` is added once per completed word.  Tokens whose
    frame log probability falls below ``token_prune_log_threshold`` are not
    extended; set it to ``-inf`` to disable pruning.
    """

    beam_width: int = 16
    lm_weight: float = 0.5
    word_bonus: float = 1.5
    token_prune_log_threshold: float = math.log(1e-5)
    mode: str = "beam"

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be at least 1")
        if not (math.isfinite(self.lm_weight) and math.isfinite(self.word_bonus)):
            raise ValueError("lm_weight and word_bonus must be finite")
        if math.isnan(self.token_prune_log_threshold) or self.token_prune_log_threshold > 0:
            raise ValueError("token_prune_log_threshold must be <= 0")
        if self.mode not in ("beam", "best_path"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class Hypothesis:
    """One tracked prefix during beam search.

    ``log_p_blank`` and ``log_p_nonblank`` partition the prefix's mass by
    whether its paths end in blank; their log-sum is the prefix's total
    acoustic mass.  ``lm_state`` holds the completed words so far and
    ``lm_bonus`` the fusion terms already collected for them.
    """

    prefix: tuple[int, ...]
    log_p_blank: float = NEG_INF
    log_p_nonblank: float = NEG_INF
    lm_state: tuple[str, ...] = ()
    lm_bonus: float = 0.0
    pending: tuple[int, ...] = ()
    fused_score: float | None = None

    @property
    def total(self) -> float:
        return _log_add(self.log_p_blank, self.log_p_nonblank)


@dataclass(frozen=True)
class DecodeResult:
    """A decoded transcript with its scores.

    ``acoustic_log_prob`` is the collapsed sequence's total path mass for
    beam and exhaustive modes, and the single argmax path's log probability
    for best-path mode.  ``fused_score`` is present only when a language
    model participated.
    """

    utterance_id: str
    transcript: str
    tokens: tuple[str, ...]
    acoustic_log_prob: float
    mode: str
    fused_score: float | None = None


def collapse_ctc(path: Sequence[str], blank: str = BLANK_TOKEN) -> tuple[str, ...]:
    """Merge consecutive duplicates, then drop blanks."""
    out: list[str] = []
    prev: str | None = None
    for tok in path:
        if tok != prev:
            if tok != blank:
                out.append(tok)
            prev = tok
    return tuple(out)


def render_transcript(tokens: Sequence[str]) -> str:
    """Join collapsed tokens into text, word boundaries becoming spaces."""
    words = "".join(tokens).split(WORD_BOUNDARY)
    return " ".join(w for w in words if w)


def best_path_decode(lattice: EmissionLattice) -> DecodeResult:
    """Per-frame argmax decoding; ties resolve to the lowest vocab index."""
    if lattice.frames == 0:
        return DecodeResult(lattice.utterance_id, "", (), 0.0, "best_path")
    picks = np.argmax(lattice.log_probs, axis=1)
    log_prob = float(lattice.log_probs[np.arange(lattice.frames), picks].sum())
    tokens = collapse_ctc([lattice.vocab[i] for i in picks])
    return DecodeResult(
        lattice.utterance_id, render_transcript(tokens), tokens, log_prob, "best_path"
    )


def _fusion_term(
    model: NGramModel, config: DecoderConfig, context: tuple[str, ...], word: str
) -> float:
    lm_log10 = score_token(model, ("<s>",) + context, word)
    return config.lm_weight * lm_log10 * LN_10 + config.word_bonus


def prefix_beam_search(
    lattice: EmissionLattice,
    config: DecoderConfig | None = None,
    lm: NGramModel | None = None,
    on_frame: Callable[[int, float], None] | None = None,
) -> list[DecodeResult]:
    """Prefix beam search with per-prefix blank/non-blank mass tracking.

    Prefixes reaching the same token sequence are merged by adding their
    probabilities.  With a language model, each completed word adds
    ``lm_weight * ln(10) * log10 p(word | previous words) + word_bonus`` to
    the hypothesis score, and an implicit word boundary closes any pending
    word before final ranking.  Returns up to ``beam_width`` results, best
    first; ranking is by fused score when a model is given, acoustic mass
    otherwise.

    ``on_frame`` receives ``(frame_index, log total mass)`` over all tracked
    prefixes after each frame, before beam truncation.
    """
    config = config or DecoderConfig()
    vocab = lattice.vocab
    if lm is not None and WORD_BOUNDARY not in vocab:
        raise ValueError(
            f"language-model fusion needs the word boundary token {WORD_BOUNDARY!r} "
            "in the lattice vocab"
        )
    boundary = vocab.index(WORD_BOUNDARY) if WORD_BOUNDARY in vocab else -1
    blank = 0
    threshold = config.token_prune_log_threshold

    start = Hypothesis(prefix=(), log_p_blank=0.0)
    beams: dict[tuple[int, ...], Hypothesis] = {(): start}

    for t in range(lattice.frames):
        row = lattice.log_probs[t]
        next_beams: dict[tuple[int, ...], Hypothesis] = {}

        def successor(parent: Hypothesis, prefix: tuple[int, ...], token: int | None) -> Hypothesis:
            hyp = next_beams.get(prefix)
            if hyp is None:
                if token is None:
                    # Same prefix as the parent: language state carries over.
                    hyp = Hypothesis(
                        prefix=prefix,
                        lm_state=parent.lm_state,
                        lm_bonus=parent.lm_bonus,
                        pending=parent.pending,
                    )
                elif token == boundary:
                    bonus, state = parent.lm_bonus, parent.lm_state
                    if lm is not None and parent.pending:
                        word = "".join(vocab[i] for i in parent.pending)
                        bonus += _fusion_term(lm, config, state, word)
                        state = state + (word,)
                    hyp = Hypothesis(prefix=prefix, lm_state=state, lm_bonus=bonus, pending=())
                else:
                    hyp = Hypothesis(
                        prefix=prefix,
                        lm_state=parent.lm_state,
                        lm_bonus=parent.lm_bonus,
                        pending=parent.pending + (token,),
                    )
                next_beams[prefix] = hyp
            return hyp

        for prefix, hyp in beams.items():
            total = hyp.total
            last = prefix[-1] if prefix else -1
            for v in range(len(vocab)):
                p = row[v]
                if p == NEG_INF or p < threshold:
                    continue
                if v == blank:
                    succ = successor(hyp, prefix, None)
                    succ.log_p_blank = _log_add(succ.log_p_blank, total + p)
                elif v == last:
                    # Repeat without blank keeps the prefix; the blank-ended
                    # share starts a fresh copy of the token instead.
                    succ = successor(hyp, prefix, None)
                    succ.log_p_nonblank = _log_add(succ.log_p_nonblank, hyp.log_p_nonblank + p)
                    grown = successor(hyp, prefix + (v,), v)
                    grown.log_p_nonblank = _log_add(grown.log_p_nonblank, hyp.log_p_blank + p)
                else:
                    grown = successor(hyp, prefix + (v,), v)
                    grown.log_p_nonblank = _log_add(grown.log_p_nonblank, total + p)

        if on_frame is not None:
            mass = NEG_INF
            for hyp in next_beams.values():
                mass = _log_add(mass, hyp.total)
            on_frame(t, mass)

        ranked = sorted(
            next_beams.values(),
            key=lambda h: (-(h.total + h.lm_bonus), h.prefix),
        )
        beams = {h.prefix: h for h in ranked[: config.beam_width]}

    finals = []
    for hyp in beams.values():
        bonus = hyp.lm_bonus
        if lm is not None and hyp.pending:
            word = "".join(vocab[i] for i in hyp.pending)
            bonus += _fusion_term(lm, config, hyp.lm_state, word)
        hyp.fused_score = hyp.total + bonus
        finals.append(hyp)

    finals.sort(key=lambda h: (-(h.fused_score if lm is not None else h.total), h.prefix))
    results = []
    for hyp in finals[: config.beam_width]:
        tokens = tuple(vocab[i] for i in hyp.prefix)
        results.append(
            DecodeResult(
                utterance_id=lattice.utterance_id,
                transcript=render_transcript(tokens),
                tokens=tokens,
                acoustic_log_prob=hyp.total,
                mode="beam",
                fused_score=hyp.fused_score if lm is not None else None,
            )
        )
    return results


@lru_cache(maxsize=64)
def _collapse_table(
    vocab_size: int, frames: int
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, ...]], np.ndarray]:
    """Path enumeration scaffolding shared by every (V, T) lattice shape.

    Returns the path matrix (paths x frames of token indices), an ordering
    that groups paths by collapsed sequence, the distinct collapsed
    sequences in group order, and the size of each group.
    """
    paths = np.array(
        list(itertools.product(range(vocab_size), repeat=frames)), dtype=np.intp
    ).reshape(vocab_size**frames, frames)
    seq_ids: dict[tuple[int, ...], int] = {}
    ids = np.empty(len(paths), dtype=np.intp)
    for row_idx, path in enumerate(paths):
        out: list[int] = []
        prev = -1
        for tok in path:
            if tok != prev:
                if tok != 0:
                    out.append(int(tok))
                prev = int(tok)
        ids[row_idx] = seq_ids.setdefault(tuple(out), len(seq_ids))
    order = np.argsort(ids, kind="stable")
    sequences: list[tuple[int, ...]] = [()] * len(seq_ids)
    for seq, sid in seq_ids.items():
        sequences[sid] = seq
    sizes = np.bincount(ids, minlength=len(sequences))
    return paths, order, sequences, sizes


def exhaustive_decode(lattice: EmissionLattice) -> DecodeResult:
    """Reference decoder: enumerate every frame path and sum per sequence.

    Only feasible for tiny lattices; refuses shapes past
    ``EXHAUSTIVE_PATH_LIMIT`` paths.
    """
    vocab_size = len(lattice.vocab)
    frames = lattice.frames
    if vocab_size**frames > EXHAUSTIVE_PATH_LIMIT:
        raise ValueError(
            f"{vocab_size}^{frames} paths exceed the exhaustive limit of "
            f"{EXHAUSTIVE_PATH_LIMIT}"
        )
    if frames == 0:
        return DecodeResult(lattice.utterance_id, "", (), 0.0, "exhaustive")

    paths, order, sequences, sizes = _collapse_table(vocab_size, frames)
    path_lp = lattice.log_probs[np.arange(frames), paths].sum(axis=1)
    ordered = path_lp[order]
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    peak = np.maximum.reduceat(ordered, starts)
    safe_peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        totals = safe_peak + np.log(
            np.add.reduceat(np.exp(ordered - np.repeat(safe_peak, sizes)), starts)
        )
    totals = np.where(np.isfinite(peak), totals, NEG_INF)

    best = min(range(len(sequences)), key=lambda i: (-totals[i], sequences[i]))
    tokens = tuple(lattice.vocab[i] for i in sequences[best])
    return DecodeResult(
        lattice.utterance_id,
        render_transcript(tokens),
        tokens,
        float(totals[best]),
        "exhaustive",
    )


def decode(
    lattice: EmissionLattice,
    config: DecoderConfig | None = None,
    lm: NGramModel | None = None,
) -> DecodeResult:
    """Dispatch on ``config.mode`` and return the single best result."""
    config = config or DecoderConfig()
    if config.mode == "best_path":
        return best_path_decode(lattice)
    return prefix_beam_search(lattice, config, lm)[0]
