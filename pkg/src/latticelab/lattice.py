"""Frame-by-frame emission lattices: file IO, validation, and synthesis.

A lattice stores per-frame posterior probabilities over a token vocabulary,
as produced by a CTC acoustic model.  The text file format is:

* line 1: a JSON header ``{"utterance_id": ..., "frames": T, "vocab": [...]}``
* lines 2..T+1: one frame per line, V space-separated linear probabilities
  in vocabulary order.

Probabilities live in natural-log space internally.  A binary variant keeps
the JSON header in the main file and the frame matrix in a ``.f32`` sidecar
of row-major little-endian float32 values.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

BLANK_TOKEN = "<blank>"
WORD_BOUNDARY = "|"

#: Maximum tolerated |log sum| of a frame's probabilities.
ROW_SUM_TOLERANCE = 1e-3

BINARY_SUFFIX = ".f32"


class LatticeFormatError(ValueError):
    """Raised when a lattice file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LatticeValidationError(ValueError):
    """Raised when lattice contents violate a structural invariant."""


@dataclass(frozen=True)
class EmissionLattice:
    """A (frames x vocab) grid of log probabilities for one utterance.

    ``log_probs[t, v]`` is the natural-log probability of token ``v`` at
    frame ``t``.  Rows must each sum to one (within ``ROW_SUM_TOLERANCE``
    in log space) and the first vocabulary entry must be the blank token.
    """

    utterance_id: str
    vocab: tuple[str, ...]
    log_probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.log_probs, dtype=np.float64)
        object.__setattr__(self, "log_probs", arr)
        self.validate()
        arr.setflags(write=False)

    @property
    def frames(self) -> int:
        return int(self.log_probs.shape[0])

    def validate(self) -> None:
        if not self.utterance_id:
            raise LatticeValidationError("utterance_id must be non-empty")
        if len(self.vocab) < 2:
            raise LatticeValidationError("vocab needs the blank plus at least one token")
        if len(set(self.vocab)) != len(self.vocab):
            raise LatticeValidationError("vocab entries must be unique")
        if self.vocab[0] != BLANK_TOKEN:
            raise LatticeValidationError(
                f"vocab must start with {BLANK_TOKEN!r}, got {self.vocab[0]!r}"
            )
        if self.log_probs.ndim != 2:
            raise LatticeValidationError("log_probs must be a 2-d array")
        if self.log_probs.shape[1] != len(self.vocab):
            raise LatticeValidationError(
                f"log_probs has {self.log_probs.shape[1]} columns for "
                f"{len(self.vocab)} vocab entries"
            )
        if np.isnan(self.log_probs).any() or (self.log_probs == np.inf).any():
            raise LatticeValidationError("log probabilities must be finite or -inf")
        if self.frames:
            row_mass = logsumexp_rows(self.log_probs)
            worst = float(np.max(np.abs(row_mass)))
            if worst > ROW_SUM_TOLERANCE:
                bad = int(np.argmax(np.abs(row_mass)))
                raise LatticeValidationError(
                    f"frame {bad} probabilities sum to exp({row_mass[bad]:.6f}), "
                    f"outside tolerance {ROW_SUM_TOLERANCE}"
                )

    def blank_index(self) -> int:
        return 0

    def token_index(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in lattice vocab") from None


def logsumexp_rows(log_probs: np.ndarray) -> np.ndarray:
    """Row-wise log of summed probabilities, stable against -inf rows."""
    peak = np.max(log_probs, axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(peak, axis=1) + np.log(
            np.sum(np.exp(log_probs - peak), axis=1)
        )


def _coerce_source(source: str | Path | IO[str]) -> tuple[IO[str], bool, Path | None]:
    if isinstance(source, (str, Path)):
        path = Path(source)
        return open(path, "r", encoding="utf-8"), True, path
    return source, False, None


def read_lattice(source: str | Path | IO[str]) -> EmissionLattice:
    """Parse a lattice from its text form (or binary form, via sidecar).

    When the header is the only line present and a ``<name>.f32`` sidecar
    exists next to the file, the frame matrix is read from the sidecar.
    """
    handle, owned, path = _coerce_source(source)
    try:
        header_line = handle.readline()
        if not header_line.strip():
            raise LatticeFormatError("missing JSON header", line=1)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise LatticeFormatError(f"header is not valid JSON: {exc}", line=1) from exc
        for key in ("utterance_id", "frames", "vocab"):
            if key not in header:
                raise LatticeFormatError(f"header missing {key!r}", line=1)
        frames = header["frames"]
        vocab = header["vocab"]
        if not isinstance(frames, int) or frames < 0:
            raise LatticeFormatError("header frames must be a non-negative integer", line=1)
        if not isinstance(vocab, list) or not all(isinstance(t, str) for t in vocab):
            raise LatticeFormatError("header vocab must be a list of strings", line=1)

        rows: list[np.ndarray] = []
        line_no = 1
        for line_no, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != len(vocab):
                raise LatticeFormatError(
                    f"expected {len(vocab)} probabilities, got {len(fields)}",
                    line=line_no,
                )
            try:
                row = np.array([float(x) for x in fields], dtype=np.float64)
            except ValueError as exc:
                raise LatticeFormatError(f"bad probability value: {exc}", line=line_no) from exc
            if (row < 0).any():
                raise LatticeFormatError("probabilities must be non-negative", line=line_no)
            rows.append(row)

        if not rows and frames > 0:
            sidecar = path.with_name(path.name + BINARY_SUFFIX) if path else None
            if sidecar is not None and sidecar.exists():
                linear = _read_binary_frames(sidecar, frames, len(vocab))
            else:
                raise LatticeFormatError(
                    f"header promises {frames} frames but no rows or sidecar found",
                    line=1,
                )
        else:
            if len(rows) != frames:
                raise LatticeFormatError(
                    f"header promises {frames} frames, file has {len(rows)}",
                    line=line_no,
                )
            linear = (
                np.stack(rows) if rows else np.zeros((0, len(vocab)), dtype=np.float64)
            )

        if not vocab or vocab[0] != BLANK_TOKEN:
            raise LatticeFormatError(
                f"vocab must start with the blank token {BLANK_TOKEN!r}", line=1
            )
        with np.errstate(divide="ignore"):
            log_probs = np.log(linear)
        # Normalization problems are the lattice's fault, not the file
        # syntax's, so the validation error propagates as-is.
        return EmissionLattice(header["utterance_id"], tuple(vocab), log_probs)
    finally:
        if owned:
            handle.close()


def _read_binary_frames(sidecar: Path, frames: int, width: int) -> np.ndarray:
    raw = np.fromfile(sidecar, dtype="<f4")
    if raw.size != frames * width:
        raise LatticeFormatError(
            f"sidecar {sidecar.name} holds {raw.size} values, "
            f"expected {frames * width}"
        )
    return raw.reshape(frames, width).astype(np.float64)


def write_lattice(
    lattice: EmissionLattice,
    sink: str | Path | IO[str],
    binary: bool = False,
) -> None:
    """Serialize a lattice, refusing any that fails validation.

    Linear probabilities are printed with 17 significant digits so a text
    round trip reproduces log probabilities to well below 1e-9.  With
    ``binary=True`` (path sinks only) the main file holds just the header
    and frames go to a float32 sidecar.
    """
    lattice.validate()
    header = {
        "utterance_id": lattice.utterance_id,
        "frames": lattice.frames,
        "vocab": list(lattice.vocab),
    }
    linear = np.exp(lattice.log_probs)

    if binary:
        if not isinstance(sink, (str, Path)):
            raise ValueError("binary lattices require a file path sink")
        path = Path(sink)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
        linear.astype("<f4").tofile(path.with_name(path.name + BINARY_SUFFIX))
        return

    handle: IO[str]
    if isinstance(sink, (str, Path)):
        handle, owned = open(sink, "w", encoding="utf-8"), True
    else:
        handle, owned = sink, False
    try:
        handle.write(json.dumps(header) + "\n")
        for row in linear:
            handle.write(" ".join(f"{x:.17g}" for x in row) + "\n")
    finally:
        if owned:
            handle.close()


def lattice_from_linear(
    utterance_id: str, vocab: Sequence[str], probs: np.ndarray
) -> EmissionLattice:
    """Build a lattice from linear probabilities, normalizing each frame."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise LatticeValidationError("probs must be a 2-d array")
    totals = probs.sum(axis=1, keepdims=True)
    if (totals <= 0).any():
        raise LatticeValidationError("every frame needs positive total probability")
    with np.errstate(divide="ignore"):
        return EmissionLattice(utterance_id, tuple(vocab), np.log(probs / totals))


@dataclass(frozen=True)
class NoiseSpec:
    """Per-frame corruption rates for synthetic lattices.

    Each rate is the probability that a frame of the clean emission path is
    corrupted in the corresponding way: ``deletion_mass`` moves the dominant
    share of a frame's probability onto the blank, ``substitution_mass``
    moves it onto a wrong token, and ``insertion_rate`` appends an extra
    spurious frame after a token's block.  All zero means one-hot rows along
    the clean path.
    """

    substitution_mass: float = 0.0
    deletion_mass: float = 0.0
    insertion_rate: float = 0.0
    frames_per_token: int = 2

    def __post_init__(self):
        for name in ("substitution_mass", "deletion_mass", "insertion_rate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {val}")
        if self.substitution_mass + self.deletion_mass > 1.0:
            raise ValueError("substitution_mass + deletion_mass must not exceed 1")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be at least 1")


def _text_to_token_path(text: str, vocab: Sequence[str]) -> list[int]:
    """Map a transcript onto vocab indices, spaces becoming word boundaries."""
    indices = []
    lookup = {tok: i for i, tok in enumerate(vocab)}
    for ch in text:
        token = WORD_BOUNDARY if ch == " " else ch
        if token not in lookup:
            raise KeyError(f"character {ch!r} has no vocab entry")
        indices.append(lookup[token])
    return indices


def synth_lattice(
    text: str,
    vocab: Sequence[str],
    noise: NoiseSpec | None = None,
    seed: int = 0,
    utterance_id: str = "synthetic",
) -> EmissionLattice:
    """Generate a lattice whose clean emission path spells out ``text``.

    Every token of the canonical path occupies ``frames_per_token`` frames,
    with a single blank frame separating repeated tokens so the CTC collapse
    recovers the text exactly.  Corruption draws come from
    ``numpy.random.default_rng(seed)``, so equal inputs give identical
    lattices.
    """
    noise = noise or NoiseSpec()
    vocab = tuple(vocab)
    if not vocab or vocab[0] != BLANK_TOKEN:
        raise LatticeValidationError(f"vocab must start with {BLANK_TOKEN!r}")
    rng = np.random.default_rng(seed)
    blank = 0
    path = _text_to_token_path(text, vocab)

    # Clean frame plan: token blocks, blank between equal neighbours.
    plan: list[int] = []
    prev: int | None = None
    for idx in path:
        if prev is not None and prev == idx:
            plan.append(blank)
        plan.extend([idx] * noise.frames_per_token)
        prev = idx

    non_blank = [i for i in range(len(vocab)) if i != blank]
    rows: list[np.ndarray] = []

    def one_hot(idx: int) -> np.ndarray:
        row = np.zeros(len(vocab))
        row[idx] = 1.0
        return row

    def corrupted(intended: int, winner: int) -> np.ndarray:
        row = np.zeros(len(vocab))
        share = rng.uniform(0.7, 0.95)
        row[winner] = share
        if winner == intended:
            row[blank] += 1.0 - share
        else:
            row[intended] += 1.0 - share
        return row

    for intended in plan:
        draw = rng.random()
        if intended != blank and draw < noise.deletion_mass:
            rows.append(corrupted(intended, blank))
        elif intended != blank and draw < noise.deletion_mass + noise.substitution_mass:
            choices = [i for i in non_blank if i != intended]
            if choices:
                rows.append(corrupted(intended, int(rng.choice(choices))))
            else:
                rows.append(one_hot(intended))
        else:
            rows.append(one_hot(intended))
        if intended != blank and rng.random() < noise.insertion_rate:
            spurious = [i for i in non_blank if i != intended]
            if spurious:
                rows.append(corrupted(int(rng.choice(spurious)), int(rng.choice(spurious))))

    if not rows:
        rows.append(one_hot(blank))

    return lattice_from_linear(utterance_id, vocab, np.stack(rows))


def default_vocab(alphabet: Iterable[str] = "abcdefghijklmnopqrstuvwxyz'") -> tuple[str, ...]:
    """Blank-first character vocabulary with the word boundary appended."""
    letters = list(dict.fromkeys(alphabet))
    return (BLANK_TOKEN, *letters, WORD_BOUNDARY)
