"""CHAT transcript parsing and text normalization.

Handles the subset of CHAT needed for picture-description corpora: ``@``
header lines (``@ID``, ``@PID``, ``@Media``), main speaker tiers
(``*PAR:``, ``*INV:``, ...), tab continuation lines, and the 0x15-delimited
``start_end`` millisecond alignment bullets.  Dependent tiers (``%mor``
and friends) are ignored.

Normalization reduces a raw tier to lowercase words and apostrophes:
bracket annotation blocks are dropped (the spoken words they scope are
kept), parenthesized material and filler/event codes go away, and anything
outside the normalized alphabet is stripped.  Digits are removed with a
warning since verbatim transcripts spell numbers out.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

BULLET = "\x15"
PARTICIPANT_SPEAKER = "PAR"

CONTROL_LABEL = "control"
DEMENTIA_LABEL = "dementia"

_DEMENTIA_GROUPS = {"probablead", "possiblead", "dementia", "ad"}

_BULLET_SPAN = re.compile(f"{BULLET}([^{BULLET}]*){BULLET}")
_BRACKET_BLOCK = re.compile(r"\[[^\]]*\]")
_PAREN_BLOCK = re.compile(r"\([^)]*\)")
_TIMES = re.compile(r"^(\d+)_(\d+)$")


class ChatParseError(ValueError):
    """Raised for structurally invalid CHAT content."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class UtteranceRecord:
    """One main-tier utterance, normalized, with optional timing and label."""

    participant_id: str
    session_id: str
    speaker: str
    text: str
    start_ms: int | None = None
    end_ms: int | None = None
    label: str | None = None

    def __post_init__(self):
        if self.start_ms is not None and self.end_ms is not None:
            if not self.start_ms < self.end_ms:
                raise ChatParseError(
                    f"start_ms {self.start_ms} must precede end_ms {self.end_ms}"
                )
        if self.label is not None and self.label not in (CONTROL_LABEL, DEMENTIA_LABEL):
            raise ValueError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class ParticipantRecord:
    """Participant-level metadata plus the merged transcript."""

    participant_id: str
    merged_text: str
    utterance_count: int
    label: str | None = None
    age: int | None = None
    sex: str | None = None
    mmse: int | None = None

    def __post_init__(self):
        if self.utterance_count < 1:
            raise ValueError("utterance_count must be at least 1")
        if self.mmse is not None and not 0 <= self.mmse <= 30:
            raise ValueError(f"mmse {self.mmse} outside 0..30")
        if self.sex is not None and self.sex not in ("male", "female"):
            raise ValueError(f"unknown sex {self.sex!r}")


def normalize_text(raw: str) -> str:
    """Collapse a raw tier to the normalized alphabet (lowercase, ', space).

    Idempotent by construction: the output contains nothing any rule would
    touch again.
    """
    text = _BULLET_SPAN.sub(" ", raw).replace(BULLET, " ")
    text = _BRACKET_BLOCK.sub(" ", text)
    text = text.replace("<", " ").replace(">", " ")
    text = _PAREN_BLOCK.sub(" ", text)
    text = text.replace("-", " ").replace("+", " ")

    kept: list[str] = []
    for token in text.split():
        if token.startswith("&") or token.startswith("0"):
            continue
        token = token.split("@", 1)[0].lower()
        if any(ch.isdigit() for ch in token):
            logger.warning("dropping digits from token %r during normalization", token)
            token = "".join(ch for ch in token if not ch.isdigit())
        token = "".join(ch for ch in token if ch == "'" or "a" <= ch <= "z")
        if token in ("xxx", "yyy", "www") or not token.strip("'"):
            continue
        kept.append(token)
    return " ".join(kept)


def _parse_bullets(text: str, line_no: int) -> tuple[int | None, int | None]:
    spans = _BULLET_SPAN.findall(text)
    if not spans:
        return None, None
    starts: list[int] = []
    ends: list[int] = []
    for span in spans:
        match = _TIMES.match(span.strip())
        if not match:
            raise ChatParseError(f"bad time alignment {span!r}", line=line_no)
        starts.append(int(match.group(1)))
        ends.append(int(match.group(2)))
    return starts[0], ends[-1]


def _parse_id_header(value: str) -> dict:
    fields = value.split("|")
    # language|corpus|code|age|sex|group|SES|role|education|custom
    fields += [""] * (10 - len(fields))
    info: dict = {"code": fields[2].strip()}
    age_match = re.match(r"(\d+)", fields[3].strip())
    info["age"] = int(age_match.group(1)) if age_match else None
    sex = fields[4].strip().lower()
    info["sex"] = sex if sex in ("male", "female") else None
    group = fields[5].strip().lower()
    if group == CONTROL_LABEL:
        info["label"] = CONTROL_LABEL
    elif group in _DEMENTIA_GROUPS:
        info["label"] = DEMENTIA_LABEL
    else:
        info["label"] = None
        if group:
            logger.warning("unmapped diagnosis group %r", fields[5].strip())
    mmse_match = re.fullmatch(r"(\d{1,2})", fields[9].strip())
    info["mmse"] = int(mmse_match.group(1)) if mmse_match else None
    return info


def _folded_lines(document: str) -> list[tuple[int, str]]:
    """Fold tab/space continuations into their opening line, keeping the
    opening line's number."""
    merged: list[tuple[int, str]] = []
    for line_no, line in enumerate(document.splitlines(), start=1):
        if not line.strip():
            continue
        if line[0] in ("\t", " "):
            if not merged:
                raise ChatParseError("continuation line with nothing to continue", line=line_no)
            prev_no, prev = merged[-1]
            merged[-1] = (prev_no, prev + " " + line.strip())
        else:
            merged.append((line_no, line))
    return merged


def parse_chat(document: str, source_name: str = "") -> list[UtteranceRecord]:
    """Parse one CHAT document into utterance records, document order kept.

    The participant id, when no ``@PID`` header is present, falls back to
    ``source_name`` (typically the file stem).  The session id comes from
    ``@Media`` when present, else it mirrors the participant id.
    """
    merged = _folded_lines(document)

    pid = ""
    media = ""
    speaker_info: dict[str, dict] = {}
    tiers: list[tuple[int, str, str]] = []

    for line_no, line in merged:
        if line.startswith("@"):
            if ":" in line:
                key, _, value = line.partition(":")
                key = key.strip()
                value = value.strip()
                if key == "@PID":
                    pid = value
                elif key == "@Media":
                    media = value.split(",")[0].strip()
                elif key == "@ID":
                    info = _parse_id_header(value)
                    if info["code"]:
                        speaker_info[info["code"]] = info
            continue
        if line.startswith("%"):
            continue
        if line.startswith("*"):
            head, colon, rest = line.partition(":")
            if not colon:
                raise ChatParseError("main tier line lacks a colon", line=line_no)
            speaker = head[1:].strip()
            if not speaker:
                raise ChatParseError("main tier line lacks a speaker code", line=line_no)
            tiers.append((line_no, speaker, rest.strip()))
            continue
        raise ChatParseError(f"unrecognized line start {line[0]!r}", line=line_no)

    participant_id = pid or source_name or "unknown"
    session_id = media or participant_id

    records = []
    for line_no, speaker, raw in tiers:
        start_ms, end_ms = _parse_bullets(raw, line_no)
        info = speaker_info.get(speaker, {})
        try:
            records.append(
                UtteranceRecord(
                    participant_id=participant_id,
                    session_id=session_id,
                    speaker=speaker,
                    text=normalize_text(raw),
                    start_ms=start_ms,
                    end_ms=end_ms,
                    label=info.get("label"),
                )
            )
        except ChatParseError as exc:
            raise ChatParseError(str(exc), line=line_no) from exc
    return records


def parse_chat_file(path: str | Path) -> list[UtteranceRecord]:
    path = Path(path)
    return parse_chat(path.read_text(encoding="utf-8"), source_name=path.stem)


def participant_metadata(
    document: str, speaker: str = PARTICIPANT_SPEAKER
) -> dict:
    """Age, sex, label, and MMSE from one speaker's ``@ID`` header.

    Returns an empty dict when the document has no matching header, which
    :func:`merge_to_participant` treats as "no overrides".
    """
    for _, line in _folded_lines(document):
        if line.startswith("@ID"):
            _, _, value = line.partition(":")
            info = _parse_id_header(value.strip())
            if info["code"] == speaker:
                return {k: info[k] for k in ("age", "sex", "label", "mmse")}
    return {}


def filter_participant(records: Iterable[UtteranceRecord]) -> list[UtteranceRecord]:
    """Keep only the participant's own utterances, order untouched."""
    return [r for r in records if r.speaker == PARTICIPANT_SPEAKER]


def merge_to_participant(
    records: Sequence[UtteranceRecord],
    metadata: Mapping | None = None,
) -> ParticipantRecord:
    """Join a participant's utterances into one participant-level record.

    Empty-text utterances still count toward ``utterance_count`` but add
    nothing to the merged text.  ``metadata`` entries (age, sex, mmse,
    label) override whatever the records carry.
    """
    if not records:
        raise ValueError("cannot merge zero utterances")
    ids = {r.participant_id for r in records}
    if len(ids) > 1:
        raise ValueError(f"records span multiple participants: {sorted(ids)}")
    metadata = dict(metadata or {})
    merged = " ".join(r.text for r in records if r.text)
    return ParticipantRecord(
        participant_id=records[0].participant_id,
        merged_text=merged,
        utterance_count=len(records),
        label=metadata.get("label", records[0].label),
        age=metadata.get("age"),
        sex=metadata.get("sex"),
        mmse=metadata.get("mmse"),
    )


@dataclass(frozen=True)
class ManifestRow:
    """One audio segment for the acoustic adapter to transcribe."""

    utterance_id: str
    source_audio: str
    start_ms: int
    end_ms: int
    target_sample_rate: int = 16000


def utterance_id(record: UtteranceRecord, index: int) -> str:
    """Stable utterance identifier: participant id plus position."""
    return f"{record.participant_id}-{index:04d}"


def segment_manifest(records: Sequence[UtteranceRecord]) -> list[ManifestRow]:
    """Manifest rows for timestamped utterances; untimed ones are skipped
    with a warning."""
    rows = []
    for i, record in enumerate(records):
        if record.start_ms is None or record.end_ms is None:
            logger.warning(
                "utterance %s has no time alignment; omitted from manifest",
                utterance_id(record, i),
            )
            continue
        rows.append(
            ManifestRow(
                utterance_id=utterance_id(record, i),
                source_audio=f"{record.session_id}.wav",
                start_ms=record.start_ms,
                end_ms=record.end_ms,
            )
        )
    return rows
