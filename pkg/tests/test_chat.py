"""CHAT parsing, text normalization, merging, and manifest rows."""

import logging
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticelab.chat import (
    ChatParseError,
    ManifestRow,
    ParticipantRecord,
    UtteranceRecord,
    filter_participant,
    merge_to_participant,
    normalize_text,
    parse_chat,
    parse_chat_file,
    participant_metadata,
    segment_manifest,
    utterance_id,
)

BULLET = "\x15"

SAMPLE_DOC = "\n".join(
    [
        "@UTF8",
        "@Begin",
        "@Languages:\teng",
        "@Participants:\tPAR Participant, INV Investigator",
        "@ID:\teng|Pitt|PAR|67;|female|ProbableAD|||Participant|22|",
        "@ID:\teng|Pitt|INV|||||Investigator||",
        "@Media:\tadrs042, audio",
        f"*INV:\tokay tell me everything you see . {BULLET}500_1100{BULLET}",
        f"*PAR:\tthe boy is stealing cookies . {BULLET}1200_4500{BULLET}",
        "%mor:\tdet|the n|boy aux|be&3S part|steal-PRESP n|cookie-PL .",
        f"*PAR:\t&um the xxx is falling . {BULLET}4600_7800{BULLET}",
        "*PAR:\tMother's washing dishes .",
        "@End",
        "",
    ]
)

def test_normalize_strips_fillers_and_unintelligible():
    assert normalize_text("&um the xxx is falling .") == "the is falling"


def test_normalize_lowercases_and_strips_punctuation():
    assert normalize_text("Mother's washing dishes .") == "mother's washing dishes"


def test_normalize_removes_nonspeech_events():
    assert normalize_text("&=clears:throat well .") == "well"


def test_normalize_removes_retracing_and_pauses():
    # Markers go; the retraced words stay (they were spoken, and
    # repetitions carry diagnostic signal downstream).
    assert normalize_text("the boy [/] the boy (.) falls") == "the boy the boy falls"
    assert normalize_text("<the whole> [//] the stool") == "the whole the stool"


def test_normalize_drops_digits_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="latticelab.chat"):
        out = normalize_text("see4 the stool")
    assert out == "see the stool"
    assert any("digits" in msg for msg in caplog.messages)


def test_normalize_can_empty_out():
    assert normalize_text("&um xxx .") == ""
    assert normalize_text("") == ""


@given(st.text(max_size=60))
@settings(max_examples=200)
def test_normalize_idempotent_and_in_alphabet(raw):
    once = normalize_text(raw)
    assert normalize_text(once) == once
    assert re.fullmatch(r"[a-z' ]*", once)
    assert "  " not in once
    assert once == once.strip()


def test_parse_chat_pinned_example():
    records = parse_chat(SAMPLE_DOC, source_name="adrs042")
    cookie = records[1]
    assert cookie.speaker == "PAR"
    assert cookie.text == "the boy is stealing cookies"
    assert cookie.start_ms == 1200
    assert cookie.end_ms == 4500
    assert cookie.label == "dementia"


def test_parse_chat_keeps_investigator_rows():
    records = parse_chat(SAMPLE_DOC, source_name="adrs042")
    assert records[0].speaker == "INV"
    assert [r.speaker for r in records] == ["INV", "PAR", "PAR", "PAR"]


def test_parse_chat_record_count_matches_tier_lines():
    records = parse_chat(SAMPLE_DOC, source_name="adrs042")
    tier_lines = [l for l in SAMPLE_DOC.splitlines() if l.startswith("*")]
    assert len(records) == len(tier_lines)


def test_parse_chat_empty_document():
    assert parse_chat("@UTF8\n@Begin\n@End\n") == []


def test_parse_chat_untimed_line_has_no_timestamps():
    records = parse_chat(SAMPLE_DOC, source_name="adrs042")
    assert records[3].start_ms is None
    assert records[3].end_ms is None


def test_parse_chat_ids_come_from_media_and_source():
    records = parse_chat(SAMPLE_DOC, source_name="adrs042")
    assert all(r.participant_id == "adrs042" for r in records)
    assert all(r.session_id == "adrs042" for r in records)


def test_parse_chat_missing_colon_names_line():
    doc = "@Begin\n*PAR no colon here\n@End\n"
    with pytest.raises(ChatParseError) as err:
        parse_chat(doc)
    assert err.value.line == 2
    assert "line 2" in str(err.value)


def test_parse_chat_bad_timestamp_is_parse_error():
    doc = f"@Begin\n*PAR:\thello . {BULLET}12a_45{BULLET}\n@End\n"
    with pytest.raises(ChatParseError):
        parse_chat(doc)


def test_parse_chat_folds_continuation_lines():
    doc = "\n".join(
        [
            "@Begin",
            f"*PAR:\tthe boy is standing",
            f"\ton a stool . {BULLET}100_900{BULLET}",
            "@End",
            "",
        ]
    )
    records = parse_chat(doc, source_name="s1")
    assert len(records) == 1
    assert records[0].text == "the boy is standing on a stool"
    assert records[0].start_ms == 100


def test_parse_chat_file_uses_stem_as_participant(tmp_path):
    path = tmp_path / "adrs001.cha"
    path.write_text("@Begin\n*PAR:\thello there .\n@End\n", encoding="utf-8")
    records = parse_chat_file(path)
    assert records[0].participant_id == "adrs001"


def test_participant_metadata_reads_id_header():
    meta = participant_metadata(SAMPLE_DOC)
    assert meta == {"age": 67, "sex": "female", "label": "dementia", "mmse": 22}


def test_participant_metadata_missing_header():
    assert participant_metadata("@Begin\n*PAR:\thi .\n@End\n") == {}


def test_control_group_label():
    doc = "\n".join(
        [
            "@Begin",
            "@ID:\teng|Pitt|PAR|65;|male|Control|||Participant|29|",
            "*PAR:\thello .",
            "@End",
            "",
        ]
    )
    records = parse_chat(doc, source_name="c1")
    assert records[0].label == "control"
    assert participant_metadata(doc)["mmse"] == 29


def rec(text, speaker="PAR", pid="p1", start=None, end=None):
    return UtteranceRecord(
        participant_id=pid,
        session_id=pid,
        speaker=speaker,
        text=text,
        start_ms=start,
        end_ms=end,
    )


def test_filter_participant_examples():
    par1, inv, par2 = rec("a"), rec("b", speaker="INV"), rec("c")
    assert filter_participant([par1, inv, par2]) == [par1, par2]
    assert filter_participant([]) == []
    assert filter_participant([inv]) == []


def test_merge_joins_in_order():
    merged = merge_to_participant([rec("the boy"), rec("is on a stool")])
    assert merged.merged_text == "the boy is on a stool"
    assert merged.utterance_count == 2


def test_merge_skips_empty_but_counts_them():
    merged = merge_to_participant([rec(""), rec("water overflowing")])
    assert merged.merged_text == "water overflowing"
    assert merged.utterance_count == 2


def test_merge_single_utterance_is_identity():
    assert merge_to_participant([rec("hello")]).merged_text == "hello"


def test_merge_rejects_mixed_participants():
    with pytest.raises(ValueError):
        merge_to_participant([rec("a", pid="p1"), rec("b", pid="p2")])
    with pytest.raises(ValueError):
        merge_to_participant([])


def test_merge_applies_metadata_overrides():
    merged = merge_to_participant(
        [rec("hello")], metadata={"age": 70, "sex": "male", "mmse": 25, "label": "control"}
    )
    assert (merged.age, merged.sex, merged.mmse, merged.label) == (
        70,
        "male",
        25,
        "control",
    )


def test_merged_text_stays_in_alphabet():
    records = filter_participant(parse_chat(SAMPLE_DOC, source_name="adrs042"))
    merged = merge_to_participant(records)
    assert re.fullmatch(r"[a-z' ]*", merged.merged_text)
    assert "  " not in merged.merged_text


def test_utterance_record_rejects_backward_times():
    with pytest.raises(ChatParseError):
        rec("x", start=500, end=400)


def test_participant_record_validation():
    with pytest.raises(ValueError):
        ParticipantRecord(participant_id="p", merged_text="", utterance_count=0)
    with pytest.raises(ValueError):
        ParticipantRecord(
            participant_id="p", merged_text="", utterance_count=1, mmse=31
        )


def test_segment_manifest_row_fields():
    rows = segment_manifest([rec("a", start=1200, end=4500)])
    assert rows == [
        ManifestRow(
            utterance_id="p1-0000",
            source_audio="p1.wav",
            start_ms=1200,
            end_ms=4500,
            target_sample_rate=16000,
        )
    ]


def test_segment_manifest_skips_untimed_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="latticelab.chat"):
        rows = segment_manifest([rec("a"), rec("b", start=10, end=20)])
    assert len(rows) == 1
    assert rows[0].utterance_id == "p1-0001"
    assert any("no time alignment" in msg for msg in caplog.messages)


def test_segment_manifest_preserves_input_order():
    records = [rec(t, start=i * 100, end=i * 100 + 50) for i, t in enumerate("abc", 1)]
    rows = segment_manifest(records)
    assert [r.start_ms for r in rows] == [100, 200, 300]
    assert [r.utterance_id for r in rows] == ["p1-0000", "p1-0001", "p1-0002"]


def test_utterance_id_format():
    assert utterance_id(rec("a"), 7) == "p1-0007"
