"""Shapley attribution, content-unit grouping, and the interchange format."""

import io
import itertools
import logging
import math

import numpy as np
import pytest

from latticelab.attribution import (
    EXACT_TOKEN_LIMIT,
    NON_CONTENT,
    AttributionEntry,
    AttributionFormatError,
    AttributionSet,
    ContentUnit,
    ContentUnitLexicon,
    UnitAttribution,
    default_lexicon,
    deletion_value_fn,
    group_content_units,
    load_lexicon,
    read_external_attributions,
    shapley_exact,
    shapley_permutation,
    write_attributions,
)
from latticelab.classifier import FeatureSpec, predict_proba, train


def subset_shapley_oracle(value_fn, n):
    """Direct weighted-subset summation, sharing nothing with the library.

    phi_i = sum over S not containing i of
            |S|! (n-|S|-1)! / n! * (v(S+i) - v(S))
    """
    players = range(n)

    def mask(subset):
        return tuple(1 if i in subset else 0 for i in players)

    phis = []
    for i in players:
        others = [j for j in players if j != i]
        phi = 0.0
        for size in range(n):
            for subset in itertools.combinations(others, size):
                weight = (
                    math.factorial(size)
                    * math.factorial(n - size - 1)
                    / math.factorial(n)
                )
                phi += weight * (
                    value_fn(mask(set(subset) | {i})) - value_fn(mask(set(subset)))
                )
        phis.append(phi)
    return phis


def test_shapley_single_token():
    def value(mask):
        return 0.3 + 0.4 * mask[0]

    result = shapley_exact(value, ["stool"])
    assert result.entries[0].value == pytest.approx(0.4)
    assert result.base_value == pytest.approx(0.3)
    assert result.full_value == pytest.approx(0.7)


def test_shapley_symmetric_pair():
    def value(mask):
        return 0.1 * sum(mask)

    result = shapley_exact(value, ["a", "b"])
    assert result.entries[0].value == pytest.approx(result.entries[1].value)


def test_shapley_dummy_token_gets_zero():
    def value(mask):
        return 0.2 + 0.5 * mask[1]

    result = shapley_exact(value, ["dummy", "real", "idle"])
    assert result.entries[0].value == pytest.approx(0.0, abs=1e-12)
    assert result.entries[2].value == pytest.approx(0.0, abs=1e-12)
    assert result.entries[1].value == pytest.approx(0.5)


def test_shapley_exact_matches_subset_oracle_under_classifier():
    spec = FeatureSpec(n_features=2**12)
    model = train(
        [
            ("the zebra runs far", 1),
            ("a zebra stands here", 1),
            ("the boy is standing", 0),
            ("mother washes dishes", 0),
        ],
        spec=spec,
    )
    tokens = ["the", "zebra", "stands"]
    value = deletion_value_fn(lambda text: predict_proba(model, text), tokens)
    result = shapley_exact(value, tokens)
    oracle = subset_shapley_oracle(value, len(tokens))
    for entry, expected in zip(result.entries, oracle):
        assert entry.value == pytest.approx(expected, abs=1e-12)


def test_shapley_exact_efficiency_on_random_games():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        table = rng.normal(size=2**n)

        def value(mask, table=table):
            idx = sum(bit << i for i, bit in enumerate(mask))
            return float(table[idx])

        result = shapley_exact(value, [f"t{i}" for i in range(n)])
        assert result.efficiency_gap() == pytest.approx(0.0, abs=1e-9)


def test_shapley_exact_rejects_oversized_input():
    tokens = [f"t{i}" for i in range(EXACT_TOKEN_LIMIT + 1)]
    with pytest.raises(ValueError, match="shapley_permutation"):
        shapley_exact(lambda mask: 0.0, tokens)


def test_permutation_full_sweep_equals_exact():
    rng = np.random.default_rng(32)
    table = rng.normal(size=2**3)

    def value(mask):
        return float(table[sum(bit << i for i, bit in enumerate(mask))])

    tokens = ["a", "b", "c"]
    exact = shapley_exact(value, tokens)
    swept = shapley_permutation(value, tokens, n_permutations=math.factorial(3))
    for e, s in zip(exact.entries, swept.entries):
        assert s.value == pytest.approx(e.value, abs=1e-9)


def test_permutation_deterministic_for_seed():
    rng = np.random.default_rng(33)
    table = rng.normal(size=2**10)

    def value(mask):
        return float(table[sum(bit << i for i, bit in enumerate(mask))])

    tokens = [f"t{i}" for i in range(10)]
    first = shapley_permutation(value, tokens, n_permutations=50, seed=7)
    second = shapley_permutation(value, tokens, n_permutations=50, seed=7)
    assert first == second
    third = shapley_permutation(value, tokens, n_permutations=50, seed=8)
    assert any(
        f.value != t.value for f, t in zip(first.entries, third.entries)
    )


def test_permutation_estimates_near_exact_with_stderr():
    rng = np.random.default_rng(34)
    table = rng.normal(scale=0.1, size=2**8)

    def value(mask):
        return float(table[sum(bit << i for i, bit in enumerate(mask))])

    tokens = [f"t{i}" for i in range(8)]
    exact = shapley_exact(value, tokens)
    mc = shapley_permutation(value, tokens, n_permutations=2000, seed=1)
    for e, m in zip(exact.entries, mc.entries):
        assert m.stderr is not None and m.stderr > 0
        assert abs(m.value - e.value) <= 3.0 * m.stderr


def test_permutation_rejects_bad_counts_and_handles_empty():
    with pytest.raises(ValueError):
        shapley_permutation(lambda mask: 0.0, ["a"], n_permutations=0)
    empty = shapley_permutation(lambda mask: 0.25, [], n_permutations=5)
    assert empty.entries == ()
    assert empty.base_value == empty.full_value == pytest.approx(0.25)


def test_deletion_value_fn_joins_kept_tokens():
    seen = []

    def predict(text):
        seen.append(text)
        return float(len(text))

    value = deletion_value_fn(predict, ["the", "boy", "falls"])
    value((1, 0, 1))
    value((0, 0, 0))
    assert seen == ["the falls", ""]


def entry(span, value, position=0):
    return AttributionEntry(span=span, position=position, value=value)


def make_set(entries, base=0.5, full=None):
    total = math.fsum(e.value for e in entries)
    if full is None:
        full = base + total
    return AttributionSet(
        participant_id="p1", base_value=base, full_value=full, entries=tuple(entries)
    )


def test_grouping_assigns_span_by_token_overlap():
    attribution = make_set([entry("boy standing", 0.4)])
    groups = group_content_units(attribution, default_lexicon())
    assert [g.name for g in groups] == ["standing"]
    assert groups[0].value == pytest.approx(0.4)


def test_grouping_sums_spans_for_one_unit():
    attribution = make_set(
        [entry("overflowing", -1.0), entry("is running over", -0.832, position=1)]
    )
    groups = group_content_units(attribution, default_lexicon())
    target = next(g for g in groups if g.name == "overflowing")
    assert target.value == pytest.approx(-1.832)


def test_grouping_unmatched_goes_to_non_content():
    attribution = make_set([entry("qqqq", 0.2)])
    groups = group_content_units(attribution, default_lexicon())
    assert [g.name for g in groups] == [NON_CONTENT]


def test_grouping_conserves_entries_exactly():
    rng = np.random.default_rng(35)
    spans = [
        "boy standing",
        "the water",
        "qqqq",
        "cookie jar",
        "overflowing sink",
        "zzz unmatched",
        "little girl",
    ]
    entries = [
        entry(span, float(rng.normal()), position=i) for i, span in enumerate(spans)
    ]
    attribution = make_set(entries)
    groups = group_content_units(attribution, default_lexicon())
    regrouped = [e for g in groups for e in g.entries]
    # The grouping is a partition: same entries, each exactly once.  fsum
    # over the identical multiset then reproduces the total exactly.
    assert sorted(regrouped, key=lambda e: e.position) == entries
    assert math.fsum(g.value for g in groups) == attribution.total()


def test_grouping_prefers_earlier_lexicon_units():
    lexicon = ContentUnitLexicon(
        units=(
            ContentUnit(name="first", patterns=("stool",)),
            ContentUnit(name="second", patterns=("stool", "boy")),
        )
    )
    attribution = make_set([entry("stool boy", 1.0)])
    groups = group_content_units(attribution, lexicon)
    assert [g.name for g in groups] == ["first"]


def test_unit_attribution_checks_its_sum():
    with pytest.raises(ValueError):
        UnitAttribution(name="standing", value=1.0, entries=(entry("standing", 0.4),))


def test_lexicon_loading_and_validation():
    text = "\n".join(
        [
            "# comment",
            "standing",
            "\tstanding",
            "\tboy standing",
            "stool",
            "\ton stool",
            "",
        ]
    )
    lexicon = load_lexicon(io.StringIO(text))
    assert [u.name for u in lexicon.units] == ["standing", "stool"]
    assert lexicon.units[0].patterns == ("standing", "boy standing")

    with pytest.raises(ValueError):
        load_lexicon(io.StringIO("\tpattern before name\n"))
    with pytest.raises(ValueError):
        load_lexicon(io.StringIO("unit\n\tBad Pattern!\n"))
    with pytest.raises(ValueError):
        ContentUnitLexicon(
            units=(
                ContentUnit(name="dup", patterns=("a",)),
                ContentUnit(name="dup", patterns=("b",)),
            )
        )
    with pytest.raises(ValueError):
        ContentUnitLexicon(units=(ContentUnit(name=NON_CONTENT, patterns=("x",)),))


def test_default_lexicon_has_expected_units():
    names = [u.name for u in default_lexicon().units]
    for expected in ("standing", "overflowing", "on stool", "little"):
        assert expected in names
    assert names.index("standing") < names.index("boy")


def test_attribution_round_trip(tmp_path):
    entries = [
        AttributionEntry(span="the boy", position=0, value=0.123456789),
        AttributionEntry(span="stool", position=1, value=-0.5, stderr=0.01),
    ]
    original = make_set(entries, base=0.4)
    path = tmp_path / "attr.jsonl"
    write_attributions(original, path)
    back = read_external_attributions(path)
    assert back.participant_id == original.participant_id
    assert back.base_value == pytest.approx(original.base_value, abs=1e-9)
    assert back.full_value == pytest.approx(original.full_value, abs=1e-9)
    for orig, got in zip(original.entries, back.entries):
        assert got.span == orig.span
        assert got.position == orig.position
        assert got.value == pytest.approx(orig.value, abs=1e-9)


def test_read_accepts_missing_header_with_warning(caplog):
    record = '{"participant_id": "p1", "span": "boy", "position": 0, "value": 0.2}'
    with caplog.at_level(logging.WARNING, logger="latticelab.attribution"):
        result = read_external_attributions(io.StringIO(record + "\n"))
    assert result.base_value is None
    assert result.efficiency_gap() is None
    assert any("efficiency check skipped" in msg for msg in caplog.messages)


def test_read_rejects_malformed_records():
    bad_number = '{"participant_id": "p", "span": "x", "position": 0, "value": "high"}'
    with pytest.raises(AttributionFormatError) as err:
        read_external_attributions(io.StringIO(bad_number + "\n"))
    assert err.value.line == 1

    mixed = "\n".join(
        [
            '{"participant_id": "p1", "span": "x", "position": 0, "value": 0.1}',
            '{"participant_id": "p2", "span": "y", "position": 1, "value": 0.1}',
        ]
    )
    with pytest.raises(AttributionFormatError):
        read_external_attributions(io.StringIO(mixed + "\n"))

    with pytest.raises(AttributionFormatError):
        read_external_attributions(io.StringIO('{"participant_id": "p", "span": "x", "position": -1, "value": 0.1}\n'))

    with pytest.raises(AttributionFormatError):
        read_external_attributions(io.StringIO("not json\n"))

    with pytest.raises(AttributionFormatError):
        read_external_attributions(io.StringIO(""))


def test_efficiency_gap_flags_inconsistent_sets():
    consistent = make_set([entry("a", 0.25)], base=0.5)
    assert consistent.efficiency_gap() == pytest.approx(0.0, abs=1e-12)
    skewed = AttributionSet(
        participant_id="p",
        base_value=0.0,
        full_value=1.0,
        entries=(entry("a", 0.25),),
    )
    assert skewed.efficiency_gap() == pytest.approx(-0.75)
