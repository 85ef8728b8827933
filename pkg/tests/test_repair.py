"""Repair pipeline: the packaged corpus, per-fix behavior, idempotence
on valid JSON, and crash-freedom under fuzzing."""

import json
import random
import string
from pathlib import Path

import pytest

from icldst.repair import (
    FIX_ORDER,
    STATUS_CLEAN,
    STATUS_REPAIRED,
    STATUS_UNPARSEABLE,
    _FIXES,
    PredictedState,
    RepairOutcome,
    repair_and_parse,
    to_state,
)

CORPUS_PATH = Path(__file__).parents[1] / "src" / "icldst" / "data" / "repair_corpus.jsonl"

STATUSES = {STATUS_CLEAN, STATUS_REPAIRED, STATUS_UNPARSEABLE}


def load_corpus():
    with CORPUS_PATH.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def test_corpus_has_100_cases_and_high_parse_rate():
    cases = load_corpus()
    assert len(cases) == 100
    parsed = sum(repair_and_parse(c["raw"]).parsed for c in cases)
    assert parsed >= 95


def test_corpus_expected_statuses_and_states():
    for case in load_corpus():
        outcome = repair_and_parse(case["raw"])
        assert outcome.status == case["expected_status"], case["id"]
        if "expected" in case:
            assert outcome.state == case["expected"], case["id"]
        if outcome.parsed:
            assert isinstance(outcome.state, dict)
        else:
            assert outcome.state is None


def test_applied_fixes_follow_pipeline_order():
    for case in load_corpus():
        applied = repair_and_parse(case["raw"]).applied_fixes
        positions = [FIX_ORDER.index(tag) for tag in applied]
        assert positions == sorted(positions), case["id"]
        assert len(set(applied)) == len(applied)


@pytest.mark.parametrize(
    "raw, fixes",
    [
        ('{"a": "1"}', ()),
        ('```json\n{"a": "1"}```', ("fence_strip",)),
        ('noise {"a": "1"}', ("prose_trim",)),
        ("{'a': '1'}", ("quote_normalize",)),
        ('{a: "1"}', ("key_quote",)),
        ('{"a": "1",}', ("trailing_comma",)),
        ('{"a": "1', ("string_close", "brace_close")),
        ('{"a": "1"', ("brace_close",)),
        ('x {a: \'1\',', ("prose_trim", "quote_normalize", "key_quote", "brace_close")),
    ],
)
def test_applied_fixes_exact(raw, fixes):
    outcome = repair_and_parse(raw)
    assert outcome.applied_fixes == fixes
    assert outcome.state == {"a": "1"}
    assert outcome.status == (STATUS_CLEAN if not fixes else STATUS_REPAIRED)


def test_unparseable_keeps_applied_fixes():
    outcome = repair_and_parse("{day: friday}")
    assert outcome.status == STATUS_UNPARSEABLE
    assert outcome.applied_fixes == ("key_quote",)
    assert not outcome.parsed


def _random_value(rng, depth):
    key_chars = string.ascii_lowercase + string.digits + "_- ."
    text_chars = key_chars + ":,' é19"
    roll = rng.random()
    if depth >= 3 or roll < 0.4:
        return rng.choice(
            [
                "".join(rng.choices(text_chars, k=rng.randint(0, 12))),
                rng.randint(0, 99),
                rng.uniform(0, 50),
                True,
                False,
                None,
            ]
        )
    make_key = lambda: "".join(rng.choices(key_chars, k=rng.randint(1, 8)))
    if roll < 0.8:
        return {make_key(): _random_value(rng, depth + 1) for _ in range(rng.randint(0, 4))}
    return [_random_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]


def _random_object(rng):
    obj = _random_value(rng, depth=0)
    return obj if isinstance(obj, dict) else {"wrap": obj}


def test_valid_json_is_parsed_clean_with_no_fixes():
    rng = random.Random(20240817)
    for i in range(50):
        obj = _random_object(rng)
        text = json.dumps(
            obj,
            ensure_ascii=rng.random() < 0.5,
            indent=rng.choice([None, None, 2]),
        )
        outcome = repair_and_parse(text)
        assert outcome.status == STATUS_CLEAN, f"fixture {i}"
        assert outcome.state == obj
        assert outcome.applied_fixes == ()
        # every individual fix leaves the serialized form untouched
        for tag, fix in _FIXES:
            assert fix(text) == text, f"fixture {i}: {tag} changed valid JSON"


def test_fuzz_never_raises():
    rng = random.Random(9157)
    alphabet = '{}[]:,"\'\\`\n abcdefgh_-.0123456789' + "\u201c\u201d\u2018\u2019"
    for _ in range(3000):
        raw = "".join(rng.choices(alphabet, k=rng.randint(0, 60)))
        outcome = repair_and_parse(raw)
        assert outcome.status in STATUSES
        assert isinstance(outcome, RepairOutcome)


def test_mutated_json_never_raises(schema):
    rng = random.Random(40991)
    for _ in range(500):
        text = json.dumps(_random_object(rng))
        n_cuts = rng.randint(1, 3)
        for _ in range(n_cuts):
            if not text:
                break
            op = rng.random()
            pos = rng.randrange(len(text) + 1)
            if op < 0.4:
                text = text[:pos] + text[pos + 1 :]
            elif op < 0.7:
                text = text[:pos]
            else:
                text = text[:pos] + rng.choice("{}',\"`") + text[pos:]
        outcome = repair_and_parse(text)
        assert outcome.status in STATUSES
        to_state(outcome, ("taxi",), schema)


@pytest.mark.parametrize(
    "raw",
    ["", "{", "}", '"', "\\", "\x00", "[1, 2]", '"just text"', "{" * 40, "```", "''"],
)
def test_degenerate_inputs(raw):
    outcome = repair_and_parse(raw)
    assert outcome.status in STATUSES


def test_non_string_input_is_coerced():
    assert repair_and_parse(None).status == STATUS_UNPARSEABLE


# --- to_state -----------------------------------------------------------------


def test_to_state_flat_attaches_to_first_domain(schema):
    outcome = repair_and_parse('{"departure": "College", "wifi": "yes"}')
    state = to_state(outcome, ("taxi", "restaurant"), schema)
    assert state.slots == {"taxi": {"departure": "college"}}
    assert state.off_schema == {"taxi": {"wifi": "yes"}}
    assert not state.parse_failed


def test_to_state_nested(schema):
    outcome = repair_and_parse(
        '{"taxi": {"departure": "college"}, "restaurant": {"food": "thai"}}'
    )
    state = to_state(outcome, ("taxi",), schema)
    assert state.slots == {
        "taxi": {"departure": "college"},
        "restaurant": {"food": "thai"},
    }
    assert state.off_schema == {}


def test_to_state_drops_absent_values(schema):
    outcome = repair_and_parse(
        '{"departure": "not mentioned", "destination": "", "leaveAt": "none", '
        '"arriveBy": "17:45"}'
    )
    state = to_state(outcome, ("taxi",), schema)
    assert state.slots == {"taxi": {"arriveBy": "17:45"}}


def test_to_state_keeps_dontcare(schema):
    outcome = repair_and_parse('{"pricerange": "dontcare"}')
    state = to_state(outcome, ("restaurant",), schema)
    assert state.slots == {"restaurant": {"pricerange": "dontcare"}}


def test_to_state_stringifies_scalars(schema):
    outcome = repair_and_parse('{"people": 6, "parking": true, "internet": null}')
    state = to_state(outcome, ("hotel",), schema)
    assert state.slots == {"hotel": {"people": "6", "parking": "true"}}
    # null reads as absent


def test_to_state_no_domains_goes_off_schema(schema):
    outcome = repair_and_parse('{"departure": "college"}')
    state = to_state(outcome, (), schema)
    assert state.slots == {}
    assert state.off_schema == {"": {"departure": "college"}}


def test_to_state_parse_failure(schema):
    outcome = repair_and_parse("gibberish")
    state = to_state(outcome, ("taxi",), schema)
    assert state == PredictedState(parse_failed=True)
    assert state.slots == {} and state.off_schema == {}


def test_to_state_unknown_domain_off_schema(schema):
    outcome = repair_and_parse('{"bus": {"day": "monday"}}')
    state = to_state(outcome, ("bus",), schema)
    assert state.slots == {}
    assert state.off_schema == {"bus": {"day": "monday"}}
