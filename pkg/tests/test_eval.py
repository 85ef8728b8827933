"""Slot metrics against the hand-computed fixtures, plus conventions
and symmetry."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icldst.corpus import TurnSample, Utterance
from icldst.evaluate import (
    Metrics,
    RelevanceCoverage,
    aggregate_relevance_coverage,
    micro_metrics,
    relevance_coverage,
    slot_keys,
    slot_triples,
)
from icldst.repair import PredictedState
from metric_fixtures import AGGREGATION_FIXTURE, MICRO_FIXTURES, RELEVANCE_FIXTURE

TOL = 1e-12


def mk_sample(sample_id, state):
    domains = tuple(state)
    return TurnSample(
        sample_id, (Utterance("user", "hi"),), domains, state, "train"
    )


def test_slot_triples_from_mapping():
    triples = slot_triples({"taxi": {"departure": "a", "leaveAt": "not mentioned"}})
    assert triples == {("taxi", "departure", "a")}
    assert slot_triples({}) == frozenset()


def test_slot_triples_from_predicted_state():
    state = PredictedState(
        slots={"taxi": {"departure": "a"}}, off_schema={"spa": {"open": "noon"}}
    )
    assert slot_triples(state) == {
        ("taxi", "departure", "a"),
        ("spa", "open", "noon"),
    }


def test_slot_triples_rejects_other_types():
    with pytest.raises(TypeError):
        slot_triples(["taxi"])


def test_slot_keys_drop_values():
    keys = slot_keys({"taxi": {"departure": "a", "destination": "b"}})
    assert keys == {("taxi", "departure"), ("taxi", "destination")}


@pytest.mark.parametrize(
    "name, predictions, golds, expected",
    MICRO_FIXTURES,
    ids=[name for name, *_ in MICRO_FIXTURES],
)
def test_micro_metrics_fixtures(name, predictions, golds, expected):
    got = micro_metrics(predictions, golds)
    precision, recall, correct, predicted_total, gold_total = expected
    assert abs(got.precision - precision) <= TOL
    assert abs(got.recall - recall) <= TOL
    assert got.correct == correct
    assert got.predicted_total == predicted_total
    assert got.gold_total == gold_total


def test_micro_metrics_requires_matching_ids():
    with pytest.raises(ValueError, match="ids differ"):
        micro_metrics({"a": {}}, {"b": {}})


def test_metrics_to_dict_round_trip():
    metrics = micro_metrics({"s": {"taxi": {"departure": "a"}}}, {"s": {}})
    assert metrics.to_dict() == {
        "precision": 0.0,
        "recall": 0.0,
        "correct": 0,
        "predicted_total": 1,
        "gold_total": 0,
    }
    assert Metrics(**metrics.to_dict()) == metrics


def _state_strategy():
    value = st.text("abcdef", min_size=1, max_size=3)
    slots = st.dictionaries(
        st.sampled_from(["departure", "destination", "leaveAt", "area"]),
        value,
        max_size=3,
    )
    return st.dictionaries(st.sampled_from(["taxi", "hotel", "train"]), slots, max_size=2)


@settings(max_examples=80, deadline=None)
@given(
    states=st.lists(st.tuples(_state_strategy(), _state_strategy()), min_size=1, max_size=5)
)
def test_swapping_predictions_and_golds_swaps_precision_recall(states):
    a = {f"s{i}": pred for i, (pred, _) in enumerate(states)}
    b = {f"s{i}": gold for i, (_, gold) in enumerate(states)}
    ab = micro_metrics(a, b)
    ba = micro_metrics(b, a)
    assert ab.precision == ba.recall
    assert ab.recall == ba.precision
    assert ab.correct == ba.correct
    assert ab.predicted_total == ba.gold_total


# --- relevance and coverage ----------------------------------------------------


def test_relevance_coverage_fixture():
    demos = [
        mk_sample(f"d{i}", state)
        for i, state in enumerate(RELEVANCE_FIXTURE["demo_states"])
    ]
    gold = mk_sample("g", RELEVANCE_FIXTURE["gold_state"])
    got = relevance_coverage(demos, gold)
    relevance, coverage, shared, demo_n, gold_n = RELEVANCE_FIXTURE["expected"]
    assert abs(got.relevance - relevance) <= TOL
    assert abs(got.coverage - coverage) <= TOL
    assert (got.shared_keys, got.demo_keys, got.gold_keys) == (shared, demo_n, gold_n)


def test_relevance_coverage_empty_conventions():
    both_empty = relevance_coverage([mk_sample("d", {})], mk_sample("g", {}))
    assert both_empty.relevance == 1.0 and both_empty.coverage == 1.0

    no_demo_keys = relevance_coverage(
        [mk_sample("d", {})], mk_sample("g", {"taxi": {"departure": "a"}})
    )
    assert no_demo_keys.relevance == 0.0 and no_demo_keys.coverage == 0.0

    no_gold_keys = relevance_coverage(
        [mk_sample("d", {"taxi": {"departure": "a"}})], mk_sample("g", {})
    )
    assert no_gold_keys.relevance == 0.0 and no_gold_keys.coverage == 0.0


def test_relevance_coverage_requires_demos():
    with pytest.raises(ValueError, match="at least one"):
        relevance_coverage([], mk_sample("g", {}))


def test_aggregate_relevance_coverage_fixture():
    results = [
        RelevanceCoverage(
            relevance=shared / demo if demo else 1.0,
            coverage=shared / gold if gold else 1.0,
            shared_keys=shared,
            demo_keys=demo,
            gold_keys=gold,
        )
        for shared, demo, gold in AGGREGATION_FIXTURE["counts"]
    ]
    micro = aggregate_relevance_coverage(results, "micro")
    macro = aggregate_relevance_coverage(results, "macro")
    assert abs(micro.relevance - AGGREGATION_FIXTURE["micro"][0]) <= TOL
    assert abs(micro.coverage - AGGREGATION_FIXTURE["micro"][1]) <= TOL
    assert abs(macro.relevance - AGGREGATION_FIXTURE["macro"][0]) <= TOL
    assert abs(macro.coverage - AGGREGATION_FIXTURE["macro"][1]) <= TOL
    pooled = (micro.shared_keys, micro.demo_keys, micro.gold_keys)
    assert pooled == AGGREGATION_FIXTURE["pooled"]
    assert (macro.shared_keys, macro.demo_keys, macro.gold_keys) == pooled


def test_aggregate_validation():
    with pytest.raises(ValueError, match="empty"):
        aggregate_relevance_coverage([], "micro")
    result = RelevanceCoverage(1.0, 1.0, 1, 1, 1)
    with pytest.raises(ValueError, match="unknown aggregation"):
        aggregate_relevance_coverage([result], "median")
