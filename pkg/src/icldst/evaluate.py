"""Slot-level metrics and demonstration quality measures.

Predictions and golds are sparse states; comparison happens on
(domain, key, value) triples. Off-schema predictions still count toward
the predicted total, so inventing slots costs precision. Relevance and
coverage compare the slot keys appearing in a sample's demonstrations
against its gold keys.
"""

from collections.abc import Mapping
from dataclasses import dataclass

from .corpus import NOT_MENTIONED, TurnSample
from .repair import PredictedState

SlotTriple = tuple[str, str, str]
SlotKey = tuple[str, str]


def _triples_from_mapping(state: Mapping) -> set[SlotTriple]:
    triples = set()
    for domain, slots in state.items():
        for key, value in slots.items():
            if value == NOT_MENTIONED:
                continue
            triples.add((domain, key, value))
    return triples


def slot_triples(state) -> frozenset[SlotTriple]:
    """(domain, key, value) triples of a sparse state or PredictedState.

    For a PredictedState, off-schema claims are included: they are
    predictions and must be scored as such.
    """
    if isinstance(state, PredictedState):
        return frozenset(
            _triples_from_mapping(state.slots) | _triples_from_mapping(state.off_schema)
        )
    if isinstance(state, Mapping):
        return frozenset(_triples_from_mapping(state))
    raise TypeError(f"cannot extract slot triples from {type(state).__name__}")


def slot_keys(state) -> frozenset[SlotKey]:
    """(domain, key) pairs with a filled value."""
    return frozenset((domain, key) for domain, key, _ in slot_triples(state))


def _ratio(hits: int, denominator: int, other_denominator: int) -> float:
    """hits/denominator with the empty-set convention.

    An empty denominator means a perfect score only when the other side
    is empty too; predicting nothing against a non-empty gold is 0.
    """
    if denominator > 0:
        return hits / denominator
    return 1.0 if other_denominator == 0 else 0.0


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    correct: int
    predicted_total: int
    gold_total: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "correct": self.correct,
            "predicted_total": self.predicted_total,
            "gold_total": self.gold_total,
        }


def micro_metrics(predictions: Mapping, golds: Mapping) -> Metrics:
    """Micro-averaged precision/recall over aligned sample maps.

    Both arguments map sample_id to a state (PredictedState allowed);
    the id sets must match exactly.
    """
    if set(predictions.keys()) != set(golds.keys()):
        missing = set(golds) - set(predictions)
        extra = set(predictions) - set(golds)
        raise ValueError(
            f"prediction/gold sample ids differ (missing={sorted(missing)[:3]}, "
            f"extra={sorted(extra)[:3]})"
        )
    correct = predicted_total = gold_total = 0
    for sample_id, predicted in predictions.items():
        predicted_triples = slot_triples(predicted)
        gold_triples = slot_triples(golds[sample_id])
        correct += len(predicted_triples & gold_triples)
        predicted_total += len(predicted_triples)
        gold_total += len(gold_triples)
    return Metrics(
        precision=_ratio(correct, predicted_total, gold_total),
        recall=_ratio(correct, gold_total, predicted_total),
        correct=correct,
        predicted_total=predicted_total,
        gold_total=gold_total,
    )


@dataclass(frozen=True)
class RelevanceCoverage:
    relevance: float
    coverage: float
    shared_keys: int
    demo_keys: int
    gold_keys: int

    def to_dict(self) -> dict:
        return {
            "relevance": self.relevance,
            "coverage": self.coverage,
            "shared_keys": self.shared_keys,
            "demo_keys": self.demo_keys,
            "gold_keys": self.gold_keys,
        }


def relevance_coverage(
    demo_samples: list[TurnSample], gold_sample: TurnSample
) -> RelevanceCoverage:
    """How well one sample's demonstrations match its gold slot keys.

    Relevance is the fraction of demonstrated keys that are gold keys;
    coverage is the fraction of gold keys that are demonstrated.
    """
    if not demo_samples:
        raise ValueError("relevance_coverage requires at least one demonstration")
    demo_keys: set[SlotKey] = set()
    for demo in demo_samples:
        demo_keys |= slot_keys(demo.gold_state)
    gold_keys = slot_keys(gold_sample.gold_state)
    shared = len(demo_keys & gold_keys)
    return RelevanceCoverage(
        relevance=_ratio(shared, len(demo_keys), len(gold_keys)),
        coverage=_ratio(shared, len(gold_keys), len(demo_keys)),
        shared_keys=shared,
        demo_keys=len(demo_keys),
        gold_keys=len(gold_keys),
    )


def aggregate_relevance_coverage(
    results: list[RelevanceCoverage], mode: str
) -> RelevanceCoverage:
    """Pool per-sample results; micro pools counts, macro averages ratios."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    shared = sum(r.shared_keys for r in results)
    demo = sum(r.demo_keys for r in results)
    gold = sum(r.gold_keys for r in results)
    if mode == "micro":
        relevance = _ratio(shared, demo, gold)
        coverage = _ratio(shared, gold, demo)
    elif mode == "macro":
        relevance = sum(r.relevance for r in results) / len(results)
        coverage = sum(r.coverage for r in results) / len(results)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return RelevanceCoverage(
        relevance=relevance,
        coverage=coverage,
        shared_keys=shared,
        demo_keys=demo,
        gold_keys=gold,
    )
