"""Prompt construction for in-context dialogue state tracking.

A prompt is an instruction line, a block of retrieved demonstrations
ordered least to most similar, and a test block that either opens a
JSON object up to the target slot's value quote (slot_value_given_key)
or stops after ``Slots: `` (key_value_generation). Demonstrations are
dropped greedily, least similar first, until the token estimate fits
the budget minus the generation reserve.
"""

import json
import math
import warnings
from dataclasses import dataclass, replace

from ._retry import RequestFailed, post_json
from .corpus import NOT_MENTIONED, Schema, TurnSample, render_history
from .retriever import RetrievalResult

DEFAULT_INSTRUCTION = "Instruction: Identify the slot value."
HISTORY_MODES = ("user_agent", "user_only")
DECODING_STRATEGIES = ("slot_value_given_key", "key_value_generation")

DEFAULT_TOKEN_BUDGET = 2048
DEFAULT_GENERATION_RESERVE = 64


class PromptError(Exception):
    """A sample or configuration that cannot be rendered."""


class UnfittableSampleError(PromptError):
    """Instruction plus test block alone exceed the token budget."""


class StrictKError(PromptError):
    """strict_k is set and the requested demonstrations do not fit."""


class HeuristicTokenCounter:
    """ceil(utf8_bytes / 4); the default, dependency-free estimate."""

    name = "heuristic"

    def count(self, text: str) -> int:
        return math.ceil(len(text.encode("utf-8")) / 4)


class HttpTokenCounter:
    """Tokenizer endpoint client; falls back to the heuristic on failure.

    POSTs {"model", "prompt"} and accepts either {"tokens": [...]} or
    {"count": int} in the response. The first failure emits a warning and
    every later call uses the heuristic without further network traffic.
    """

    def __init__(
        self,
        url: str,
        model_name: str | None = None,
        timeout: float = 10.0,
        max_retries: int = 1,
    ):
        self.url = url
        self.model_name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self.name = f"http:{url}"
        self._fallback = HeuristicTokenCounter()
        self._broken = False

    def count(self, text: str) -> int:
        if self._broken:
            return self._fallback.count(text)
        payload: dict = {"prompt": text}
        if self.model_name:
            payload["model"] = self.model_name
        try:
            data = post_json(
                self.url, payload, timeout=self.timeout, max_retries=self.max_retries
            )
            tokens = data.get("tokens")
            if isinstance(tokens, list):
                return len(tokens)
            count = data.get("count")
            if isinstance(count, int) and count >= 0:
                return count
            raise RequestFailed(f"tokenizer response has no usable fields: {data!r}")
        except RequestFailed as exc:
            self._broken = True
            warnings.warn(
                f"tokenizer endpoint {self.url} failed ({exc}); "
                "falling back to the byte-length heuristic",
                stacklevel=2,
            )
            return self._fallback.count(text)


def estimate_tokens(text: str, counter=None) -> int:
    counter = counter or HeuristicTokenCounter()
    return counter.count(text)


@dataclass(frozen=True)
class PromptConfig:
    instruction: str = DEFAULT_INSTRUCTION
    history_mode: str = "user_agent"
    speaker_tags: bool = True
    max_demos: int = 10
    token_budget: int = DEFAULT_TOKEN_BUDGET
    generation_reserve: int = DEFAULT_GENERATION_RESERVE
    decoding_strategy: str = "slot_value_given_key"
    # Single-domain samples render a flat slots object unless this is set.
    force_nested_slots: bool = False
    strict_k: bool = False

    def __post_init__(self):
        if self.history_mode not in HISTORY_MODES:
            raise PromptError(f"unknown history_mode {self.history_mode!r}")
        if self.decoding_strategy not in DECODING_STRATEGIES:
            raise PromptError(f"unknown decoding_strategy {self.decoding_strategy!r}")
        if not self.instruction.strip():
            raise PromptError("instruction must be non-empty")
        if self.max_demos < 0:
            raise PromptError(f"max_demos must be >= 0, got {self.max_demos}")
        if self.token_budget <= 0:
            raise PromptError(f"token_budget must be positive, got {self.token_budget}")
        if not 0 <= self.generation_reserve < self.token_budget:
            raise PromptError(
                f"generation_reserve {self.generation_reserve} must be in "
                f"[0, token_budget={self.token_budget})"
            )

    def with_overrides(self, **kwargs) -> "PromptConfig":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Demonstration:
    sample_id: str
    score: float
    rendered_text: str


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    # sample_ids in prompt order, i.e. least to most similar
    included_demo_ids: tuple[str, ...]
    estimated_tokens: int
    test_sample_id: str


def _state_object(
    state: dict, domains: tuple[str, ...] | list[str], schema: Schema
) -> dict:
    """Per-domain slot objects with every schema key, fillers for absences."""
    if not domains:
        raise PromptError("cannot render a state without domains")
    rendered: dict = {}
    for domain in domains:
        if domain not in schema:
            raise PromptError(f"domain {domain!r} not in schema")
        filled = state.get(domain, {})
        for key in filled:
            if not schema.has_key(domain, key):
                raise PromptError(
                    f"slot key {key!r} is not in the schema for domain {domain!r}"
                )
        rendered[domain] = {
            key: filled.get(key, NOT_MENTIONED) for key in schema.slot_keys(domain)
        }
    return rendered


def render_state_json(
    state: dict,
    domains: tuple[str, ...] | list[str],
    schema: Schema,
    force_nested: bool = False,
) -> str:
    """The slots object for a demonstration, flat when a single domain is active."""
    rendered = _state_object(state, domains, schema)
    if len(domains) == 1 and not force_nested:
        return json.dumps(rendered[domains[0]], ensure_ascii=False)
    return json.dumps(rendered, ensure_ascii=False)


def render_demonstration(
    sample: TurnSample, config: PromptConfig, schema: Schema, score: float = 0.0
) -> Demonstration:
    """One in-context example: history, domain list, full slots object."""
    history = render_history(sample, config.history_mode, config.speaker_tags)
    domains = list(sample.gold_domains)
    if domains:
        slots = render_state_json(
            sample.gold_state, domains, schema, config.force_nested_slots
        )
    else:
        # Turns with no tracked state still make syntactically complete demos.
        slots = "{}"
    text = f"{history} Domain: {json.dumps(domains)} Slots: {slots}"
    return Demonstration(sample_id=sample.sample_id, score=score, rendered_text=text)


def render_test_block(
    sample: TurnSample,
    config: PromptConfig,
    schema: Schema,
    target: tuple[str, str] | None = None,
) -> str:
    """The trailing block the model completes.

    For slot_value_given_key, ``target`` is the (domain, key) pair and the
    block ends with the opened value quote. For key_value_generation it
    ends right after ``Slots: `` and ``target`` must be None.
    """
    history = render_history(sample, config.history_mode, config.speaker_tags)
    domains = list(sample.gold_domains)
    base = f"{history} Domain: {json.dumps(domains)} Slots: "
    if config.decoding_strategy == "key_value_generation":
        if target is not None:
            raise PromptError("key_value_generation takes no target slot")
        return base
    if target is None:
        raise PromptError("slot_value_given_key requires a target (domain, key)")
    domain, key = target
    if domain not in schema:
        raise PromptError(f"target domain {domain!r} not in schema")
    if not schema.has_key(domain, key):
        raise PromptError(
            f"target key {key!r} is not in the schema for domain {domain!r}"
        )
    if domain not in domains:
        raise PromptError(
            f"target domain {domain!r} is not among the sample's domains {domains}"
        )
    if len(domains) == 1 and not config.force_nested_slots:
        return f'{base}{{"{key}": "'
    return f'{base}{{"{domain}": {{"{key}": "'


def _prompt_text(instruction: str, demo_texts: list[str], test_block: str) -> str:
    return instruction + "\n" + "\n".join(demo_texts) + "\n" + test_block


def assemble_prompt(
    sample: TurnSample,
    retrieval: RetrievalResult | None,
    train_samples,
    config: PromptConfig,
    schema: Schema,
    target: tuple[str, str] | None = None,
    token_counter=None,
) -> RenderedPrompt:
    """Build the full prompt for one test sample.

    ``train_samples`` maps sample_id to TurnSample for every retrieved
    neighbour. Demonstrations appear least to most similar; when the
    token estimate exceeds budget minus reserve, the least similar are
    dropped first. With no demonstrations left the sample is unfittable.
    """
    neighbors = list(retrieval.neighbors[: config.max_demos]) if retrieval else []
    demos = []
    for sid, score in neighbors:
        if sid not in train_samples:
            raise PromptError(f"retrieved sample {sid!r} missing from train corpus")
        demos.append(render_demonstration(train_samples[sid], config, schema, score))
    demos.reverse()  # least similar first, most similar adjacent to the test block

    test_block = render_test_block(sample, config, schema, target)
    limit = config.token_budget - config.generation_reserve
    while True:
        text = _prompt_text(config.instruction, [d.rendered_text for d in demos], test_block)
        estimated = estimate_tokens(text, token_counter)
        if estimated <= limit:
            break
        if not demos:
            raise UnfittableSampleError(
                f"sample {sample.sample_id}: instruction and test block alone "
                f"estimate {estimated} tokens against a limit of {limit}"
            )
        if config.strict_k:
            raise StrictKError(
                f"sample {sample.sample_id}: {len(demos)} demonstrations do not fit "
                f"and strict_k forbids dropping any"
            )
        demos.pop(0)
    return RenderedPrompt(
        text=text,
        included_demo_ids=tuple(d.sample_id for d in demos),
        estimated_tokens=estimated,
        test_sample_id=sample.sample_id,
    )
