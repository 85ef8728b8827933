"""Completion backends and decoding helpers.

Two backends share one ``complete(prompt, params)`` interface: an HTTP
client for OpenAI-style completion endpoints, and a deterministic mock
that answers by copying slot values out of the most similar
demonstration in the prompt. The mock is what makes end-to-end tests
and dry runs reproducible without a model server.
"""

import json
import os
import re
from dataclasses import dataclass

from ._retry import RequestFailed, post_json
from .corpus import NOT_MENTIONED, normalize_value

SLOT_VALUE_STOPS = ('"',)
KEY_VALUE_STOPS = ("\nUser:", "\nInstruction:")


class BackendError(Exception):
    """A completion request that failed after retries."""


class ContextOverflowError(BackendError):
    """The server rejected the prompt as longer than its context window."""


class MockBackendError(BackendError):
    """The mock backend received a prompt it cannot parse."""


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 32
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_new_tokens <= 0:
            raise ValueError(f"max_new_tokens must be positive, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


SLOT_VALUE_PARAMS = GenerationParams(max_new_tokens=32, stop_sequences=SLOT_VALUE_STOPS)
KEY_VALUE_PARAMS = GenerationParams(max_new_tokens=256, stop_sequences=KEY_VALUE_STOPS)


def truncate_at_stop(text: str, stop_sequences: tuple[str, ...]) -> str:
    """Cut at the earliest stop sequence; servers do not reliably apply them."""
    cut = len(text)
    for stop in stop_sequences:
        pos = text.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    return text[:cut]


def complete(prompt: str, params: GenerationParams, backend) -> str:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    raw = backend.complete(prompt, params)
    return truncate_at_stop(raw, params.stop_sequences)


def slot_value_from_completion(text: str) -> str:
    """Normalize a raw completion into a slot value; empty means absent."""
    value = normalize_value(text)
    return value if value else NOT_MENTIONED


def predict_slot_value(prompt: str, backend, params: GenerationParams | None = None) -> str:
    """Complete a prompt that ends with an opened value quote."""
    return slot_value_from_completion(complete(prompt, params or SLOT_VALUE_PARAMS, backend))


def generate_key_values(prompt: str, backend, params: GenerationParams | None = None) -> str:
    """Free-form slots-object generation; returns the raw text for repair."""
    return complete(prompt, params or KEY_VALUE_PARAMS, backend)


class HttpCompletionBackend:
    """OpenAI-style /completions client."""

    kind = "http_completion"

    def __init__(
        self,
        url: str,
        model_name: str,
        timeout: float = 60.0,
        max_retries: int = 3,
        api_key_env: str | None = None,
    ):
        self.url = url
        self.model_name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self.api_key_env = api_key_env

    def _headers(self) -> dict[str, str] | None:
        if not self.api_key_env:
            return None
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise BackendError(
                f"api_key_env is set but ${self.api_key_env} is empty or unset"
            )
        return {"Authorization": f"Bearer {key}"}

    def complete(self, prompt: str, params: GenerationParams) -> str:
        payload = {
            "model": self.model_name,
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "stop": list(params.stop_sequences),
        }
        try:
            data = post_json(
                self.url,
                payload,
                timeout=self.timeout,
                max_retries=self.max_retries,
                headers=self._headers(),
            )
        except RequestFailed as exc:
            if exc.status is not None and 400 <= exc.status < 500 and (
                "context" in exc.body.lower() or "too long" in exc.body.lower()
            ):
                raise ContextOverflowError(str(exc)) from exc
            raise BackendError(str(exc)) from exc
        choices = data.get("choices")
        if not isinstance(choices, list) or not choices:
            raise BackendError(f"completion response has no choices: {data!r}")
        text = choices[0].get("text") if isinstance(choices[0], dict) else None
        if not isinstance(text, str):
            raise BackendError(f"completion choice has no text field: {choices[0]!r}")
        return text


_FLAT_TARGET = re.compile(r'^\{"([^"]+)": "$')
_NESTED_TARGET = re.compile(r'^\{"([^"]+)": \{"([^"]+)": "$')


def _split_marked_line(line: str) -> tuple[list, str]:
    """(domains, slots_text) from a '<history> Domain: [...] Slots: ...' line."""
    head, sep, slots_text = line.rpartition(" Slots: ")
    if not sep:
        raise MockBackendError(f"line has no Slots marker: {line[:120]!r}")
    _, sep, domain_text = head.rpartition(" Domain: ")
    if not sep:
        raise MockBackendError(f"line has no Domain marker: {line[:120]!r}")
    try:
        domains = json.loads(domain_text)
    except json.JSONDecodeError as exc:
        raise MockBackendError(f"unparseable domain list {domain_text!r}") from exc
    if not isinstance(domains, list):
        raise MockBackendError(f"domain list is not a list: {domain_text!r}")
    return domains, slots_text


def _nested_demo_state(domains: list, slots_text: str) -> dict:
    try:
        obj = json.loads(slots_text)
    except json.JSONDecodeError as exc:
        raise MockBackendError(f"unparseable demo slots {slots_text[:120]!r}") from exc
    if not isinstance(obj, dict):
        raise MockBackendError(f"demo slots is not an object: {slots_text[:120]!r}")
    if obj and all(isinstance(v, dict) for v in obj.values()):
        return obj
    if not obj:
        return {}
    if not domains:
        raise MockBackendError("flat demo slots with an empty domain list")
    return {domains[0]: obj}


def mock_copy_from_top_demo(prompt: str) -> str:
    """Answer by copying from the most similar demonstration.

    The prompt's last line is the test block; the non-empty line right
    above it is the top demonstration. For an opened value quote, returns
    that demo's value for the target key (filler included) plus a closing
    quote. For key_value_generation, returns the demo's slots restricted
    to the test block's domains.
    """
    lines = prompt.split("\n")
    if len(lines) < 3:
        raise MockBackendError("prompt has no demonstration lines")
    test_line = lines[-1]
    demo_lines = [line for line in lines[1:-1] if line.strip()]
    if not demo_lines:
        raise MockBackendError("no demonstrations to copy from")
    demo_domains, demo_slots_text = _split_marked_line(demo_lines[-1])
    demo_state = _nested_demo_state(demo_domains, demo_slots_text)

    test_domains, partial = _split_marked_line(test_line)
    if partial == "":
        # key_value_generation: emit the demo state for the test domains
        if len(test_domains) == 1:
            return json.dumps(demo_state.get(test_domains[0], {}), ensure_ascii=False)
        return json.dumps(
            {d: demo_state[d] for d in test_domains if d in demo_state},
            ensure_ascii=False,
        )
    match = _NESTED_TARGET.match(partial)
    if match:
        domain, key = match.group(1), match.group(2)
    else:
        match = _FLAT_TARGET.match(partial)
        if not match:
            raise MockBackendError(f"unrecognized test block tail: {partial!r}")
        if not test_domains:
            raise MockBackendError("flat target with an empty domain list")
        domain, key = test_domains[0], match.group(1)
    value = demo_state.get(domain, {}).get(key, NOT_MENTIONED)
    if not isinstance(value, str):
        value = json.dumps(value, ensure_ascii=False)
    return value + '"'


class MockCopyFromTopDemoBackend:
    """Deterministic offline backend; see ``mock_copy_from_top_demo``."""

    kind = "mock_copy_from_top_demo"
    model_name = "mock-copy-from-top-demo"

    def complete(self, prompt: str, params: GenerationParams) -> str:
        return mock_copy_from_top_demo(prompt)
