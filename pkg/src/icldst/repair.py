"""Repair of model-emitted JSON and assembly into predicted states.

Free-form generation produces near-JSON: fenced blocks, leading prose,
single quotes, bare keys, trailing commas, cut-off strings. Repair runs
a fixed pipeline of conservative fixes, then parses once. Every fix is
a no-op on already-valid JSON, text that parses cleanly never enters
the pipeline, and nothing here raises on any input string.
"""

import json
import re
from dataclasses import dataclass, field

from .corpus import ABSENT_VALUES, Schema, normalize_value

STATUS_CLEAN = "parsed_clean"
STATUS_REPAIRED = "parsed_after_repair"
STATUS_UNPARSEABLE = "unparseable"

FIX_ORDER = (
    "fence_strip",
    "prose_trim",
    "quote_normalize",
    "key_quote",
    "trailing_comma",
    "string_close",
    "brace_close",
)


@dataclass(frozen=True)
class RepairOutcome:
    status: str
    state: dict | None
    applied_fixes: tuple[str, ...]

    @property
    def parsed(self) -> bool:
        return self.status != STATUS_UNPARSEABLE


def _segments(text: str) -> tuple[list[tuple[bool, str]], bool]:
    """Split on double-quoted strings: [(is_string, chunk)], plus open-string flag.

    String chunks include their delimiters; backslash escapes are honored.
    """
    parts: list[tuple[bool, str]] = []
    buf: list[str] = []
    in_str = False
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if in_str:
            if c == "\\" and i + 1 < n:
                buf.append(text[i : i + 2])
                i += 2
                continue
            buf.append(c)
            i += 1
            if c == '"':
                parts.append((True, "".join(buf)))
                buf = []
                in_str = False
            continue
        if c == '"':
            if buf:
                parts.append((False, "".join(buf)))
            buf = [c]
            in_str = True
            i += 1
            continue
        buf.append(c)
        i += 1
    if buf:
        parts.append((in_str, "".join(buf)))
    return parts, in_str


def _map_outside_strings(text: str, fn) -> str:
    parts, _ = _segments(text)
    return "".join(chunk if is_str else fn(chunk) for is_str, chunk in parts)


_FENCE_BLOCK = re.compile(r"```[a-zA-Z]*\s*(.*?)```", re.DOTALL)
_FENCE_OPEN = re.compile(r"```[a-zA-Z]*\s*")


def _fence_strip(text: str) -> str:
    match = _FENCE_BLOCK.search(text)
    if match:
        return match.group(1)
    match = _FENCE_OPEN.search(text)
    if match:
        return text[match.end() :]
    return text


def _prose_trim(text: str) -> str:
    """Slice from the first ``{`` to its matching close (or end of text).

    Tracks both quote styles so braces inside string values do not count.
    """
    start = text.find("{")
    if start == -1:
        return text
    in_str = False
    quote = ""
    depth = 0
    i, n = start, len(text)
    while i < n:
        c = text[i]
        if in_str:
            if c == "\\" and i + 1 < n:
                i += 2
                continue
            if c == quote:
                in_str = False
        elif c in "\"'":
            in_str = True
            quote = c
        elif c in "{[":
            depth += 1
        elif c in "}]":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
        i += 1
    return text[start:]


_CURLY_DOUBLE = "“”„"
_CURLY_SINGLE = "‘’‚"


def _quote_normalize(text: str) -> str:
    """Rewrite single-quoted strings and curly quotes to plain double quotes.

    Content inside ``"``-delimited strings is left alone, so apostrophes
    and quotation marks in values survive.
    """
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == '"' or c in _CURLY_DOUBLE:
            plain_opener = c == '"'
            out.append('"')
            i += 1
            while i < n:
                cj = text[i]
                if cj == "\\" and i + 1 < n:
                    out.append(text[i : i + 2])
                    i += 2
                    continue
                if cj == '"' or (not plain_opener and cj in _CURLY_DOUBLE):
                    out.append('"')
                    i += 1
                    break
                out.append(cj)
                i += 1
            continue
        if c == "'" or c in _CURLY_SINGLE:
            i += 1
            buf: list[str] = []
            closed = False
            while i < n:
                cj = text[i]
                if cj == "\\" and i + 1 < n:
                    nxt = text[i + 1]
                    # \' is not a JSON escape; unwrap it
                    buf.append("'" if nxt == "'" else text[i : i + 2])
                    i += 2
                    continue
                if cj == "'" or cj in _CURLY_SINGLE:
                    closed = True
                    i += 1
                    break
                buf.append(cj)
                i += 1
            inner = "".join(buf).replace('"', '\\"')
            out.append('"' + inner + ('"' if closed else ""))
            continue
        out.append(c)
        i += 1
    return "".join(out)


_BARE_KEY = re.compile(r"([{,]\s*)([A-Za-z_][A-Za-z0-9_.\- ]*?)(\s*:)")


def _key_quote(text: str) -> str:
    return _map_outside_strings(
        text, lambda seg: _BARE_KEY.sub(lambda m: f'{m.group(1)}"{m.group(2)}"{m.group(3)}', seg)
    )


_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def _strip_trailing_commas(seg: str) -> str:
    while True:
        new = _TRAILING_COMMA.sub(r"\1", seg)
        if new == seg:
            return seg
        seg = new


def _trailing_comma(text: str) -> str:
    return _map_outside_strings(text, _strip_trailing_commas)


def _string_close(text: str) -> str:
    _, open_str = _segments(text)
    if not open_str:
        return text
    t = text.rstrip()
    # a trailing lone backslash would swallow the closing quote
    n_backslashes = len(t) - len(t.rstrip("\\"))
    if n_backslashes % 2 == 1:
        t = t[:-1]
    return t + '"'


def _brace_close(text: str) -> str:
    parts, open_str = _segments(text)
    if open_str:
        return text
    stack: list[str] = []
    for is_str, chunk in parts:
        if is_str:
            continue
        for c in chunk:
            if c in "{[":
                stack.append(c)
            elif c in "}]":
                expected = "{" if c == "}" else "["
                if stack and stack[-1] == expected:
                    stack.pop()
    if not stack:
        return text
    t = text.rstrip()
    # closing at a dangling comma means eating the comma first
    while t.endswith(","):
        t = t[:-1].rstrip()
    closers = "".join("}" if c == "{" else "]" for c in reversed(stack))
    return t + closers


_FIXES = (
    ("fence_strip", _fence_strip),
    ("prose_trim", _prose_trim),
    ("quote_normalize", _quote_normalize),
    ("key_quote", _key_quote),
    ("trailing_comma", _trailing_comma),
    ("string_close", _string_close),
    ("brace_close", _brace_close),
)


def _try_parse(text: str) -> dict | None:
    try:
        obj = json.loads(text)
    except (ValueError, RecursionError):
        return None
    return obj if isinstance(obj, dict) else None


def repair_and_parse(raw: str) -> RepairOutcome:
    """Parse model output into a top-level JSON object, repairing if needed.

    Never raises. ``applied_fixes`` lists, in pipeline order, exactly the
    fixes that changed the text, whether or not the final parse succeeds.
    """
    text = raw if isinstance(raw, str) else str(raw)
    obj = _try_parse(text)
    if obj is not None:
        return RepairOutcome(STATUS_CLEAN, obj, ())
    applied: list[str] = []
    for tag, fix in _FIXES:
        try:
            fixed = fix(text)
        except Exception:  # a misbehaving fix must not break the pipeline
            continue
        if fixed != text:
            applied.append(tag)
            text = fixed
    obj = _try_parse(text)
    if obj is None:
        return RepairOutcome(STATUS_UNPARSEABLE, None, tuple(applied))
    return RepairOutcome(STATUS_REPAIRED, obj, tuple(applied))


@dataclass(frozen=True)
class PredictedState:
    """Schema-valid slots plus whatever the model claimed off schema."""

    slots: dict = field(default_factory=dict)
    off_schema: dict = field(default_factory=dict)
    parse_failed: bool = False


def _stringify(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (dict, list)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def to_state(
    outcome: RepairOutcome, domains: tuple[str, ...] | list[str], schema: Schema
) -> PredictedState:
    """Interpret a parsed object as a predicted dialogue state.

    An object whose values are all objects is read as nested
    {domain: {key: value}}; otherwise it is a flat slots object attached
    to the first of ``domains``. Keys outside the schema land in the
    off-schema bucket; absent-valued slots are dropped.
    """
    if not outcome.parsed or not isinstance(outcome.state, dict):
        return PredictedState(parse_failed=True)
    obj = outcome.state
    nested = bool(obj) and all(isinstance(v, dict) for v in obj.values())
    pairs: list[tuple[str, str, object]] = []
    if nested:
        for domain, sub in obj.items():
            for key, value in sub.items():
                pairs.append((str(domain), str(key), value))
    else:
        base = str(domains[0]) if domains else ""
        for key, value in obj.items():
            pairs.append((base, str(key), value))
    slots: dict = {}
    off_schema: dict = {}
    for domain, key, value in pairs:
        norm = normalize_value(_stringify(value))
        if norm in ABSENT_VALUES:
            continue
        bucket = slots if schema.has_key(domain, key) else off_schema
        bucket.setdefault(domain, {})[key] = norm
    return PredictedState(slots=slots, off_schema=off_schema)
