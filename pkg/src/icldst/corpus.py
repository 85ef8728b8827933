"""Normalized dialogue corpus: import, turn accumulation, history rendering.

A corpus is a flat list of per-turn samples. Each sample carries the full
dialogue history up to and including one user utterance, plus the gold
dialogue state at that point. States are stored sparse: only slots with a
real value appear; "not mentioned" entries are dropped at ingestion.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SPEAKER_USER = "user"
SPEAKER_AGENT = "agent"
SPLITS = ("train", "dev", "test")

NOT_MENTIONED = "not mentioned"
# raw-dataset markers that all mean "slot not filled"
ABSENT_VALUES = {"", "not mentioned", "none"}


class CorpusError(Exception):
    """Structural problem in corpus data or corpus files."""


def normalize_value(value: str) -> str:
    """Canonical slot-value form: lowercase, trimmed, internal runs of
    whitespace collapsed to single spaces."""
    return " ".join(str(value).lower().split())


def normalize_text(text: str) -> str:
    """Utterance text cleanup: trim and collapse whitespace, case kept."""
    return " ".join(str(text).split())


@dataclass(frozen=True)
class Utterance:
    speaker: str  # "user" or "agent"
    text: str

    def __post_init__(self):
        if self.speaker not in (SPEAKER_USER, SPEAKER_AGENT):
            raise CorpusError(f"unknown speaker {self.speaker!r}")
        if not self.text.strip():
            raise CorpusError("utterance text is empty")


# DialogueState: {domain: {slot_key: value}}, sparse (no "not mentioned" fillers)
DialogueState = dict[str, dict[str, str]]


def normalize_state(raw: dict) -> DialogueState:
    """Normalize values and drop absent markers / empty domains."""
    state: DialogueState = {}
    for domain, slots in raw.items():
        kept = {}
        for key, value in slots.items():
            norm = normalize_value(value)
            if norm not in ABSENT_VALUES:
                kept[str(key)] = norm
        if kept:
            state[str(domain)] = kept
    return state


@dataclass(frozen=True)
class Schema:
    """Domain -> ordered slot keys. Key order is the canonical rendering order."""

    domains: dict[str, tuple[str, ...]]

    def __post_init__(self):
        for domain, keys in self.domains.items():
            if not keys:
                raise CorpusError(f"schema domain {domain!r} has no slot keys")
            if len(set(keys)) != len(keys):
                raise CorpusError(f"schema domain {domain!r} has duplicate slot keys")

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise CorpusError(f"schema file {path} must hold a JSON object")
        return cls({str(d): tuple(str(k) for k in keys) for d, keys in raw.items()})

    def slot_keys(self, domain: str) -> tuple[str, ...]:
        try:
            return self.domains[domain]
        except KeyError:
            raise CorpusError(f"domain {domain!r} not in schema") from None

    def __contains__(self, domain: str) -> bool:
        return domain in self.domains

    def has_key(self, domain: str, key: str) -> bool:
        return domain in self.domains and key in self.domains[domain]


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    utterances: tuple[Utterance, ...]
    # one (domains, state) per user utterance
    gold_states: tuple[tuple[tuple[str, ...], DialogueState], ...]

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError(f"{self.dialogue_id}: dialogue has no utterances")
        for i, utt in enumerate(self.utterances):
            expected = SPEAKER_USER if i % 2 == 0 else SPEAKER_AGENT
            if utt.speaker != expected:
                raise CorpusError(
                    f"{self.dialogue_id}: utterance {i} should be {expected}, "
                    f"got {utt.speaker}"
                )
        n_user = sum(1 for u in self.utterances if u.speaker == SPEAKER_USER)
        if len(self.gold_states) != n_user:
            raise CorpusError(
                f"{self.dialogue_id}: {n_user} user turns but "
                f"{len(self.gold_states)} gold states"
            )


def build_dialogue(
    dialogue_id: str,
    utterances: Sequence[Utterance],
    gold_states: Sequence[tuple[Sequence[str], DialogueState]],
) -> tuple[Dialogue, int]:
    """Normalize a raw utterance sequence into a valid Dialogue.

    gold_states must hold one entry per user utterance in the input order.
    Consecutive same-speaker utterances are merged (rare annotation
    artifact); merged user turns keep the later, accumulated state. A
    trailing agent utterance is dropped since it follows no user turn.
    Returns the dialogue and the number of merges performed.
    """
    n_user_in = sum(1 for u in utterances if u.speaker == SPEAKER_USER)
    if len(gold_states) != n_user_in:
        raise CorpusError(
            f"{dialogue_id}: {n_user_in} user utterances but "
            f"{len(gold_states)} gold states"
        )
    merged: list[Utterance] = []
    merged_states: list[tuple[Sequence[str], DialogueState]] = []
    n_merged = 0
    state_idx = 0
    for utt in utterances:
        text = normalize_text(utt.text)
        if not text:
            raise CorpusError(f"{dialogue_id}: empty utterance text")
        state = None
        if utt.speaker == SPEAKER_USER:
            state = gold_states[state_idx]
            state_idx += 1
        if merged and merged[-1].speaker == utt.speaker:
            merged[-1] = Utterance(utt.speaker, merged[-1].text + " " + text)
            if state is not None:
                merged_states[-1] = state
            n_merged += 1
        else:
            merged.append(Utterance(utt.speaker, text))
            if state is not None:
                merged_states.append(state)
    if not merged:
        raise CorpusError(f"{dialogue_id}: dialogue has no utterances")
    if merged[0].speaker != SPEAKER_USER:
        raise CorpusError(f"{dialogue_id}: dialogue must start with a user utterance")
    if merged[-1].speaker == SPEAKER_AGENT:
        merged.pop()
    states = tuple(
        (tuple(domains), normalize_state(state)) for domains, state in merged_states
    )
    dialogue = Dialogue(dialogue_id, tuple(merged), states)
    if n_merged:
        logger.info("%s: merged %d consecutive same-speaker utterances",
                    dialogue_id, n_merged)
    return dialogue, n_merged


def domains_of(state: DialogueState) -> tuple[str, ...]:
    """Domains carrying at least one filled slot, in state order."""
    return tuple(d for d, slots in state.items() if slots)


@dataclass(frozen=True)
class TurnSample:
    """One accumulated dialogue turn, the unit of retrieval and evaluation."""

    sample_id: str  # "<dialogue_id>:<user-turn-index>", zero-based
    history: tuple[Utterance, ...]
    gold_domains: tuple[str, ...]
    gold_state: DialogueState
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise CorpusError(f"{self.sample_id}: unknown split {self.split!r}")
        if not self.history or self.history[-1].speaker != SPEAKER_USER:
            raise CorpusError(f"{self.sample_id}: history must end with a user utterance")
        if set(self.gold_domains) != set(domains_of(self.gold_state)):
            raise CorpusError(
                f"{self.sample_id}: gold_domains {list(self.gold_domains)} do not "
                f"match state domains {list(domains_of(self.gold_state))}"
            )


def accumulate_turns(dialogue: Dialogue, split: str) -> list[TurnSample]:
    """Expand a dialogue into per-user-turn samples with accumulated history."""
    samples = []
    turn = 0
    for pos, utt in enumerate(dialogue.utterances):
        if utt.speaker != SPEAKER_USER:
            continue
        raw_domains, state = dialogue.gold_states[turn]
        domains = domains_of(state)
        if raw_domains and set(raw_domains) != set(domains):
            logger.warning(
                "%s turn %d: stated domains %s differ from state domains %s; "
                "using the state", dialogue.dialogue_id, turn,
                list(raw_domains), list(domains),
            )
        samples.append(
            TurnSample(
                sample_id=f"{dialogue.dialogue_id}:{turn}",
                history=dialogue.utterances[: pos + 1],
                gold_domains=domains,
                gold_state=state,
                split=split,
            )
        )
        turn += 1
    return samples


def render_utterances(
    utterances: Iterable[Utterance], history_mode: str, speaker_tags: bool
) -> str:
    """Render utterances to a single line, joined by single spaces.

    history_mode "user_only" drops agent utterances; "user_agent" keeps all.
    With speaker_tags, each utterance gets a "User: " / "Agent: " prefix.
    """
    if history_mode not in ("user_only", "user_agent"):
        raise ValueError(f"unknown history mode {history_mode!r}")
    parts = []
    for utt in utterances:
        if history_mode == "user_only" and utt.speaker == SPEAKER_AGENT:
            continue
        if speaker_tags:
            tag = "User: " if utt.speaker == SPEAKER_USER else "Agent: "
            parts.append(tag + utt.text)
        else:
            parts.append(utt.text)
    return " ".join(parts)


def render_history(sample: TurnSample, history_mode: str, speaker_tags: bool) -> str:
    return render_utterances(sample.history, history_mode, speaker_tags)


# ---------------------------------------------------------------------------
# Normalized corpus file format (UTF-8 JSON lines, one object per TurnSample)

def sample_to_dict(sample: TurnSample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "split": sample.split,
        "history": [{"speaker": u.speaker, "text": u.text} for u in sample.history],
        "domains": list(sample.gold_domains),
        "state": {d: dict(slots) for d, slots in sample.gold_state.items()},
    }


def sample_from_dict(obj: dict) -> TurnSample:
    history = tuple(
        Utterance(str(u["speaker"]), str(u["text"])) for u in obj["history"]
    )
    state = normalize_state(obj.get("state", {}))
    domains = tuple(str(d) for d in obj.get("domains", []))
    return TurnSample(
        sample_id=str(obj["sample_id"]),
        history=history,
        gold_domains=domains,
        gold_state=state,
        split=str(obj["split"]),
    )


def save_corpus(samples: Iterable[TurnSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample_to_dict(sample), ensure_ascii=False) + "\n")


def load_corpus(path: str | Path) -> list[TurnSample]:
    samples = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sample = sample_from_dict(obj)
            except (json.JSONDecodeError, KeyError, TypeError, CorpusError) as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            if sample.sample_id in seen:
                raise CorpusError(
                    f"{path}: line {lineno}: duplicate sample_id {sample.sample_id!r}"
                )
            seen.add(sample.sample_id)
            samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# MultiWOZ 2.x importer (raw data.json + valListFile / testListFile)

@dataclass
class ImportReport:
    dialogues_imported: int = 0
    dialogue_errors: list[tuple[str, str]] = field(default_factory=list)
    unknown_domains: dict[str, int] = field(default_factory=dict)
    unknown_slot_keys: dict[str, int] = field(default_factory=dict)
    merged_utterances: int = 0

    def to_dict(self) -> dict:
        return {
            "dialogues_imported": self.dialogues_imported,
            "dialogue_errors": [list(e) for e in self.dialogue_errors],
            "unknown_domains": dict(sorted(self.unknown_domains.items())),
            "unknown_slot_keys": dict(sorted(self.unknown_slot_keys.items())),
            "merged_utterances": self.merged_utterances,
        }


@dataclass
class ImportResult:
    dialogues: dict[str, list[Dialogue]]  # split -> dialogues
    report: ImportReport


def _state_from_metadata(
    metadata: dict, schema: Schema, report: ImportReport
) -> DialogueState:
    """Flatten one turn's metadata ({domain: {semi, book}}) into a state.

    Unknown domains/keys carrying a filled value are counted in the report
    and excluded from the state, keeping it schema-valid.
    """
    state: DialogueState = {}
    for domain, block in metadata.items():
        if not isinstance(block, dict):
            continue
        slots: dict[str, str] = {}
        for section in ("semi", "book"):
            for key, value in block.get(section, {}).items():
                if key == "booked":
                    continue
                if isinstance(value, list):
                    value = " ".join(str(v) for v in value)
                norm = normalize_value(value)
                if norm in ABSENT_VALUES:
                    continue
                if domain not in schema:
                    report.unknown_domains[domain] = (
                        report.unknown_domains.get(domain, 0) + 1
                    )
                    continue
                if not schema.has_key(domain, key):
                    tag = f"{domain}.{key}"
                    report.unknown_slot_keys[tag] = (
                        report.unknown_slot_keys.get(tag, 0) + 1
                    )
                    continue
                slots.setdefault(str(key), norm)
        if slots:
            state[domain] = slots
    return state


def _dialogue_from_log(
    dialogue_id: str, log: list[dict], schema: Schema, report: ImportReport
) -> Dialogue:
    """Raw MultiWOZ log: even positions are user turns, odd are agent turns
    whose metadata holds the state after the preceding user turn."""
    if not log:
        raise CorpusError(f"{dialogue_id}: empty log")
    if len(log) % 2 != 0:
        raise CorpusError(
            f"{dialogue_id}: missing state for the final user turn "
            f"(log has {len(log)} entries)"
        )
    utterances = []
    gold_states = []
    for i, entry in enumerate(log):
        speaker = SPEAKER_USER if i % 2 == 0 else SPEAKER_AGENT
        utterances.append(Utterance(speaker, normalize_text(entry.get("text", ""))))
        if speaker == SPEAKER_AGENT:
            state = _state_from_metadata(entry.get("metadata", {}) or {}, schema, report)
            gold_states.append(((), state))
    dialogue, n_merged = build_dialogue(dialogue_id, utterances, gold_states)
    report.merged_utterances += n_merged
    return dialogue


def _read_id_list(path: Path) -> set[str]:
    with open(path, encoding="utf-8") as f:
        return {line.strip() for line in f if line.strip()}


def _find_list_file(directory: Path, stem: str) -> Path | None:
    for suffix in (".json", ".txt"):
        candidate = directory / (stem + suffix)
        if candidate.exists():
            return candidate
    return None


def import_multiwoz(
    data_path: str | Path,
    schema: Schema,
    val_ids: set[str] | None = None,
    test_ids: set[str] | None = None,
) -> ImportResult:
    """Import raw MultiWOZ-style data into normalized dialogues per split.

    data_path is either the dataset directory (data.json plus
    valListFile/testListFile) or the data.json file itself, in which case
    the list files are looked up next to it unless passed explicitly.
    Structurally broken dialogues are recorded and skipped; the import
    continues.
    """
    data_path = Path(data_path)
    if data_path.is_dir():
        data_file = data_path / "data.json"
    else:
        data_file = data_path
    if not data_file.exists():
        raise CorpusError(f"dataset file not found: {data_file}")

    directory = data_file.parent
    if val_ids is None:
        val_list = _find_list_file(directory, "valListFile")
        val_ids = _read_id_list(val_list) if val_list else set()
    if test_ids is None:
        test_list = _find_list_file(directory, "testListFile")
        test_ids = _read_id_list(test_list) if test_list else set()

    with open(data_file, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise CorpusError(f"{data_file}: expected an object of dialogues")

    def _bare(name: str) -> str:
        return name[:-5] if name.endswith(".json") else name

    # list files ship with or without the .json suffix depending on version
    val_ids = {_bare(n) for n in val_ids}
    test_ids = {_bare(n) for n in test_ids}

    report = ImportReport()
    dialogues: dict[str, list[Dialogue]] = {s: [] for s in SPLITS}
    for name in sorted(raw):
        record = raw[name]
        dialogue_id = _bare(name)
        if dialogue_id in val_ids:
            split = "dev"
        elif dialogue_id in test_ids:
            split = "test"
        else:
            split = "train"
        try:
            log = record.get("log") if isinstance(record, dict) else None
            if log is None:
                raise CorpusError(f"{dialogue_id}: no log entry")
            dialogue = _dialogue_from_log(dialogue_id, log, schema, report)
        except CorpusError as exc:
            report.dialogue_errors.append((dialogue_id, str(exc)))
            continue
        dialogues[split].append(dialogue)
        report.dialogues_imported += 1
    return ImportResult(dialogues=dialogues, report=report)
