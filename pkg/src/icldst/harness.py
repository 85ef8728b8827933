"""Experiment orchestration: configs, runs, grids, resume.

A run loads a frozen corpus and embedding store, retrieves
demonstrations for every test sample, queries a completion backend, and
writes one JSON record per sample plus aggregate metrics. Records are
written in corpus order as they complete, so an interrupted run can
resume by skipping the sample ids already on disk. With the mock
backend the whole pipeline is deterministic down to the byte.
"""

import csv
import itertools
import json
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import _kernels
from .corpus import (
    NOT_MENTIONED,
    Schema,
    TurnSample,
    load_corpus,
    render_history,
)
from .embedder import (
    EmbeddingStore,
    HttpEmbeddingService,
    MockEmbedder,
    load_store,
    save_store,
)
from .evaluate import (
    Metrics,
    aggregate_relevance_coverage,
    micro_metrics,
    relevance_coverage,
)
from .llm import (
    KEY_VALUE_PARAMS,
    SLOT_VALUE_PARAMS,
    BackendError,
    ContextOverflowError,
    GenerationParams,
    HttpCompletionBackend,
    MockCopyFromTopDemoBackend,
    complete,
    slot_value_from_completion,
)
from .prompt import (
    DEFAULT_GENERATION_RESERVE,
    DEFAULT_INSTRUCTION,
    DEFAULT_TOKEN_BUDGET,
    HttpTokenCounter,
    PromptConfig,
    StrictKError,
    UnfittableSampleError,
    assemble_prompt,
)
from .repair import PredictedState, repair_and_parse, to_state
from .retriever import RetrievalResult, retrieve

DEFAULT_SCHEMA_RESOURCE = Path(__file__).parent / "data" / "multiwoz24_schema.json"

STATUS_SUCCESS = "success"
STATUS_FAILED = "failed"
STATUS_UNFITTABLE = "unfittable"

GRID_AXES = (
    "embed_text_mode",
    "history_mode",
    "speaker_tags",
    "max_demos",
    "decoding_strategy",
    "store",
)


class HarnessError(Exception):
    """Configuration or run-state problems that abort before any backend call."""


_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate_env(value):
    """Replace ${NAME} in strings (recursively through containers)."""
    if isinstance(value, str):

        def _lookup(match):
            name = match.group(1)
            if name not in os.environ:
                raise HarnessError(
                    f"config references unset environment variable ${{{name}}}"
                )
            return os.environ[name]

        return _ENV_PATTERN.sub(_lookup, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v) for v in value]
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    train_corpus: str = ""
    test_corpus: str = ""
    schema: str = ""
    store: str = ""
    query_store: str = ""
    embed_backend: dict = field(
        default_factory=lambda: {"kind": "mock", "dimension": 256}
    )
    embed_text_mode: str = "user_only"
    embed_speaker_tags: bool = True
    instruction: str = DEFAULT_INSTRUCTION
    history_mode: str = "user_agent"
    speaker_tags: bool = True
    max_demos: int = 10
    token_budget: int = DEFAULT_TOKEN_BUDGET
    generation_reserve: int = DEFAULT_GENERATION_RESERVE
    decoding_strategy: str = "slot_value_given_key"
    force_nested_slots: bool = False
    strict_k: bool = False
    max_new_tokens: int = 0  # 0 means the strategy default
    token_counter: dict = field(default_factory=dict)
    backend: dict = field(default_factory=lambda: {"kind": "mock_copy_from_top_demo"})
    output_dir: str = "out"
    sample_limit: int = 0  # 0 means all samples
    sample_random: bool = False
    seed: int = 0
    parallelism: int = 4
    dump_prompts: bool = False

    def __post_init__(self):
        self.prompt_config()  # validates the prompt-facing fields
        if self.parallelism < 1:
            raise HarnessError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.sample_limit < 0:
            raise HarnessError(f"sample_limit must be >= 0, got {self.sample_limit}")
        if self.max_new_tokens < 0:
            raise HarnessError(f"max_new_tokens must be >= 0, got {self.max_new_tokens}")

    def prompt_config(self) -> PromptConfig:
        return PromptConfig(
            instruction=self.instruction,
            history_mode=self.history_mode,
            speaker_tags=self.speaker_tags,
            max_demos=self.max_demos,
            token_budget=self.token_budget,
            generation_reserve=self.generation_reserve,
            decoding_strategy=self.decoding_strategy,
            force_nested_slots=self.force_nested_slots,
            strict_k=self.strict_k,
        )

    def generation_params(self) -> GenerationParams:
        base = (
            SLOT_VALUE_PARAMS
            if self.decoding_strategy == "slot_value_given_key"
            else KEY_VALUE_PARAMS
        )
        if self.max_new_tokens:
            return replace(base, max_new_tokens=self.max_new_tokens)
        return base

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise HarnessError(f"config file {path} must hold a mapping")
        return cls.from_dict(interpolate_env(raw))

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)

    def validate_paths(self):
        for label in ("train_corpus", "test_corpus"):
            value = getattr(self, label)
            if not value:
                raise HarnessError(f"config is missing {label}")
            if not Path(value).is_file():
                raise HarnessError(f"{label} does not exist: {value}")
        for label in ("schema", "store", "query_store"):
            value = getattr(self, label)
            if value and not Path(value).is_file():
                raise HarnessError(f"{label} does not exist: {value}")


def make_embed_backend(spec: dict):
    kind = spec.get("kind", "mock")
    if kind == "mock":
        return MockEmbedder(dimension=int(spec.get("dimension", 256)))
    if kind == "service":
        if "url" not in spec or "model" not in spec:
            raise HarnessError("service embed backend needs 'url' and 'model'")
        return HttpEmbeddingService(
            url=spec["url"],
            model_name=spec["model"],
            dimension=int(spec["dimension"]) if "dimension" in spec else None,
            timeout=float(spec.get("timeout", 30.0)),
            max_retries=int(spec.get("max_retries", 3)),
            parallelism=int(spec.get("parallelism", 4)),
            batch_size=int(spec.get("batch_size", 64)),
            api_key_env=spec.get("api_key_env"),
        )
    raise HarnessError(f"unknown embed backend kind {kind!r}")


def make_completion_backend(spec: dict):
    kind = spec.get("kind", "mock_copy_from_top_demo")
    if kind == "mock_copy_from_top_demo":
        return MockCopyFromTopDemoBackend()
    if kind == "http_completion":
        if "url" not in spec or "model" not in spec:
            raise HarnessError("http completion backend needs 'url' and 'model'")
        return HttpCompletionBackend(
            url=spec["url"],
            model_name=spec["model"],
            timeout=float(spec.get("timeout", 60.0)),
            max_retries=int(spec.get("max_retries", 3)),
            api_key_env=spec.get("api_key_env"),
        )
    raise HarnessError(f"unknown completion backend kind {kind!r}")


def make_token_counter(spec: dict):
    if not spec or spec.get("kind", "heuristic") == "heuristic":
        return None
    if spec.get("kind") == "http":
        if "url" not in spec:
            raise HarnessError("http token counter needs 'url'")
        return HttpTokenCounter(
            url=spec["url"],
            model_name=spec.get("model"),
            timeout=float(spec.get("timeout", 10.0)),
            max_retries=int(spec.get("max_retries", 1)),
        )
    raise HarnessError(f"unknown token counter kind {spec.get('kind')!r}")


@dataclass
class SampleRecord:
    sample_id: str
    status: str
    neighbors: list  # [sample_id, score] pairs, most similar first
    included_demo_ids: list
    prompt_tokens: int
    raw_outputs: dict
    state: dict
    off_schema: dict
    repair_status: str | None
    applied_fixes: list
    error: str | None
    latency_ms: dict

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "status": self.status,
            "neighbors": self.neighbors,
            "included_demo_ids": self.included_demo_ids,
            "prompt_tokens": self.prompt_tokens,
            "raw_outputs": self.raw_outputs,
            "state": self.state,
            "off_schema": self.off_schema,
            "repair_status": self.repair_status,
            "applied_fixes": self.applied_fixes,
            "error": self.error,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SampleRecord":
        return cls(
            sample_id=data["sample_id"],
            status=data["status"],
            neighbors=data["neighbors"],
            included_demo_ids=data["included_demo_ids"],
            prompt_tokens=data["prompt_tokens"],
            raw_outputs=data["raw_outputs"],
            state=data["state"],
            off_schema=data["off_schema"],
            repair_status=data["repair_status"],
            applied_fixes=data["applied_fixes"],
            error=data["error"],
            latency_ms=data["latency_ms"],
        )


@dataclass
class RunReport:
    run_id: str
    output_dir: str
    counts: dict
    metrics: Metrics | None
    relevance_coverage: dict | None
    repair_statuses: dict
    repair_fixes: dict
    failed_ids: list
    unfittable_ids: list
    backend_kind: str
    model_name: str
    kernel_backend: str
    dry_run: bool = False

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "output_dir": self.output_dir,
            "counts": self.counts,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "relevance_coverage": self.relevance_coverage,
            "repair_statuses": self.repair_statuses,
            "repair_fixes": self.repair_fixes,
            "failed_ids": self.failed_ids,
            "unfittable_ids": self.unfittable_ids,
            "backend_kind": self.backend_kind,
            "model_name": self.model_name,
            "kernel_backend": self.kernel_backend,
            "dry_run": self.dry_run,
        }


class RetrievalCache:
    """Top-kmax neighbours per query, sliced to the k each run asks for.

    Retrieval prefixes are stable (ranking a longer list never reorders
    the head), so one scan at kmax serves every smaller k in a grid.
    """

    def __init__(self, kmax: int):
        self.kmax = max(1, kmax)
        self._full: dict[str, RetrievalResult] = {}

    def get(self, sample_id: str, query, store: EmbeddingStore, k: int) -> RetrievalResult:
        full = self._full.get(sample_id)
        want = min(self.kmax, len(store))
        if full is None or (len(full) < want and len(full) < len(store)):
            full = retrieve(query, store, max(self.kmax, k))
            self._full[sample_id] = full
        if k > self.kmax:
            return retrieve(query, store, k)
        return full.top(k)


@dataclass
class Resources:
    schema: Schema
    train_samples: dict
    test_samples: list
    store: EmbeddingStore
    query_vectors: dict
    retrieval_cache: RetrievalCache
    backend: object
    token_counter: object | None


def _load_schema(config: ExperimentConfig) -> Schema:
    path = config.schema or str(DEFAULT_SCHEMA_RESOURCE)
    return Schema.from_file(path)


def _check_against_schema(samples: list, schema: Schema, label: str):
    for sample in samples:
        for domain, slots in sample.gold_state.items():
            if domain not in schema:
                raise HarnessError(
                    f"{label} sample {sample.sample_id} uses unknown domain {domain!r}"
                )
            for key in slots:
                if not schema.has_key(domain, key):
                    raise HarnessError(
                        f"{label} sample {sample.sample_id} uses unknown slot "
                        f"{domain}.{key}"
                    )


def compute_query_vectors(
    test_samples: list, embed_backend, text_mode: str, speaker_tags: bool
) -> dict:
    texts = [render_history(s, text_mode, speaker_tags) for s in test_samples]
    vectors = embed_backend.embed_batch(texts)
    return {s.sample_id: v for s, v in zip(test_samples, vectors)}


def load_resources(config: ExperimentConfig) -> Resources:
    """Load and cross-check everything a run needs before any model call."""
    config.validate_paths()
    schema = _load_schema(config)
    train = load_corpus(config.train_corpus)
    test = load_corpus(config.test_corpus)
    _check_against_schema(train, schema, "train")
    _check_against_schema(test, schema, "test")
    train_by_id = {s.sample_id: s for s in train}
    embed_backend = make_embed_backend(config.embed_backend)

    if config.store:
        store = load_store(config.store)
        missing = store.missing(train_by_id)
        if missing:
            raise HarnessError(
                f"store {config.store} is missing {len(missing)} train samples, "
                f"first: {missing[:3]}"
            )
        store = store.restrict_to(train_by_id)
    else:
        texts = [
            render_history(s, config.embed_text_mode, config.embed_speaker_tags)
            for s in train
        ]
        vectors = embed_backend.embed_batch(texts)
        store = EmbeddingStore.from_entries(
            embed_backend.model_name,
            [(s.sample_id, v) for s, v in zip(train, vectors)],
        )

    if config.query_store:
        qstore = load_store(config.query_store)
        missing = qstore.missing({s.sample_id for s in test})
        if missing:
            raise HarnessError(
                f"query store {config.query_store} is missing {len(missing)} test "
                f"samples, first: {missing[:3]}"
            )
        if qstore.dimension != store.dimension:
            raise HarnessError(
                f"query store dimension {qstore.dimension} != store dimension "
                f"{store.dimension}"
            )
        query_vectors = {sid: qstore.get(sid) for sid in (s.sample_id for s in test)}
    else:
        query_vectors = compute_query_vectors(
            test, embed_backend, config.embed_text_mode, config.embed_speaker_tags
        )
        sample_dim = next(iter(query_vectors.values())).shape[0] if query_vectors else 0
        if query_vectors and sample_dim != store.dimension:
            raise HarnessError(
                f"embed backend dimension {sample_dim} != store dimension "
                f"{store.dimension}; was the store built with another embedder?"
            )

    return Resources(
        schema=schema,
        train_samples=train_by_id,
        test_samples=test,
        store=store,
        query_vectors=query_vectors,
        retrieval_cache=RetrievalCache(config.max_demos),
        backend=make_completion_backend(config.backend),
        token_counter=make_token_counter(config.token_counter),
    )


def select_samples(test_samples: list, config: ExperimentConfig) -> list:
    if not config.sample_limit or config.sample_limit >= len(test_samples):
        return list(test_samples)
    if not config.sample_random:
        return list(test_samples[: config.sample_limit])
    rng = random.Random(config.seed)
    picked = sorted(rng.sample(range(len(test_samples)), config.sample_limit))
    return [test_samples[i] for i in picked]


def _read_records(path: Path) -> dict:
    """Existing records by sample_id; a truncated final line is dropped."""
    records: dict[str, SampleRecord] = {}
    if not path.is_file():
        return records
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = SampleRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            if i == len(lines) - 1:
                break  # interrupted mid-write; this sample reruns
            raise HarnessError(f"corrupt record at {path}:{i + 1}: {exc}") from exc
        records[record.sample_id] = record
    return records


def _record_line(record: SampleRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"


class _SampleRunner:
    """Per-sample pipeline shared by real runs and dry runs."""

    def __init__(self, config: ExperimentConfig, resources: Resources, prompts_dir=None):
        self.config = config
        self.res = resources
        self.prompt_config = config.prompt_config()
        self.params = config.generation_params()
        self.prompts_dir = prompts_dir
        self.time_calls = getattr(resources.backend, "kind", "") == "http_completion"

    def _retrieval(self, sample: TurnSample) -> RetrievalResult | None:
        if self.config.max_demos < 1 or len(self.res.store) == 0:
            return None
        query = self.res.query_vectors[sample.sample_id]
        return self.res.retrieval_cache.get(
            sample.sample_id, query, self.res.store, self.config.max_demos
        )

    def _assemble(self, sample, retrieval, target, config=None):
        return assemble_prompt(
            sample,
            retrieval,
            self.res.train_samples,
            config or self.prompt_config,
            self.res.schema,
            target=target,
            token_counter=self.res.token_counter,
        )

    def _dump(self, sample_id: str, sections: list):
        if self.prompts_dir is None or not sections:
            return
        parts = []
        for label, text in sections:
            header = f"### {label}\n" if label else ""
            parts.append(header + text)
        path = self.prompts_dir / f"{sample_id}.prompt.txt"
        path.write_text("\n\n".join(parts) + "\n", encoding="utf-8")

    def _call(self, prompt_text: str, latency: dict, label: str) -> str:
        if not self.time_calls:
            return complete(prompt_text, self.params, self.res.backend)
        started = time.monotonic()
        try:
            return complete(prompt_text, self.params, self.res.backend)
        finally:
            latency[label] = round((time.monotonic() - started) * 1000.0, 3)

    def run(self, sample: TurnSample, dry: bool = False) -> SampleRecord:
        retrieval = self._retrieval(sample)
        neighbors = (
            [[sid, score] for sid, score in retrieval.neighbors] if retrieval else []
        )
        sections: list = []
        latency: dict = {}
        record = SampleRecord(
            sample_id=sample.sample_id,
            status=STATUS_SUCCESS,
            neighbors=neighbors,
            included_demo_ids=[],
            prompt_tokens=0,
            raw_outputs={},
            state={},
            off_schema={},
            repair_status=None,
            applied_fixes=[],
            error=None,
            latency_ms=latency,
        )
        try:
            if self.config.decoding_strategy == "slot_value_given_key":
                self._run_slot_value(sample, retrieval, record, sections, dry)
            else:
                self._run_key_value(sample, retrieval, record, sections, dry)
        except (UnfittableSampleError, StrictKError, ContextOverflowError) as exc:
            record.status = STATUS_UNFITTABLE
            record.error = str(exc)
            record.state = {}
            record.off_schema = {}
        except BackendError as exc:
            record.status = STATUS_FAILED
            record.error = str(exc)
            record.state = {}
            record.off_schema = {}
        self._dump(sample.sample_id, sections)
        return record

    def _run_slot_value(self, sample, retrieval, record, sections, dry):
        targets = [
            (domain, key)
            for domain in sample.gold_domains
            for key in self.res.schema.slot_keys(domain)
        ]
        if not targets:
            # nothing to predict; still track which demos would be shown
            probe_config = self.prompt_config.with_overrides(
                decoding_strategy="key_value_generation"
            )
            try:
                probe = self._assemble(sample, retrieval, None, probe_config)
                record.included_demo_ids = list(probe.included_demo_ids)
                record.prompt_tokens = probe.estimated_tokens
            except (UnfittableSampleError, StrictKError):
                pass
            return
        state: dict = {}
        # inclusion can differ per target (test blocks vary in length);
        # the first target's prompt is the one recorded
        first_prompt = True
        for domain, key in targets:
            prompt = self._assemble(sample, retrieval, (domain, key))
            if first_prompt:
                record.included_demo_ids = list(prompt.included_demo_ids)
                first_prompt = False
            record.prompt_tokens = max(record.prompt_tokens, prompt.estimated_tokens)
            sections.append((f"slot {domain}.{key}", prompt.text))
            if dry:
                continue
            raw = self._call(prompt.text, record.latency_ms, f"{domain}.{key}")
            record.raw_outputs[f"{domain}.{key}"] = raw
            value = slot_value_from_completion(raw)
            if value != NOT_MENTIONED:
                state.setdefault(domain, {})[key] = value
        record.state = state

    def _run_key_value(self, sample, retrieval, record, sections, dry):
        prompt = self._assemble(sample, retrieval, None)
        record.included_demo_ids = list(prompt.included_demo_ids)
        record.prompt_tokens = prompt.estimated_tokens
        sections.append(("state", prompt.text))
        if dry:
            return
        raw = self._call(prompt.text, record.latency_ms, "_state")
        record.raw_outputs["_state"] = raw
        outcome = repair_and_parse(raw)
        predicted = to_state(outcome, sample.gold_domains, self.res.schema)
        record.state = predicted.slots
        record.off_schema = predicted.off_schema
        record.repair_status = outcome.status
        record.applied_fixes = list(outcome.applied_fixes)


REL_COV_CSV_FIELDS = (
    "sample_id",
    "relevance",
    "coverage",
    "shared_keys",
    "demo_keys",
    "gold_keys",
)


def _scored_relevance(resources: Resources, samples: list, records: dict) -> list:
    """Per-sample relevance/coverage for every record that used demos."""
    scored = []
    for sample in samples:
        record = records[sample.sample_id]
        if not record.included_demo_ids:
            continue
        demos = [resources.train_samples[sid] for sid in record.included_demo_ids]
        scored.append((sample.sample_id, relevance_coverage(demos, sample)))
    return scored


def _write_rel_cov_csv(path: Path, scored: list) -> None:
    # one row per scored sample, scatter-plot shaped; repr keeps floats exact
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REL_COV_CSV_FIELDS)
        for sample_id, rc in scored:
            writer.writerow(
                [
                    sample_id,
                    repr(rc.relevance),
                    repr(rc.coverage),
                    rc.shared_keys,
                    rc.demo_keys,
                    rc.gold_keys,
                ]
            )


def _aggregate(
    config: ExperimentConfig,
    resources: Resources,
    samples: list,
    records: dict,
    run_id: str,
    dry_run: bool = False,
    scored: list | None = None,
) -> RunReport:
    ordered = [records[s.sample_id] for s in samples]
    counts = {
        "samples": len(ordered),
        "success": sum(1 for r in ordered if r.status == STATUS_SUCCESS),
        "failed": sum(1 for r in ordered if r.status == STATUS_FAILED),
        "unfittable": sum(1 for r in ordered if r.status == STATUS_UNFITTABLE),
    }
    metrics = None
    rel_cov = None
    if not dry_run:
        predictions = {
            r.sample_id: PredictedState(slots=r.state, off_schema=r.off_schema)
            for r in ordered
        }
        golds = {s.sample_id: s.gold_state for s in samples}
        metrics = micro_metrics(predictions, golds)
        if scored is None:
            scored = _scored_relevance(resources, samples, records)
        per_sample = [rc for _, rc in scored]
        if per_sample:
            rel_cov = {
                "micro": aggregate_relevance_coverage(per_sample, "micro").to_dict(),
                "macro": aggregate_relevance_coverage(per_sample, "macro").to_dict(),
                "samples_scored": len(per_sample),
            }
    statuses: dict = {}
    fixes: dict = {}
    for r in ordered:
        if r.repair_status:
            statuses[r.repair_status] = statuses.get(r.repair_status, 0) + 1
        for fix in r.applied_fixes:
            fixes[fix] = fixes.get(fix, 0) + 1
    backend = resources.backend
    return RunReport(
        run_id=run_id,
        output_dir=config.output_dir,
        counts=counts,
        metrics=metrics,
        relevance_coverage=rel_cov,
        repair_statuses=dict(sorted(statuses.items())),
        repair_fixes=dict(sorted(fixes.items())),
        failed_ids=[r.sample_id for r in ordered if r.status == STATUS_FAILED][:20],
        unfittable_ids=[r.sample_id for r in ordered if r.status == STATUS_UNFITTABLE][:20],
        backend_kind=getattr(backend, "kind", "unknown"),
        model_name=getattr(backend, "model_name", "unknown"),
        kernel_backend=_kernels.BACKEND,
        dry_run=dry_run,
    )


def run_experiment(
    config: ExperimentConfig,
    resources: Resources | None = None,
    run_id: str | None = None,
    dry_run: bool = False,
) -> RunReport:
    """Execute one configuration, resuming from any records already written."""
    res = resources or load_resources(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = run_id or out.name

    config_path = out / "config.json"
    resolved = config.to_dict()
    if config_path.is_file():
        previous = json.loads(config_path.read_text(encoding="utf-8"))
        if previous != resolved:
            raise HarnessError(
                f"{config_path} holds a different configuration; refusing to mix "
                "runs (use a fresh output_dir)"
            )
    else:
        config_path.write_text(
            json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    samples = select_samples(res.test_samples, config)
    prompts_dir = None
    if dry_run or config.dump_prompts:
        prompts_dir = out / "prompts"
        prompts_dir.mkdir(exist_ok=True)
    runner = _SampleRunner(config, res, prompts_dir=prompts_dir)

    if dry_run:
        records = {}
        for sample in samples:
            records[sample.sample_id] = runner.run(sample, dry=True)
        return _aggregate(config, res, samples, records, run_id, dry_run=True)

    records_path = out / "records.jsonl"
    existing = _read_records(records_path)
    pending = [s for s in samples if s.sample_id not in existing]
    # rewrite drops a truncated trailing line before we append to the file
    with records_path.open("w", encoding="utf-8") as fh:
        for record in existing.values():
            fh.write(_record_line(record))
    if pending:
        with records_path.open("a", encoding="utf-8") as fh:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                for record in pool.map(runner.run, pending):
                    fh.write(_record_line(record))
                    fh.flush()
                    existing[record.sample_id] = record

    scored = _scored_relevance(res, samples, existing)
    report = _aggregate(config, res, samples, existing, run_id, scored=scored)
    _write_rel_cov_csv(out / "rel_cov.csv", scored)
    (out / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report


def precompute_embeddings(
    corpus_path,
    out_path,
    backend,
    text_mode: str = "user_only",
    speaker_tags: bool = True,
    batch_size: int = 64,
) -> Path:
    """Embed a corpus into an emb-jsonl store, resuming a partial file.

    A complete store that already covers the corpus is left untouched.
    In-flight batches append to ``<out>.partial``; the final store is
    written in one pass once every vector exists.
    """
    out_path = Path(out_path)
    samples = load_corpus(corpus_path)
    texts = {
        s.sample_id: render_history(s, text_mode, speaker_tags) for s in samples
    }
    if out_path.is_file():
        store = load_store(out_path)
        missing = store.missing(texts)
        if not missing:
            return out_path
        raise HarnessError(
            f"{out_path} exists but is missing {len(missing)} corpus samples "
            f"(first: {missing[:3]}); delete it to re-embed"
        )

    partial = out_path.with_name(out_path.name + ".partial")
    done: dict[str, np.ndarray] = {}
    if partial.is_file():
        with partial.open(encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                done[entry["id"]] = np.asarray(entry["v"], dtype=np.float32)
            except (json.JSONDecodeError, KeyError, ValueError):
                if i == len(lines) - 1:
                    break
                raise HarnessError(f"corrupt partial embedding at {partial}:{i + 1}")
    done = {sid: v for sid, v in done.items() if sid in texts}

    todo = [s.sample_id for s in samples if s.sample_id not in done]
    if todo:
        with partial.open("w", encoding="utf-8") as fh:
            for sid, vector in done.items():
                fh.write(
                    json.dumps(
                        {"id": sid, "v": [float(x) for x in vector]},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
            for start in range(0, len(todo), batch_size):
                batch = todo[start : start + batch_size]
                vectors = backend.embed_batch([texts[sid] for sid in batch])
                for sid, vector in zip(batch, vectors):
                    done[sid] = vector
                    fh.write(
                        json.dumps(
                            {"id": sid, "v": [float(x) for x in vector]},
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
                fh.flush()

    store = EmbeddingStore.from_entries(
        backend.model_name,
        [(sid, done[sid]) for sid in texts],
        meta={
            "embed_text_mode": text_mode,
            "speaker_tags": speaker_tags,
            "corpus": Path(corpus_path).name,
        },
    )
    save_store(store, out_path)
    if partial.is_file():
        partial.unlink()
    return out_path


def _axis_token(name: str, value) -> str:
    if name == "store":
        return Path(str(value)).stem
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class GridReport:
    output_dir: str
    combos: list  # (run_id, axis dict, RunReport)
    combined_csv: str

    def to_rows(self) -> list:
        return [(run_id, axes) for run_id, axes, _ in self.combos]


COMBINED_CSV_FIELDS = (
    "run_id",
    "samples",
    "success",
    "failed",
    "unfittable",
    "precision",
    "recall",
    "correct",
    "predicted_total",
    "gold_total",
    "relevance_micro",
    "coverage_micro",
    "relevance_macro",
    "coverage_macro",
)


def run_grid(
    base: ExperimentConfig,
    axes: dict,
    cap: int = 64,
    output_dir: str | None = None,
) -> GridReport:
    """Cartesian sweep over configuration axes with shared retrieval.

    Axis order follows the mapping's insertion order, so the combined CSV
    row order is reproducible. Each combination runs in its own
    subdirectory and resumes independently.
    """
    for name, values in axes.items():
        if name not in GRID_AXES:
            raise HarnessError(
                f"unknown grid axis {name!r}; allowed: {', '.join(GRID_AXES)}"
            )
        if not isinstance(values, (list, tuple)) or not values:
            raise HarnessError(f"grid axis {name!r} needs a non-empty list of values")
    names = list(axes.keys())
    combos = list(itertools.product(*(axes[n] for n in names)))
    if len(combos) > cap:
        raise HarnessError(
            f"grid would run {len(combos)} combinations, above the cap of {cap}"
        )

    out = Path(output_dir or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    k_values = [base.max_demos] + [int(v) for v in axes.get("max_demos", [])]
    kmax = max(k_values)

    base.validate_paths()
    schema = _load_schema(base)
    train = load_corpus(base.train_corpus)
    test = load_corpus(base.test_corpus)
    _check_against_schema(train, schema, "train")
    _check_against_schema(test, schema, "test")
    train_by_id = {s.sample_id: s for s in train}
    embed_backend = make_embed_backend(base.embed_backend)
    backend = make_completion_backend(base.backend)
    token_counter = make_token_counter(base.token_counter)

    stores: dict[str, EmbeddingStore] = {}

    def _store_for(path: str) -> EmbeddingStore:
        if path not in stores:
            if path:
                loaded = load_store(path)
                missing = loaded.missing(train_by_id)
                if missing:
                    raise HarnessError(
                        f"store {path} is missing {len(missing)} train samples"
                    )
                stores[path] = loaded.restrict_to(train_by_id)
            else:
                texts = [
                    render_history(s, base.embed_text_mode, base.embed_speaker_tags)
                    for s in train
                ]
                vectors = embed_backend.embed_batch(texts)
                stores[path] = EmbeddingStore.from_entries(
                    embed_backend.model_name,
                    [(s.sample_id, v) for s, v in zip(train, vectors)],
                )
        return stores[path]

    query_cache: dict[tuple, dict] = {}

    def _queries_for(mode: str, tags: bool) -> dict:
        key = (mode, tags)
        if key not in query_cache:
            if base.query_store:
                qstore = load_store(base.query_store)
                query_cache[key] = {
                    s.sample_id: qstore.get(s.sample_id) for s in test
                }
            else:
                query_cache[key] = compute_query_vectors(
                    test, embed_backend, mode, tags
                )
        return query_cache[key]

    retrieval_caches: dict[tuple, RetrievalCache] = {}

    combo_reports = []
    for values in combos:
        overrides = dict(zip(names, values))
        run_id = "__".join(f"{n}={_axis_token(n, overrides[n])}" for n in names)
        run_dir = out / "runs" / run_id
        sub = base.with_overrides(output_dir=str(run_dir), **overrides)

        store = _store_for(sub.store)
        cache_key = (sub.store, sub.embed_text_mode, sub.embed_speaker_tags)
        if cache_key not in retrieval_caches:
            retrieval_caches[cache_key] = RetrievalCache(kmax)
        resources = Resources(
            schema=schema,
            train_samples=train_by_id,
            test_samples=test,
            store=store,
            query_vectors=_queries_for(sub.embed_text_mode, sub.embed_speaker_tags),
            retrieval_cache=retrieval_caches[cache_key],
            backend=backend,
            token_counter=token_counter,
        )
        report = run_experiment(sub, resources=resources, run_id=run_id)
        combo_reports.append((run_id, overrides, report))

    combined = out / "combined.csv"
    with combined.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + list(COMBINED_CSV_FIELDS))
        for run_id, overrides, report in combo_reports:
            metrics = report.metrics
            rel = report.relevance_coverage or {}
            micro = rel.get("micro", {})
            macro = rel.get("macro", {})
            row = [_axis_token(n, overrides[n]) for n in names]
            row += [
                run_id,
                report.counts["samples"],
                report.counts["success"],
                report.counts["failed"],
                report.counts["unfittable"],
                repr(metrics.precision) if metrics else "",
                repr(metrics.recall) if metrics else "",
                metrics.correct if metrics else "",
                metrics.predicted_total if metrics else "",
                metrics.gold_total if metrics else "",
                repr(micro["relevance"]) if micro else "",
                repr(micro["coverage"]) if micro else "",
                repr(macro["relevance"]) if macro else "",
                repr(macro["coverage"]) if macro else "",
            ]
            writer.writerow(row)

    return GridReport(
        output_dir=str(out), combos=combo_reports, combined_csv=str(combined)
    )


def load_metrics(run_dir) -> dict:
    path = Path(run_dir) / "metrics.json"
    if not path.is_file():
        raise HarnessError(f"no metrics.json under {run_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def format_report_table(reports: list) -> str:
    """Fixed-width summary table for one or more metrics.json payloads."""
    headers = [
        "run_id",
        "samples",
        "ok",
        "fail",
        "unfit",
        "precision",
        "recall",
        "rel_micro",
        "cov_micro",
    ]
    rows = [headers]
    for data in reports:
        counts = data.get("counts", {})
        metrics = data.get("metrics") or {}
        rel = (data.get("relevance_coverage") or {}).get("micro") or {}

        def _fmt(value):
            return f"{value:.4f}" if isinstance(value, float) else "-"

        rows.append(
            [
                str(data.get("run_id", "?")),
                str(counts.get("samples", "-")),
                str(counts.get("success", "-")),
                str(counts.get("failed", "-")),
                str(counts.get("unfittable", "-")),
                _fmt(metrics.get("precision")),
                _fmt(metrics.get("recall")),
                _fmt(rel.get("relevance")),
                _fmt(rel.get("coverage")),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(headers))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
