"""Shared fixtures: the packaged schema, the reference prompt samples,
synthetic twin corpora, and a tiny HTTP server for client tests."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from icldst.corpus import (
    Schema,
    TurnSample,
    Utterance,
    accumulate_turns,
    build_dialogue,
    save_corpus,
)
from icldst.harness import DEFAULT_SCHEMA_RESOURCE

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def schema() -> Schema:
    return Schema.from_file(DEFAULT_SCHEMA_RESOURCE)


@pytest.fixture(scope="session")
def ref_demo_sample() -> TurnSample:
    """The two-domain taxi/restaurant demonstration turn."""
    return TurnSample(
        sample_id="PMUL1234:1",
        history=(
            Utterance("user", "Can you help me get a taxi to Pizza Hut Fen Ditton?"),
            Utterance("agent", "Sure. Where do you want to depart from?"),
            Utterance(
                "user",
                "I want to depart from Sidney, Sussex College, also I need a "
                "reservation there.",
            ),
        ),
        gold_domains=("taxi", "restaurant"),
        gold_state={
            "taxi": {
                "departure": "sidney sussex college",
                "destination": "pizza hut fenditton",
            },
            "restaurant": {"area": "centre", "pricerange": "expensive"},
        },
        split="train",
    )


@pytest.fixture(scope="session")
def ref_test_sample() -> TurnSample:
    """The single-domain taxi test turn completed up to arriveBy."""
    return TurnSample(
        sample_id="SNG5678:0",
        history=(
            Utterance(
                "user",
                "I would like a taxi from Saint John's College to Pizza Hut Fen "
                "Ditton.",
            ),
        ),
        gold_domains=("taxi",),
        gold_state={
            "taxi": {
                "departure": "saint john's college",
                "destination": "pizza hut fen ditton",
            }
        },
        split="test",
    )


# Twin dialogues: each pair shares its texts and states across splits but
# uses pair-private vocabulary, so the nearest train neighbour of every
# test turn is its twin at cosine 1.0.

_SYNTH_DOMAINS = ("taxi", "restaurant", "hotel", "train", "attraction")


def _twin_dialogue(schema: Schema, pair: int):
    domain = _SYNTH_DOMAINS[pair % len(_SYNTH_DOMAINS)]
    keys = schema.slot_keys(domain)
    place = f"place{pair}q"
    extra = f"extra{pair}q"
    utterances = [
        Utterance("user", f"i am looking for a {domain} around {place} today{pair}q"),
        Utterance("agent", f"happy to help with that {domain} request{pair}q"),
        Utterance("user", f"make it {extra} and confirm please{pair}q"),
    ]
    states = [
        ((domain,), {domain: {keys[0]: place}}),
        ((domain,), {domain: {keys[0]: place, keys[1 % len(keys)]: extra}}),
    ]
    return utterances, states


def make_synthetic_corpus(schema: Schema, out_dir: Path, pairs: int = 25):
    """Write twin train/test corpora; returns (train_path, test_path)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for pair in range(pairs):
        utterances, states = _twin_dialogue(schema, pair)
        for split, sink in (("train", train), ("test", test)):
            dialogue, _ = build_dialogue(
                f"SYN{split.upper()}{pair:03d}", utterances, states
            )
            sink.extend(accumulate_turns(dialogue, split))
    train_path = out_dir / "train.jsonl"
    test_path = out_dir / "test.jsonl"
    save_corpus(train, train_path)
    save_corpus(test, test_path)
    return train_path, test_path


@pytest.fixture
def synth_corpus(schema, tmp_path):
    return make_synthetic_corpus(schema, tmp_path / "corpus")


class StubServer:
    """One-thread-per-request HTTP stub with per-path handler functions.

    A handler takes the decoded JSON payload and returns (status, body);
    a dict body is sent as JSON, a string as-is. Requests are recorded
    on ``calls`` in arrival order.
    """

    def __init__(self):
        self.routes = {}
        self.calls = []
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw) if raw else {}
                except json.JSONDecodeError:
                    payload = {"_raw": raw.decode("utf-8", "replace")}
                with server._lock:
                    server.calls.append(
                        {
                            "path": self.path,
                            "payload": payload,
                            "headers": dict(self.headers),
                        }
                    )
                handler = server.routes.get(self.path)
                if handler is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                status, body = handler(payload)
                data = (
                    json.dumps(body).encode("utf-8")
                    if isinstance(body, (dict, list))
                    else str(body).encode("utf-8")
                )
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def url(self, path: str) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}{path}"

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()


# A miniature raw MultiWOZ tree: one test dialogue, one dev dialogue,
# one broken dialogue, with filler values sprinkled into the metadata.


def _metadata(state: dict) -> dict:
    meta: dict = {}
    for domain, slots in state.items():
        meta[domain] = {"semi": dict(slots), "book": {"booked": []}}
    meta.setdefault("police", {"semi": {"name": ""}, "book": {"booked": []}})
    return meta


def _turn(text: str, metadata: dict | None = None) -> dict:
    return {"text": text, "metadata": metadata if metadata is not None else {}}


@pytest.fixture
def raw_dataset(tmp_path):
    data = {
        "SNG001.json": {
            "log": [
                _turn("I need a taxi to the airport."),
                _turn(
                    "When do you want to leave?",
                    _metadata(
                        {"taxi": {"destination": "Airport", "leaveAt": "not mentioned"}}
                    ),
                ),
                _turn("At 17:00 please."),
                _turn(
                    "Booked.",
                    _metadata({"taxi": {"destination": "airport", "leaveAt": "17:00"}}),
                ),
            ]
        },
        "SNG002.json": {
            "log": [
                _turn("Find a cheap restaurant."),
                _turn(
                    "Sure.",
                    _metadata({"restaurant": {"pricerange": "cheap", "parking": "yes"}}),
                ),
            ]
        },
        "BAD003.json": {
            "log": [
                _turn("Dangling user turn with no state."),
            ]
        },
    }
    root = tmp_path / "mw"
    root.mkdir()
    (root / "data.json").write_text(json.dumps(data), encoding="utf-8")
    (root / "valListFile.json").write_text("SNG002.json\n", encoding="utf-8")
    (root / "testListFile.json").write_text("SNG001\n", encoding="utf-8")
    return root
