"""Regenerate the exporter parity fixtures.

Authors the small corpora with the normal corpus writer, runs the
exporter CLI over them, and cross-checks the results against this
package's loader and renderer. Requires a built exporter
(cd exporter && npm install && npm run build).

    python3 scripts/make_exporter_fixtures.py
"""

import json
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from icldst.corpus import TurnSample, Utterance, load_corpus, render_history, save_corpus
from icldst.embedder import load_store
from icldst.retriever import cosine

FIXTURES = ROOT / "tests" / "fixtures" / "exporter"
TINY = ROOT / "exporter" / "test" / "fixtures" / "tiny.jsonl"
EXPORT_CLI = ROOT / "exporter" / "dist" / "main.js"


def turn(sample_id, history, domains, state, split="train"):
    utts = tuple(Utterance(speaker, text) for speaker, text in history)
    return TurnSample(sample_id, utts, tuple(domains), state, split)


def tiny_samples():
    return [
        turn(
            "T000:0",
            [("user", "i need a cheap restaurant in the centre")],
            ["restaurant"],
            {"restaurant": {"area": "centre", "pricerange": "cheap"}},
        ),
        turn(
            "T000:1",
            [
                ("user", "i need a cheap restaurant in the centre"),
                ("agent", "curry garden serves indian food in the centre."),
                ("user", "book a table for two please"),
            ],
            ["restaurant"],
            {
                "restaurant": {
                    "area": "centre",
                    "pricerange": "cheap",
                    "food": "indian",
                    "people": "2",
                }
            },
        ),
        turn(
            "T001:0",
            [("user", "is there a café near the museum ?")],
            ["attraction"],
            {"attraction": {"type": "museum"}},
        ),
        turn(
            "T002:0",
            [("user", "thank you goodbye")],
            ["taxi"],
            {"taxi": {"departure": "alpha house"}},
        ),
        turn(
            "T003:0",
            [("user", "thank you goodbye")],
            ["taxi"],
            {"taxi": {"departure": "beta house"}},
        ),
    ]


PLACES = [
    "saint john's college",
    "pizza hut fen ditton",
    "the junction theatre",
    "parkside police station",
    "cambridge train station",
    "the golden curry",
    "gonville hotel",
    "the cambridge belfry",
    "abbey pool",
    "the fitzwilliam museum",
]


def corpus20_samples():
    samples = []
    for n in range(9):
        frm = PLACES[n % len(PLACES)]
        to = PLACES[(n + 3) % len(PLACES)]
        history = [("user", f"i would like a taxi from {frm} to {to}")]
        if n % 3 == 1:
            history.append(("agent", f"when would you like to leave {frm} ?"))
            history.append(("user", f"i want to leave after {7 + n}:15"))
        samples.append(
            turn(
                f"EXP{n:03d}:0",
                history,
                ["taxi"],
                {"taxi": {"departure": frm, "destination": to}},
                split="test",
            )
        )
    samples.append(
        turn(
            "EXP009:0",
            [("user", "i am looking for a restaurant serving crème brûlée")],
            ["restaurant"],
            {"restaurant": {"food": "french"}},
            split="test",
        )
    )
    for n in range(10, 18):
        area = ["north", "south", "east", "west"][n % 4]
        history = [
            ("user", f"find me a hotel in the {area} with free parking"),
            ("agent", "sure , any price range ?"),
            ("user", ["cheap please", "something expensive", "moderate is fine"][n % 3]),
        ]
        price = ["cheap", "expensive", "moderate"][n % 3]
        samples.append(
            turn(
                f"EXP{n:03d}:1",
                history,
                ["hotel"],
                {"hotel": {"area": area, "parking": "yes", "pricerange": price}},
                split="test",
            )
        )
    # a repeated rendered text: self-similarity between distinct ids
    for n, sid in enumerate(["EXP018:0", "EXP019:0"]):
        samples.append(
            turn(
                sid,
                [("user", "thank you that is all i need")],
                ["train"],
                {"train": {"day": ["friday", "saturday"][n]}},
                split="test",
            )
        )
    assert len(samples) == 20
    return samples


def semantic_samples():
    texts = {
        "taxi": "i want a taxi",
        "cab": "i need a cab",
        "earnings": "the quarterly earnings report",
    }
    return [
        turn(sid, [("user", text)], ["taxi"], {"taxi": {"departure": "a"}})
        for sid, text in texts.items()
    ]


def run_exporter(args):
    result = subprocess.run(
        ["node", str(EXPORT_CLI), *args], capture_output=True, text=True
    )
    if result.returncode != 0:
        raise SystemExit(f"exporter failed: {result.stderr}")
    print(result.stdout.strip())


def main():
    if not EXPORT_CLI.is_file():
        raise SystemExit(f"{EXPORT_CLI} missing; build the exporter first")
    FIXTURES.mkdir(parents=True, exist_ok=True)
    TINY.parent.mkdir(parents=True, exist_ok=True)

    save_corpus(tiny_samples(), TINY)
    save_corpus(corpus20_samples(), FIXTURES / "corpus20.jsonl")
    save_corpus(semantic_samples(), FIXTURES / "semantic3.jsonl")

    for path in (FIXTURES / "corpus20.emb.jsonl", FIXTURES / "semantic.emb.jsonl"):
        path.unlink(missing_ok=True)
    run_exporter(
        [
            "--corpus", str(FIXTURES / "corpus20.jsonl"),
            "--model", "mock-fnv1a-64",
            "--mode", "user_only",
            "--output", str(FIXTURES / "corpus20.emb.jsonl"),
            "--emit-rendered", str(FIXTURES / "rendered_parity.json"),
        ]
    )
    run_exporter(
        [
            "--corpus", str(FIXTURES / "semantic3.jsonl"),
            "--model", "mock-fnv1a-256",
            "--mode", "user_only",
            "--output", str(FIXTURES / "semantic.emb.jsonl"),
        ]
    )

    store = load_store(FIXTURES / "corpus20.emb.jsonl")
    assert store.load_warnings == 0, "store must load without renormalization"
    assert len(store) == 20
    dup = cosine(store.get("EXP018:0"), store.get("EXP019:0"))
    assert abs(dup - 1.0) <= 1e-5, f"duplicate-text cosine {dup}"

    semantic = load_store(FIXTURES / "semantic.emb.jsonl")
    taxi, cab, earnings = (semantic.get(k) for k in ("taxi", "cab", "earnings"))
    assert cosine(taxi, cab) > cosine(taxi, earnings)
    assert cosine(taxi, cab) > cosine(cab, earnings)

    samples = {s.sample_id: s for s in load_corpus(FIXTURES / "corpus20.jsonl")}
    parity = json.loads((FIXTURES / "rendered_parity.json").read_text("utf-8"))
    assert len(parity) == 40
    for entry in parity:
        ours = render_history(samples[entry["sample_id"]], entry["mode"], entry["tags"])
        assert ours == entry["text"], f"render drift for {entry['sample_id']}"

    print(f"fixtures regenerated under {FIXTURES}")


if __name__ == "__main__":
    main()
