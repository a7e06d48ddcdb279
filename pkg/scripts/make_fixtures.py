#!/usr/bin/env python3
"""Build the recorded endpoint fixtures and golden pipeline outputs.

A scripted local chat-completions server stands in for the two endpoints
(`llm` for text work, `mllm` for image work with token scores). The full
CLI pipeline runs once in record mode to fill tests/fixtures/cache/,
then twice in replay mode; the two replays are checked byte-identical
and the first one is kept as tests/fixtures/golden/.

The scripted responder is deliberately flawed in two reproducible ways
so the report stage has something to measure:

- it answers any negative question whose corrupted part sits in the
  middle join position (index 1) with the hallucinated "Yes" option,
  which the positional-bias report picks up, and
- it answers every negative question about the kitchen image with the
  "Yes" option, which drags that image's paired accuracy to zero.

Positive questions and wh questions are always answered correctly, and
the discriminator is always right and confident, so negative-set
filtering converges in one round with nothing regenerated.
"""

from __future__ import annotations

import json
import math
import re
import shutil
import sys
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from click.testing import CliRunner  # noqa: E402

from finer.cli import main as cli_main  # noqa: E402
from finer.core import save_jsonl  # noqa: E402
from finer.sg_extract import CaptionRecord  # noqa: E402

FIXTURES = REPO / "tests" / "fixtures"
PORT = 8876
API_KEY_ENV = "FINER_TEST_KEY"
SEED = "7"

# -- the scripted world -------------------------------------------------
# Three captioned images. Every object name, attribute phrase, and
# relation predicate is unique across the whole world so the responder
# can key its canned answers on the surface strings alone.

WORLD = [
    {
        "image_id": "img-001",
        "image_uri": "fixture://images/study.png",
        "caption": (
            "A black cat is lying on a wooden desk. "
            "A tall bookshelf stands behind the desk."
        ),
        "objects": [
            ("cat", [("black", "with a black color")]),
            ("desk", [("wooden", "with a wooden surface")]),
            ("bookshelf", [("tall", "with a tall frame")]),
        ],
        "relations": [
            ("cat", "is lying on", "desk"),
            ("bookshelf", "stands behind", "desk"),
        ],
    },
    {
        "image_id": "img-002",
        "image_uri": "fixture://images/harbor.png",
        "caption": (
            "A red boat floats beside a stone pier. An old lighthouse "
            "overlooks the pier, and a seagull perches on the lighthouse."
        ),
        "objects": [
            ("boat", [("red", "with a red hull")]),
            ("pier", [("stone", "with a stone base")]),
            ("lighthouse", [("old", "with an old tower")]),
            ("seagull", []),
        ],
        "relations": [
            ("boat", "floats beside", "pier"),
            ("lighthouse", "overlooks", "pier"),
            ("seagull", "perches on", "lighthouse"),
        ],
    },
    {
        "image_id": "img-003",
        "image_uri": "fixture://images/kitchen.png",
        "caption": (
            "A copper kettle sits on a white stove. "
            "A ceramic bowl rests near the kettle."
        ),
        "objects": [
            ("kettle", [("copper", "with a copper finish")]),
            ("stove", [("white", "with a white enamel")]),
            ("bowl", [("ceramic", "with a ceramic glaze")]),
        ],
        "relations": [
            ("kettle", "sits on", "stove"),
            ("bowl", "rests near", "kettle"),
        ],
    },
]

HALLUCINATING_IMAGE = "img-003"

# Canned negative proposals, keyed by the positive surface they corrupt.
NEGATIVES = {
    # objects
    "cat": ["dog", "rabbit", "parrot", "hamster"],
    "desk": ["table", "bench", "cabinet", "stool"],
    "bookshelf": ["wardrobe", "mirror", "fireplace", "coat rack"],
    "boat": ["canoe", "ferry", "raft", "jet ski"],
    "pier": ["dock", "breakwater", "ramp", "buoy"],
    "lighthouse": ["windmill", "water tower", "chapel", "crane"],
    "seagull": ["pelican", "crow", "heron", "pigeon"],
    "kettle": ["teapot", "saucepan", "toaster", "pitcher"],
    "stove": ["oven", "dishwasher", "microwave", "sink"],
    "bowl": ["plate", "mug", "jar", "tray"],
    # attributes
    "with a black color": [
        "with a white color",
        "with an orange color",
        "with a gray color",
        "with a spotted pattern",
    ],
    "with a wooden surface": [
        "with a metal surface",
        "with a glass surface",
        "with a marble surface",
        "with a plastic surface",
    ],
    "with a tall frame": [
        "with a short frame",
        "with a narrow frame",
        "with a leaning frame",
        "with a painted frame",
    ],
    "with a red hull": [
        "with a blue hull",
        "with a green hull",
        "with a yellow hull",
        "with a striped hull",
    ],
    "with a stone base": [
        "with a concrete base",
        "with a brick base",
        "with a steel base",
        "with a tiled base",
    ],
    "with an old tower": [
        "with a new tower",
        "with a ruined tower",
        "with a squat tower",
        "with a modern tower",
    ],
    "with a copper finish": [
        "with a chrome finish",
        "with a matte finish",
        "with a brass finish",
        "with a steel finish",
    ],
    "with a white enamel": [
        "with a black enamel",
        "with a cream enamel",
        "with a beige enamel",
        "with a glossy enamel",
    ],
    "with a ceramic glaze": [
        "with a wooden grain",
        "with a metallic sheen",
        "with a plastic shine",
        "with a glass tint",
    ],
    # relation predicates
    "is lying on": [
        "is crouching under",
        "is leaping over",
        "is walking past",
        "is sleeping beneath",
    ],
    "stands behind": [
        "leans against",
        "hangs above",
        "sits beneath",
        "tilts toward",
    ],
    "floats beside": [
        "sinks beneath",
        "speeds past",
        "drifts away from",
        "is moored far from",
    ],
    "overlooks": [
        "faces away from",
        "hides behind",
        "leans over",
        "sits below",
    ],
    "perches on": [
        "flies above",
        "circles around",
        "nests under",
        "swoops past",
    ],
    "sits on": [
        "hangs over",
        "lies beneath",
        "leans beside",
        "stands apart from",
    ],
    "rests near": [
        "is stacked under",
        "slides past",
        "hangs far from",
        "rolls beneath",
    ],
}

# Canned phrase-set extraction replies for the preference-data stage.
DPO_POSITIVES = {
    "img-001": {
        "objects": "a cat, a desk, and a bookshelf",
        "attributes": "a cat with a black color",
        "relations": "the cat is lying on a wooden desk",
        "wh": {
            "question": "What color is the cat lying on the desk?",
            "answer": "The cat lying on the desk is black.",
        },
    },
    "img-002": {
        "objects": "a boat, a pier, a lighthouse, and a seagull",
        "attributes": "a lighthouse with an old tower",
        "relations": "the seagull perches on the lighthouse",
        "wh": None,
    },
    "img-003": {
        "objects": "a kettle, a stove, and a bowl",
        "attributes": "a kettle with a copper finish",
        "relations": "the ceramic bowl rests near the kettle",
        "wh": {
            "question": "What finish does the kettle sitting on the stove have?",
            "answer": "The kettle sitting on the stove has a copper finish.",
        },
    },
}

DPO_NEGATIVES = {
    "img-001": {
        "objects": {
            "phrase": "a cat, a desk, and a fireplace",
            "replacement": "fireplace",
        },
        "attributes": {
            "phrase": "a cat with a gray color",
            "replacement": "gray",
        },
        "relations": {
            "phrase": "the cat is hiding under a wooden desk",
            "replacement": "is hiding under",
        },
        "wh": {
            "question": "What color is the dog lying on the desk?",
            "answer": (
                "There is no dog lying on the desk; "
                "the animal lying there is a black cat."
            ),
            "replacement": "dog",
        },
    },
    "img-002": {
        "objects": {
            "phrase": "a boat, a pier, a windmill, and a seagull",
            "replacement": "windmill",
        },
        "attributes": {
            "phrase": "a lighthouse with a modern tower",
            "replacement": "modern",
        },
        "relations": {
            "phrase": "the seagull perches on the mast",
            "replacement": "mast",
        },
    },
    "img-003": {
        "objects": {
            "phrase": "a kettle, a microwave, and a bowl",
            "replacement": "microwave",
        },
        "attributes": {
            "phrase": "a kettle with a chrome finish",
            "replacement": "chrome",
        },
        "relations": {
            "phrase": "the ceramic bowl floats above the kettle",
            "replacement": "floats above",
        },
        "wh": {
            "question": "What finish does the teapot sitting on the stove have?",
            "answer": (
                "There is no teapot sitting on the stove; "
                "the kettle sitting there has a copper finish."
            ),
            "replacement": "teapot",
        },
    },
}

DPO_CATEGORY = {
    "img-001": "natural_image",
    "img-002": "natural_image",
    "img-003": "natural_image",
}


# -- world lookups ------------------------------------------------------

BY_CAPTION = {w["caption"]: w for w in WORLD}
BY_URI = {w["image_uri"]: w for w in WORLD}


def _truth_tables(world: dict) -> tuple[set, set, dict]:
    """True entity surfaces, true composed phrases, and (owner, phrase)
    attribute pairs for one image."""
    attrs = {name: [p for _, p in specs] for name, specs in world["objects"]}
    parts = {name for name, _ in world["objects"]}
    pairs = {}
    for name, specs in world["objects"]:
        for _, phrase in specs:
            parts.add(f"{name} {phrase}")
            pairs[(name, phrase)] = True
    composed = set()
    for subj, pred, obj in world["relations"]:
        parts.add(f"{subj} {pred} {obj}")
        for a1 in attrs[subj]:
            for a2 in attrs[obj]:
                composed.add(f"{subj} {a1}")
                composed.add(f"{subj} {a1} {pred} {obj}")
                composed.add(f"{subj} {a1} {pred} {obj} {a2}")
    return parts, composed, pairs


TRUTH = {
    w["image_id"]: _truth_tables(w) for w in WORLD
}
ALL_RELATIONS = [
    (w["image_id"], s, p, o) for w in WORLD for (s, p, o) in w["relations"]
]


def part_is_true(image_id: str, part: str) -> bool:
    parts, composed, _ = TRUTH[image_id]
    return part in parts or part in composed


def split_phrase(phrase: str) -> list[str]:
    if ", and " in phrase:
        head, tail = phrase.split(", and ", 1)
        return head.split(", ") + [tail]
    return [phrase]


# -- the scripted responder ---------------------------------------------

LETTER_RE = re.compile(r"^([A-E])\. (.*)$", re.MULTILINE)
CORRECTION_RE = re.compile(r"^The (.+?) is not (.+?), but is (.+?)\.$")


def _message_text(messages: list) -> tuple[str, str | None]:
    """Text and image uri of the last user message."""
    text, uri = "", None
    for msg in messages:
        content = msg.get("content", "")
        if isinstance(content, list):
            for piece in content:
                if piece.get("type") == "text":
                    text = piece.get("text", "")
                elif piece.get("type") == "image_url":
                    uri = piece["image_url"]["url"]
        else:
            text = content
    return text, uri


def _caption_of(text: str) -> dict:
    for caption, world in BY_CAPTION.items():
        if caption in text:
            return world
    raise ValueError(f"no fixture caption in prompt: {text[:120]!r}")


def _letter_options(text: str) -> list[tuple[str, str]]:
    return [(m.group(1), m.group(2)) for m in LETTER_RE.finditer(text)]


def answer_mcq(image_id: str, text: str) -> str:
    """The flawed evaluator: a single letter for one rendered MCQ."""
    question = text.split("\n", 1)[0]
    options = _letter_options(text)

    if question.startswith("What is "):
        # wh question: trust the correction option's premise check
        correction = next(
            (
                (letter, CORRECTION_RE.match(opt))
                for letter, opt in options
                if CORRECTION_RE.match(opt)
            ),
            None,
        )
        if correction is None:
            return "A"
        letter, match = correction
        context, denied, _ = match.group(1), match.group(2), match.group(3)
        _, _, attr_pairs = TRUTH[image_id]
        if (context, denied) in attr_pairs:
            # premise is fine: name the true object among the options
            parts, _, _ = TRUTH[image_id]
            for opt_letter, opt in options:
                if opt in parts:
                    return opt_letter
            return "A"
        return letter

    phrase = question[len("Can you see ") : -len(" in this image?")]
    parts = split_phrase(phrase)
    false_idx = [i for i, p in enumerate(parts) if not part_is_true(image_id, p)]
    yes_letter = next(
        (letter for letter, opt in options if opt.startswith("Yes, ")), "A"
    )
    if not false_idx:
        return yes_letter
    if image_id == HALLUCINATING_IMAGE or false_idx[0] == 1:
        return yes_letter  # scripted hallucination
    for letter, opt in options:
        match = re.match(r"^No, but I can see (.*) in this image\.$", opt)
        if match and all(
            part_is_true(image_id, p) for p in split_phrase(match.group(1))
        ):
            return letter
    return "A"


def _proposal_reply(text: str) -> str:
    match = re.search(r'The image contains the object "([^"]+)"', text)
    if match is None:
        match = re.search(r'has the attribute phrase "([^"]+)"', text)
    key = match.group(1) if match else None
    if key is None:
        quoted = re.search(r'The image shows the relation "([^"]+)"', text)
        statement = quoted.group(1)
        for _, subj, pred, obj in ALL_RELATIONS:
            if statement == f"{subj} {pred} {obj}":
                key = pred
                break
    count_match = re.search(r"Propose (\d+) ", text)
    count = int(count_match.group(1)) if count_match else 4
    forbidden_match = re.search(r"forbidden list: (\[.*\])", text)
    forbidden = set(json.loads(forbidden_match.group(1))) if forbidden_match else set()
    pool = [n for n in NEGATIVES[key] if n not in forbidden]
    while len(pool) < count:
        pool.append(f"{key} variant {len(pool)}")
    return json.dumps(pool[:count])


def _extraction_reply(text: str) -> str:
    world = _caption_of(text)
    return json.dumps(
        {
            "objects": [
                {
                    "name": name,
                    "attributes": [
                        {"span": span, "phrase": phrase} for span, phrase in specs
                    ],
                }
                for name, specs in world["objects"]
            ]
        }
    )


def _relation_pair_reply(text: str) -> str:
    world = _caption_of(text)
    first = re.search(r'between "([^"]+)" and "([^"]+)"', text)
    names = {first.group(1), first.group(2)}
    for subj, pred, obj in world["relations"]:
        if {subj, obj} == names:
            return json.dumps({"relation": pred, "subject": subj})
    return json.dumps({"relation": None})


def _statement_check_reply(text: str, world: dict) -> str:
    quoted = re.findall(r'"([^"]+)"', text)
    statement = quoted[-1]
    truths = {f"{s} {p} {o}" for s, p, o in world["relations"]}
    return "yes" if statement in truths else "no"


def respond_llm(text: str) -> str:
    if "Extract the objects and their attributes" in text:
        return _extraction_reply(text)
    if "explicitly state a spatial or action relation" in text:
        return _relation_pair_reply(text)
    if "Does the caption above state" in text:
        return _statement_check_reply(text, _caption_of(text))
    if "proposing hard negative options" in text:
        return _proposal_reply(text)
    if "extract positive phrases" in text:
        world = _caption_of(text)
        return json.dumps(DPO_POSITIVES[world["image_id"]])
    if "corrupt positive phrases" in text:
        world = _caption_of(text)
        return json.dumps(DPO_NEGATIVES[world["image_id"]])
    if "Classify the image described by the caption" in text:
        world = _caption_of(text)
        return DPO_CATEGORY[world["image_id"]]
    raise ValueError(f"unrecognized text prompt: {text[:120]!r}")


def respond_mllm(text: str, image_uri: str, want_scores: bool) -> dict:
    """Content plus optional first-token logprobs for an image request."""
    world = BY_URI[image_uri]
    image_id = world["image_id"]
    if "Is the following statement about it true?" in text:
        return {"content": _statement_check_reply(text, world)}
    if "single capital letter" not in text:
        raise ValueError(f"unrecognized image prompt: {text[:120]!r}")

    if want_scores:
        # discriminator: always right, always confident
        options = _letter_options(text)
        parts, _, _ = TRUTH[image_id]
        true_letter = next(
            letter for letter, opt in options if opt in parts
        )
        top = [
            {
                "token": letter,
                "logprob": math.log(0.92 if letter == true_letter else 0.02),
            }
            for letter, _ in options
        ]
        return {"content": true_letter, "top_logprobs": top}
    return {"content": answer_mcq(image_id, text)}


class ScriptedHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # keep the build output clean
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        text, image_uri = _message_text(body.get("messages", []))
        want_scores = bool(body.get("logprobs"))
        try:
            if image_uri is None:
                reply = {"content": respond_llm(text)}
            else:
                reply = respond_mllm(text, image_uri, want_scores)
        except Exception as exc:  # surface scripting gaps loudly
            self.send_response(500)
            self.end_headers()
            self.wfile.write(str(exc).encode())
            return

        choice = {"index": 0, "message": {"role": "assistant", "content": reply["content"]}}
        if want_scores:
            choice["logprobs"] = {
                "content": [
                    {
                        "token": reply["content"],
                        "logprob": math.log(0.92),
                        "top_logprobs": reply["top_logprobs"],
                    }
                ]
            }
        n = body.get("n", 1)
        payload = {"choices": [dict(choice, index=i) for i in range(n)]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


# -- pipeline driver ----------------------------------------------------


def write_inputs() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    save_jsonl(
        FIXTURES / "captions.jsonl",
        [
            CaptionRecord(w["image_id"], w["image_uri"], w["caption"])
            for w in WORLD
        ],
        "captions.v1",
    )
    config = {
        "version": 1,
        "parallelism": 2,
        "endpoints": [
            {
                "id": "llm",
                "base_url": f"http://127.0.0.1:{PORT}/v1",
                "api_key_env_var": API_KEY_ENV,
                "supports_token_scores": False,
                "model": "scripted-llm",
            },
            {
                "id": "mllm",
                "base_url": f"http://127.0.0.1:{PORT}/v1",
                "api_key_env_var": API_KEY_ENV,
                "supports_token_scores": True,
                "model": "scripted-mllm",
            },
        ],
    }
    (FIXTURES / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n"
    )


def run_pipeline(out_root: Path, cache_dir: Path, replay: bool) -> None:
    runner = CliRunner()
    base = [
        "--config",
        str(FIXTURES / "config.json"),
        "--cache-dir",
        str(cache_dir),
        "--seed",
        SEED,
    ]
    if replay:
        base.append("--replay")

    def run(*args: str) -> None:
        result = runner.invoke(cli_main, list(args), catch_exceptions=False)
        if result.exit_code != 0:
            raise SystemExit(
                f"command failed ({result.exit_code}): {args}\n{result.output}"
            )

    sg = out_root / "sg"
    neg = out_root / "neg"
    mcq = out_root / "mcq"
    eva = out_root / "eval"
    rep = out_root / "report"
    dpo = out_root / "dpo"
    run(
        "extract-sg",
        "--captions", str(FIXTURES / "captions.jsonl"),
        "--endpoint", "llm",
        "--image-endpoint", "mllm",
        "--audit-sample", "2",
        *base, "--out", str(sg),
    )
    run(
        "neg-gen",
        "--sg", str(sg / "scene_graphs.jsonl"),
        "--endpoint", "mllm",
        "--proposal-endpoint", "llm",
        *base, "--out", str(neg),
    )
    run(
        "build-mcq",
        "--sg", str(sg / "scene_graphs.jsonl"),
        "--negatives", str(neg / "negative_sets.jsonl"),
        "--k", "2,3",
        "--granularity",
        "--rotations",
        *base, "--out", str(mcq),
    )
    run(
        "evaluate",
        "--mcq", str(mcq / "mcqs.jsonl"),
        "--endpoint", "mllm",
        *base, "--out", str(eva),
    )
    run(
        "report",
        "--records", str(eva / "eval_records.jsonl"),
        "--mcq", str(mcq / "mcqs.jsonl"),
        "--baselines",
        "--trials", "50000",
        "--positional-bias",
        *base, "--out", str(rep),
    )
    run(
        "build-dpo",
        "--captions", str(FIXTURES / "captions.jsonl"),
        "--endpoint", "llm",
        "--classify",
        *base, "--out", str(dpo),
    )


def assert_identical(a: Path, b: Path) -> int:
    """Byte-compare two replay trees, skipping manifests (wall times)."""
    compared = 0
    files_a = sorted(
        p.relative_to(a) for p in a.rglob("*") if p.is_file()
    )
    files_b = sorted(
        p.relative_to(b) for p in b.rglob("*") if p.is_file()
    )
    assert files_a == files_b, f"file sets differ: {files_a} vs {files_b}"
    for rel in files_a:
        if rel.name == "run_manifest.json":
            continue
        if (a / rel).read_bytes() != (b / rel).read_bytes():
            raise SystemExit(f"replay outputs differ at {rel}")
        compared += 1
    return compared


def check_replay_manifests(root: Path) -> None:
    for manifest_path in root.rglob("run_manifest.json"):
        manifest = json.loads(manifest_path.read_text())
        misses = manifest["cache"].get("misses", 0)
        if misses:
            raise SystemExit(f"{manifest_path}: replay saw {misses} cache misses")


def main() -> None:
    import os

    os.environ.setdefault(API_KEY_ENV, "fixture-key")
    write_inputs()

    cache_dir = FIXTURES / "cache"
    golden_dir = FIXTURES / "golden"
    for stale in (cache_dir, golden_dir):
        if stale.exists():
            shutil.rmtree(stale)

    server = ThreadingHTTPServer(("127.0.0.1", PORT), ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        with tempfile.TemporaryDirectory() as scratch:
            run_pipeline(Path(scratch) / "record", cache_dir, replay=False)
    finally:
        server.shutdown()
        thread.join()

    with tempfile.TemporaryDirectory() as scratch:
        replay_a = Path(scratch) / "a"
        replay_b = Path(scratch) / "b"
        run_pipeline(replay_a, cache_dir, replay=True)
        run_pipeline(replay_b, cache_dir, replay=True)
        check_replay_manifests(replay_a)
        check_replay_manifests(replay_b)
        compared = assert_identical(replay_a, replay_b)
        shutil.copytree(replay_a, golden_dir)
    for manifest_path in golden_dir.rglob("run_manifest.json"):
        manifest_path.unlink()

    cached = len(list(cache_dir.glob("*.json")))
    goldens = len([p for p in golden_dir.rglob("*") if p.is_file()])
    print(f"cache records: {cached}")
    print(f"golden files:  {goldens} ({compared} byte-compared across replays)")


if __name__ == "__main__":
    main()
