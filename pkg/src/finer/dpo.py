"""Preference-tuple construction and the reference DPO objective.

From each long caption an LLM extracts up to four positive phrases (an
object summary, an attribute summary for one object, a relation summary
for one object, and a composed Wh question-answer pair), then corrupts
each by replacing exactly one instance, giving matched negative phrases.
Question-answer templates turn every phrase pair into one positive and
one negative preference tuple — accepted answers affirm what the image
shows, rejected answers assert the corrupted content — so a full caption
yields up to eight tuples. A reservoir subsampler caps the dataset and a
numerically stable loss/gradient calculator over externally supplied
log-probabilities lets the exported data be validated end to end; the
model forward passes themselves stay out of scope.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .client import ChatClient, ChatMessage, ChatRequest
from .core import Seed, UnparseableLlmOutput, register_schema
from .mcq_build import NEGATIVE, POSITIVE
from .prompting import load_template, structured_reply
from .sg_extract import CaptionRecord

SUBSET_OBJ = "obj"
SUBSET_ATTR = "attr"
SUBSET_REL = "rel"
SUBSET_WH = "wh"
SUBSETS = (SUBSET_OBJ, SUBSET_ATTR, SUBSET_REL, SUBSET_WH)

# Question / yes-answer / no-answer pool; {X} {Y} {Z} are phrase slots.
TEMPLATE_POOL = {
    1: (
        "Does this image contain {X}?",
        "Yes, this image contains {Y}.",
        "No, but this image contains {Z}.",
    ),
    2: (
        "Does this image show {X}?",
        "Yes, this image shows {Y}.",
        "No, but this image shows {Z}.",
    ),
    3: (
        "Does this image include {X}?",
        "Yes, this image includes {Y}.",
        "No, but this image includes {Z}.",
    ),
    4: (
        "Can you see {X} in this image?",
        "Yes, I can see {Y} in this image.",
        "No, but I can see {Z} in this image.",
    ),
    5: (
        "Can {X} be seen in this image?",
        "Yes, {Y} can be seen in this image.",
        "No, but {Z} can be seen in this image.",
    ),
}

CATEGORY_NATURAL = "natural_image"
CATEGORY_SCREENSHOT = "screenshot_ui"
CATEGORY_CHART = "chart_graph"
CATEGORY_DOCUMENT = "document_text"
CATEGORIES = (
    CATEGORY_NATURAL,
    CATEGORY_SCREENSHOT,
    CATEGORY_CHART,
    CATEGORY_DOCUMENT,
)


@dataclass(frozen=True)
class WhPair:
    """A free-form question with its full-sentence answer."""

    question: str
    answer: str

    def __post_init__(self) -> None:
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("Wh pair needs both a question and an answer")


def _phrase_text(value) -> str:
    """The text a replacement must live in: the question for Wh pairs,
    the phrase itself otherwise."""
    return value.question if isinstance(value, WhPair) else value


@dataclass(frozen=True)
class PhraseSet:
    """Matched positive and negative phrases for one image.

    Values are strings for obj/attr/rel and WhPair for wh. Every negative
    entry differs from its positive partner by exactly one replaced
    instance: the recorded replacement appears in the negative phrase and
    not in the positive one. Both maps may be partial — a caption without
    attributes simply has no attr entry.
    """

    image_id: str
    image_uri: str
    positive: dict
    negative: dict
    replacement: dict

    def __post_init__(self) -> None:
        for name, mapping in (("positive", self.positive), ("negative", self.negative)):
            for key in mapping:
                if key not in SUBSETS:
                    raise ValueError(f"{self.image_id}: unknown {name} subset {key!r}")
        for key in self.negative:
            if key not in self.positive:
                raise ValueError(
                    f"{self.image_id}: negative {key} has no positive partner"
                )
        if set(self.replacement) != set(self.negative):
            raise ValueError(
                f"{self.image_id}: replacement keys must match negative keys"
            )
        for key, instance in self.replacement.items():
            needle = instance.strip().casefold()
            if not needle:
                raise ValueError(f"{self.image_id}: empty replacement for {key}")
            if needle not in _phrase_text(self.negative[key]).casefold():
                raise ValueError(
                    f"{self.image_id}: replacement for {key} not in negative phrase"
                )
            if needle in _phrase_text(self.positive[key]).casefold():
                raise ValueError(
                    f"{self.image_id}: replacement for {key} already in positive phrase"
                )

    def paired_subsets(self) -> list[str]:
        return [s for s in SUBSETS if s in self.negative]


@dataclass(frozen=True)
class PreferenceTuple:
    """One (query, accepted, rejected) training example for an image."""

    image_id: str
    image_uri: str
    subset: str
    polarity: str
    query: str
    accepted: str
    rejected: str
    template_id: Optional[int] = None

    def __post_init__(self) -> None:
        if self.subset not in SUBSETS:
            raise ValueError(f"unknown subset {self.subset!r}")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.subset == SUBSET_WH:
            if self.template_id is not None:
                raise ValueError("wh tuples are free-form, not templated")
            return
        if self.template_id not in TEMPLATE_POOL:
            raise ValueError(f"template_id must be 1..5, got {self.template_id!r}")
        good, bad = ("Yes", "No") if self.polarity == POSITIVE else ("No", "Yes")
        if not self.accepted.startswith(good):
            raise ValueError(f"{self.polarity} accepted answer must start {good!r}")
        if not self.rejected.startswith(bad):
            raise ValueError(f"{self.polarity} rejected answer must start {bad!r}")

    def to_record(self) -> dict:
        return {
            "schema": "preference.v1",
            "image_id": self.image_id,
            "image_uri": self.image_uri,
            "subset": self.subset,
            "polarity": self.polarity,
            "query": self.query,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "template_id": self.template_id,
        }

    @staticmethod
    def from_record(rec: dict) -> "PreferenceTuple":
        return PreferenceTuple(
            image_id=rec["image_id"],
            image_uri=rec["image_uri"],
            subset=rec["subset"],
            polarity=rec["polarity"],
            query=rec["query"],
            accepted=rec["accepted"],
            rejected=rec["rejected"],
            template_id=rec["template_id"],
        )


register_schema(
    "preference.v1", PreferenceTuple.from_record, PreferenceTuple.to_record
)


def classify_image_category(
    client: ChatClient, endpoint_id: str, caption: str
) -> Optional[str]:
    """Four-way image-category label from the caption, or None when the
    reply names no category (callers fail open and keep the image)."""
    if not caption.strip():
        raise ValueError("empty caption")
    prompt = load_template("image_category.v1").replace("{caption}", caption)
    response = client.complete(
        ChatRequest(
            endpoint_id=endpoint_id,
            messages=(ChatMessage("user", prompt),),
            temperature=0.0,
            max_tokens=10,
        )
    )
    normalized = response.text.strip().casefold().replace(" ", "_").replace("-", "_")
    for label in CATEGORIES:
        if label in normalized:
            return label
    return None


_POSITIVE_KEYS = {
    "objects": SUBSET_OBJ,
    "attributes": SUBSET_ATTR,
    "relations": SUBSET_REL,
    "wh": SUBSET_WH,
}


def _parse_positive_map(data) -> dict:
    positive: dict = {}
    if not isinstance(data, dict):
        raise UnparseableLlmOutput("positive phrases reply is not a JSON object")
    for key, subset in _POSITIVE_KEYS.items():
        value = data.get(key)
        if subset == SUBSET_WH:
            if (
                isinstance(value, dict)
                and str(value.get("question", "")).strip()
                and str(value.get("answer", "")).strip()
            ):
                positive[subset] = WhPair(
                    str(value["question"]).strip(), str(value["answer"]).strip()
                )
        elif isinstance(value, str) and value.strip():
            positive[subset] = value.strip()
    return positive


def _parse_negative_map(data, positive: dict) -> tuple[dict, dict]:
    negative: dict = {}
    replacement: dict = {}
    if not isinstance(data, dict):
        raise UnparseableLlmOutput("negative phrases reply is not a JSON object")
    for key, subset in _POSITIVE_KEYS.items():
        if subset not in positive:
            continue
        value = data.get(key)
        if not isinstance(value, dict):
            continue
        instance = str(value.get("replacement", "")).strip()
        if not instance:
            continue
        if subset == SUBSET_WH:
            question = str(value.get("question", "")).strip()
            answer = str(value.get("answer", "")).strip()
            if not question or not answer:
                continue
            candidate: object = WhPair(question, answer)
        else:
            phrase = str(value.get("phrase", "")).strip()
            if not phrase:
                continue
            candidate = phrase
        # Exactly-one-replacement discipline: the new instance must appear
        # in the corrupted text and not in the positive partner.
        needle = instance.casefold()
        if needle not in _phrase_text(candidate).casefold():
            continue
        if needle in _phrase_text(positive[subset]).casefold():
            continue
        negative[subset] = candidate
        replacement[subset] = instance
    return negative, replacement


def extract_phrase_sets(
    client: ChatClient, endpoint_id: str, caption: CaptionRecord
) -> PhraseSet:
    """Two-stage phrase extraction: positives for every subset the caption
    supports, then one-instance corruptions of each.

    Subsets the endpoint cannot ground (missing, malformed, or violating
    the one-replacement rule) are simply omitted; an unparseable first
    stage propagates UnparseableLlmOutput.
    """
    positives_prompt = load_template("dpo_positives.v1").replace(
        "{caption}", caption.caption
    )
    data = structured_reply(client, endpoint_id, positives_prompt, "positive phrases")
    positive = _parse_positive_map(data)

    negative: dict = {}
    replacement: dict = {}
    if positive:
        shown = {
            key: (
                {"question": value.question, "answer": value.answer}
                if isinstance(value, WhPair)
                else value
            )
            for key, value in (
                (k, positive[s]) for k, s in _POSITIVE_KEYS.items() if s in positive
            )
        }
        negatives_prompt = (
            load_template("dpo_negatives.v1")
            .replace("{caption}", caption.caption)
            .replace("{positives}", json.dumps(shown, ensure_ascii=False, indent=2))
        )
        try:
            data = structured_reply(
                client, endpoint_id, negatives_prompt, "negative phrases"
            )
        except UnparseableLlmOutput:
            data = {}
        negative, replacement = _parse_negative_map(data, positive)

    return PhraseSet(
        image_id=caption.image_id,
        image_uri=caption.image_uri,
        positive=positive,
        negative=negative,
        replacement=replacement,
    )


def _fill(template: str, slot: str, phrase: str) -> str:
    return template.replace("{" + slot + "}", phrase)


def compose_tuples(ps: PhraseSet, seed: Seed) -> list[PreferenceTuple]:
    """Up to eight preference tuples from one phrase set.

    Each templated subset present in both maps yields a positive tuple
    (query and accepted answer carry the positive phrase, rejected answer
    carries the corruption) and a negative tuple (query carries the
    corruption; the accepted answer denies it and points at the positive
    phrase, the rejected answer affirms the corruption). The template is
    drawn uniformly from the five-template pool per tuple. Wh pairs are
    already question-answer shaped, so the two accepted answers simply
    swap roles as each other's rejected answer.
    """
    rng = seed.derive("dpo-templates", ps.image_id).rng()
    tuples: list[PreferenceTuple] = []
    for subset in (SUBSET_OBJ, SUBSET_ATTR, SUBSET_REL):
        if subset not in ps.negative:
            continue
        pos, neg = ps.positive[subset], ps.negative[subset]
        for polarity in (POSITIVE, NEGATIVE):
            template_id = rng.randint(1, 5)
            question, yes_answer, no_answer = TEMPLATE_POOL[template_id]
            if polarity == POSITIVE:
                query = _fill(question, "X", pos)
                accepted = _fill(yes_answer, "Y", pos)
                rejected = _fill(no_answer, "Z", neg)
            else:
                query = _fill(question, "X", neg)
                accepted = _fill(no_answer, "Z", pos)
                rejected = _fill(yes_answer, "Y", neg)
            tuples.append(
                PreferenceTuple(
                    image_id=ps.image_id,
                    image_uri=ps.image_uri,
                    subset=subset,
                    polarity=polarity,
                    query=query,
                    accepted=accepted,
                    rejected=rejected,
                    template_id=template_id,
                )
            )
    if SUBSET_WH in ps.negative:
        pos_pair: WhPair = ps.positive[SUBSET_WH]
        neg_pair: WhPair = ps.negative[SUBSET_WH]
        tuples.append(
            PreferenceTuple(
                image_id=ps.image_id,
                image_uri=ps.image_uri,
                subset=SUBSET_WH,
                polarity=POSITIVE,
                query=pos_pair.question,
                accepted=pos_pair.answer,
                rejected=neg_pair.answer,
            )
        )
        tuples.append(
            PreferenceTuple(
                image_id=ps.image_id,
                image_uri=ps.image_uri,
                subset=SUBSET_WH,
                polarity=NEGATIVE,
                query=neg_pair.question,
                accepted=neg_pair.answer,
                rejected=pos_pair.answer,
            )
        )
    return tuples


def subsample(tuples: Iterable, cap: int, seed: Seed) -> list:
    """Uniform without-replacement cap via reservoir sampling; streams the
    input once and is deterministic per seed."""
    if cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    rng = seed.derive("subsample").rng()
    reservoir: list = []
    for index, item in enumerate(tuples):
        if index < cap:
            reservoir.append(item)
        else:
            slot = rng.randint(0, index)
            if slot < cap:
                reservoir[slot] = item
    return reservoir


@dataclass(frozen=True)
class DpoExample:
    """Scalar log-probabilities of the accepted and rejected answers under
    the policy and the frozen reference."""

    logp_policy_accepted: float
    logp_policy_rejected: float
    logp_ref_accepted: float
    logp_ref_rejected: float
    beta: float = 0.1

    def __post_init__(self) -> None:
        for name in (
            "logp_policy_accepted",
            "logp_policy_rejected",
            "logp_ref_accepted",
            "logp_ref_rejected",
        ):
            if getattr(self, name) > 0.0:
                raise ValueError(f"{name} is a log-probability and must be <= 0")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @property
    def margin(self) -> float:
        """beta * (policy delta - reference delta)."""
        delta_policy = self.logp_policy_accepted - self.logp_policy_rejected
        delta_ref = self.logp_ref_accepted - self.logp_ref_rejected
        return self.beta * (delta_policy - delta_ref)


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def dpo_loss(ex: DpoExample) -> float:
    """-ln sigmoid(margin), computed as softplus(-margin) so extreme
    margins neither overflow nor round to -inf."""
    return _softplus(-ex.margin)


def dpo_grads(ex: DpoExample) -> tuple[float, float, float, float]:
    """Partial derivatives of dpo_loss with respect to the four
    log-probabilities, in dataclass field order."""
    g = ex.beta * _sigmoid(-ex.margin)
    return (-g, g, g, -g)


def dpo_loss_batch(examples: Sequence[DpoExample]) -> float:
    """Mean loss over a batch."""
    if not examples:
        raise ValueError("empty batch")
    return sum(dpo_loss(ex) for ex in examples) / len(examples)


def trainer_export_records(tuples: Sequence[PreferenceTuple]) -> list[dict]:
    """Conversation-preference records in the layout downstream trainers
    ingest directly; field names are frozen (documented in docs/)."""
    return [
        {
            "images": [t.image_uri],
            "conversations": [{"from": "human", "value": "<image>" + t.query}],
            "chosen": {"from": "gpt", "value": t.accepted},
            "rejected": {"from": "gpt", "value": t.rejected},
        }
        for t in tuples
    ]


def write_trainer_export(path, tuples: Sequence[PreferenceTuple]) -> None:
    import os

    records = trainer_export_records(tuples)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(records, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def build_preference_dataset(
    client: ChatClient,
    endpoint_id: str,
    captions: Sequence[CaptionRecord],
    seed: Seed,
    cap: int = 160_000,
    parallelism: int = 1,
    classify: bool = False,
    allowed_categories: Optional[Sequence[str]] = None,
) -> tuple[list[PreferenceTuple], dict]:
    """Caption stream to capped preference dataset.

    Category filtering fails open: an image whose caption the classifier
    cannot label is kept. Extraction runs per caption (concurrently when
    parallelism > 1); composition and subsampling stay sequential and
    seed-deterministic.
    """

    def classify_one(caption: CaptionRecord) -> Optional[str]:
        if not classify:
            return None
        return classify_image_category(client, endpoint_id, caption.caption)

    def extract_one(caption: CaptionRecord) -> Optional[PhraseSet]:
        try:
            return extract_phrase_sets(client, endpoint_id, caption)
        except UnparseableLlmOutput:
            return None

    category_counts: Counter = Counter()
    kept: list[CaptionRecord] = []
    if classify:
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                labels = list(pool.map(classify_one, captions))
        else:
            labels = [classify_one(c) for c in captions]
        for caption, label in zip(captions, labels):
            category_counts[label or "unlabeled"] += 1
            if (
                allowed_categories is None
                or label is None
                or label in allowed_categories
            ):
                kept.append(caption)
    else:
        kept = list(captions)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            phrase_sets = list(pool.map(extract_one, kept))
    else:
        phrase_sets = [extract_one(c) for c in kept]

    all_tuples: list[PreferenceTuple] = []
    unparseable = 0
    for ps in phrase_sets:
        if ps is None:
            unparseable += 1
            continue
        all_tuples.extend(compose_tuples(ps, seed))

    selected = (
        subsample(all_tuples, cap, seed) if len(all_tuples) > cap else all_tuples
    )
    subset_counts = Counter(t.subset for t in selected)
    stats = {
        "captions": len(captions),
        "captions_kept": len(kept),
        "captions_unparseable": unparseable,
        "tuples_composed": len(all_tuples),
        "tuples_selected": len(selected),
        "by_subset": {s: subset_counts.get(s, 0) for s in SUBSETS},
        "by_category": dict(sorted(category_counts.items())),
    }
    return list(selected), stats

