"""Scene-graph extraction from image captions.

Two endpoint stages build each graph: stage one copies objects and their
attributes out of the caption (attribute phrases are normalized to
"with ..." form but must be grounded in a verbatim caption span), stage
two proposes relation phrases for object pairs. Proposed relations are
then validated twice, against the image by a multimodal endpoint and
against the caption by a text endpoint; a relation both validators reject
is discarded, a split verdict keeps it but flags it for sampled human
review. Pre-structured annotations can skip the endpoint stages through
the thin importer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .client import ChatClient, ChatMessage, ChatRequest
from .core import (
    ATTRIBUTE,
    EndpointError,
    EntityId,
    InsufficientEntities,
    OBJECT,
    RELATION,
    SceneGraph,
    Seed,
    SgAttribute,
    SgObject,
    SgRelation,
    UnparseableLlmOutput,
    register_schema,
)
from .prompting import load_template, structured_reply

VERDICT_KEPT = "kept"
VERDICT_DISCARDED = "discarded"
VERDICT_NEEDS_HUMAN = "needs_human"


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    image_uri: str
    caption: str

    def __post_init__(self) -> None:
        if not self.caption.strip():
            raise ValueError(f"{self.image_id}: empty caption")

    def to_record(self) -> dict:
        return {
            "schema": "captions.v1",
            "image_id": self.image_id,
            "image_uri": self.image_uri,
            "caption": self.caption,
        }

    @staticmethod
    def from_record(rec: dict) -> "CaptionRecord":
        return CaptionRecord(
            image_id=rec["image_id"],
            image_uri=rec["image_uri"],
            caption=rec["caption"],
        )


@dataclass(frozen=True)
class RelationCandidate:
    """A proposed relation between two extracted objects plus its audit.

    caption_supported / image_supported are None until the validator ran
    (or when it failed); the verdict is discarded only when both checks
    came back false, and flagged marks split verdicts kept for sampled
    human review.
    """

    image_id: str
    subject: EntityId
    object: EntityId
    predicate_text: str
    source_text: str = ""
    caption_supported: Optional[bool] = None
    image_supported: Optional[bool] = None
    verdict: str = VERDICT_NEEDS_HUMAN
    flagged: bool = False
    sampled_for_review: bool = False

    def to_record(self) -> dict:
        return {
            "schema": "relation_audit.v1",
            "image_id": self.image_id,
            "subject": self.subject.to_record(),
            "object": self.object.to_record(),
            "predicate_text": self.predicate_text,
            "source_text": self.source_text,
            "caption_supported": self.caption_supported,
            "image_supported": self.image_supported,
            "verdict": self.verdict,
            "flagged": self.flagged,
            "sampled_for_review": self.sampled_for_review,
        }

    @staticmethod
    def from_record(rec: dict) -> "RelationCandidate":
        return RelationCandidate(
            image_id=rec["image_id"],
            subject=EntityId.from_record(rec["subject"]),
            object=EntityId.from_record(rec["object"]),
            predicate_text=rec["predicate_text"],
            source_text=rec.get("source_text", ""),
            caption_supported=rec["caption_supported"],
            image_supported=rec["image_supported"],
            verdict=rec["verdict"],
            flagged=bool(rec.get("flagged", False)),
            sampled_for_review=bool(rec.get("sampled_for_review", False)),
        )


register_schema("captions.v1", CaptionRecord.from_record, CaptionRecord.to_record)
register_schema(
    "relation_audit.v1", RelationCandidate.from_record, RelationCandidate.to_record
)


_ARTICLE_RE = re.compile(r"^(a|an|the)\s+", re.IGNORECASE)


def appears_in_caption(phrase: str, caption: str) -> bool:
    """Verbatim-substring check, case-insensitive, leading article stripped,
    tolerant of a trailing plural 's' on either side."""
    cap = caption.casefold()
    cand = _ARTICLE_RE.sub("", phrase.strip()).casefold()
    if not cand:
        return False
    variants = {cand}
    if cand.endswith("s"):
        variants.add(cand[:-1])
    else:
        variants.add(cand + "s")
    return any(v in cap for v in variants)


def normalize_attribute(phrase: str) -> str:
    phrase = phrase.strip()
    if not phrase.casefold().startswith("with"):
        phrase = f"with {phrase}"
    return phrase


def extract_objects_attributes(
    client: ChatClient, endpoint_id: str, caption: CaptionRecord
) -> SceneGraph:
    """Stage one: objects plus attributes, grounded in the caption.

    Objects whose names are not verbatim caption substrings are dropped
    (the endpoint invented them); attribute spans are checked the same way
    while the stored phrase is the normalized "with ..." rewriting.
    Unparseable endpoint output raises UnparseableLlmOutput after one
    corrective reprompt so the caller can route the caption to rejects.
    """
    prompt = load_template("sg_objects.v1").replace("{caption}", caption.caption)
    data = structured_reply(client, endpoint_id, prompt, "object extraction")
    if not isinstance(data, dict) or not isinstance(data.get("objects"), list):
        raise UnparseableLlmOutput(
            f"{caption.image_id}: object extraction reply has no objects list"
        )

    objects: list[SgObject] = []
    attributes: list[SgAttribute] = []
    seen_names: set[str] = set()
    for block in data["objects"]:
        if not isinstance(block, dict):
            continue
        name = str(block.get("name", "")).strip()
        if not name or name.casefold() in seen_names:
            continue
        if not appears_in_caption(name, caption.caption):
            continue  # invented object
        seen_names.add(name.casefold())
        obj_id = EntityId(OBJECT, caption.image_id, len(objects))
        objects.append(SgObject(obj_id, name))
        for attr in block.get("attributes", []):
            if not isinstance(attr, dict):
                continue
            span = str(attr.get("span", "")).strip()
            phrase = str(attr.get("phrase", "")).strip()
            if not span or not phrase:
                continue
            if not appears_in_caption(span, caption.caption):
                continue  # ungrounded attribute
            attributes.append(
                SgAttribute(
                    EntityId(ATTRIBUTE, caption.image_id, len(attributes)),
                    obj_id,
                    normalize_attribute(phrase),
                )
            )
    sg = SceneGraph(
        image_id=caption.image_id,
        image_uri=caption.image_uri,
        objects=tuple(objects),
        attributes=tuple(attributes),
        relations=(),
    )
    sg.validate()
    return sg


def _source_sentence(caption: str, predicate: str) -> str:
    for sentence in re.split(r"(?<=[.!?])\s+", caption):
        if predicate.casefold() in sentence.casefold():
            return sentence.strip()
    return ""


def extract_relations(
    client: ChatClient, endpoint_id: str, caption: CaptionRecord, sg: SceneGraph
) -> list[RelationCandidate]:
    """Stage two: one endpoint call per object pair asking for the exact
    relation phrase the caption states, or nothing.

    Returned candidates are unvalidated (verdict needs_human) and their
    predicates are verbatim-checked against the caption.
    """
    if len(sg.objects) < 2:
        raise InsufficientEntities(
            f"{caption.image_id}: need 2 objects for relations, have {len(sg.objects)}"
        )
    template = load_template("sg_relation_pair.v1")
    candidates: list[RelationCandidate] = []
    for i in range(len(sg.objects)):
        for j in range(i + 1, len(sg.objects)):
            first, second = sg.objects[i], sg.objects[j]
            prompt = (
                template.replace("{first}", first.name)
                .replace("{second}", second.name)
                .replace("{caption}", caption.caption)
            )
            try:
                data = structured_reply(
                    client, endpoint_id, prompt, "relation extraction"
                )
            except UnparseableLlmOutput:
                continue  # this pair stays relation-free
            if not isinstance(data, dict):
                continue
            predicate = data.get("relation")
            if not predicate or not isinstance(predicate, str):
                continue
            predicate = predicate.strip()
            if not appears_in_caption(predicate, caption.caption):
                continue  # not the caption's wording
            subject_name = str(data.get("subject", first.name)).strip().casefold()
            if subject_name == second.name.casefold():
                subject, obj = second, first
            else:
                subject, obj = first, second
            candidates.append(
                RelationCandidate(
                    image_id=caption.image_id,
                    subject=subject.id,
                    object=obj.id,
                    predicate_text=predicate,
                    source_text=_source_sentence(caption.caption, predicate),
                )
            )
    return candidates


_YES_NO_RE = re.compile(r"\b(yes|no)\b")


def _binary_check(
    client: ChatClient,
    endpoint_id: str,
    prompt: str,
    image_uri: Optional[str] = None,
) -> Optional[bool]:
    try:
        response = client.complete(
            ChatRequest(
                endpoint_id=endpoint_id,
                messages=(ChatMessage("user", prompt, image_uri=image_uri),),
                temperature=0.0,
                max_tokens=5,
            )
        )
    except EndpointError:
        return None
    match = _YES_NO_RE.search(response.text.casefold())
    if match is None:
        return None
    return match.group(1) == "yes"


def validate_relations(
    client: ChatClient,
    image_endpoint: str,
    caption_endpoint: str,
    caption: CaptionRecord,
    sg: SceneGraph,
    candidates: Sequence[RelationCandidate],
) -> list[RelationCandidate]:
    """Double-check each candidate against the image and the caption.

    Both checks false discards the candidate; agreement keeps it; a split
    keeps it flagged for sampled review; a failed or unparseable check
    leaves the verdict needs_human.
    """
    image_template = load_template("relation_image_check.v1")
    caption_template = load_template("relation_caption_check.v1")
    out: list[RelationCandidate] = []
    for cand in candidates:
        statement = (
            f"{sg.object_by_id(cand.subject).name} {cand.predicate_text} "
            f"{sg.object_by_id(cand.object).name}"
        )
        image_ok = _binary_check(
            client,
            image_endpoint,
            image_template.replace("{statement}", statement),
            image_uri=caption.image_uri,
        )
        caption_ok = _binary_check(
            client,
            caption_endpoint,
            caption_template.replace("{statement}", statement).replace(
                "{caption}", caption.caption
            ),
        )
        if image_ok is None or caption_ok is None:
            verdict, flagged = VERDICT_NEEDS_HUMAN, False
        elif not image_ok and not caption_ok:
            verdict, flagged = VERDICT_DISCARDED, False
        else:
            verdict, flagged = VERDICT_KEPT, image_ok != caption_ok
        out.append(
            replace(
                cand,
                image_supported=image_ok,
                caption_supported=caption_ok,
                verdict=verdict,
                flagged=flagged,
            )
        )
    return out


def mark_audit_sample(
    candidates: Sequence[RelationCandidate], sample_size: int, seed: Seed
) -> list[RelationCandidate]:
    """Mark a deterministic sample of kept candidates for human review,
    flagged split verdicts first."""
    if sample_size <= 0:
        return list(candidates)
    kept = [i for i, c in enumerate(candidates) if c.verdict == VERDICT_KEPT]
    flagged = [i for i in kept if candidates[i].flagged]
    plain = [i for i in kept if not candidates[i].flagged]
    rng = seed.rng()
    rng.shuffle(flagged)
    rng.shuffle(plain)
    chosen = set((flagged + plain)[:sample_size])
    return [
        replace(c, sampled_for_review=True) if i in chosen else c
        for i, c in enumerate(candidates)
    ]


def attach_relations(
    sg: SceneGraph, candidates: Sequence[RelationCandidate]
) -> SceneGraph:
    """Attach kept candidates to the graph as relation entities, dropping
    duplicate triplets."""
    relations: list[SgRelation] = []
    seen: set[tuple] = set()
    for cand in candidates:
        if cand.verdict != VERDICT_KEPT:
            continue
        trip = (cand.subject, cand.predicate_text, cand.object)
        if trip in seen:
            continue
        seen.add(trip)
        relations.append(
            SgRelation(
                EntityId(RELATION, sg.image_id, len(relations)),
                cand.subject,
                cand.predicate_text,
                cand.object,
                cand.source_text,
            )
        )
    out = SceneGraph(
        image_id=sg.image_id,
        image_uri=sg.image_uri,
        objects=sg.objects,
        attributes=sg.attributes,
        relations=tuple(relations),
    )
    out.validate()
    return out


def extract_scene_graph(
    client: ChatClient,
    text_endpoint: str,
    image_endpoint: str,
    caption: CaptionRecord,
    audit_sample: int = 0,
    seed: Seed = Seed(0),
) -> tuple[SceneGraph, list[RelationCandidate]]:
    """Full per-caption pipeline: extract, propose, validate, attach."""
    sg = extract_objects_attributes(client, text_endpoint, caption)
    candidates: list[RelationCandidate] = []
    if len(sg.objects) >= 2:
        candidates = extract_relations(client, text_endpoint, caption, sg)
        candidates = validate_relations(
            client, image_endpoint, text_endpoint, caption, sg, candidates
        )
        candidates = mark_audit_sample(
            candidates, audit_sample, seed.derive("audit", caption.image_id)
        )
        sg = attach_relations(sg, candidates)
    return sg, candidates


def import_structured(records: Sequence[dict]) -> list[SceneGraph]:
    """Thin importer for pre-structured annotations.

    Each record carries objects with ready attribute phrases and relation
    triplets referencing objects by name:

        {"image_id": ..., "image_uri": ...,
         "objects": [{"name": "cat", "attributes": ["with a black color"]}],
         "relations": [{"subject": "cat", "predicate": "is lying on",
                        "object": "desk", "source_text": "..."}]}

    Attribute phrases get the "with" normalization; duplicate relation
    triplets are dropped.
    """
    graphs = []
    for rec in records:
        image_id = rec["image_id"]
        objects: list[SgObject] = []
        attributes: list[SgAttribute] = []
        by_name: dict[str, EntityId] = {}
        for block in rec.get("objects", []):
            name = str(block["name"]).strip()
            if name.casefold() in by_name:
                continue
            obj_id = EntityId(OBJECT, image_id, len(objects))
            objects.append(SgObject(obj_id, name))
            by_name[name.casefold()] = obj_id
            for phrase in block.get("attributes", []):
                attributes.append(
                    SgAttribute(
                        EntityId(ATTRIBUTE, image_id, len(attributes)),
                        obj_id,
                        normalize_attribute(str(phrase)),
                    )
                )
        relations: list[SgRelation] = []
        seen: set[tuple] = set()
        for block in rec.get("relations", []):
            subject = by_name.get(str(block["subject"]).strip().casefold())
            obj = by_name.get(str(block["object"]).strip().casefold())
            if subject is None or obj is None:
                continue
            predicate = str(block["predicate"]).strip()
            trip = (subject, predicate, obj)
            if trip in seen:
                continue
            seen.add(trip)
            relations.append(
                SgRelation(
                    EntityId(RELATION, image_id, len(relations)),
                    subject,
                    predicate,
                    obj,
                    str(block.get("source_text", "")),
                )
            )
        sg = SceneGraph(
            image_id=image_id,
            image_uri=rec.get("image_uri", ""),
            objects=tuple(objects),
            attributes=tuple(attributes),
            relations=tuple(relations),
        )
        sg.validate()
        graphs.append(sg)
    return graphs
