"""Domain types for scene graphs and their negative counterparts.

All values are immutable; anything that looks like mutation returns a new
value. Serialization goes through to_record/from_record dict forms used by
the JSONL layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .errors import SchemaViolation

OBJECT = "object"
ATTRIBUTE = "attribute"
RELATION = "relation"
KINDS = (OBJECT, ATTRIBUTE, RELATION)

STATUS_PROPOSED = "proposed"
STATUS_KEPT = "kept"
STATUS_REGENERATED = "regenerated"
NEGATIVE_STATUSES = (STATUS_PROPOSED, STATUS_KEPT, STATUS_REGENERATED)

LABEL_VALID = "valid_negative"
LABEL_PRESENT = "present_in_image"
HUMAN_LABELS = (LABEL_VALID, LABEL_PRESENT)


@dataclass(frozen=True)
class EntityId:
    """Identifies one object, attribute, or relation within a scene graph.

    Stable across pipeline stages: the same entity keeps the same id from
    extraction through evaluation.
    """

    kind: str
    image_id: str
    index: int

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown entity kind: {self.kind!r}")
        if self.index < 0:
            raise ValueError(f"negative entity index: {self.index}")

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.image_id}:{self.index}"

    def to_record(self) -> dict:
        return {"kind": self.kind, "image_id": self.image_id, "index": self.index}

    @staticmethod
    def from_record(rec: dict) -> "EntityId":
        return EntityId(rec["kind"], rec["image_id"], int(rec["index"]))


@dataclass(frozen=True)
class SgObject:
    id: EntityId
    name: str


@dataclass(frozen=True)
class SgAttribute:
    id: EntityId
    owner: EntityId
    phrase: str


@dataclass(frozen=True)
class SgRelation:
    id: EntityId
    subject: EntityId
    predicate: str
    object: EntityId
    source_text: str = ""


@dataclass(frozen=True)
class SceneGraph:
    """Objects, attribute phrases, and relation triplets for one image.

    Invariants (checked by validate):
      - attribute owners and relation endpoints reference existing objects
      - attribute phrases are normalized to "with ..." form
      - no duplicate (subject, predicate, object) triplets
      - entity ids carry this graph's image_id, role-matching kinds, and
        contiguous per-kind indices
    """

    image_id: str
    image_uri: str
    objects: tuple[SgObject, ...]
    attributes: tuple[SgAttribute, ...]
    relations: tuple[SgRelation, ...]

    def validate(self) -> None:
        object_ids = set()
        for i, obj in enumerate(self.objects):
            if obj.id.kind != OBJECT or obj.id.image_id != self.image_id:
                raise ValueError(f"object id mismatch: {obj.id.key}")
            if obj.id.index != i:
                raise ValueError(f"object index not contiguous: {obj.id.key}")
            if not obj.name.strip():
                raise ValueError("empty object name")
            object_ids.add(obj.id)
        for i, attr in enumerate(self.attributes):
            if attr.id.kind != ATTRIBUTE or attr.id.image_id != self.image_id:
                raise ValueError(f"attribute id mismatch: {attr.id.key}")
            if attr.id.index != i:
                raise ValueError(f"attribute index not contiguous: {attr.id.key}")
            if attr.owner not in object_ids:
                raise ValueError(f"attribute owner not in graph: {attr.owner.key}")
            if not attr.phrase.startswith("with "):
                raise ValueError(f"attribute phrase not normalized: {attr.phrase!r}")
        triplets = set()
        for i, rel in enumerate(self.relations):
            if rel.id.kind != RELATION or rel.id.image_id != self.image_id:
                raise ValueError(f"relation id mismatch: {rel.id.key}")
            if rel.id.index != i:
                raise ValueError(f"relation index not contiguous: {rel.id.key}")
            if rel.subject not in object_ids or rel.object not in object_ids:
                raise ValueError(f"relation endpoint not in graph: {rel.id.key}")
            if not rel.predicate.strip():
                raise ValueError("empty relation predicate")
            trip = (rel.subject, rel.predicate, rel.object)
            if trip in triplets:
                raise ValueError(f"duplicate relation triplet: {rel.id.key}")
            triplets.add(trip)

    def object_by_id(self, entity_id: EntityId) -> SgObject:
        return self.objects[entity_id.index]

    def attributes_of(self, owner: EntityId) -> tuple[SgAttribute, ...]:
        return tuple(a for a in self.attributes if a.owner == owner)

    def to_record(self) -> dict:
        return {
            "schema": "scene_graph.v1",
            "image_id": self.image_id,
            "image_uri": self.image_uri,
            "objects": [
                {"id": o.id.to_record(), "name": o.name} for o in self.objects
            ],
            "attributes": [
                {
                    "id": a.id.to_record(),
                    "owner": a.owner.to_record(),
                    "phrase": a.phrase,
                }
                for a in self.attributes
            ],
            "relations": [
                {
                    "id": r.id.to_record(),
                    "subject": r.subject.to_record(),
                    "predicate": r.predicate,
                    "object": r.object.to_record(),
                    "source_text": r.source_text,
                }
                for r in self.relations
            ],
        }

    @staticmethod
    def from_record(rec: dict) -> "SceneGraph":
        sg = SceneGraph(
            image_id=rec["image_id"],
            image_uri=rec["image_uri"],
            objects=tuple(
                SgObject(EntityId.from_record(o["id"]), o["name"])
                for o in rec["objects"]
            ),
            attributes=tuple(
                SgAttribute(
                    EntityId.from_record(a["id"]),
                    EntityId.from_record(a["owner"]),
                    a["phrase"],
                )
                for a in rec["attributes"]
            ),
            relations=tuple(
                SgRelation(
                    EntityId.from_record(r["id"]),
                    EntityId.from_record(r["subject"]),
                    r["predicate"],
                    EntityId.from_record(r["object"]),
                    r.get("source_text", ""),
                )
                for r in rec["relations"]
            ),
        )
        sg.validate()
        return sg


@dataclass(frozen=True)
class NegativeSet:
    """Four negative counterparts for one scene-graph entity.

    The positive phrase is carried in the record so each line is
    self-contained: no negative may equal it, and the four negatives are
    pairwise distinct. status tracks the lifecycle (proposed until
    filtering finishes, then kept or regenerated); needs_human marks sets
    still failing the discriminator when the regeneration cap was hit.
    """

    target: EntityId
    positive: str
    negatives: tuple[str, str, str, str]
    status: str = STATUS_PROPOSED
    regen_count: int = 0
    last_entropy: Optional[float] = None
    human_label: Optional[str] = None
    needs_human: bool = False

    def __post_init__(self) -> None:
        if len(self.negatives) != 4:
            raise ValueError(f"need exactly 4 negatives, got {len(self.negatives)}")
        if len(set(self.negatives)) != 4:
            raise ValueError(f"negatives not pairwise distinct: {self.negatives}")
        if self.positive in self.negatives:
            raise ValueError(f"negative equals positive phrase: {self.positive!r}")
        if self.status not in NEGATIVE_STATUSES:
            raise ValueError(f"unknown status: {self.status!r}")
        if self.human_label is not None and self.human_label not in HUMAN_LABELS:
            raise ValueError(f"unknown human label: {self.human_label!r}")

    def with_replacement(self, slot: int, negative: str) -> "NegativeSet":
        """Replace one negative, bump regen_count, mark regenerated."""
        negs = list(self.negatives)
        negs[slot] = negative
        return replace(
            self,
            negatives=tuple(negs),
            status=STATUS_REGENERATED,
            regen_count=self.regen_count + 1,
        )

    def to_record(self) -> dict:
        return {
            "schema": "negative_set.v1",
            "target": self.target.to_record(),
            "positive": self.positive,
            "negatives": list(self.negatives),
            "status": self.status,
            "regen_count": self.regen_count,
            "last_entropy": self.last_entropy,
            "human_label": self.human_label,
            "needs_human": self.needs_human,
        }

    @staticmethod
    def from_record(rec: dict) -> "NegativeSet":
        return NegativeSet(
            target=EntityId.from_record(rec["target"]),
            positive=rec["positive"],
            negatives=tuple(rec["negatives"]),
            status=rec["status"],
            regen_count=int(rec["regen_count"]),
            last_entropy=rec["last_entropy"],
            human_label=rec["human_label"],
            needs_human=bool(rec.get("needs_human", False)),
        )


def entity_positive(sg: SceneGraph, target: EntityId) -> str:
    """The varying part of an entity: object name, attribute phrase, or
    relation predicate. Negative counterparts replace exactly this part."""
    if target.kind == OBJECT:
        return sg.objects[target.index].name
    if target.kind == ATTRIBUTE:
        return sg.attributes[target.index].phrase
    return sg.relations[target.index].predicate


def entity_surface(
    sg: SceneGraph, target: EntityId, replacement: Optional[str] = None
) -> str:
    """Human-readable unit for an entity, optionally with its varying part
    replaced by a negative counterpart.

    object    -> "cat"              attribute -> "cat with a black color"
    relation  -> "cat is lying on a desk"
    """
    part = replacement if replacement is not None else entity_positive(sg, target)
    if target.kind == OBJECT:
        return part
    if target.kind == ATTRIBUTE:
        attr = sg.attributes[target.index]
        return f"{sg.object_by_id(attr.owner).name} {part}"
    rel = sg.relations[target.index]
    return (
        f"{sg.object_by_id(rel.subject).name} {part} "
        f"{sg.object_by_id(rel.object).name}"
    )


def require(condition: bool, path: str, line_no: int, reason: str) -> None:
    if not condition:
        raise SchemaViolation(path, line_no, reason)
