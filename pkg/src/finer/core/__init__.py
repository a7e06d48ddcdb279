from .errors import (
    AlreadyLabeled,
    BatchIncomplete,
    CacheMiss,
    ConfigError,
    DistributionUnavailable,
    EndpointError,
    FinerError,
    InputError,
    InsufficientEntities,
    InsufficientLabels,
    InvalidDistribution,
    MalformedLine,
    MissingNegatives,
    MissingRotation,
    OrphanPair,
    PipelineError,
    ProposalExhausted,
    SchemaViolation,
    UnknownTask,
    UnparseableLlmOutput,
    WrongArity,
)
from .jsonl import dumps_record, load_jsonl, register_schema, registered_schemas, save_jsonl
from .seeding import Seed, shuffled
from .types import (
    ATTRIBUTE,
    HUMAN_LABELS,
    KINDS,
    LABEL_PRESENT,
    LABEL_VALID,
    NEGATIVE_STATUSES,
    OBJECT,
    RELATION,
    STATUS_KEPT,
    STATUS_PROPOSED,
    STATUS_REGENERATED,
    EntityId,
    NegativeSet,
    SceneGraph,
    SgAttribute,
    SgObject,
    SgRelation,
    entity_positive,
    entity_surface,
)

register_schema("scene_graph.v1", SceneGraph.from_record, SceneGraph.to_record)
register_schema("negative_set.v1", NegativeSet.from_record, NegativeSet.to_record)

__all__ = [
    "ATTRIBUTE",
    "AlreadyLabeled",
    "BatchIncomplete",
    "CacheMiss",
    "ConfigError",
    "DistributionUnavailable",
    "EndpointError",
    "EntityId",
    "FinerError",
    "HUMAN_LABELS",
    "InputError",
    "InsufficientEntities",
    "InsufficientLabels",
    "InvalidDistribution",
    "KINDS",
    "LABEL_PRESENT",
    "LABEL_VALID",
    "MalformedLine",
    "MissingNegatives",
    "MissingRotation",
    "NEGATIVE_STATUSES",
    "NegativeSet",
    "OBJECT",
    "OrphanPair",
    "PipelineError",
    "ProposalExhausted",
    "RELATION",
    "STATUS_KEPT",
    "STATUS_PROPOSED",
    "STATUS_REGENERATED",
    "SceneGraph",
    "SchemaViolation",
    "Seed",
    "SgAttribute",
    "SgObject",
    "SgRelation",
    "UnknownTask",
    "UnparseableLlmOutput",
    "WrongArity",
    "entity_positive",
    "entity_surface",
    "dumps_record",
    "load_jsonl",
    "register_schema",
    "registered_schemas",
    "save_jsonl",
    "shuffled",
]
