"""Hard-negative generation with entropy-based filtering.

For every scene-graph entity, four negative counterparts are proposed by a
language endpoint and then stress-tested by a discriminator: the image plus
the five candidate surfaces (one real, four negative) are shown to a
multimodal endpoint which must pick the one actually present. A wrong,
confident pick (low answer entropy) means the chosen "negative" is probably
visible in the image, so exactly that candidate is regenerated. The
entropy threshold separating confident mistakes from noise is calibrated
by walking human-labeled misclassifications in ascending-entropy batches.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .client import ChatClient, ChatMessage, ChatRequest
from .core import (
    ATTRIBUTE,
    LABEL_PRESENT,
    LABEL_VALID,
    OBJECT,
    RELATION,
    STATUS_KEPT,
    STATUS_PROPOSED,
    EndpointError,
    EntityId,
    InsufficientLabels,
    InvalidDistribution,
    NegativeSet,
    ProposalExhausted,
    SceneGraph,
    Seed,
    UnparseableLlmOutput,
    entity_positive,
    entity_surface,
    register_schema,
)
from .prompting import load_template, parse_json_reply

MAX_ENTROPY_NATS = math.log(5.0)

DISCRIMINATOR_QUESTION = "Which of the following can be seen in this image?"

CALIBRATION_BATCH_SIZE = 10


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy in nats of a five-entry probability vector.

    The vector is renormalized first; entries must be non-negative and the
    raw sum must be within 1e-3 of 1, otherwise InvalidDistribution.
    Zero entries contribute zero (0 * ln 0 := 0).
    """
    if len(probs) != 5:
        raise InvalidDistribution(f"need 5 entries, got {len(probs)}")
    for p in probs:
        if p < 0.0:
            raise InvalidDistribution(f"negative probability entry: {p}")
    total = sum(probs)
    if abs(total - 1.0) > 1e-3:
        raise InvalidDistribution(f"probabilities sum to {total}, not 1")
    h = 0.0
    for p in probs:
        q = p / total
        if q > 0.0:
            h -= q * math.log(q)
    return h


@dataclass(frozen=True)
class FilterPolicy:
    """Per-kind entropy thresholds plus the regeneration-round cap."""

    theta_object: float = 0.8
    theta_attribute: float = 0.8
    theta_relation: float = 0.4
    max_regen_rounds: int = 5

    def __post_init__(self) -> None:
        for kind, theta in (
            (OBJECT, self.theta_object),
            (ATTRIBUTE, self.theta_attribute),
            (RELATION, self.theta_relation),
        ):
            if not 0.0 <= theta <= MAX_ENTROPY_NATS:
                raise ValueError(
                    f"theta for {kind} must lie in [0, ln 5], got {theta}"
                )
        if self.max_regen_rounds < 1:
            raise ValueError("max_regen_rounds must be >= 1")

    def theta_for(self, kind: str) -> float:
        return {
            OBJECT: self.theta_object,
            ATTRIBUTE: self.theta_attribute,
            RELATION: self.theta_relation,
        }[kind]

    @staticmethod
    def from_config(raw: Mapping) -> "FilterPolicy":
        theta = raw.get("theta", {})
        return FilterPolicy(
            theta_object=float(theta.get(OBJECT, 0.8)),
            theta_attribute=float(theta.get(ATTRIBUTE, 0.8)),
            theta_relation=float(theta.get(RELATION, 0.4)),
            max_regen_rounds=int(raw.get("max_regen_rounds", 5)),
        )


@dataclass(frozen=True)
class DiscriminatorResult:
    """One discriminator pass over an entity's candidate surfaces.

    options holds the five surfaces in canonical order (positive first,
    then the four negatives); option_order[p] gives the canonical index
    shown at display position p; probs are already mapped back to
    canonical order. predicted is the canonical argmax with ties broken
    toward the lowest canonical index, so correct means predicted == 0.
    """

    result_id: str
    target: EntityId
    image_uri: str
    options: tuple[str, str, str, str, str]
    option_order: tuple[int, int, int, int, int]
    probs: tuple[float, float, float, float, float]
    predicted: int
    correct: bool
    entropy_nats: float
    round: int = 0

    def __post_init__(self) -> None:
        if sorted(self.option_order) != [0, 1, 2, 3, 4]:
            raise ValueError(f"option_order is not a permutation: {self.option_order}")
        if not 0.0 <= self.entropy_nats <= MAX_ENTROPY_NATS + 1e-9:
            raise ValueError(f"entropy out of [0, ln 5]: {self.entropy_nats}")
        if self.correct != (self.predicted == 0):
            raise ValueError("correct flag disagrees with predicted index")

    def to_record(self) -> dict:
        return {
            "schema": "discriminator_audit.v1",
            "result_id": self.result_id,
            "target": self.target.to_record(),
            "image_uri": self.image_uri,
            "options": list(self.options),
            "option_order": list(self.option_order),
            "probs": list(self.probs),
            "predicted": self.predicted,
            "correct": self.correct,
            "entropy_nats": self.entropy_nats,
            "round": self.round,
        }

    @staticmethod
    def from_record(rec: dict) -> "DiscriminatorResult":
        return DiscriminatorResult(
            result_id=rec["result_id"],
            target=EntityId.from_record(rec["target"]),
            image_uri=rec["image_uri"],
            options=tuple(rec["options"]),
            option_order=tuple(rec["option_order"]),
            probs=tuple(rec["probs"]),
            predicted=int(rec["predicted"]),
            correct=bool(rec["correct"]),
            entropy_nats=float(rec["entropy_nats"]),
            round=int(rec.get("round", 0)),
        )


@dataclass(frozen=True)
class LabelRecord:
    """One human verdict on a discriminator misclassification."""

    result_id: str
    label: str
    reviewer_id: str = ""
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.label not in (LABEL_VALID, LABEL_PRESENT):
            raise ValueError(f"unknown label: {self.label!r}")

    def to_record(self) -> dict:
        return {
            "schema": "labels.v1",
            "result_id": self.result_id,
            "label": self.label,
            "reviewer_id": self.reviewer_id,
            "timestamp": self.timestamp,
        }

    @staticmethod
    def from_record(rec: dict) -> "LabelRecord":
        return LabelRecord(
            result_id=rec["result_id"],
            label=rec["label"],
            reviewer_id=rec.get("reviewer_id", ""),
            timestamp=rec.get("timestamp", ""),
        )


register_schema(
    "discriminator_audit.v1", DiscriminatorResult.from_record, DiscriminatorResult.to_record
)
register_schema("labels.v1", LabelRecord.from_record, LabelRecord.to_record)


_PROPOSAL_TEMPLATES = {
    OBJECT: "negatives_object.v1",
    ATTRIBUTE: "negatives_attribute.v1",
    RELATION: "negatives_relation.v1",
}


def _scene_summary(sg: SceneGraph) -> str:
    parts = [o.name for o in sg.objects]
    parts += [entity_surface(sg, a.id) for a in sg.attributes]
    parts += [entity_surface(sg, r.id) for r in sg.relations]
    return "; ".join(parts)


def _proposal_prompt(
    sg: SceneGraph, target: EntityId, forbidden: Sequence[str], count: int
) -> str:
    template = load_template(_PROPOSAL_TEMPLATES[target.kind])
    fields = {
        "positive": entity_positive(sg, target),
        "context": _scene_summary(sg),
        "count": count,
        "forbidden": json.dumps(list(forbidden), ensure_ascii=False),
    }
    if target.kind == ATTRIBUTE:
        attr = sg.attributes[target.index]
        fields["owner"] = sg.object_by_id(attr.owner).name
    elif target.kind == RELATION:
        rel = sg.relations[target.index]
        fields["subject"] = sg.object_by_id(rel.subject).name
        fields["object"] = sg.object_by_id(rel.object).name
    return template.format(**fields)


def propose_negatives(
    client: ChatClient,
    endpoint_id: str,
    sg: SceneGraph,
    target: EntityId,
    forbidden: Sequence[str] = (),
    count: int = 4,
    max_reprompts: int = 3,
) -> list[str]:
    """Ask the endpoint for count negative counterparts of one entity.

    Proposals equal to the positive part, present in the forbidden list,
    or duplicating an earlier proposal are dropped; follow-up turns ask
    for the remainder. After max_reprompts follow-ups the call gives up
    with ProposalExhausted.
    """
    positive = entity_positive(sg, target)
    seen_lower = {positive.casefold()}
    seen_lower.update(f.casefold() for f in forbidden)
    accepted: list[str] = []
    rejected: list[str] = []

    messages: list[ChatMessage] = [
        ChatMessage(
            "user",
            _proposal_prompt(sg, target, list(forbidden), count),
        )
    ]
    for _attempt in range(max_reprompts + 1):
        response = client.complete(
            ChatRequest(
                endpoint_id=endpoint_id,
                messages=tuple(messages),
                temperature=0.0,
                max_tokens=512,
            )
        )
        try:
            proposals = parse_json_reply(response.text, "negative proposal")
        except Exception:
            proposals = []
        if not isinstance(proposals, list):
            proposals = []
        for raw in proposals:
            if not isinstance(raw, str):
                continue
            phrase = raw.strip()
            if not phrase:
                continue
            if phrase.casefold() in seen_lower:
                rejected.append(phrase)
                continue
            seen_lower.add(phrase.casefold())
            accepted.append(phrase)
            if len(accepted) == count:
                return accepted
        still_needed = count - len(accepted)
        messages.append(ChatMessage("assistant", response.text))
        messages.append(
            ChatMessage(
                "user",
                f"Only {len(accepted)} of those were usable. Propose "
                f"{still_needed} more, avoiding everything already proposed "
                f"or forbidden: "
                + json.dumps(
                    sorted(seen_lower | {r.casefold() for r in rejected}),
                    ensure_ascii=False,
                )
                + ". Reply with a JSON array of strings only.",
            )
        )
    raise ProposalExhausted(
        f"could not collect {count} negatives for {target.key} "
        f"after {max_reprompts} reprompts (have {len(accepted)})"
    )


def discriminate(
    client: ChatClient,
    endpoint_id: str,
    sg: SceneGraph,
    negset: NegativeSet,
    seed: Seed,
    round: int = 0,
) -> DiscriminatorResult:
    """One discriminator pass: shuffle the five surfaces, ask which is in
    the image, and map the probabilities back to canonical order."""
    target = negset.target
    canonical = (entity_surface(sg, target),) + tuple(
        entity_surface(sg, target, replacement=n) for n in negset.negatives
    )
    perm = list(range(5))
    seed.derive("discriminate", target.key, round).rng().shuffle(perm)
    displayed = [canonical[perm[p]] for p in range(5)]
    displayed_probs = client.choice_probs(
        endpoint_id, sg.image_uri, DISCRIMINATOR_QUESTION, displayed
    )
    probs = [0.0] * 5
    for p in range(5):
        probs[perm[p]] = displayed_probs[p]
    # ties break toward the lowest canonical index
    predicted = max(range(5), key=lambda i: (probs[i], -i))
    return DiscriminatorResult(
        result_id=f"{target.key}:r{round}",
        target=target,
        image_uri=sg.image_uri,
        options=tuple(canonical),
        option_order=tuple(perm),
        probs=tuple(probs),
        predicted=predicted,
        correct=predicted == 0,
        entropy_nats=entropy(probs),
        round=round,
    )


def filter_round(
    results: Iterable[DiscriminatorResult], policy: FilterPolicy
) -> list[tuple[DiscriminatorResult, int]]:
    """Worklist of (result, negative slot) pairs needing regeneration.

    A result lands on the worklist when the discriminator was wrong AND
    confidently so (entropy below the kind's theta); the slot is the
    predicted negative, the only candidate that gets replaced. Pure
    function: same results in, same worklist out.
    """
    worklist = []
    for result in results:
        if result.correct:
            continue
        if result.entropy_nats < policy.theta_for(result.target.kind):
            worklist.append((result, result.predicted - 1))
    return worklist


@dataclass(frozen=True)
class FilterLoopOutcome:
    negsets: tuple[NegativeSet, ...]
    audit: tuple[DiscriminatorResult, ...]
    rounds: int
    regenerations: dict
    needs_human: tuple[str, ...]

    def summary(self) -> dict:
        return {
            "rounds": self.rounds,
            "regenerations": dict(self.regenerations),
            "needs_human": list(self.needs_human),
            "sets": len(self.negsets),
        }


def run_filter_loop(
    client: ChatClient,
    discriminator_endpoint: str,
    proposal_endpoint: str,
    sg: SceneGraph,
    negsets: Sequence[NegativeSet],
    policy: FilterPolicy,
    seed: Seed,
) -> FilterLoopOutcome:
    """Alternate discrimination and regeneration until every set passes.

    Rounds act as barriers: round r discriminates the pending sets, the
    filter builds a worklist, and each worklist item has exactly its
    predicted negative regenerated before round r+1 re-checks only the
    regenerated sets. When round max_regen_rounds still has a non-empty
    worklist those sets are flagged needs_human and the loop stops.
    """
    current: dict[str, NegativeSet] = {ns.target.key: ns for ns in negsets}
    order = [ns.target.key for ns in negsets]
    history: dict[str, set[str]] = {
        key: set(ns.negatives) for key, ns in current.items()
    }
    audit: list[DiscriminatorResult] = []
    regenerations = {OBJECT: 0, ATTRIBUTE: 0, RELATION: 0}
    flagged: list[str] = []

    pending = list(order)
    rounds = 0
    while pending:
        rounds += 1
        round_no = rounds

        def check(key: str) -> DiscriminatorResult:
            return discriminate(
                client, discriminator_endpoint, sg, current[key], seed, round_no
            )

        if len(pending) > 1 and client.parallelism > 1:
            with ThreadPoolExecutor(max_workers=client.parallelism) as pool:
                results = list(pool.map(check, pending))
        else:
            results = [check(key) for key in pending]
        audit.extend(results)
        for result in results:
            key = result.target.key
            current[key] = replace(current[key], last_entropy=result.entropy_nats)

        worklist = filter_round(results, policy)
        if not worklist:
            break
        if rounds >= policy.max_regen_rounds:
            flagged = [result.target.key for result, _slot in worklist]
            for key in flagged:
                current[key] = replace(current[key], needs_human=True)
            break

        regenerated: list[str] = []
        for result, slot in worklist:
            key = result.target.key
            ns = current[key]
            forbidden = sorted(history[key] | {ns.positive})
            replacement = propose_negatives(
                client,
                proposal_endpoint,
                sg,
                ns.target,
                forbidden=forbidden,
                count=1,
            )[0]
            history[key].add(replacement)
            current[key] = replace(
                current[key], last_entropy=result.entropy_nats
            ).with_replacement(slot, replacement)
            regenerations[ns.target.kind] += 1
            regenerated.append(key)
        pending = regenerated

    final = []
    for key in order:
        ns = current[key]
        if ns.status == STATUS_PROPOSED and not ns.needs_human:
            ns = replace(ns, status=STATUS_KEPT)
        final.append(ns)
    return FilterLoopOutcome(
        negsets=tuple(final),
        audit=tuple(audit),
        rounds=rounds,
        regenerations=regenerations,
        needs_human=tuple(flagged),
    )


def generate_negative_sets(
    client: ChatClient,
    proposal_endpoint: str,
    discriminator_endpoint: str,
    sgs: Sequence[SceneGraph],
    policy: FilterPolicy,
    seed: Seed,
) -> tuple[list[NegativeSet], list[DiscriminatorResult], dict]:
    """Propose and filter negatives for every entity of every scene graph.

    Entities whose proposals dry up are skipped and counted; each graph
    then runs the full discriminate/regenerate loop. Returns the final
    sets, the complete audit trail, and a run summary.
    """
    all_sets: list[NegativeSet] = []
    all_audit: list[DiscriminatorResult] = []
    skipped: list[str] = []
    rounds_total = 0
    regenerations = {OBJECT: 0, ATTRIBUTE: 0, RELATION: 0}
    flagged: list[str] = []
    for sg in sgs:
        targets = (
            [o.id for o in sg.objects]
            + [a.id for a in sg.attributes]
            + [r.id for r in sg.relations]
        )
        initial: list[NegativeSet] = []
        for target in targets:
            try:
                negatives = propose_negatives(client, proposal_endpoint, sg, target)
            except (ProposalExhausted, UnparseableLlmOutput, EndpointError):
                skipped.append(target.key)
                continue
            initial.append(
                NegativeSet(
                    target=target,
                    positive=entity_positive(sg, target),
                    negatives=tuple(negatives),
                )
            )
        if not initial:
            continue
        outcome = run_filter_loop(
            client,
            discriminator_endpoint,
            proposal_endpoint,
            sg,
            initial,
            policy,
            seed,
        )
        all_sets.extend(outcome.negsets)
        all_audit.extend(outcome.audit)
        rounds_total += outcome.rounds
        for kind, count in outcome.regenerations.items():
            regenerations[kind] += count
        flagged.extend(outcome.needs_human)
    summary = {
        "scene_graphs": len(sgs),
        "negative_sets": len(all_sets),
        "skipped_targets": skipped,
        "rounds_total": rounds_total,
        "regenerations": dict(regenerations),
        "needs_human": flagged,
    }
    return all_sets, all_audit, summary


def _labels_by_result(labels) -> dict[str, str]:
    if isinstance(labels, Mapping):
        return dict(labels)
    out: dict[str, str] = {}
    for rec in labels:
        # append-only log: the newest label for a result id wins
        out[rec.result_id] = rec.label
    return out


def calibrate_threshold(
    results: Sequence[DiscriminatorResult],
    labels,
    batch_size: int = CALIBRATION_BATCH_SIZE,
) -> float:
    """Walk labeled misclassifications ascending by entropy and return the
    entropy threshold theta.

    Batches of batch_size are inspected from the lowest entropy upward;
    the walk stops at the first batch whose labels are all valid_negative.
    For a clean first batch theta is the entropy of the batch's last
    element (the batch_size-th lowest misclassification); for a later
    stopping batch theta is the entropy of its first element, the boundary
    where confident mistakes stopped being real errors. No
    misclassifications at all means nothing needs filtering: theta = 0.
    If every batch is dirty theta is the largest misclassification
    entropy. A short trailing batch participates like any other batch.
    Raises InsufficientLabels naming the unlabeled result ids of the first
    batch that cannot be judged.
    """
    by_result = _labels_by_result(labels)
    mis = [r for r in results if not r.correct]
    if not mis:
        return 0.0
    mis.sort(key=lambda r: (r.entropy_nats, r.result_id))
    for start in range(0, len(mis), batch_size):
        batch = mis[start : start + batch_size]
        unlabeled = [r.result_id for r in batch if r.result_id not in by_result]
        if unlabeled:
            raise InsufficientLabels(unlabeled)
        if all(by_result[r.result_id] == LABEL_VALID for r in batch):
            if start == 0:
                stop_index = min(batch_size - 1, len(mis) - 1)
            else:
                stop_index = start
            return mis[stop_index].entropy_nats
    return mis[-1].entropy_nats
