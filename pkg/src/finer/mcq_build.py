"""Paired multiple-choice question construction.

Every benchmark item is a pair: a positive question about content really
in the image and a negative twin whose queried phrase has exactly one
entity replaced by a vetted negative counterpart. Fixed templates keep
the two halves symmetric:

    Can you see {X} in this image?
    A. Yes, I can see {Y} in this image.
    B-E. No, but I can see {Z} in this image.

Positive half: X = Y = the true phrase, the four "No" options carry the
corrupted phrases. Negative half: X = Y = one corrupted phrase (chosen
uniformly), and the correct answer is the "No, but I can see {true
phrase}" option. Wh pairs, the seven-level granularity ladder, and the
positional-bias rotations reuse the same machinery; option order is
shuffled per question with a seed derived from the question id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

from .core import (
    ATTRIBUTE,
    OBJECT,
    RELATION,
    EntityId,
    InsufficientEntities,
    MissingNegatives,
    NegativeSet,
    OrphanPair,
    SceneGraph,
    Seed,
    WrongArity,
    entity_surface,
    register_schema,
    shuffled,
)

SETTING_MULTI_OBJ = "multi_obj"
SETTING_MULTI_ATTR = "multi_attr"
SETTING_MULTI_REL = "multi_rel"
SETTING_WH = "wh"
SETTING_GRANULARITY = "granularity"
SETTINGS = (
    SETTING_MULTI_OBJ,
    SETTING_MULTI_ATTR,
    SETTING_MULTI_REL,
    SETTING_WH,
    SETTING_GRANULARITY,
)

MULTI_SETTING_FOR_KIND = {
    OBJECT: SETTING_MULTI_OBJ,
    ATTRIBUTE: SETTING_MULTI_ATTR,
    RELATION: SETTING_MULTI_REL,
}

POSITIVE = "positive"
NEGATIVE = "negative"


def join_phrase(parts: Sequence[str]) -> str:
    """Join entity surfaces into one query phrase.

    Parts are joined by ", " with ", and " before the final part whenever
    there are at least two parts; a single part is used verbatim.
    """
    parts = list(parts)
    if not parts:
        raise WrongArity("cannot join zero parts")
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + ", and " + parts[-1]


def question_text(phrase: str) -> str:
    return f"Can you see {phrase} in this image?"


def yes_option(phrase: str) -> str:
    return f"Yes, I can see {phrase} in this image."


def no_option(phrase: str) -> str:
    return f"No, but I can see {phrase} in this image."


@dataclass(frozen=True)
class Mcq:
    """One five-option question, either half of a pair."""

    mcq_id: str
    pair_id: str
    setting: str
    polarity: str
    question: str
    options: tuple[str, str, str, str, str]
    answer_index: int
    k: int
    image_id: str
    image_uri: str
    shuffle_seed: int
    negated_position: Optional[int] = None
    corrupted_attribute: Optional[str] = None
    granularity_level: Optional[int] = None
    yes_option_index: Optional[int] = None
    rotation_group: Optional[str] = None

    def __post_init__(self) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting: {self.setting!r}")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"unknown polarity: {self.polarity!r}")
        if len(self.options) != 5:
            raise ValueError(f"need exactly 5 options, got {len(self.options)}")
        if len(set(self.options)) != 5:
            raise ValueError("options are not pairwise distinct")
        if not 0 <= self.answer_index <= 4:
            raise ValueError(f"answer_index out of range: {self.answer_index}")
        if self.polarity == NEGATIVE and self.setting != SETTING_WH:
            if self.negated_position is None:
                raise ValueError("negative question must record negated_position")
        if self.polarity == NEGATIVE and self.setting == SETTING_WH:
            if self.corrupted_attribute is None:
                raise ValueError("negative wh question must record corrupted_attribute")
        if self.setting == SETTING_GRANULARITY:
            if self.granularity_level is None or not 1 <= self.granularity_level <= 7:
                raise ValueError("granularity question needs level in 1..7")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")

    @property
    def answer_letter(self) -> str:
        return "ABCDE"[self.answer_index]

    def to_record(self) -> dict:
        return {
            "schema": "mcq.v1",
            "mcq_id": self.mcq_id,
            "pair_id": self.pair_id,
            "setting": self.setting,
            "polarity": self.polarity,
            "question": self.question,
            "options": list(self.options),
            "answer_index": self.answer_index,
            "k": self.k,
            "image_id": self.image_id,
            "image_uri": self.image_uri,
            "shuffle_seed": self.shuffle_seed,
            "negated_position": self.negated_position,
            "corrupted_attribute": self.corrupted_attribute,
            "granularity_level": self.granularity_level,
            "yes_option_index": self.yes_option_index,
            "rotation_group": self.rotation_group,
        }

    @staticmethod
    def from_record(rec: dict) -> "Mcq":
        return Mcq(
            mcq_id=rec["mcq_id"],
            pair_id=rec["pair_id"],
            setting=rec["setting"],
            polarity=rec["polarity"],
            question=rec["question"],
            options=tuple(rec["options"]),
            answer_index=int(rec["answer_index"]),
            k=int(rec["k"]),
            image_id=rec["image_id"],
            image_uri=rec["image_uri"],
            shuffle_seed=int(rec["shuffle_seed"]),
            negated_position=rec.get("negated_position"),
            corrupted_attribute=rec.get("corrupted_attribute"),
            granularity_level=rec.get("granularity_level"),
            yes_option_index=rec.get("yes_option_index"),
            rotation_group=rec.get("rotation_group"),
        )


register_schema("mcq.v1", Mcq.from_record, Mcq.to_record)


def _entities_of_kind(sg: SceneGraph, kind: str) -> list[EntityId]:
    if kind == OBJECT:
        return [o.id for o in sg.objects]
    if kind == ATTRIBUTE:
        return [a.id for a in sg.attributes]
    return [r.id for r in sg.relations]


def _negset_for(
    negsets: Mapping[str, NegativeSet], entity: EntityId
) -> NegativeSet:
    ns = negsets.get(entity.key)
    if ns is None:
        raise MissingNegatives(f"no negative set for {entity.key}")
    return ns


def _shuffle_into_mcq(
    seed: Seed,
    mcq_id: str,
    canonical_options: Sequence[str],
    canonical_answer: int,
    canonical_yes: Optional[int],
    **fields,
) -> Mcq:
    """Shuffle canonical options with a seed derived from the question id
    and record where the answer (and the Yes option) landed."""
    shuffle_seed = seed.derive("shuffle", mcq_id)
    perm = list(range(5))
    shuffle_seed.rng().shuffle(perm)
    options = tuple(canonical_options[perm[p]] for p in range(5))
    answer_index = perm.index(canonical_answer)
    yes_index = perm.index(canonical_yes) if canonical_yes is not None else None
    return Mcq(
        mcq_id=mcq_id,
        options=options,
        answer_index=answer_index,
        yes_option_index=yes_index,
        shuffle_seed=shuffle_seed.value,
        **fields,
    )


def build_multi_mcq_pair(
    sg: SceneGraph,
    negsets: Mapping[str, NegativeSet],
    kind: str,
    k: int,
    seed: Seed,
    pair_index: int = 0,
) -> tuple[Mcq, Mcq]:
    """Build one positive/negative pair over k entities of one kind.

    The k entities are sampled without replacement, the negated slot is
    chosen uniformly, and the negative question's phrase (which doubles as
    its "Yes" option) is one of the slot's four corrupted variants, also
    chosen uniformly. The two questions differ in exactly that slot.
    """
    entities = _entities_of_kind(sg, kind)
    if len(entities) < k:
        raise InsufficientEntities(
            f"{sg.image_id}: need {k} {kind} entities, have {len(entities)}"
        )
    rng = seed.rng()
    chosen = rng.sample(entities, k)
    slot = rng.randrange(k)
    negset = _negset_for(negsets, chosen[slot])

    positive_parts = [entity_surface(sg, e) for e in chosen]
    positive_phrase = join_phrase(positive_parts)
    corrupted_phrases = []
    for negative in negset.negatives:
        parts = list(positive_parts)
        parts[slot] = entity_surface(sg, chosen[slot], replacement=negative)
        corrupted_phrases.append(join_phrase(parts))

    setting = MULTI_SETTING_FOR_KIND[kind]
    pair_id = f"{sg.image_id}:{setting}:k{k}:p{pair_index}"
    shared = {
        "pair_id": pair_id,
        "setting": setting,
        "k": k,
        "image_id": sg.image_id,
        "image_uri": sg.image_uri,
    }

    positive = _shuffle_into_mcq(
        seed,
        f"{pair_id}:{POSITIVE}",
        [yes_option(positive_phrase)] + [no_option(p) for p in corrupted_phrases],
        canonical_answer=0,
        canonical_yes=0,
        polarity=POSITIVE,
        question=question_text(positive_phrase),
        **shared,
    )

    negated = rng.randrange(4)
    neg_options = [yes_option(corrupted_phrases[negated]), no_option(positive_phrase)]
    neg_options += [
        no_option(p) for j, p in enumerate(corrupted_phrases) if j != negated
    ]
    negative = _shuffle_into_mcq(
        seed,
        f"{pair_id}:{NEGATIVE}",
        neg_options,
        canonical_answer=1,
        canonical_yes=0,
        polarity=NEGATIVE,
        question=question_text(corrupted_phrases[negated]),
        negated_position=slot,
        **shared,
    )
    return positive, negative


# -- wh pairs -----------------------------------------------------------

WhQuestionSource = Callable[[SceneGraph, EntityId, EntityId, EntityId], str]


def _strip_copula(predicate: str) -> str:
    # "is standing under" reads as "What is the dog ... standing under?"
    return predicate[3:] if predicate.startswith("is ") else predicate


def template_wh_question(
    sg: SceneGraph,
    relation_id: EntityId,
    context_obj: EntityId,
    target_attr: EntityId,
) -> str:
    """Offline wh-question template with the target attribute masked as {A}.

    Direction-aware: when the context object is the relation's subject the
    question asks for the relation's object, and the other way around.
    """
    rel = sg.relations[relation_id.index]
    context_name = sg.object_by_id(context_obj).name
    attr_parts = []
    for attr in sg.attributes_of(context_obj):
        attr_parts.append("{A}" if attr.id == target_attr else attr.phrase)
    described = " ".join([f"the {context_name}"] + attr_parts)
    predicate = _strip_copula(rel.predicate)
    if rel.subject == context_obj:
        return f"What is {described} {predicate}?"
    return f"What is {predicate} {described}?"


class LlmWhQuestionSource:
    """Phrases wh-questions with a language endpoint, keeping the {A} mask.

    The draft from the offline template anchors the rewrite; replies that
    lose the {A} marker get one corrective turn, then the draft itself is
    used so builds never fail on phrasing."""

    def __init__(self, client, endpoint_id: str):
        self.client = client
        self.endpoint_id = endpoint_id

    def __call__(
        self,
        sg: SceneGraph,
        relation_id: EntityId,
        context_obj: EntityId,
        target_attr: EntityId,
    ) -> str:
        from .client import ChatMessage, ChatRequest
        from .prompting import load_template

        draft = template_wh_question(sg, relation_id, context_obj, target_attr)
        rel = sg.relations[relation_id.index]
        prompt = load_template("wh_question.v1").format(
            draft=draft,
            subject=sg.object_by_id(rel.subject).name,
            predicate=rel.predicate,
            object=sg.object_by_id(rel.object).name,
        )
        messages = [ChatMessage("user", prompt)]
        for _ in range(2):
            response = self.client.complete(
                ChatRequest(
                    endpoint_id=self.endpoint_id,
                    messages=tuple(messages),
                    temperature=0.0,
                    max_tokens=128,
                )
            )
            text = response.text.strip().strip('"')
            if "{A}" in text and text.endswith("?"):
                return text
            messages.append(ChatMessage("assistant", response.text))
            messages.append(
                ChatMessage(
                    "user",
                    "That reply lost the literal {A} marker or the question "
                    "mark. Reply with only the question, keeping {A} exactly.",
                )
            )
        return draft


def build_wh_mcq_pair(
    sg: SceneGraph,
    negsets: Mapping[str, NegativeSet],
    relation_id: EntityId,
    seed: Seed,
    question_source: WhQuestionSource = template_wh_question,
    pair_index: int = 0,
) -> tuple[Mcq, Mcq]:
    """Build one wh-question pair from a relation triplet.

    One endpoint of the relation becomes the answer target (uniform
    choice), the other the context object whose attribute gets corrupted.
    The positive question uses the true attribute and the target object is
    the correct option; the negative question uses the corrupted attribute
    and the correction sentence ("The {context} is not {corrupted}, but is
    {true}.") becomes correct because every object option now mismatches
    the question's premise.
    """
    rel = sg.relations[relation_id.index]
    rng = seed.rng()
    if rng.random() < 0.5:
        target_obj, context_obj = rel.subject, rel.object
    else:
        target_obj, context_obj = rel.object, rel.subject

    context_attrs = sg.attributes_of(context_obj)
    if not context_attrs:
        raise InsufficientEntities(
            f"{sg.image_id}: context object {context_obj.key} has no attributes"
        )
    target_attr = context_attrs[rng.randrange(len(context_attrs))]
    attr_negs = _negset_for(negsets, target_attr.id)
    corrupted_attr = attr_negs.negatives[rng.randrange(4)]

    obj_negs = _negset_for(negsets, target_obj)
    distractors = rng.sample(list(obj_negs.negatives), 3)

    question_template = question_source(
        sg, relation_id, context_obj, target_attr.id
    )
    if "{A}" not in question_template:
        raise ValueError("wh question template lost its {A} marker")

    target_name = sg.object_by_id(target_obj).name
    context_name = sg.object_by_id(context_obj).name
    true_attr = target_attr.phrase

    pair_id = f"{sg.image_id}:{SETTING_WH}:p{pair_index}"
    shared = {
        "pair_id": pair_id,
        "setting": SETTING_WH,
        "k": 1,
        "image_id": sg.image_id,
        "image_uri": sg.image_uri,
    }

    positive = _shuffle_into_mcq(
        seed,
        f"{pair_id}:{POSITIVE}",
        [target_name]
        + distractors
        + [f"The {context_name} is not {true_attr}, but is {corrupted_attr}."],
        canonical_answer=0,
        canonical_yes=None,
        polarity=POSITIVE,
        question=question_template.replace("{A}", true_attr),
        **shared,
    )
    negative = _shuffle_into_mcq(
        seed,
        f"{pair_id}:{NEGATIVE}",
        [target_name]
        + distractors
        + [f"The {context_name} is not {corrupted_attr}, but is {true_attr}."],
        canonical_answer=4,
        canonical_yes=None,
        polarity=NEGATIVE,
        question=question_template.replace("{A}", corrupted_attr),
        corrupted_attribute=corrupted_attr,
        **shared,
    )
    return positive, negative


# -- granularity ladder -------------------------------------------------

NEG_OBJ = "neg_obj"
NEG_ATTR = "neg_attr"
NEG_REL = "neg_rel"

# (level, negated element, negation kind); elements are indices into the
# composition [obj1, attr1, relation, obj2, attr2]. The recipe is
# versioned in docs/granularity.md as g1: levels 1 and 7 negate the same
# element (the base object), and each level has exactly one contradiction.
GRANULARITY_RECIPE = (
    (1, 0, NEG_OBJ),
    (2, 1, NEG_ATTR),
    (3, 2, NEG_REL),
    (4, 3, NEG_OBJ),
    (5, 4, NEG_ATTR),
    (6, 2, NEG_REL),
    (7, 0, NEG_OBJ),
)


@dataclass(frozen=True)
class GranularityLevel:
    level: int
    phrase: str
    corrupted_phrase: str
    negation_kind: str
    negated_element: int
    binary_question: str
    binary_expected: str
    positive_mcq: Mcq
    negative_mcq: Mcq


@dataclass(frozen=True)
class GranularityLadder:
    image_id: str
    levels: tuple[GranularityLevel, ...]

    def mcqs(self) -> list[Mcq]:
        out = []
        for level in self.levels:
            out.append(level.positive_mcq)
            out.append(level.negative_mcq)
        return out


def _granularity_phrase(
    parts: dict[int, str], level: int
) -> str:
    """Compose the level's phrase from element surfaces.

    Levels grow monotonically: object, then its attribute, then the
    relation to the second object, then the second object's attribute.
    """
    obj1, attr1, pred, obj2, attr2 = (
        parts[0],
        parts[1],
        parts[2],
        parts[3],
        parts[4],
    )
    if level == 1:
        return obj1
    if level == 2:
        return f"{obj1} {attr1}"
    if level in (3, 4):
        return f"{obj1} {attr1} {pred} {obj2}"
    return f"{obj1} {attr1} {pred} {obj2} {attr2}"


def build_granularity_ladder(
    sg: SceneGraph,
    negsets: Mapping[str, NegativeSet],
    seed: Seed,
) -> GranularityLadder:
    """Build the seven-level ladder for one scene graph.

    Needs a relation whose subject and object each carry at least one
    attribute, and negative sets for all five elements involved. Each
    level emits a binary query (expected answer always "No") plus a full
    MCQ pair, with exactly one contradicted element per level.
    """
    rng = seed.rng()
    candidates = []
    for rel in sg.relations:
        if sg.attributes_of(rel.subject) and sg.attributes_of(rel.object):
            candidates.append(rel)
    if not candidates:
        raise InsufficientEntities(
            f"{sg.image_id}: no relation with attributed subject and object"
        )
    rel = candidates[rng.randrange(len(candidates))]
    attr1 = rng.choice(sg.attributes_of(rel.subject))
    attr2 = rng.choice(sg.attributes_of(rel.object))

    element_ids = {
        0: rel.subject,
        1: attr1.id,
        2: rel.id,
        3: rel.object,
        4: attr2.id,
    }
    surfaces = {
        0: sg.object_by_id(rel.subject).name,
        1: attr1.phrase,
        2: rel.predicate,
        3: sg.object_by_id(rel.object).name,
        4: attr2.phrase,
    }

    levels = []
    for level, element, negation_kind in GRANULARITY_RECIPE:
        negset = _negset_for(negsets, element_ids[element])
        chosen = rng.randrange(4)
        true_phrase = _granularity_phrase(surfaces, level)
        corrupted_variants = []
        for negative in negset.negatives:
            corrupted = dict(surfaces)
            corrupted[element] = negative
            corrupted_variants.append(_granularity_phrase(corrupted, level))
        corrupted_phrase = corrupted_variants[chosen]

        pair_id = f"{sg.image_id}:{SETTING_GRANULARITY}:L{level}"
        shared = {
            "pair_id": pair_id,
            "setting": SETTING_GRANULARITY,
            "k": 1,
            "image_id": sg.image_id,
            "image_uri": sg.image_uri,
            "granularity_level": level,
        }
        positive_mcq = _shuffle_into_mcq(
            seed,
            f"{pair_id}:{POSITIVE}",
            [yes_option(true_phrase)]
            + [no_option(p) for p in corrupted_variants],
            canonical_answer=0,
            canonical_yes=0,
            polarity=POSITIVE,
            question=question_text(true_phrase),
            **shared,
        )
        neg_options = [yes_option(corrupted_phrase), no_option(true_phrase)]
        neg_options += [
            no_option(p) for j, p in enumerate(corrupted_variants) if j != chosen
        ]
        negative_mcq = _shuffle_into_mcq(
            seed,
            f"{pair_id}:{NEGATIVE}",
            neg_options,
            canonical_answer=1,
            canonical_yes=0,
            polarity=NEGATIVE,
            question=question_text(corrupted_phrase),
            negated_position=element,
            **shared,
        )
        levels.append(
            GranularityLevel(
                level=level,
                phrase=true_phrase,
                corrupted_phrase=corrupted_phrase,
                negation_kind=negation_kind,
                negated_element=element,
                binary_question=question_text(corrupted_phrase),
                binary_expected="No",
                positive_mcq=positive_mcq,
                negative_mcq=negative_mcq,
            )
        )
    return GranularityLadder(image_id=sg.image_id, levels=tuple(levels))


# -- positional-bias rotations ------------------------------------------

def build_positional_rotations(
    sg: SceneGraph,
    negsets: Mapping[str, NegativeSet],
    kind: str,
    seed: Seed,
    pair_index: int = 0,
) -> list[tuple[Mcq, Mcq]]:
    """Three pairs sharing one k=3 positive phrase, the negated slot cycling
    through positions 0, 1, and 2 exactly once.

    The entity order stays fixed; variant p corrupts the entity at slot p
    (so each of the three entities needs a negative set). Every variant
    gets its own copy of the positive partner so pairing stays one-to-one,
    and all six questions share a rotation_group for the bias report.
    """
    entities = _entities_of_kind(sg, kind)
    if len(entities) < 3:
        raise InsufficientEntities(
            f"{sg.image_id}: need 3 {kind} entities, have {len(entities)}"
        )
    rng = seed.rng()
    chosen = rng.sample(entities, 3)
    for entity in chosen:
        _negset_for(negsets, entity)

    positive_parts = [entity_surface(sg, e) for e in chosen]
    positive_phrase = join_phrase(positive_parts)
    setting = MULTI_SETTING_FOR_KIND[kind]
    group = f"{sg.image_id}:{setting}:rotset{pair_index}"

    pairs = []
    for position in range(3):
        negset = _negset_for(negsets, chosen[position])
        corrupted_phrases = []
        for negative in negset.negatives:
            parts = list(positive_parts)
            parts[position] = entity_surface(
                sg, chosen[position], replacement=negative
            )
            corrupted_phrases.append(join_phrase(parts))
        negated = rng.randrange(4)

        pair_id = f"{group}:rot{position}"
        shared = {
            "pair_id": pair_id,
            "setting": setting,
            "k": 3,
            "image_id": sg.image_id,
            "image_uri": sg.image_uri,
            "rotation_group": group,
        }
        positive = _shuffle_into_mcq(
            seed,
            f"{pair_id}:{POSITIVE}",
            [yes_option(positive_phrase)]
            + [no_option(p) for p in corrupted_phrases],
            canonical_answer=0,
            canonical_yes=0,
            polarity=POSITIVE,
            question=question_text(positive_phrase),
            **shared,
        )
        neg_options = [
            yes_option(corrupted_phrases[negated]),
            no_option(positive_phrase),
        ]
        neg_options += [
            no_option(p) for j, p in enumerate(corrupted_phrases) if j != negated
        ]
        negative = _shuffle_into_mcq(
            seed,
            f"{pair_id}:{NEGATIVE}",
            neg_options,
            canonical_answer=1,
            canonical_yes=0,
            polarity=NEGATIVE,
            question=question_text(corrupted_phrases[negated]),
            negated_position=position,
            **shared,
        )
        pairs.append((positive, negative))
    return pairs


# -- manifest and survey export -----------------------------------------

def negsets_by_key(negsets: Sequence[NegativeSet]) -> dict[str, NegativeSet]:
    """Index negative sets by their target key for the builders."""
    return {ns.target.key: ns for ns in negsets}


def build_benchmark(
    sgs: Sequence[SceneGraph],
    negsets: Mapping[str, NegativeSet],
    seed: Seed,
    ks: Sequence[int] = (2, 3),
    per_image: int = 1,
    include_wh: bool = True,
    wh_source: WhQuestionSource = template_wh_question,
    include_granularity: bool = False,
    include_rotations: bool = False,
) -> list[Mcq]:
    """Build a full question set over a corpus.

    Every graph contributes up to per_image pairs for each (kind, k)
    combination it can support, wh pairs from its relations, and
    optionally the seven-level granularity ladder and the three-position
    rotation sets. Graphs lacking entities or negative sets for a
    combination simply skip it; output order is deterministic per seed.
    """
    mcqs: list[Mcq] = []
    for sg in sgs:
        for kind in (OBJECT, ATTRIBUTE, RELATION):
            for k in ks:
                for index in range(per_image):
                    try:
                        pair = build_multi_mcq_pair(
                            sg,
                            negsets,
                            kind,
                            k,
                            seed.derive("multi", sg.image_id, kind, k, index),
                            pair_index=index,
                        )
                    except (InsufficientEntities, MissingNegatives):
                        break
                    mcqs.extend(pair)
        if include_wh and sg.relations:
            order = shuffled(
                list(range(len(sg.relations))), seed.derive("wh-order", sg.image_id)
            )
            built = 0
            for rel_index in order:
                if built >= per_image:
                    break
                try:
                    pair = build_wh_mcq_pair(
                        sg,
                        negsets,
                        sg.relations[rel_index].id,
                        seed.derive("wh", sg.image_id, built),
                        question_source=wh_source,
                        pair_index=built,
                    )
                except (InsufficientEntities, MissingNegatives):
                    continue
                mcqs.extend(pair)
                built += 1
        if include_granularity:
            try:
                ladder = build_granularity_ladder(
                    sg, negsets, seed.derive("granularity", sg.image_id)
                )
                mcqs.extend(ladder.mcqs())
            except (InsufficientEntities, MissingNegatives):
                pass
        if include_rotations:
            for kind in (OBJECT, ATTRIBUTE, RELATION):
                try:
                    rotation_pairs = build_positional_rotations(
                        sg,
                        negsets,
                        kind,
                        seed.derive("rotations", sg.image_id, kind),
                    )
                except (InsufficientEntities, MissingNegatives):
                    continue
                for pair in rotation_pairs:
                    mcqs.extend(pair)
    return mcqs


def pair_map(mcqs: Sequence[Mcq]) -> dict[str, dict[str, Mcq]]:
    """Index questions by pair id, checking the one-positive-one-negative
    pairing invariant. Raises OrphanPair on violations."""
    pairs: dict[str, dict[str, Mcq]] = {}
    for mcq in mcqs:
        halves = pairs.setdefault(mcq.pair_id, {})
        if mcq.polarity in halves:
            raise OrphanPair(
                f"pair {mcq.pair_id} has two {mcq.polarity} questions"
            )
        halves[mcq.polarity] = mcq
    for pair_id, halves in pairs.items():
        if len(halves) != 2:
            missing = NEGATIVE if POSITIVE in halves else POSITIVE
            raise OrphanPair(f"pair {pair_id} is missing its {missing} half")
    return pairs


def expected_mcq_count(pairs_by_k: Mapping[int, int]) -> int:
    """Each pair renders to exactly two questions."""
    return 2 * sum(pairs_by_k.values())


def build_manifest(mcqs: Sequence[Mcq], seed: Optional[Seed] = None) -> dict:
    """Per-setting / per-k pair and question counts for a built benchmark."""
    pairs = pair_map(mcqs)
    settings: dict[str, dict] = {}
    for pair_id, halves in pairs.items():
        mcq = halves[POSITIVE]
        block = settings.setdefault(
            mcq.setting, {"pairs": 0, "mcqs": 0, "by_k": {}}
        )
        block["pairs"] += 1
        block["mcqs"] += 2
        key = str(mcq.k)
        block["by_k"][key] = block["by_k"].get(key, 0) + 1
    for block in settings.values():
        block["by_k"] = dict(sorted(block["by_k"].items(), key=lambda kv: int(kv[0])))
    manifest = {
        "schema": "benchmark_manifest.v1",
        "total_pairs": len(pairs),
        "total_mcqs": 2 * len(pairs),
        "settings": dict(sorted(settings.items())),
    }
    if seed is not None:
        manifest["seed"] = seed.value
    return manifest


def export_survey(mcqs: Sequence[Mcq], seed: Seed) -> dict:
    """Split pairs into two survey versions for human study.

    Each pair contributes exactly one polarity to version A and the other
    to version B (assignment uniform by seed), so no annotator sees both
    halves of a pair. Questions within each version are shuffled. The
    answer key is returned separately and never embedded in the versions.
    """
    pairs = pair_map(mcqs)
    rng = seed.rng()
    version_a: list[dict] = []
    version_b: list[dict] = []
    answer_key: dict[str, dict] = {}
    for pair_id in sorted(pairs):
        halves = pairs[pair_id]
        if rng.random() < 0.5:
            to_a, to_b = halves[POSITIVE], halves[NEGATIVE]
        else:
            to_a, to_b = halves[NEGATIVE], halves[POSITIVE]
        for version, mcq in ((version_a, to_a), (version_b, to_b)):
            version.append(
                {
                    "survey_id": mcq.mcq_id,
                    "image_uri": mcq.image_uri,
                    "question": mcq.question,
                    "options": list(mcq.options),
                }
            )
            answer_key[mcq.mcq_id] = {
                "answer_index": mcq.answer_index,
                "answer_letter": mcq.answer_letter,
                "pair_id": mcq.pair_id,
                "polarity": mcq.polarity,
            }
    rng.shuffle(version_a)
    rng.shuffle(version_b)
    return {
        "version_a": version_a,
        "version_b": version_b,
        "answer_key": answer_key,
    }
