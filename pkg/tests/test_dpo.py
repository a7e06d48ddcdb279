"""Preference-data construction and the preference loss."""

import dataclasses
import json
import math
from collections import Counter

import pytest
from scipy import stats as scipy_stats

from finer.core import Seed, UnparseableLlmOutput
from finer.dpo import (
    CATEGORIES,
    CATEGORY_CHART,
    CATEGORY_DOCUMENT,
    CATEGORY_NATURAL,
    CATEGORY_SCREENSHOT,
    SUBSET_ATTR,
    SUBSET_OBJ,
    SUBSET_REL,
    SUBSET_WH,
    SUBSETS,
    TEMPLATE_POOL,
    DpoExample,
    PhraseSet,
    PreferenceTuple,
    WhPair,
    build_preference_dataset,
    classify_image_category,
    compose_tuples,
    dpo_grads,
    dpo_loss,
    dpo_loss_batch,
    extract_phrase_sets,
    subsample,
    trainer_export_records,
    write_trainer_export,
)
from finer.mcq_build import NEGATIVE, POSITIVE
from finer.sg_extract import CaptionRecord

from conftest import make_client, openai_body


def _phrase_set(image_id="img-d1", wh=True):
    positive = {
        SUBSET_OBJ: "a cat and a desk",
        SUBSET_ATTR: "a cat with black fur",
        SUBSET_REL: "a cat lying on a desk",
    }
    negative = {
        SUBSET_OBJ: "a dog and a desk",
        SUBSET_ATTR: "a cat with white fur",
        SUBSET_REL: "a cat hiding under a desk",
    }
    replacement = {
        SUBSET_OBJ: "dog",
        SUBSET_ATTR: "white",
        SUBSET_REL: "hiding under",
    }
    if wh:
        positive[SUBSET_WH] = WhPair(
            "What is the cat lying on?", "The cat is lying on a desk."
        )
        negative[SUBSET_WH] = WhPair(
            "What is the cat hiding under?",
            "The cat is not hiding under anything; it is lying on a desk.",
        )
        replacement[SUBSET_WH] = "hiding under"
    return PhraseSet(
        image_id=image_id,
        image_uri=f"file:///{image_id}.jpg",
        positive=positive,
        negative=negative,
        replacement=replacement,
    )


class TestPhraseSet:
    def test_valid_full_set(self):
        ps = _phrase_set()
        assert ps.paired_subsets() == [SUBSET_OBJ, SUBSET_ATTR, SUBSET_REL, SUBSET_WH]

    def test_partial_set_allowed(self):
        ps = PhraseSet(
            image_id="i",
            image_uri="file:///i",
            positive={SUBSET_OBJ: "a cat"},
            negative={},
            replacement={},
        )
        assert ps.paired_subsets() == []

    def test_unknown_subset_rejected(self):
        with pytest.raises(ValueError, match="unknown positive subset"):
            PhraseSet("i", "file:///i", {"verbs": "runs"}, {}, {})

    def test_negative_without_positive_rejected(self):
        with pytest.raises(ValueError, match="no positive partner"):
            PhraseSet(
                "i",
                "file:///i",
                {},
                {SUBSET_OBJ: "a dog"},
                {SUBSET_OBJ: "dog"},
            )

    def test_replacement_keys_must_match(self):
        with pytest.raises(ValueError, match="replacement keys"):
            PhraseSet(
                "i",
                "file:///i",
                {SUBSET_OBJ: "a cat"},
                {SUBSET_OBJ: "a dog"},
                {},
            )

    def test_replacement_must_appear_in_negative(self):
        with pytest.raises(ValueError, match="not in negative phrase"):
            PhraseSet(
                "i",
                "file:///i",
                {SUBSET_OBJ: "a cat"},
                {SUBSET_OBJ: "a dog"},
                {SUBSET_OBJ: "fox"},
            )

    def test_replacement_must_be_new(self):
        with pytest.raises(ValueError, match="already in positive"):
            PhraseSet(
                "i",
                "file:///i",
                {SUBSET_OBJ: "a cat and a dog"},
                {SUBSET_OBJ: "a dog and a dog"},
                {SUBSET_OBJ: "dog"},
            )

    def test_wh_pair_needs_both_halves(self):
        with pytest.raises(ValueError, match="question and an answer"):
            WhPair("", "an answer")


class TestPreferenceTuple:
    def test_round_trip(self):
        tuples = compose_tuples(_phrase_set(), Seed(1))
        for t in tuples:
            assert PreferenceTuple.from_record(t.to_record()) == t

    def test_wh_tuples_are_untemplated(self):
        with pytest.raises(ValueError, match="free-form"):
            PreferenceTuple(
                image_id="i",
                image_uri="file:///i",
                subset=SUBSET_WH,
                polarity=POSITIVE,
                query="q?",
                accepted="a.",
                rejected="b.",
                template_id=1,
            )

    def test_template_id_range(self):
        with pytest.raises(ValueError, match="template_id"):
            PreferenceTuple(
                image_id="i",
                image_uri="file:///i",
                subset=SUBSET_OBJ,
                polarity=POSITIVE,
                query="q?",
                accepted="Yes.",
                rejected="No.",
                template_id=6,
            )

    def test_positive_accepted_must_affirm(self):
        with pytest.raises(ValueError, match="accepted answer must start 'Yes'"):
            PreferenceTuple(
                image_id="i",
                image_uri="file:///i",
                subset=SUBSET_OBJ,
                polarity=POSITIVE,
                query="q?",
                accepted="No, nothing.",
                rejected="No, nothing.",
                template_id=1,
            )

    def test_negative_accepted_must_deny(self):
        with pytest.raises(ValueError, match="accepted answer must start 'No'"):
            PreferenceTuple(
                image_id="i",
                image_uri="file:///i",
                subset=SUBSET_OBJ,
                polarity=NEGATIVE,
                query="q?",
                accepted="Yes, sure.",
                rejected="Yes, sure thing.",
                template_id=1,
            )


class TestComposeTuples:
    def test_full_set_yields_eight(self):
        tuples = compose_tuples(_phrase_set(), Seed(2))
        assert len(tuples) == 8
        by_subset = Counter(t.subset for t in tuples)
        assert by_subset == {s: 2 for s in SUBSETS}
        for subset in SUBSETS:
            polarities = [t.polarity for t in tuples if t.subset == subset]
            assert sorted(polarities) == [NEGATIVE, POSITIVE]

    def test_without_wh_yields_six(self):
        tuples = compose_tuples(_phrase_set(wh=False), Seed(2))
        assert len(tuples) == 6
        assert all(t.subset != SUBSET_WH for t in tuples)

    def test_only_paired_subsets_compose(self):
        ps = PhraseSet(
            image_id="i",
            image_uri="file:///i",
            positive={SUBSET_OBJ: "a cat", SUBSET_ATTR: "a cat with black fur"},
            negative={SUBSET_OBJ: "a dog"},
            replacement={SUBSET_OBJ: "dog"},
        )
        tuples = compose_tuples(ps, Seed(3))
        assert len(tuples) == 2
        assert {t.subset for t in tuples} == {SUBSET_OBJ}

    def test_slot_roles_every_template(self):
        for trial in range(60):
            ps = _phrase_set(image_id=f"img-{trial}")
            for t in compose_tuples(ps, Seed(4)):
                if t.subset == SUBSET_WH:
                    continue
                pos = ps.positive[t.subset]
                neg = ps.negative[t.subset]
                if t.polarity == POSITIVE:
                    assert pos in t.query
                    assert pos in t.accepted
                    assert neg in t.rejected
                else:
                    assert neg in t.query
                    assert pos in t.accepted
                    assert neg in t.rejected

    def test_exact_strings_for_see_template(self):
        # hunt for tuples drawn with the "Can you see ..." template and
        # pin their exact wording, both polarities
        seen = {POSITIVE: False, NEGATIVE: False}
        for trial in range(200):
            ps = _phrase_set(image_id=f"img-{trial}", wh=False)
            for t in compose_tuples(ps, Seed(5)):
                if t.template_id != 4 or t.subset != SUBSET_OBJ:
                    continue
                if t.polarity == POSITIVE:
                    assert t.query == "Can you see a cat and a desk in this image?"
                    assert t.accepted == (
                        "Yes, I can see a cat and a desk in this image."
                    )
                    assert t.rejected == (
                        "No, but I can see a dog and a desk in this image."
                    )
                else:
                    assert t.query == "Can you see a dog and a desk in this image?"
                    assert t.accepted == (
                        "No, but I can see a cat and a desk in this image."
                    )
                    assert t.rejected == (
                        "Yes, I can see a dog and a desk in this image."
                    )
                seen[t.polarity] = True
            if all(seen.values()):
                break
        assert all(seen.values())

    def test_wh_answers_swap_roles(self):
        ps = _phrase_set()
        wh = [t for t in compose_tuples(ps, Seed(6)) if t.subset == SUBSET_WH]
        pos = next(t for t in wh if t.polarity == POSITIVE)
        neg = next(t for t in wh if t.polarity == NEGATIVE)
        assert pos.template_id is None and neg.template_id is None
        assert pos.query == ps.positive[SUBSET_WH].question
        assert pos.accepted == ps.positive[SUBSET_WH].answer
        assert pos.rejected == ps.negative[SUBSET_WH].answer
        assert neg.query == ps.negative[SUBSET_WH].question
        assert neg.accepted == ps.negative[SUBSET_WH].answer
        assert neg.rejected == ps.positive[SUBSET_WH].answer

    def test_deterministic_per_seed_and_image(self):
        first = compose_tuples(_phrase_set(), Seed(7))
        second = compose_tuples(_phrase_set(), Seed(7))
        assert first == second

    def test_template_draw_uniform(self):
        # chi-squared on the pooled template counts at the 1% level
        counts = Counter()
        for trial in range(1000):
            ps = _phrase_set(image_id=f"img-u{trial}", wh=False)
            for t in compose_tuples(ps, Seed(8)):
                counts[t.template_id] += 1
        observed = [counts[i] for i in sorted(TEMPLATE_POOL)]
        assert sum(observed) == 6000
        result = scipy_stats.chisquare(observed)
        assert result.pvalue > 0.01


class TestSubsample:
    def test_under_cap_keeps_all_in_order(self):
        items = list(range(10))
        assert subsample(items, 20, Seed(9)) == items

    def test_cap_enforced_and_deterministic(self):
        items = list(range(100))
        first = subsample(items, 10, Seed(9))
        second = subsample(items, 10, Seed(9))
        assert first == second
        assert len(first) == 10
        assert set(first) <= set(items)
        assert subsample(items, 10, Seed(10)) != first

    def test_roughly_uniform_inclusion(self):
        items = list(range(10))
        hits = Counter()
        trials = 1500
        for s in range(trials):
            for kept in subsample(items, 5, Seed(11).derive("t", s)):
                hits[kept] += 1
        for item in items:
            assert hits[item] / trials == pytest.approx(0.5, abs=0.06)

    def test_zero_cap_rejected(self):
        with pytest.raises(ValueError, match="cap"):
            subsample([1], 0, Seed(1))


class TestDpoLoss:
    def _example(self, delta_policy, delta_ref=0.0, beta=0.1):
        def pair(delta):
            # keep both log-probabilities non-positive for any delta sign
            if delta >= 0.0:
                return -1.0, -1.0 - delta
            return -1.0 + delta, -1.0

        pa, pr = pair(delta_policy)
        ra, rr = pair(delta_ref)
        return DpoExample(pa, pr, ra, rr, beta=beta)

    def test_zero_margin_gives_ln_two(self):
        assert dpo_loss(self._example(0.0)) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_unit_margin_value(self):
        ex = self._example(10.0)  # beta 0.1 * delta 10 = margin 1
        assert ex.margin == pytest.approx(1.0)
        assert dpo_loss(ex) == pytest.approx(0.313262, abs=1e-6)

    def test_reference_delta_subtracts(self):
        ex = self._example(10.0, delta_ref=10.0)
        assert ex.margin == pytest.approx(0.0)
        assert dpo_loss(ex) == pytest.approx(math.log(2.0))

    def test_matches_naive_formula_in_safe_range(self):
        for delta in (-30.0, -3.0, -0.5, 0.0, 0.5, 3.0, 30.0):
            ex = self._example(delta)
            naive = -math.log(1.0 / (1.0 + math.exp(-ex.margin)))
            assert abs(dpo_loss(ex) - naive) < 1e-12

    def test_extreme_margins_stay_finite(self):
        for delta in (-5000.0, 5000.0):  # margin -500 / +500
            ex = self._example(delta)
            loss = dpo_loss(ex)
            assert math.isfinite(loss)
            grads = dpo_grads(ex)
            assert all(math.isfinite(g) for g in grads)
        assert dpo_loss(self._example(5000.0)) == pytest.approx(0.0, abs=1e-12)
        assert dpo_loss(self._example(-5000.0)) == pytest.approx(500.0, rel=1e-9)

    def test_grad_signs_and_magnitude(self):
        ex = self._example(4.0)
        g = ex.beta * (1.0 / (1.0 + math.exp(ex.margin)))
        assert dpo_grads(ex) == pytest.approx((-g, g, g, -g))

    def test_grads_match_finite_differences(self):
        ex = DpoExample(
            logp_policy_accepted=-1.3,
            logp_policy_rejected=-2.1,
            logp_ref_accepted=-1.9,
            logp_ref_rejected=-1.4,
            beta=0.1,
        )
        fields = (
            "logp_policy_accepted",
            "logp_policy_rejected",
            "logp_ref_accepted",
            "logp_ref_rejected",
        )
        h = 1e-6
        grads = dpo_grads(ex)
        for i, field in enumerate(fields):
            lo = dataclasses.replace(ex, **{field: getattr(ex, field) - h})
            hi = dataclasses.replace(ex, **{field: getattr(ex, field) + h})
            numeric = (dpo_loss(hi) - dpo_loss(lo)) / (2.0 * h)
            assert grads[i] == pytest.approx(numeric, abs=1e-6)

    def test_batch_mean(self):
        examples = [self._example(d) for d in (0.0, 5.0, -5.0)]
        expected = sum(dpo_loss(e) for e in examples) / 3.0
        assert dpo_loss_batch(examples) == pytest.approx(expected)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty batch"):
            dpo_loss_batch([])

    def test_positive_logp_rejected(self):
        with pytest.raises(ValueError, match="must be <= 0"):
            DpoExample(0.5, -1.0, -1.0, -1.0)

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError, match="beta"):
            DpoExample(-1.0, -1.0, -1.0, -1.0, beta=0.0)


class TestTrainerExport:
    def test_record_shape(self):
        tuples = compose_tuples(_phrase_set(), Seed(12))
        records = trainer_export_records(tuples)
        assert len(records) == len(tuples)
        for record, t in zip(records, tuples):
            assert set(record) == {"images", "conversations", "chosen", "rejected"}
            assert record["images"] == [t.image_uri]
            assert record["conversations"] == [
                {"from": "human", "value": "<image>" + t.query}
            ]
            assert record["chosen"] == {"from": "gpt", "value": t.accepted}
            assert record["rejected"] == {"from": "gpt", "value": t.rejected}

    def test_write_is_atomic_json(self, tmp_path):
        tuples = compose_tuples(_phrase_set(), Seed(12))
        path = tmp_path / "export.json"
        write_trainer_export(str(path), tuples)
        assert json.loads(path.read_text()) == trainer_export_records(tuples)
        assert path.read_text().endswith("\n")
        assert list(tmp_path.glob("*.tmp")) == []


class TestClassifyCategory:
    def test_label_extracted(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body("natural_image"))
        label = classify_image_category(client, "ep", "A cat on a desk.")
        assert label == CATEGORY_NATURAL

    def test_label_normalized(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body(" Screenshot UI "))
        label = classify_image_category(client, "ep", "A settings page.")
        assert label == CATEGORY_SCREENSHOT

    def test_unrecognized_reply_is_none(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body("hard to say"))
        assert classify_image_category(client, "ep", "Some caption.") is None

    def test_empty_caption_rejected(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body("natural_image"))
        with pytest.raises(ValueError, match="empty caption"):
            classify_image_category(client, "ep", "   ")


def _first_user_text(body):
    content = body["messages"][0]["content"]
    if isinstance(content, str):
        return content
    return " ".join(p.get("text", "") for p in content if p.get("type") == "text")


POSITIVES_REPLY = {
    "objects": "a cat and a desk",
    "attributes": "a cat with black fur",
    "relations": "a cat lying on a desk",
    "wh": {
        "question": "What is the cat lying on?",
        "answer": "The cat is lying on a desk.",
    },
}

NEGATIVES_REPLY = {
    "objects": {"phrase": "a dog and a desk", "replacement": "dog"},
    "attributes": {"phrase": "a cat with white fur", "replacement": "white"},
    "relations": {"phrase": "a cat hiding under a desk", "replacement": "hiding under"},
    "wh": {
        "question": "What is the cat hiding under?",
        "answer": "The cat is not hiding under anything.",
        "replacement": "hiding under",
    },
}

CAPTION = CaptionRecord(
    image_id="img-d9",
    image_uri="file:///img-d9.jpg",
    caption="A black cat is lying on a desk.",
)


class TestExtractPhraseSets:
    def test_two_stage_extraction(self, tmp_path):
        def handler(body):
            text = _first_user_text(body)
            if "extract positive phrases" in text:
                return openai_body(json.dumps(POSITIVES_REPLY))
            assert "corrupt positive phrases" in text
            assert "a cat and a desk" in text  # positives are shown verbatim
            return openai_body(json.dumps(NEGATIVES_REPLY))

        ps = extract_phrase_sets(make_client(tmp_path, handler), "ep", CAPTION)
        assert ps.paired_subsets() == [SUBSET_OBJ, SUBSET_ATTR, SUBSET_REL, SUBSET_WH]
        assert ps.positive[SUBSET_OBJ] == "a cat and a desk"
        assert ps.negative[SUBSET_ATTR] == "a cat with white fur"
        assert ps.replacement[SUBSET_REL] == "hiding under"
        assert ps.positive[SUBSET_WH] == WhPair(
            "What is the cat lying on?", "The cat is lying on a desk."
        )

    def test_rule_breaking_negatives_dropped(self, tmp_path):
        bad = dict(
            NEGATIVES_REPLY,
            objects={"phrase": "a cat and a desk", "replacement": "cat"},
            attributes={"phrase": "a cat with white fur", "replacement": "orange"},
        )

        def handler(body):
            text = _first_user_text(body)
            if "extract positive phrases" in text:
                return openai_body(json.dumps(POSITIVES_REPLY))
            return openai_body(json.dumps(bad))

        ps = extract_phrase_sets(make_client(tmp_path, handler), "ep", CAPTION)
        # "cat" already lives in the positive; "orange" is not in the phrase
        assert SUBSET_OBJ not in ps.negative
        assert SUBSET_ATTR not in ps.negative
        assert ps.paired_subsets() == [SUBSET_REL, SUBSET_WH]

    def test_missing_subsets_omitted(self, tmp_path):
        partial = {"objects": "a cat and a desk", "attributes": None}

        def handler(body):
            text = _first_user_text(body)
            if "extract positive phrases" in text:
                return openai_body(json.dumps(partial))
            return openai_body(
                json.dumps(
                    {"objects": {"phrase": "a dog and a desk", "replacement": "dog"}}
                )
            )

        ps = extract_phrase_sets(make_client(tmp_path, handler), "ep", CAPTION)
        assert set(ps.positive) == {SUBSET_OBJ}
        assert ps.paired_subsets() == [SUBSET_OBJ]

    def test_unparseable_second_stage_keeps_positives(self, tmp_path):
        def handler(body):
            text = _first_user_text(body)
            if "extract positive phrases" in text:
                return openai_body(json.dumps(POSITIVES_REPLY))
            return openai_body("not json at all")

        ps = extract_phrase_sets(make_client(tmp_path, handler), "ep", CAPTION)
        assert len(ps.positive) == 4
        assert ps.negative == {}
        assert compose_tuples(ps, Seed(1)) == []

    def test_unparseable_first_stage_raises(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body("no json here"))
        with pytest.raises(UnparseableLlmOutput):
            extract_phrase_sets(client, "ep", CAPTION)


class TestBuildPreferenceDataset:
    def _captions(self, n):
        return [
            CaptionRecord(
                image_id=f"img-c{i}",
                image_uri=f"file:///img-c{i}.jpg",
                caption=f"Scene {i}: a cat is lying on a desk.",
            )
            for i in range(n)
        ]

    def _extraction_handler(self, body):
        text = _first_user_text(body)
        if "Classify the image described" in text:
            return openai_body("natural_image")
        if "extract positive phrases" in text:
            return openai_body(json.dumps(POSITIVES_REPLY))
        return openai_body(json.dumps(NEGATIVES_REPLY))

    def test_counts_and_stats(self, tmp_path):
        captions = self._captions(4)
        client = make_client(tmp_path, self._extraction_handler)
        tuples, stats = build_preference_dataset(
            client, "ep", captions, Seed(13), cap=1000
        )
        assert len(tuples) == 4 * 8
        assert stats["captions"] == 4
        assert stats["captions_kept"] == 4
        assert stats["captions_unparseable"] == 0
        assert stats["tuples_composed"] == 32
        assert stats["tuples_selected"] == 32
        assert stats["by_subset"] == {s: 8 for s in SUBSETS}

    def test_cap_subsamples(self, tmp_path):
        captions = self._captions(4)
        client = make_client(tmp_path, self._extraction_handler)
        tuples, stats = build_preference_dataset(
            client, "ep", captions, Seed(13), cap=10
        )
        assert len(tuples) == 10
        assert stats["tuples_selected"] == 10
        assert stats["tuples_composed"] == 32

    def test_unparseable_caption_skipped(self, tmp_path):
        captions = self._captions(3)

        def handler(body):
            text = _first_user_text(body)
            if "Scene 1" in text and "extract positive phrases" in text:
                return openai_body("garbage")
            return self._extraction_handler(body)

        client = make_client(tmp_path, handler)
        tuples, stats = build_preference_dataset(
            client, "ep", captions, Seed(13), cap=1000
        )
        assert stats["captions_unparseable"] == 1
        assert len(tuples) == 2 * 8

    def test_classify_filters_but_fails_open(self, tmp_path):
        captions = self._captions(4)

        def handler(body):
            text = _first_user_text(body)
            if "Classify the image described" in text:
                if "Scene 0" in text:
                    return openai_body("screenshot_ui")
                if "Scene 1" in text:
                    return openai_body("no idea")  # unlabeled: keep
                return openai_body("natural_image")
            return self._extraction_handler(body)

        client = make_client(tmp_path, handler)
        tuples, stats = build_preference_dataset(
            client,
            "ep",
            captions,
            Seed(13),
            cap=1000,
            classify=True,
            allowed_categories=(CATEGORY_NATURAL,),
        )
        assert stats["captions_kept"] == 3  # screenshot dropped, unlabeled kept
        assert stats["by_category"] == {
            CATEGORY_NATURAL: 2,
            CATEGORY_SCREENSHOT: 1,
            "unlabeled": 1,
        }
        assert len(tuples) == 3 * 8

    def test_category_mix_reported(self, tmp_path):
        # a 64-caption corpus with a typical skew toward natural images
        captions = self._captions(64)
        mix = {}
        for i in range(64):
            if i < 50:
                mix[f"Scene {i}:"] = CATEGORY_NATURAL
            elif i < 60:
                mix[f"Scene {i}:"] = CATEGORY_SCREENSHOT
            elif i < 62:
                mix[f"Scene {i}:"] = CATEGORY_CHART
            else:
                mix[f"Scene {i}:"] = CATEGORY_DOCUMENT

        def handler(body):
            text = _first_user_text(body)
            if "Classify the image described" in text:
                label = next(v for k, v in mix.items() if k in text)
                return openai_body(label)
            return self._extraction_handler(body)

        client = make_client(tmp_path, handler, parallelism=4)
        _, stats = build_preference_dataset(
            client, "ep", captions, Seed(14), cap=1000, classify=True,
            parallelism=4,
        )
        assert stats["by_category"] == {
            CATEGORY_CHART: 2,
            CATEGORY_DOCUMENT: 2,
            CATEGORY_NATURAL: 50,
            CATEGORY_SCREENSHOT: 10,
        }
        shares = {
            k: v / 64 for k, v in stats["by_category"].items()
        }
        assert shares[CATEGORY_NATURAL] == pytest.approx(0.78, abs=0.05)
