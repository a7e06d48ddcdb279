"""Paired scoring, chance baselines, bias report, and report files."""

import csv
import json
import re

import pytest

from finer.core import ATTRIBUTE, OBJECT, MissingRotation, Seed
from finer.evaluate import (
    EvalRecord,
    ask,
    evaluate_mcqs,
    paired_accuracy,
    positional_bias_report,
    random_baselines,
    report_curves,
    write_report_csv,
    write_report_json,
)
from finer.mcq_build import (
    NEGATIVE,
    POSITIVE,
    build_benchmark,
    build_multi_mcq_pair,
    build_positional_rotations,
    build_wh_mcq_pair,
    pair_map,
)
from finer.plots import render_report_figures

from conftest import make_client, make_negsets, make_sg, openai_body, prompt_text


def _displayed(body):
    return re.findall(r"^([A-E])\. (.*)$", prompt_text(body), re.MULTILINE)


def _rec(mcq, letter, raw=None):
    """Record an answer by letter; None means unparseable."""
    return EvalRecord(
        mcq_id=mcq.mcq_id,
        pair_id=mcq.pair_id,
        raw_text=raw if raw is not None else (letter or "hmm"),
        parsed_letter=letter,
        correct=int(letter == mcq.answer_letter),
        latency_ms=1.0,
    )


def _wrong_letter(mcq):
    # an incorrect option that is not the negative question's Yes option
    for i in range(5):
        if i != mcq.answer_index and i != mcq.yes_option_index:
            return "ABCDE"[i]
    raise AssertionError("unreachable")


class TestAsk:
    def test_correct_answer_scores_one(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))

        def handler(body):
            text = prompt_text(body)
            assert pos.question in text
            assert "single capital letter" in text
            winner = next(
                l for l, opt in _displayed(body) if opt.startswith("Yes, ")
            )
            return openai_body(winner)

        client = make_client(tmp_path, handler)
        record = ask(client, "ep", pos)
        assert record.correct == 1
        assert record.parsed_letter == pos.answer_letter
        assert record.endpoint_error is False

    def test_wrong_answer_scores_zero(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        client = make_client(tmp_path, lambda body: openai_body(_wrong_letter(pos)))
        record = ask(client, "ep", pos)
        assert record.correct == 0
        assert record.parsed_letter == _wrong_letter(pos)

    def test_unparseable_scores_zero(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        client = make_client(tmp_path, lambda body: openai_body("no idea"))
        record = ask(client, "ep", pos)
        assert record.correct == 0
        assert record.parsed_letter is None
        assert record.raw_text == "no idea"

    def test_endpoint_error_flagged_not_raised(self, tmp_path, sg, negsets):
        import httpx

        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        client = make_client(
            tmp_path, lambda body: httpx.Response(400, json={"error": "bad"})
        )
        record = ask(client, "ep", pos)
        assert record.endpoint_error is True
        assert record.correct == 0
        assert record.parsed_letter is None
        assert record.raw_text == ""

    def test_cached_answer_reports_zero_latency(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        client = make_client(tmp_path, lambda body: openai_body("A"))
        first = ask(client, "ep", pos)
        second = ask(client, "ep", pos)
        assert second.latency_ms == 0.0
        assert second.correct == first.correct
        assert client.cache.stats.hits == 1

    def test_image_attached(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        seen = {}

        def handler(body):
            content = body["messages"][0]["content"]
            seen["uris"] = [
                part["image_url"]["url"]
                for part in content
                if part["type"] == "image_url"
            ]
            return openai_body("A")

        ask(make_client(tmp_path, handler), "ep", pos)
        assert seen["uris"] == [pos.image_uri]

    def test_round_trip(self, tmp_path, sg, negsets):
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(1))
        client = make_client(tmp_path, lambda body: openai_body("B"))
        record = ask(client, "ep", pos)
        assert EvalRecord.from_record(record.to_record()) == record


class TestEvaluateMcqs:
    def test_results_in_input_order(self, tmp_path, sg, negsets):
        mcqs = build_benchmark([sg], negsets, Seed(2), ks=(2, 3))

        def handler(body):
            # answer with the letter of the Yes option so each question
            # gets a reply tied to its own shuffle
            displayed = _displayed(body)
            winner = next(
                (l for l, opt in displayed if opt.startswith("Yes, ")), "A"
            )
            return openai_body(winner)

        client = make_client(tmp_path, handler, parallelism=4)
        records = evaluate_mcqs(client, "ep", mcqs)
        assert [r.mcq_id for r in records] == [m.mcq_id for m in mcqs]
        for record, mcq in zip(records, mcqs):
            expected = (
                "ABCDE"[mcq.yes_option_index]
                if mcq.yes_option_index is not None
                else "A"
            )
            assert record.parsed_letter == expected

    def test_empty_input(self, tmp_path):
        client = make_client(tmp_path, lambda body: openai_body("A"))
        assert evaluate_mcqs(client, "ep", []) == []


class TestPairedAccuracy:
    def _benchmark(self, sg, negsets):
        return build_benchmark(
            [sg], negsets, Seed(3), ks=(2, 3), include_granularity=True
        )

    def test_matches_brute_force(self, sg, negsets):
        mcqs = self._benchmark(sg, negsets)
        for trial in range(30):
            rng = Seed(4).derive("trial", trial).rng()
            records = [
                _rec(m, m.answer_letter if rng.random() < 0.6 else _wrong_letter(m))
                for m in mcqs
            ]
            report = paired_accuracy(records, mcqs)
            by_id = {r.mcq_id: r for r in records}
            pairs = pair_map(mcqs)
            paired = pos = neg = 0
            for halves in pairs.values():
                p = by_id[halves[POSITIVE].mcq_id].correct
                n = by_id[halves[NEGATIVE].mcq_id].correct
                paired += p * n
                pos += p
                neg += n
            total = len(pairs)
            assert report["n_pairs"] == total
            assert report["overall"]["paired_accuracy"] == pytest.approx(
                paired / total
            )
            assert report["overall"]["positive_accuracy"] == pytest.approx(
                pos / total
            )
            assert report["overall"]["negative_accuracy"] == pytest.approx(
                neg / total
            )
            assert report["overall"]["paired_accuracy"] <= min(
                report["overall"]["positive_accuracy"],
                report["overall"]["negative_accuracy"],
            ) + 1e-12

    def test_missing_half_is_orphan(self, sg, negsets):
        mcqs = self._benchmark(sg, negsets)
        records = [_rec(m, m.answer_letter) for m in mcqs]
        dropped = records.pop()
        report = paired_accuracy(records, mcqs)
        assert dropped.pair_id in report["orphan_pair_ids"]
        assert report["n_orphan_pairs"] == 1
        assert report["n_pairs"] == len(pair_map(mcqs)) - 1
        # a clean sweep over the remaining pairs
        assert report["overall"]["paired_accuracy"] == 1.0

    def test_unknown_question_is_orphan(self, sg, negsets):
        mcqs = self._benchmark(sg, negsets)
        records = [_rec(m, m.answer_letter) for m in mcqs]
        stray = EvalRecord(
            mcq_id="ghost",
            pair_id="ghost-pair",
            raw_text="A",
            parsed_letter="A",
            correct=1,
            latency_ms=1.0,
        )
        report = paired_accuracy(records + [stray], mcqs)
        assert "ghost-pair" in report["orphan_pair_ids"]
        assert report["n_pairs"] == len(pair_map(mcqs))

    def test_unparseable_counted_by_polarity(self, sg, negsets):
        pos, neg = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(5))
        records = [_rec(pos, None), _rec(neg, neg.answer_letter)]
        report = paired_accuracy(records, [pos, neg])
        assert report["unparseable"] == {POSITIVE: 1, NEGATIVE: 0}
        assert report["overall"]["paired_accuracy"] == 0.0

    def test_false_positive_is_negatives_yes_option(self, sg, negsets):
        pos, neg = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(6))
        records = [
            _rec(pos, pos.answer_letter),
            _rec(neg, "ABCDE"[neg.yes_option_index]),
        ]
        report = paired_accuracy(records, [pos, neg])
        assert report["overall"]["fp_rate"] == 1.0
        assert report["overall"]["fn_rate"] == 0.0
        assert report["overall"]["negative_accuracy"] == 0.0

    def test_false_negative_is_positives_no_option(self, sg, negsets):
        pos, neg = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(6))
        records = [
            _rec(pos, _wrong_letter(pos)),
            _rec(neg, neg.answer_letter),
        ]
        report = paired_accuracy(records, [pos, neg])
        assert report["overall"]["fn_rate"] == 1.0
        assert report["overall"]["fp_rate"] == 0.0

    def test_unparseable_positive_is_not_false_negative(self, sg, negsets):
        pos, neg = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(6))
        records = [_rec(pos, None), _rec(neg, neg.answer_letter)]
        report = paired_accuracy(records, [pos, neg])
        assert report["overall"]["fn_rate"] == 0.0

    def test_wh_pairs_have_no_yes_no_rates(self, sg, negsets):
        pos, neg = build_wh_mcq_pair(sg, negsets, sg.relations[0].id, Seed(7))
        records = [_rec(pos, pos.answer_letter), _rec(neg, neg.answer_letter)]
        report = paired_accuracy(records, [pos, neg])
        assert "fp_rate" not in report["overall"]
        assert "fn_rate" not in report["overall"]

    def test_breakdowns(self, sg, negsets):
        mcqs = self._benchmark(sg, negsets)
        records = [_rec(m, m.answer_letter) for m in mcqs]
        report = paired_accuracy(records, mcqs)
        for setting, block in report["by_setting"].items():
            assert block["paired_accuracy"] == 1.0
            assert sum(b["n_pairs"] for b in block["by_k"].values()) == block[
                "n_pairs"
            ]
        assert sorted(report["by_granularity_level"]) == [str(i) for i in range(1, 8)]
        for block in report["by_granularity_level"].values():
            assert block["n_pairs"] == 1
        # every non-wh pair records where the corruption sat
        total_positioned = sum(
            b["n_pairs"] for b in report["by_position"].values()
        )
        wh_pairs = sum(1 for m in mcqs if m.setting == "wh") // 2
        assert total_positioned == report["n_pairs"] - wh_pairs

    def test_empty_records(self, sg, negsets):
        report = paired_accuracy([], self._benchmark(sg, negsets))
        assert report["n_pairs"] == 0
        assert report["overall"]["paired_accuracy"] == 0.0


class TestRandomBaselines:
    def test_analytic_values_exact(self):
        out = random_baselines()
        assert out["uniform"] == 1.0 / 25.0
        assert out["polarity_aware"] == 1.0 / 16.0
        assert "monte_carlo" not in out

    def test_monte_carlo_close_to_analytic(self):
        out = random_baselines(trials=200_000, seed=1)
        mc = out["monte_carlo"]
        assert mc["trials"] == 200_000
        assert mc["uniform"] == pytest.approx(1.0 / 25.0, abs=0.002)
        assert mc["polarity_aware"] == pytest.approx(1.0 / 16.0, abs=0.002)

    def test_monte_carlo_deterministic(self):
        first = random_baselines(trials=10_000, seed=5)
        second = random_baselines(trials=10_000, seed=5)
        assert first == second


class TestPositionalBias:
    def _groups(self, sg, negsets):
        pairs = []
        pairs += build_positional_rotations(sg, negsets, OBJECT, Seed(8))
        pairs += build_positional_rotations(sg, negsets, ATTRIBUTE, Seed(9))
        return pairs

    def test_middle_blind_responder(self, sg, negsets):
        pairs = self._groups(sg, negsets)
        records = []
        for pos, neg in pairs:
            records.append(_rec(pos, pos.answer_letter))
            letter = (
                _wrong_letter(neg) if neg.negated_position == 1 else neg.answer_letter
            )
            records.append(_rec(neg, letter))
        mcqs = [m for pair in pairs for m in pair]
        out = positional_bias_report(records, mcqs)
        assert out["n_groups"] == 2
        assert out["by_position"] == {"0": 1.0, "1": 0.0, "2": 1.0}

    def test_non_rotation_questions_ignored(self, sg, negsets):
        pairs = self._groups(sg, negsets)
        extra = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(10))
        records = [_rec(m, m.answer_letter) for pair in pairs for m in pair]
        mcqs = [m for pair in pairs for m in pair] + list(extra)
        out = positional_bias_report(records, mcqs)
        assert out["n_groups"] == 2

    def test_incomplete_pair_rejected(self, sg, negsets):
        pairs = self._groups(sg, negsets)
        mcqs = [m for pair in pairs for m in pair][:-1]  # drop one negative
        records = [_rec(m, m.answer_letter) for m in mcqs]
        with pytest.raises(MissingRotation, match="incomplete"):
            positional_bias_report(records, mcqs)

    def test_missing_position_rejected(self, sg, negsets):
        pairs = self._groups(sg, negsets)
        kept = [p for p in pairs if p[1].negated_position != 1]
        mcqs = [m for pair in kept for m in pair]
        records = [_rec(m, m.answer_letter) for m in mcqs]
        with pytest.raises(MissingRotation, match="expected \\[0, 1, 2\\]"):
            positional_bias_report(records, mcqs)

    def test_unanswered_variant_rejected(self, sg, negsets):
        pairs = self._groups(sg, negsets)
        mcqs = [m for pair in pairs for m in pair]
        records = [_rec(m, m.answer_letter) for m in mcqs[:-2]]
        with pytest.raises(MissingRotation, match="unanswered"):
            positional_bias_report(records, mcqs)


class TestReportFiles:
    def _report(self, sg, negsets):
        mcqs = build_benchmark(
            [sg],
            negsets,
            Seed(11),
            ks=(2, 3),
            include_granularity=True,
            include_rotations=True,
        )
        records = [_rec(m, m.answer_letter) for m in mcqs]
        return paired_accuracy(records, mcqs)

    def test_json_round_trip(self, tmp_path, sg, negsets):
        report = self._report(sg, negsets)
        path = tmp_path / "report.json"
        write_report_json(report, str(path))
        assert json.loads(path.read_text()) == report

    def test_csv_rows_match_curves(self, tmp_path, sg, negsets):
        report = self._report(sg, negsets)
        path = tmp_path / "report.csv"
        write_report_csv(report, str(path))
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        curves = report_curves(report)
        assert len(rows) == len(curves)
        assert [r["series"] for r in rows] == [c["series"] for c in curves]
        for row, curve in zip(rows, curves):
            assert float(row["paired_accuracy"]) == pytest.approx(
                curve["paired_accuracy"]
            )

    def test_curves_cover_each_breakdown(self, sg, negsets):
        report = self._report(sg, negsets)
        series = {c["series"] for c in report_curves(report)}
        assert "granularity_level" in series
        assert "negated_position" in series
        assert series & set(report["by_setting"])

    def test_figures_rendered(self, tmp_path, sg, negsets):
        report = self._report(sg, negsets)
        written = render_report_figures(report, str(tmp_path / "figs"))
        names = sorted(p.split("/")[-1] for p in written)
        assert names == [
            "accuracy_vs_k.png",
            "granularity.png",
            "positional_bias.png",
        ]
        for path in written:
            with open(path, "rb") as fh:
                assert fh.read(8) == b"\x89PNG\r\n\x1a\n"

    def test_figures_skip_missing_sections(self, tmp_path, sg, negsets):
        report = self._report(sg, negsets)
        report = dict(report, by_position={}, by_granularity_level={})
        written = render_report_figures(report, str(tmp_path / "figs"))
        assert [p.split("/")[-1] for p in written] == ["accuracy_vs_k.png"]
