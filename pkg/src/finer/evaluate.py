"""Paired evaluation of multiple-choice questions against an endpoint.

Each question is asked greedily (temperature 0, three output tokens) with
the fixed instruction to answer with a single capital letter; the reply's
first standalone A-E token is the parsed answer. Scoring is paired: a
pair counts only when the model answers BOTH its positive and negative
halves correctly, which removes the reward for blanket yes-saying or
blanket rejection.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .client import ChatClient, ChatMessage, ChatRequest, parse_answer_letter, render_mcq_prompt
from .core import EndpointError, MissingRotation, register_schema
from .mcq_build import NEGATIVE, POSITIVE, SETTING_GRANULARITY, Mcq

EVAL_TEMPERATURE = 0.0
EVAL_MAX_TOKENS = 3


@dataclass(frozen=True)
class EvalRecord:
    """One model answer to one question; correct is the 0/1 score."""

    mcq_id: str
    pair_id: str
    raw_text: str
    parsed_letter: Optional[str]
    correct: int
    latency_ms: float
    endpoint_error: bool = False

    def to_record(self) -> dict:
        return {
            "schema": "eval_records.v1",
            "mcq_id": self.mcq_id,
            "pair_id": self.pair_id,
            "raw_text": self.raw_text,
            "parsed_letter": self.parsed_letter,
            "correct": self.correct,
            "latency_ms": self.latency_ms,
            "endpoint_error": self.endpoint_error,
        }

    @staticmethod
    def from_record(rec: dict) -> "EvalRecord":
        return EvalRecord(
            mcq_id=rec["mcq_id"],
            pair_id=rec["pair_id"],
            raw_text=rec["raw_text"],
            parsed_letter=rec["parsed_letter"],
            correct=int(rec["correct"]),
            latency_ms=float(rec["latency_ms"]),
            endpoint_error=bool(rec.get("endpoint_error", False)),
        )


register_schema("eval_records.v1", EvalRecord.from_record, EvalRecord.to_record)


def ask(client: ChatClient, endpoint_id: str, mcq: Mcq) -> EvalRecord:
    """Ask one question; endpoint failures score 0 and flag the record
    instead of aborting the run. Cached answers report zero latency so
    replayed runs are byte-identical."""
    request = ChatRequest(
        endpoint_id=endpoint_id,
        messages=(
            ChatMessage(
                "user",
                render_mcq_prompt(mcq.question, mcq.options),
                image_uri=mcq.image_uri,
            ),
        ),
        temperature=EVAL_TEMPERATURE,
        max_tokens=EVAL_MAX_TOKENS,
    )
    start = time.perf_counter()
    try:
        response = client.complete(request)
    except EndpointError:
        return EvalRecord(
            mcq_id=mcq.mcq_id,
            pair_id=mcq.pair_id,
            raw_text="",
            parsed_letter=None,
            correct=0,
            latency_ms=round((time.perf_counter() - start) * 1000.0, 3),
            endpoint_error=True,
        )
    latency_ms = 0.0 if response.cached else round(
        (time.perf_counter() - start) * 1000.0, 3
    )
    letter = parse_answer_letter(response.text)
    return EvalRecord(
        mcq_id=mcq.mcq_id,
        pair_id=mcq.pair_id,
        raw_text=response.text,
        parsed_letter=letter,
        correct=int(letter == mcq.answer_letter),
        latency_ms=latency_ms,
    )


def evaluate_mcqs(
    client: ChatClient, endpoint_id: str, mcqs: Sequence[Mcq]
) -> list[EvalRecord]:
    """Evaluate questions with bounded parallelism, results in input order."""
    if not mcqs:
        return []
    if len(mcqs) == 1 or client.parallelism == 1:
        return [ask(client, endpoint_id, m) for m in mcqs]
    with ThreadPoolExecutor(max_workers=client.parallelism) as pool:
        return list(pool.map(lambda m: ask(client, endpoint_id, m), mcqs))


def _rates(block: dict) -> dict:
    """Finalize a tally block into rates."""
    n = block["n_pairs"]
    out = {
        "n_pairs": n,
        "paired_accuracy": block["paired"] / n if n else 0.0,
        "positive_accuracy": block["pos"] / n if n else 0.0,
        "negative_accuracy": block["neg"] / n if n else 0.0,
    }
    if block["fp_den"]:
        out["fp_rate"] = block["fp"] / block["fp_den"]
    if block["fn_den"]:
        out["fn_rate"] = block["fn"] / block["fn_den"]
    return out


def _new_tally() -> dict:
    return {
        "n_pairs": 0,
        "paired": 0,
        "pos": 0,
        "neg": 0,
        "fp": 0,
        "fp_den": 0,
        "fn": 0,
        "fn_den": 0,
    }


def paired_accuracy(
    records: Sequence[EvalRecord], mcqs: Sequence[Mcq]
) -> dict:
    """Paired scores with per-setting, per-k, per-level, and per-position
    breakdowns.

    A pair scores its positive score times its negative score. Pairs
    missing either half (or referencing unknown questions) are orphans:
    reported by id, excluded from every average, and counted. The false
    positive rate is the share of negative questions answered with their
    "Yes" option; the false negative rate is the share of positive
    questions answered with any "No" option; both only cover settings
    whose options have yes/no structure. Paired accuracy can never exceed
    min(positive accuracy, negative accuracy).
    """
    mcq_by_id = {m.mcq_id: m for m in mcqs}
    score: dict[str, EvalRecord] = {}
    orphan_ids: set[str] = set()
    by_pair: dict[str, dict[str, EvalRecord]] = {}
    for rec in records:
        if rec.mcq_id not in mcq_by_id:
            orphan_ids.add(rec.pair_id)
            continue
        score[rec.mcq_id] = rec
        by_pair.setdefault(rec.pair_id, {})[mcq_by_id[rec.mcq_id].polarity] = rec

    overall = _new_tally()
    by_setting: dict[str, dict] = {}
    by_k: dict[str, dict[str, dict]] = {}
    by_level: dict[str, dict] = {}
    by_position: dict[str, dict] = {}
    unparseable = {POSITIVE: 0, NEGATIVE: 0}
    n_records = {POSITIVE: 0, NEGATIVE: 0}

    complete_pairs = []
    for pair_id, halves in sorted(by_pair.items()):
        if POSITIVE not in halves or NEGATIVE not in halves:
            orphan_ids.add(pair_id)
            continue
        complete_pairs.append((pair_id, halves[POSITIVE], halves[NEGATIVE]))

    for pair_id, pos_rec, neg_rec in complete_pairs:
        pos_mcq = mcq_by_id[pos_rec.mcq_id]
        neg_mcq = mcq_by_id[neg_rec.mcq_id]
        paired = pos_rec.correct * neg_rec.correct

        for rec, mcq in ((pos_rec, pos_mcq), (neg_rec, neg_mcq)):
            n_records[mcq.polarity] += 1
            if rec.parsed_letter is None:
                unparseable[mcq.polarity] += 1

        tallies = [overall, by_setting.setdefault(pos_mcq.setting, _new_tally())]
        k_block = by_k.setdefault(pos_mcq.setting, {})
        tallies.append(k_block.setdefault(str(pos_mcq.k), _new_tally()))
        if pos_mcq.setting == SETTING_GRANULARITY:
            tallies.append(
                by_level.setdefault(str(pos_mcq.granularity_level), _new_tally())
            )
        if neg_mcq.negated_position is not None:
            tallies.append(
                by_position.setdefault(str(neg_mcq.negated_position), _new_tally())
            )

        has_yes = pos_mcq.yes_option_index is not None
        yes_letter_neg = (
            "ABCDE"[neg_mcq.yes_option_index] if neg_mcq.yes_option_index is not None else None
        )
        yes_letter_pos = (
            "ABCDE"[pos_mcq.yes_option_index] if pos_mcq.yes_option_index is not None else None
        )
        for tally in tallies:
            tally["n_pairs"] += 1
            tally["paired"] += paired
            tally["pos"] += pos_rec.correct
            tally["neg"] += neg_rec.correct
            if has_yes:
                tally["fp_den"] += 1
                if neg_rec.parsed_letter == yes_letter_neg:
                    tally["fp"] += 1
                tally["fn_den"] += 1
                if (
                    pos_rec.parsed_letter is not None
                    and pos_rec.parsed_letter != yes_letter_pos
                ):
                    tally["fn"] += 1

    report = {
        "schema": "report.v1",
        "n_pairs": overall["n_pairs"],
        "n_orphan_pairs": len(orphan_ids),
        "orphan_pair_ids": sorted(orphan_ids),
        "n_records": dict(n_records),
        "unparseable": dict(unparseable),
        "overall": _rates(overall),
        "by_setting": {
            setting: dict(
                _rates(tally),
                by_k={k: _rates(b) for k, b in sorted(by_k[setting].items(), key=lambda kv: int(kv[0]))},
            )
            for setting, tally in sorted(by_setting.items())
        },
        "by_granularity_level": {
            level: _rates(tally) for level, tally in sorted(by_level.items(), key=lambda kv: int(kv[0]))
        },
        "by_position": {
            pos: _rates(tally) for pos, tally in sorted(by_position.items(), key=lambda kv: int(kv[0]))
        },
    }
    return report


def random_baselines(trials: int = 0, seed: int = 0) -> dict:
    """Chance-level paired accuracy.

    Analytic values: a uniform guesser hits each half with probability
    1/5, so pairs succeed at 1/25. A polarity-aware guesser flips a coin
    between "Yes" and "No" and then picks uniformly within that side: the
    positive half succeeds at 1/2, the negative half at 1/2 * 1/4, so
    pairs succeed at 1/16. With trials > 0 a Monte Carlo estimate of both
    is added under "monte_carlo".
    """
    out = {"uniform": 1.0 / 25.0, "polarity_aware": 1.0 / 16.0}
    if trials > 0:
        rng = np.random.default_rng(seed)
        pos_uniform = rng.integers(0, 5, trials) == 0
        neg_uniform = rng.integers(0, 5, trials) == 0
        uniform = float(np.mean(pos_uniform & neg_uniform))

        pos_yes = rng.random(trials) < 0.5
        neg_yes = rng.random(trials) < 0.5
        neg_pick = rng.integers(0, 4, trials) == 0
        aware = float(np.mean(pos_yes & (~neg_yes & neg_pick)))
        out["monte_carlo"] = {
            "trials": trials,
            "uniform": uniform,
            "polarity_aware": aware,
        }
    return out


def positional_bias_report(
    records: Sequence[EvalRecord], mcqs: Sequence[Mcq]
) -> dict:
    """Per-position paired accuracy over rotation groups.

    Every rotation group must contribute its three variants (negated
    position 0, 1, and 2) with answered pairs; anything else raises
    MissingRotation.
    """
    rec_by_id = {r.mcq_id: r for r in records}
    groups: dict[str, dict[int, tuple[Mcq, Mcq]]] = {}
    by_pair: dict[str, dict[str, Mcq]] = {}
    for mcq in mcqs:
        if mcq.rotation_group is None:
            continue
        by_pair.setdefault(mcq.pair_id, {})[mcq.polarity] = mcq
    for pair_id, halves in by_pair.items():
        if POSITIVE not in halves or NEGATIVE not in halves:
            raise MissingRotation(f"rotation pair {pair_id} is incomplete")
        neg = halves[NEGATIVE]
        groups.setdefault(neg.rotation_group, {})[neg.negated_position] = (
            halves[POSITIVE],
            neg,
        )

    position_scores: dict[int, list[int]] = {0: [], 1: [], 2: []}
    for group_id, variants in sorted(groups.items()):
        if sorted(variants) != [0, 1, 2]:
            raise MissingRotation(
                f"group {group_id} covers positions {sorted(variants)}, expected [0, 1, 2]"
            )
        for position, (pos_mcq, neg_mcq) in variants.items():
            pos_rec = rec_by_id.get(pos_mcq.mcq_id)
            neg_rec = rec_by_id.get(neg_mcq.mcq_id)
            if pos_rec is None or neg_rec is None:
                raise MissingRotation(
                    f"group {group_id} position {position} has unanswered questions"
                )
            position_scores[position].append(pos_rec.correct * neg_rec.correct)

    return {
        "n_groups": len(groups),
        "by_position": {
            str(pos): (sum(scores) / len(scores) if scores else 0.0)
            for pos, scores in position_scores.items()
        },
    }


# -- report files -------------------------------------------------------

def write_report_json(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def report_curves(report: dict) -> list[dict]:
    """Flatten a report into tidy rows for plotting: one row per
    (series, x) point. Series are settings (x = k), the granularity
    ladder (x = level), and negated positions (x = position)."""
    rows: list[dict] = []

    def row(series: str, x: int, block: dict) -> dict:
        return {
            "series": series,
            "x": x,
            "paired_accuracy": block.get("paired_accuracy", 0.0),
            "positive_accuracy": block.get("positive_accuracy", 0.0),
            "negative_accuracy": block.get("negative_accuracy", 0.0),
            "fp_rate": block.get("fp_rate", ""),
            "fn_rate": block.get("fn_rate", ""),
            "n_pairs": block.get("n_pairs", 0),
        }

    for setting, block in report.get("by_setting", {}).items():
        for k, sub in block.get("by_k", {}).items():
            rows.append(row(setting, int(k), sub))
    for level, block in report.get("by_granularity_level", {}).items():
        rows.append(row("granularity_level", int(level), block))
    for position, block in report.get("by_position", {}).items():
        rows.append(row("negated_position", int(position), block))
    return rows


def write_report_csv(report: dict, path: str) -> None:
    rows = report_curves(report)
    fields = [
        "series",
        "x",
        "paired_accuracy",
        "positive_accuracy",
        "negative_accuracy",
        "fp_rate",
        "fn_rate",
        "n_pairs",
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
