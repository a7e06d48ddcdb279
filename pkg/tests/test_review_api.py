"""Label store walk semantics and the review HTTP endpoints."""

import json

import pytest
from fastapi.testclient import TestClient

from finer.core import (
    OBJECT,
    AlreadyLabeled,
    BatchIncomplete,
    EntityId,
    LABEL_PRESENT,
    LABEL_VALID,
    Seed,
    UnknownTask,
    load_jsonl,
)
from finer.mcq_build import build_benchmark, build_multi_mcq_pair, pair_map
from finer.neg_gen import CALIBRATION_BATCH_SIZE, DiscriminatorResult
from finer.review import ReviewStore, create_app

from conftest import make_negsets, make_sg


def _mis(result_id, entropy, index=0):
    return DiscriminatorResult(
        result_id=result_id,
        target=EntityId(OBJECT, "img-t1", index),
        image_uri="fixture://img-t1.png",
        options=("pos", f"cand-{result_id}", "n2", "n3", "n4"),
        option_order=(0, 1, 2, 3, 4),
        probs=(0.2, 0.2, 0.2, 0.2, 0.2),
        predicted=1,
        correct=False,
        entropy_nats=entropy,
        round=1,
    )


def _correct(result_id, entropy):
    return DiscriminatorResult(
        result_id=result_id,
        target=EntityId(OBJECT, "img-t1", 0),
        image_uri="fixture://img-t1.png",
        options=("pos", "n1", "n2", "n3", "n4"),
        option_order=(0, 1, 2, 3, 4),
        probs=(0.6, 0.1, 0.1, 0.1, 0.1),
        predicted=0,
        correct=True,
        entropy_nats=entropy,
        round=1,
    )


def _results(n_mis=23):
    # ascending entropies 0.05, 0.10, ... plus two correct results the
    # store must ignore
    out = [_mis(f"m{i:03d}", 0.05 * (i + 1)) for i in range(n_mis)]
    out.append(_correct("ok-1", 0.3))
    out.append(_correct("ok-2", 1.1))
    return out


@pytest.fixture
def store(tmp_path):
    return ReviewStore(_results(), tmp_path / "labels.jsonl")


def _label_batch(store, batch, label=LABEL_VALID):
    for task in batch:
        store.submit_label(task.result_id, label, reviewer_id="r1")


class TestStoreWalk:
    def test_batches_ascending_entropy(self, store):
        batches = store.batches()
        assert [len(b) for b in batches] == [10, 10, 3]
        flat = [t.result_id for batch in batches for t in batch]
        assert flat == [f"m{i:03d}" for i in range(23)]
        assert [b[0].batch_index for b in batches] == [0, 1, 2]

    def test_correct_results_excluded(self, store):
        ids = {t.result_id for batch in store.batches() for t in batch}
        assert "ok-1" not in ids and "ok-2" not in ids
        with pytest.raises(UnknownTask):
            store.submit_label("ok-1", LABEL_VALID)

    def test_task_payload_surfaces(self, store):
        task = store.next_batch()[0]
        assert task.result_id == "m000"
        assert task.positive == "pos"
        assert task.candidate == "cand-m000"
        assert task.label is None

    def test_walk_advances_after_full_batch(self, store):
        first = store.next_batch()
        assert [t.result_id for t in first] == [f"m{i:03d}" for i in range(10)]
        _label_batch(store, first)
        second = store.next_batch()
        assert [t.result_id for t in second] == [f"m{i:03d}" for i in range(10, 20)]

    def test_partial_batch_blocks_walk(self, store):
        store.submit_label("m000", LABEL_VALID)
        with pytest.raises(BatchIncomplete, match="m001"):
            store.next_batch()

    def test_resume_returns_partial_batch(self, store):
        store.submit_label("m000", LABEL_PRESENT)
        batch = store.next_batch(resume=True)
        assert [t.result_id for t in batch] == [f"m{i:03d}" for i in range(10)]
        assert batch[0].label == LABEL_PRESENT
        assert batch[1].label is None

    def test_empty_when_all_labeled(self, store):
        for batch in store.batches():
            _label_batch(store, batch)
        assert store.next_batch() == []

    def test_unknown_label_rejected(self, store):
        with pytest.raises(ValueError, match="unknown label"):
            store.submit_label("m000", "looks_fine")

    def test_relabel_needs_override(self, store):
        store.submit_label("m000", LABEL_VALID)
        with pytest.raises(AlreadyLabeled, match="m000"):
            store.submit_label("m000", LABEL_PRESENT)
        store.submit_label("m000", LABEL_PRESENT, override=True)
        assert store.next_batch(resume=True)[0].label == LABEL_PRESENT

    def test_log_is_append_only_newest_wins(self, store, tmp_path):
        store.submit_label("m000", LABEL_VALID, reviewer_id="r1")
        store.submit_label("m000", LABEL_PRESENT, reviewer_id="r2", override=True)
        log = load_jsonl(store.labels_path, "labels.v1")
        assert [rec.label for rec in log if rec.result_id == "m000"] == [
            LABEL_VALID,
            LABEL_PRESENT,
        ]
        reloaded = ReviewStore(_results(), store.labels_path)
        assert reloaded.next_batch(resume=True)[0].label == LABEL_PRESENT

    def test_labels_persist_across_stores(self, store):
        _label_batch(store, store.next_batch())
        reloaded = ReviewStore(_results(), store.labels_path)
        assert [t.result_id for t in reloaded.next_batch()] == [
            f"m{i:03d}" for i in range(10, 20)
        ]

    def test_batch_size_validated(self, tmp_path):
        with pytest.raises(ValueError, match="batch_size"):
            ReviewStore(_results(), tmp_path / "l.jsonl", batch_size=0)

    def test_default_batch_size(self, store):
        assert store.batch_size == CALIBRATION_BATCH_SIZE == 10


class TestCalibrationStatus:
    def test_initial_status(self, store):
        status = store.calibration_status()
        assert status["total_misclassified"] == 23
        assert status["labeled"] == 0
        assert status["remaining"] == 23
        assert status["theta"] is None
        assert status["complete"] is False
        assert [row["size"] for row in status["batches"]] == [10, 10, 3]
        assert all(row["clean"] is False for row in status["batches"])

    def test_clean_first_batch_sets_theta(self, store):
        _label_batch(store, store.next_batch(), LABEL_VALID)
        status = store.calibration_status()
        # walk stops at the first clean batch; theta is its last entropy
        assert status["theta"] == pytest.approx(0.5)
        assert status["batches"][0]["clean"] is True
        assert status["complete"] is False

    def test_dirty_batch_keeps_walking(self, store):
        batch = store.next_batch()
        for task in batch[:-1]:
            store.submit_label(task.result_id, LABEL_VALID)
        store.submit_label(batch[-1].result_id, LABEL_PRESENT)
        status = store.calibration_status()
        assert status["batches"][0]["complete"] is True
        assert status["batches"][0]["clean"] is False
        assert status["theta"] is None  # next batch still unjudged

    def test_no_clean_batch_uses_max_entropy(self, store):
        for batch in store.batches():
            for i, task in enumerate(batch):
                label = LABEL_PRESENT if i == 0 else LABEL_VALID
                store.submit_label(task.result_id, label)
        status = store.calibration_status()
        assert status["complete"] is True
        assert status["theta"] == pytest.approx(0.05 * 23)


@pytest.fixture
def benchmark():
    sg = make_sg()
    negsets = make_negsets(sg)
    return build_benchmark([sg], negsets, Seed(21), ks=(2, 3))


@pytest.fixture
def api(tmp_path, benchmark):
    store = ReviewStore(_results(), tmp_path / "labels.jsonl")
    survey_dir = tmp_path / "survey"
    app = create_app(store, mcqs=benchmark, survey_dir=survey_dir)
    return TestClient(app), store, survey_dir


class TestHttpApi:
    def test_next_batch_and_labeling_flow(self, api):
        client, _, _ = api
        reply = client.get("/batches/next")
        assert reply.status_code == 200
        payload = reply.json()
        assert payload["batch_index"] == 0
        assert len(payload["tasks"]) == 10
        assert payload["complete"] is False
        assert payload["status"]["labeled"] == 0

        for task in payload["tasks"]:
            posted = client.post(
                "/labels",
                json={
                    "result_id": task["result_id"],
                    "label": LABEL_VALID,
                    "reviewer_id": "r9",
                },
            )
            assert posted.status_code == 200
        final = posted.json()
        assert final["label"]["result_id"] == "m009"
        assert final["status"]["theta"] == pytest.approx(0.5)

        following = client.get("/batches/next").json()
        assert following["batch_index"] == 1

    def test_partial_batch_conflicts_unless_resumed(self, api):
        client, _, _ = api
        client.post("/labels", json={"result_id": "m000", "label": LABEL_VALID})
        blocked = client.get("/batches/next")
        assert blocked.status_code == 409
        assert "m001" in blocked.json()["detail"]
        resumed = client.get("/batches/next", params={"resume": "true"})
        assert resumed.status_code == 200
        assert resumed.json()["batch_index"] == 0

    def test_invalid_label_is_422(self, api):
        client, _, _ = api
        reply = client.post("/labels", json={"result_id": "m000", "label": "meh"})
        assert reply.status_code == 422

    def test_unknown_task_is_404(self, api):
        client, _, _ = api
        reply = client.post(
            "/labels", json={"result_id": "ghost", "label": LABEL_VALID}
        )
        assert reply.status_code == 404

    def test_relabel_conflict_and_override(self, api):
        client, _, _ = api
        client.post("/labels", json={"result_id": "m000", "label": LABEL_VALID})
        repeat = client.post(
            "/labels", json={"result_id": "m000", "label": LABEL_PRESENT}
        )
        assert repeat.status_code == 409
        forced = client.post(
            "/labels",
            json={"result_id": "m000", "label": LABEL_PRESENT, "override": True},
        )
        assert forced.status_code == 200

    def test_status_endpoint(self, api):
        client, _, _ = api
        reply = client.get("/calibration/status")
        assert reply.status_code == 200
        assert reply.json()["total_misclassified"] == 23

    def test_survey_export_writes_files(self, api, benchmark):
        client, _, survey_dir = api
        reply = client.post("/survey/export", json={"seed": 3})
        assert reply.status_code == 200
        payload = reply.json()
        pairs = pair_map(benchmark)
        assert payload["questions_per_version"] == len(pairs)

        version_a = json.loads((survey_dir / "survey_version_a.json").read_text())
        version_b = json.loads((survey_dir / "survey_version_b.json").read_text())
        key = json.loads((survey_dir / "survey_answer_key.json").read_text())
        assert len(version_a) == len(version_b) == len(pairs)
        for entry in version_a + version_b:
            assert set(entry) == {"survey_id", "image_uri", "question", "options"}
        polarity_a = {
            key[q["survey_id"]]["pair_id"]: key[q["survey_id"]]["polarity"]
            for q in version_a
        }
        for q in version_b:
            info = key[q["survey_id"]]
            assert info["polarity"] != polarity_a[info["pair_id"]]

    def test_survey_export_without_questions_is_404(self, tmp_path):
        store = ReviewStore(_results(), tmp_path / "labels.jsonl")
        client = TestClient(create_app(store))
        assert client.post("/survey/export", json={"seed": 1}).status_code == 404

    def test_survey_export_orphan_is_409(self, tmp_path):
        sg = make_sg()
        negsets = make_negsets(sg)
        pos, _ = build_multi_mcq_pair(sg, negsets, OBJECT, 2, Seed(22))
        store = ReviewStore(_results(), tmp_path / "labels.jsonl")
        app = create_app(store, mcqs=[pos], survey_dir=tmp_path / "survey")
        client = TestClient(app)
        assert client.post("/survey/export", json={"seed": 1}).status_code == 409
