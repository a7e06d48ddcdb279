"""HTTP JSON API for review sessions.

Four endpoints back the label-review frontend: fetch the next batch,
submit one label, inspect calibration progress, and export the two-version
human-study survey. The API is append-only over labels and never mutates
negative sets or questions.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel

from ..core import (
    AlreadyLabeled,
    BatchIncomplete,
    LABEL_PRESENT,
    LABEL_VALID,
    OrphanPair,
    Seed,
    UnknownTask,
)
from ..mcq_build import Mcq, export_survey
from .store import ReviewStore


class LabelSubmission(BaseModel):
    result_id: str
    label: str
    reviewer_id: str = ""
    override: bool = False


class SurveyRequest(BaseModel):
    seed: int = 0


def _atomic_write_json(path: Path, payload) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    tmp.replace(path)


def create_app(
    store: ReviewStore,
    mcqs: Optional[Sequence[Mcq]] = None,
    survey_dir: Optional[Path] = None,
) -> FastAPI:
    """Wire the review endpoints around one store.

    Survey export is available only when the serving command supplied a
    question file; without one the endpoint answers 404.
    """
    app = FastAPI(title="finer review", docs_url=None, redoc_url=None)

    @app.get("/batches/next")
    def batches_next(resume: bool = Query(default=False)):
        try:
            batch = store.next_batch(resume=resume)
        except BatchIncomplete as err:
            raise HTTPException(status_code=409, detail=str(err))
        status = store.calibration_status()
        return {
            "batch_index": batch[0].batch_index if batch else None,
            "tasks": [task.to_payload() for task in batch],
            "complete": status["complete"],
            "status": status,
        }

    @app.post("/labels")
    def submit_label(submission: LabelSubmission):
        if submission.label not in (LABEL_VALID, LABEL_PRESENT):
            raise HTTPException(
                status_code=422,
                detail=f"label must be {LABEL_VALID!r} or {LABEL_PRESENT!r}",
            )
        try:
            record = store.submit_label(
                result_id=submission.result_id,
                label=submission.label,
                reviewer_id=submission.reviewer_id,
                override=submission.override,
            )
        except UnknownTask as err:
            raise HTTPException(status_code=404, detail=str(err))
        except AlreadyLabeled as err:
            raise HTTPException(status_code=409, detail=str(err))
        return {"label": record.to_record(), "status": store.calibration_status()}

    @app.get("/calibration/status")
    def calibration_status():
        return store.calibration_status()

    @app.post("/survey/export")
    def survey_export(request: SurveyRequest):
        if mcqs is None or survey_dir is None:
            raise HTTPException(
                status_code=404, detail="no question file loaded for survey export"
            )
        try:
            survey = export_survey(mcqs, Seed(request.seed))
        except OrphanPair as err:
            raise HTTPException(status_code=409, detail=str(err))
        survey_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "version_a": survey_dir / "survey_version_a.json",
            "version_b": survey_dir / "survey_version_b.json",
            "answer_key": survey_dir / "survey_answer_key.json",
        }
        for name, path in paths.items():
            _atomic_write_json(path, survey[name])
        return {
            "files": {name: str(path) for name, path in paths.items()},
            "questions_per_version": len(survey["version_a"]),
        }

    return app
