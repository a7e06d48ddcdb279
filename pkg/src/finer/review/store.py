"""Label store for threshold-calibration review sessions.

Misclassified discriminator results are walked in ascending-entropy
batches of ten; an annotator labels each candidate negative as either a
valid negative or actually present in the image. Labels append to a
single labels.v1 log that threshold calibration consumes directly.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from ..core import (
    AlreadyLabeled,
    BatchIncomplete,
    InsufficientLabels,
    LABEL_PRESENT,
    LABEL_VALID,
    UnknownTask,
    dumps_record,
    load_jsonl,
)
from ..neg_gen import (
    CALIBRATION_BATCH_SIZE,
    DiscriminatorResult,
    LabelRecord,
    calibrate_threshold,
)


@dataclass(frozen=True)
class ReviewTask:
    """One misclassification awaiting (or holding) a human verdict."""

    result_id: str
    image_uri: str
    positive: str
    candidate: str
    entropy_nats: float
    batch_index: int
    label: Optional[str] = None
    reviewer_id: str = ""
    timestamp: str = ""

    def to_payload(self) -> dict:
        return {
            "result_id": self.result_id,
            "image_uri": self.image_uri,
            "positive": self.positive,
            "candidate": self.candidate,
            "entropy_nats": self.entropy_nats,
            "batch_index": self.batch_index,
            "label": self.label,
            "reviewer_id": self.reviewer_id,
            "timestamp": self.timestamp,
        }


class ReviewStore:
    """Single-writer, append-only label log over a fixed calibration run.

    The task list is frozen at construction (the misclassifications of
    one discriminator audit, ascending by entropy then result id);
    concurrent reviewers race optimistically and lose with AlreadyLabeled.
    """

    def __init__(
        self,
        results: Sequence[DiscriminatorResult],
        labels_path: Path,
        batch_size: int = CALIBRATION_BATCH_SIZE,
    ) -> None:
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self._results = list(results)
        self._mis = sorted(
            (r for r in self._results if not r.correct),
            key=lambda r: (r.entropy_nats, r.result_id),
        )
        self._by_id = {r.result_id: r for r in self._mis}
        self._batch_size = batch_size
        self._labels_path = Path(labels_path)
        self._labels: dict[str, LabelRecord] = {}
        self._lock = threading.Lock()
        if self._labels_path.exists():
            for rec in load_jsonl(self._labels_path, "labels.v1"):
                self._labels[rec.result_id] = rec

    @property
    def batch_size(self) -> int:
        return self._batch_size

    @property
    def labels_path(self) -> Path:
        return self._labels_path

    def _task(self, result: DiscriminatorResult, batch_index: int) -> ReviewTask:
        label = self._labels.get(result.result_id)
        return ReviewTask(
            result_id=result.result_id,
            image_uri=result.image_uri,
            positive=result.options[0],
            candidate=result.options[result.predicted],
            entropy_nats=result.entropy_nats,
            batch_index=batch_index,
            label=label.label if label else None,
            reviewer_id=label.reviewer_id if label else "",
            timestamp=label.timestamp if label else "",
        )

    def batches(self) -> list[list[ReviewTask]]:
        """All batches, labels merged in."""
        with self._lock:
            return [
                [
                    self._task(r, start // self._batch_size)
                    for r in self._mis[start : start + self._batch_size]
                ]
                for start in range(0, len(self._mis), self._batch_size)
            ]

    def next_batch(self, resume: bool = False) -> list[ReviewTask]:
        """The next fully unlabeled batch, in walk order.

        A batch that is only partly labeled blocks the walk: plain calls
        raise BatchIncomplete (listing what remains), while resume=True
        returns that batch again so an interrupted session can finish it.
        An empty list means every misclassification is labeled.
        """
        for batch in self.batches():
            unlabeled = [t for t in batch if t.label is None]
            if not unlabeled:
                continue
            if len(unlabeled) < len(batch) and not resume:
                raise BatchIncomplete(
                    f"batch {batch[0].batch_index} has "
                    f"{len(unlabeled)} unlabeled task(s): "
                    + ", ".join(t.result_id for t in unlabeled)
                )
            return batch
        return []

    def submit_label(
        self,
        result_id: str,
        label: str,
        reviewer_id: str = "",
        override: bool = False,
        timestamp: Optional[str] = None,
    ) -> LabelRecord:
        """Append one verdict to the label log.

        Relabeling an already-judged task requires override=True; the log
        keeps every submission (append-only) and later entries win on
        load.
        """
        if label not in (LABEL_VALID, LABEL_PRESENT):
            raise ValueError(f"unknown label: {label!r}")
        with self._lock:
            if result_id not in self._by_id:
                raise UnknownTask(f"no review task with result_id {result_id!r}")
            if result_id in self._labels and not override:
                raise AlreadyLabeled(
                    f"{result_id} already labeled "
                    f"{self._labels[result_id].label!r}; pass override to relabel"
                )
            record = LabelRecord(
                result_id=result_id,
                label=label,
                reviewer_id=reviewer_id,
                timestamp=timestamp
                if timestamp is not None
                else datetime.now(timezone.utc).isoformat(timespec="seconds"),
            )
            self._labels_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self._labels_path, "a", encoding="utf-8") as fh:
                fh.write(dumps_record(record.to_record()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._labels[result_id] = record
            return record

    def calibration_status(self) -> dict:
        """Walk progress plus the candidate threshold once it is decidable.

        theta appears as soon as the stopping rule resolves on the labels
        so far (a clean batch, or every batch judged); batches list the
        stopping-rule state the annotator is steering: clean means no
        actually-present negative was found among its tasks.
        """
        with self._lock:
            labels = list(self._labels.values())
            batch_rows = []
            for start in range(0, len(self._mis), self._batch_size):
                batch = self._mis[start : start + self._batch_size]
                judged = [
                    self._labels[r.result_id].label
                    for r in batch
                    if r.result_id in self._labels
                ]
                complete = len(judged) == len(batch)
                batch_rows.append(
                    {
                        "batch_index": start // self._batch_size,
                        "size": len(batch),
                        "labeled": len(judged),
                        "complete": complete,
                        "clean": complete
                        and all(v == LABEL_VALID for v in judged),
                    }
                )
        try:
            theta = calibrate_threshold(self._mis, labels, self._batch_size)
        except InsufficientLabels:
            theta = None
        labeled = sum(row["labeled"] for row in batch_rows)
        return {
            "total_misclassified": len(self._mis),
            "labeled": labeled,
            "remaining": len(self._mis) - labeled,
            "batch_size": self._batch_size,
            "batches": batch_rows,
            "theta": theta,
            "complete": labeled == len(self._mis),
        }
