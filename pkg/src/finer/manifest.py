"""Run manifests: one provenance record per pipeline invocation.

A manifest pins everything needed to reproduce or audit a run — the
subcommand, the config hash, the seed, content digests of every input and
output file, the endpoints touched, and the cache counters (a replay run
must show zero misses). Wall time is informational; manifests are the one
output whose bytes legitimately vary between otherwise identical runs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

MANIFEST_NAME = "run_manifest.json"


def file_digest(path) -> str:
    """sha256 hex digest of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    seed: int
    replay: bool
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    endpoints: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def to_record(self) -> dict:
        return {
            "schema": "run_manifest.v1",
            "subcommand": self.subcommand,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "replay": self.replay,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "endpoints": sorted(self.endpoints),
            "cache": dict(self.cache),
            "wall_time_s": self.wall_time_s,
        }

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        tmp = Path(f"{path}.tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_record(), fh, ensure_ascii=False, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @staticmethod
    def load(path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec.get("schema") != "run_manifest.v1":
            raise ValueError(f"{path}: not a run manifest")
        return RunManifest(
            subcommand=rec["subcommand"],
            config_hash=rec["config_hash"],
            seed=rec["seed"],
            replay=rec["replay"],
            inputs=rec["inputs"],
            outputs=rec["outputs"],
            endpoints=rec["endpoints"],
            cache=rec["cache"],
            wall_time_s=rec["wall_time_s"],
        )
