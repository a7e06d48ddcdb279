"""Endpoint and run configuration.

One JSON config file declares the chat endpoints plus pipeline settings.
API keys are never stored in the file; each endpoint names the environment
variable holding its key and the key is read at call time.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from ..core.errors import ConfigError


@dataclass(frozen=True)
class EndpointConfig:
    """One OpenAI-compatible chat-completions endpoint."""

    id: str
    base_url: str
    api_key_env_var: str
    supports_token_scores: bool
    model: str = ""

    def api_key(self) -> str:
        return os.environ.get(self.api_key_env_var, "")


@dataclass(frozen=True)
class AppConfig:
    version: int
    endpoints: dict[str, EndpointConfig]
    policy: dict = field(default_factory=dict)
    cache_dir: str = ".finer-cache"
    parallelism: int = 8
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def parse_config(raw: dict, source: str = "<config>") -> AppConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: config root must be an object")
    version = raw.get("version", 1)
    endpoints: dict[str, EndpointConfig] = {}
    for i, block in enumerate(raw.get("endpoints", [])):
        if not isinstance(block, dict):
            raise ConfigError(f"{source}: endpoints[{i}] must be an object")
        if "api_key" in block:
            # keys live in the environment, never on disk
            raise ConfigError(
                f"{source}: endpoints[{i}] stores an api_key; "
                "declare api_key_env_var instead"
            )
        try:
            ep = EndpointConfig(
                id=block["id"],
                base_url=str(block["base_url"]).rstrip("/"),
                api_key_env_var=block.get("api_key_env_var", ""),
                supports_token_scores=bool(block.get("supports_token_scores", False)),
                model=block.get("model", ""),
            )
        except KeyError as exc:
            raise ConfigError(f"{source}: endpoints[{i}] missing {exc}") from exc
        if ep.id in endpoints:
            raise ConfigError(f"{source}: duplicate endpoint id {ep.id!r}")
        endpoints[ep.id] = ep
    parallelism = int(raw.get("parallelism", 8))
    if parallelism < 1:
        raise ConfigError(f"{source}: parallelism must be >= 1")
    return AppConfig(
        version=int(version),
        endpoints=endpoints,
        policy=dict(raw.get("policy", {})),
        cache_dir=str(raw.get("cache_dir", ".finer-cache")),
        parallelism=parallelism,
        raw=raw,
    )


def load_config(path: str | os.PathLike) -> AppConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, source=str(path))
