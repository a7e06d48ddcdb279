from .cache import CacheStats, ResponseCache, request_key
from .chat import (
    LETTERS,
    MODE_RECORD,
    MODE_REPLAY,
    ChatClient,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    parse_answer_letter,
    render_mcq_prompt,
)
from .config import AppConfig, EndpointConfig, config_hash, load_config, parse_config

__all__ = [
    "AppConfig",
    "CacheStats",
    "ChatClient",
    "ChatMessage",
    "ChatRequest",
    "ChatResponse",
    "EndpointConfig",
    "LETTERS",
    "MODE_RECORD",
    "MODE_REPLAY",
    "ResponseCache",
    "config_hash",
    "load_config",
    "parse_config",
    "parse_answer_letter",
    "render_mcq_prompt",
    "request_key",
]
