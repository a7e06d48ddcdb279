"""Versioned prompt templates shipped with the package."""

from __future__ import annotations

import json
import re
from importlib import resources

from .client import ChatClient, ChatMessage, ChatRequest
from .core.errors import UnparseableLlmOutput


def load_template(name: str) -> str:
    """Read a prompt template (for example "negatives_object.v1") from the
    package's prompts directory."""
    path = resources.files("finer") / "prompts" / f"{name}.txt"
    return path.read_text(encoding="utf-8")


_JSON_BLOCK_RE = re.compile(r"(\[.*\]|\{.*\})", re.DOTALL)


def parse_json_reply(text: str, where: str = "endpoint reply"):
    """Parse a JSON value out of a chat reply.

    Tolerates code fences and prose around the value; raises
    UnparseableLlmOutput when no JSON parses.
    """
    candidate = text.strip()
    if candidate.startswith("```"):
        candidate = re.sub(r"^```[a-zA-Z]*\n?", "", candidate)
        candidate = re.sub(r"\n?```$", "", candidate.strip())
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        pass
    match = _JSON_BLOCK_RE.search(candidate)
    if match:
        try:
            return json.loads(match.group(1))
        except json.JSONDecodeError:
            pass
    raise UnparseableLlmOutput(f"{where}: no JSON value found in: {text[:200]!r}")


def structured_reply(
    client: ChatClient,
    endpoint_id: str,
    prompt: str,
    where: str,
    max_tokens: int = 1024,
):
    """One structured endpoint call with a single corrective reprompt.

    The reprompt extends the conversation (so record/replay keys stay
    distinct); a second unparseable reply propagates UnparseableLlmOutput.
    """
    messages = [ChatMessage("user", prompt)]
    response = client.complete(
        ChatRequest(
            endpoint_id=endpoint_id,
            messages=tuple(messages),
            temperature=0.0,
            max_tokens=max_tokens,
        )
    )
    try:
        return parse_json_reply(response.text, where)
    except UnparseableLlmOutput:
        pass
    messages.append(ChatMessage("assistant", response.text))
    messages.append(
        ChatMessage(
            "user",
            "That reply was not valid JSON. Reply again with only the JSON "
            "value in the requested shape.",
        )
    )
    response = client.complete(
        ChatRequest(
            endpoint_id=endpoint_id,
            messages=tuple(messages),
            temperature=0.0,
            max_tokens=max_tokens,
        )
    )
    return parse_json_reply(response.text, where)
