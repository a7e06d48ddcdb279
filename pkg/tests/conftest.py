"""Shared builders: a deterministic scene graph, canned negative sets,
and scripted chat endpoints over httpx's mock transport."""

from __future__ import annotations

import json
import math
from typing import Callable, Optional

import httpx
import pytest

from finer.client import (
    ChatClient,
    EndpointConfig,
    MODE_RECORD,
    ResponseCache,
)
from finer.core import (
    ATTRIBUTE,
    EntityId,
    NegativeSet,
    OBJECT,
    RELATION,
    SceneGraph,
    SgAttribute,
    SgObject,
    SgRelation,
    entity_positive,
)

# -- scene graph --------------------------------------------------------


def make_sg(image_id: str = "img-t1") -> SceneGraph:
    """Three objects, three attributes, two relations; enough for every
    builder (k=2 and k=3 over objects/attributes, k=2 over relations)."""

    def oid(i):
        return EntityId(OBJECT, image_id, i)

    def aid(i):
        return EntityId(ATTRIBUTE, image_id, i)

    def rid(i):
        return EntityId(RELATION, image_id, i)

    sg = SceneGraph(
        image_id=image_id,
        image_uri=f"fixture://{image_id}.png",
        objects=(
            SgObject(oid(0), "cat"),
            SgObject(oid(1), "desk"),
            SgObject(oid(2), "bookshelf"),
        ),
        attributes=(
            SgAttribute(aid(0), oid(0), "with a black color"),
            SgAttribute(aid(1), oid(1), "with a wooden surface"),
            SgAttribute(aid(2), oid(2), "with a tall frame"),
        ),
        relations=(
            SgRelation(rid(0), oid(0), "is lying on", oid(1), "src"),
            SgRelation(rid(1), oid(2), "stands behind", oid(1), "src"),
        ),
    )
    sg.validate()
    return sg


def make_negsets(sg: SceneGraph) -> dict[str, NegativeSet]:
    """One synthetic negative set per entity, keyed like negsets_by_key."""
    out: dict[str, NegativeSet] = {}
    for kind, seq in (
        (OBJECT, sg.objects),
        (ATTRIBUTE, sg.attributes),
        (RELATION, sg.relations),
    ):
        for entity in seq:
            target = entity.id
            negatives = tuple(
                f"{kind[:3]}{target.index} alt {j}" for j in range(4)
            )
            out[target.key] = NegativeSet(
                target=target,
                positive=entity_positive(sg, target),
                negatives=negatives,
            )
    return out


@pytest.fixture
def sg() -> SceneGraph:
    return make_sg()


@pytest.fixture
def negsets(sg) -> dict[str, NegativeSet]:
    return make_negsets(sg)


# -- scripted endpoints -------------------------------------------------


def openai_body(
    content: str,
    top_logprobs: Optional[list[tuple[str, float]]] = None,
    samples: Optional[list[str]] = None,
) -> dict:
    """A chat-completions response body; top_logprobs are (token, prob)."""
    texts = samples if samples is not None else [content]
    choices = []
    for i, text in enumerate(texts):
        choice = {"index": i, "message": {"role": "assistant", "content": text}}
        if top_logprobs is not None:
            choice["logprobs"] = {
                "content": [
                    {
                        "token": text,
                        "logprob": 0.0,
                        "top_logprobs": [
                            {"token": tok, "logprob": math.log(p)}
                            for tok, p in top_logprobs
                        ],
                    }
                ]
            }
        choices.append(choice)
    return {"choices": choices}


def make_client(
    tmp_path,
    handler: Callable[[dict], dict],
    mode: str = MODE_RECORD,
    token_scores: bool = False,
    endpoint_ids: tuple[str, ...] = ("ep",),
    **kwargs,
) -> ChatClient:
    """Client whose every endpoint is served by `handler(body) -> body`."""

    def transport_handler(request: httpx.Request) -> httpx.Response:
        payload = handler(json.loads(request.content))
        if isinstance(payload, httpx.Response):
            return payload
        return httpx.Response(200, json=payload)

    endpoints = {
        endpoint_id: EndpointConfig(
            id=endpoint_id,
            base_url="http://scripted.test/v1",
            api_key_env_var="FINER_TEST_KEY",
            supports_token_scores=token_scores,
        )
        for endpoint_id in endpoint_ids
    }
    kwargs.setdefault("max_retries", 1)
    kwargs.setdefault("sleep", lambda s: None)
    return ChatClient(
        endpoints=endpoints,
        cache=ResponseCache(str(tmp_path / "cache")),
        mode=mode,
        http=httpx.Client(transport=httpx.MockTransport(transport_handler)),
        **kwargs,
    )


def prompt_text(body: dict) -> str:
    """Text of the last user message in a wire body."""
    content = body["messages"][-1]["content"]
    if isinstance(content, list):
        return next(p["text"] for p in content if p["type"] == "text")
    return content
