"""Chat client for OpenAI-compatible endpoints with record/replay.

complete() sends one chat request (with retries and exponential backoff)
and consults the cache first; in replay mode a cache miss is an error, so
whole pipelines can run offline from recorded transcripts. choice_probs()
turns a five-option question into a probability vector, preferring the
endpoint's first-answer-token scores and falling back to sampled voting.
"""

from __future__ import annotations

import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx

from ..core.errors import (
    CacheMiss,
    ConfigError,
    DistributionUnavailable,
    EndpointError,
    WrongArity,
)
from .cache import ResponseCache, request_key
from .config import EndpointConfig

LETTERS = "ABCDE"

MODE_RECORD = "record"
MODE_REPLAY = "replay"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    image_uri: Optional[str] = None

    def to_wire(self) -> dict:
        if self.image_uri is None:
            return {"role": self.role, "content": self.text}
        return {
            "role": self.role,
            "content": [
                {"type": "image_url", "image_url": {"url": self.image_uri}},
                {"type": "text", "text": self.text},
            ],
        }

    def to_key(self) -> dict:
        rec = {"role": self.role, "text": self.text}
        if self.image_uri is not None:
            rec["image_uri"] = self.image_uri
        return rec


@dataclass(frozen=True)
class ChatRequest:
    endpoint_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 256
    want_choice_distribution: bool = False
    n_samples: int = 1

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")

    def cache_key(self) -> str:
        return request_key(
            self.endpoint_id,
            [m.to_key() for m in self.messages],
            self.temperature,
            self.max_tokens,
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    choice_distribution: Optional[tuple[tuple[str, float], ...]] = None
    cached: bool = False
    samples: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.choice_distribution is not None:
            total = sum(p for _, p in self.choice_distribution)
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"choice distribution sums to {total}")


def render_mcq_prompt(question: str, options: Sequence[str]) -> str:
    """Render a five-option question in the evaluation prompt format."""
    lines = [question]
    for letter, option in zip(LETTERS, options):
        lines.append(f"{letter}. {option}")
    lines.append("Please answer with a single capital letter (A, B, C, D, or E).")
    return "\n".join(lines)


def _letter_from_token(token: str) -> Optional[str]:
    stripped = token.strip().strip(string.punctuation).upper()
    if len(stripped) == 1 and stripped in LETTERS:
        return stripped
    return None


_ANSWER_RE = re.compile(r"\b([A-E])\b")


def parse_answer_letter(text: str) -> Optional[str]:
    """First standalone A-E token after case folding, else None."""
    match = _ANSWER_RE.search(text.upper())
    return match.group(1) if match else None


class ChatClient:
    """Cached, retrying client over a set of configured endpoints.

    mode "record" calls out on a miss and stores the response; mode
    "replay" never calls out and raises CacheMiss instead. The injectable
    http client and sleep function keep tests hermetic.
    """

    def __init__(
        self,
        endpoints: dict[str, EndpointConfig],
        cache: ResponseCache,
        mode: str = MODE_RECORD,
        http: Optional[httpx.Client] = None,
        max_retries: int = 4,
        backoff_base: float = 0.25,
        backoff_cap: float = 8.0,
        parallelism: int = 8,
        sleep=time.sleep,
        timeout: float = 120.0,
    ):
        if mode not in (MODE_RECORD, MODE_REPLAY):
            raise ConfigError(f"unknown client mode: {mode!r}")
        self.endpoints = dict(endpoints)
        self.cache = cache
        self.mode = mode
        self._http = http
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.parallelism = max(1, parallelism)
        self._sleep = sleep
        self._timeout = timeout

    def _endpoint(self, endpoint_id: str) -> EndpointConfig:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise ConfigError(f"unknown endpoint id: {endpoint_id!r}") from None

    # -- wire ------------------------------------------------------------

    def _http_client(self) -> httpx.Client:
        if self._http is None:
            self._http = httpx.Client(timeout=self._timeout)
        return self._http

    def _call_endpoint(self, request: ChatRequest) -> dict:
        """One live call with retries; returns the normalized cache record."""
        cfg = self._endpoint(request.endpoint_id)
        body = {
            "model": cfg.model or cfg.id,
            "messages": [m.to_wire() for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.n_samples > 1:
            body["n"] = request.n_samples
        if request.want_choice_distribution:
            body["logprobs"] = True
            body["top_logprobs"] = 20
        headers = {}
        key = cfg.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = f"{cfg.base_url}/chat/completions"

        last_error = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                delay = min(self.backoff_cap, self.backoff_base * (2 ** (attempt - 1)))
                self._sleep(delay)
            try:
                resp = self._http_client().post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = f"transport error: {exc}"
                continue
            if resp.status_code == 200:
                try:
                    return _normalize_wire_response(resp.json())
                except (KeyError, IndexError, TypeError, ValueError) as exc:
                    raise EndpointError(
                        f"{request.endpoint_id}: unreadable response body: {exc}"
                    ) from exc
            if resp.status_code in (429,) or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            raise EndpointError(
                f"{request.endpoint_id}: HTTP {resp.status_code}: {resp.text[:200]}"
            )
        raise EndpointError(
            f"{request.endpoint_id}: giving up after "
            f"{self.max_retries + 1} attempts ({last_error})"
        )

    # -- cache + completion ---------------------------------------------

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        record = self.cache.get(key)
        if record is not None and not _record_serves(record, request):
            # present but unusable for this request shape
            self.cache.count_extra_miss()
            record = None
        cached = record is not None
        if record is None:
            if self.mode == MODE_REPLAY:
                raise CacheMiss(
                    f"replay mode has no cached response for key {key} "
                    f"(endpoint {request.endpoint_id})"
                )
            record = self._call_endpoint(request)
            self.cache.put(key, record)
        return _response_from_record(record, request, cached=cached)

    def complete_many(self, requests: Sequence[ChatRequest]) -> list[ChatResponse]:
        """Run requests with bounded parallelism; results in input order."""
        if not requests:
            return []
        if len(requests) == 1 or self.parallelism == 1:
            return [self.complete(r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            return list(pool.map(self.complete, requests))

    # -- option distributions -------------------------------------------

    def choice_probs(
        self,
        endpoint_id: str,
        image_uri: Optional[str],
        question: str,
        options: Sequence[str],
        n_samples: int = 32,
    ) -> list[float]:
        """Probability over five options, ordered as given.

        Uses first-answer-token scores when the endpoint supports them,
        otherwise votes over n_samples temperature-1 samples. The vector
        is renormalized to sum to 1.
        """
        if len(options) != len(LETTERS):
            raise WrongArity(f"need exactly {len(LETTERS)} options, got {len(options)}")
        cfg = self._endpoint(endpoint_id)
        prompt = render_mcq_prompt(question, options)
        if cfg.supports_token_scores:
            request = ChatRequest(
                endpoint_id=endpoint_id,
                messages=(ChatMessage("user", prompt, image_uri),),
                temperature=0.0,
                max_tokens=3,
                want_choice_distribution=True,
            )
            response = self.complete(request)
            if response.choice_distribution is None:
                raise DistributionUnavailable(
                    f"{endpoint_id}: no letter mass in token scores"
                )
            probs = dict(response.choice_distribution)
            return [probs.get(letter, 0.0) for letter in LETTERS]
        # sampling fallback: one request carrying all samples so the cache
        # key (which excludes n) cannot collapse distinct draws
        request = ChatRequest(
            endpoint_id=endpoint_id,
            messages=(ChatMessage("user", prompt, image_uri),),
            temperature=1.0,
            max_tokens=3,
            n_samples=n_samples,
        )
        response = self.complete(request)
        votes = [0] * len(LETTERS)
        for sample in response.samples:
            letter = parse_answer_letter(sample)
            if letter is not None:
                votes[LETTERS.index(letter)] += 1
        total = sum(votes)
        if total == 0:
            raise DistributionUnavailable(
                f"{endpoint_id}: none of {len(response.samples)} samples parsed"
            )
        return [v / total for v in votes]


def _normalize_wire_response(data: dict) -> dict:
    """Reduce an OpenAI-style response body to the cached record form."""
    choices = data["choices"]
    samples = []
    for choice in choices:
        message = choice.get("message", {})
        content = message.get("content") or ""
        if isinstance(content, list):
            content = "".join(
                part.get("text", "") for part in content if isinstance(part, dict)
            )
        samples.append(content)
    record: dict = {"samples": samples}
    logprobs = choices[0].get("logprobs") if choices else None
    if logprobs and logprobs.get("content"):
        first = logprobs["content"][0]
        top = first.get("top_logprobs", [])
        record["top_logprobs"] = [
            {"token": t["token"], "logprob": t["logprob"]} for t in top
        ]
    return record


def _record_serves(record: dict, request: ChatRequest) -> bool:
    if len(record.get("samples", [])) < request.n_samples:
        return False
    if request.want_choice_distribution and "top_logprobs" not in record:
        return False
    return True


def _letter_distribution(record: dict) -> Optional[tuple[tuple[str, float], ...]]:
    import math

    mass: dict[str, float] = {letter: 0.0 for letter in LETTERS}
    for entry in record.get("top_logprobs", []):
        letter = _letter_from_token(entry["token"])
        if letter is not None:
            mass[letter] += math.exp(entry["logprob"])
    total = sum(mass.values())
    if total <= 0.0:
        return None
    return tuple((letter, mass[letter] / total) for letter in LETTERS)


def _response_from_record(
    record: dict, request: ChatRequest, cached: bool
) -> ChatResponse:
    samples = tuple(record.get("samples", []))[: max(request.n_samples, 1)]
    text = samples[0] if samples else ""
    distribution = None
    if request.want_choice_distribution:
        distribution = _letter_distribution(record)
    return ChatResponse(
        text=text,
        choice_distribution=distribution,
        cached=cached,
        samples=samples,
    )
