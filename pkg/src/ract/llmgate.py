"""Chat-completion gateway and a deterministic mock ranking model.

The HTTP side speaks the widely supported ``/chat/completions`` wire
format. Tests never touch the network: they replay recorded transcripts
through :class:`TranscriptTransport`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .promptgen import PromptFormat, RenderedPrompt, render_order

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_TEMPERATURE = 0.7
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


class GatewayError(RuntimeError):
    pass


class Timeout(GatewayError):
    pass


class HttpStatus(GatewayError):
    def __init__(self, code: int, body: str):
        super().__init__(f"HTTP {code}: {body[:200]}")
        self.code = code
        self.body = body[:200]


class ExhaustedRetries(GatewayError):
    def __init__(self, attempts: int, last: BaseException):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class MissingApiKey(GatewayError):
    def __init__(self, env: str):
        super().__init__(f"environment variable {env} is not set")
        self.env = env


class UnknownDocid(KeyError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str = "RACT_API_KEY"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    timeout: float = 60.0
    max_retries: int = 3
    parallelism: int = 4

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _is_transient(code: int) -> bool:
    return code == 408 or code == 429 or code >= 500


class ChatGateway:
    """Thread-safe client for one endpoint.

    At most ``cfg.parallelism`` requests are in flight at once, across all
    threads sharing this gateway. Transient failures (timeouts, connection
    errors, 408/429/5xx) are retried up to ``cfg.max_retries`` times with
    exponential backoff plus jitter.
    """

    def __init__(
        self,
        cfg: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int | None = None,
    ):
        self.cfg = cfg
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise MissingApiKey(cfg.api_key_env)
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=cfg.timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(cfg.parallelism)
        self._sleep = sleep
        self._jitter = random.Random(jitter_seed)
        self._jitter_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> ChatGateway:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request_body(self, prompt: RenderedPrompt, temperature: float | None = None) -> dict:
        messages = []
        if prompt.system is not None:
            messages.append({"role": "system", "content": prompt.system})
        messages.append({"role": "user", "content": prompt.text})
        return {
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": self.cfg.temperature if temperature is None else temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }

    def _backoff(self, retry: int) -> float:
        with self._jitter_lock:
            jitter = self._jitter.uniform(0, BACKOFF_BASE)
        return BACKOFF_BASE * BACKOFF_FACTOR**retry + jitter

    def complete(self, prompt: RenderedPrompt, temperature: float | None = None) -> str:
        body = self.request_body(prompt, temperature)
        attempts = self.cfg.max_retries + 1
        last: BaseException | None = None
        for attempt in range(attempts):
            if attempt:
                delay = self._backoff(attempt - 1)
                logger.warning("retry %d/%d in %.2fs after: %s", attempt, self.cfg.max_retries, delay, last)
                self._sleep(delay)
            try:
                with self._slots:
                    resp = self._client.post("/chat/completions", json=body)
            except httpx.TimeoutException as e:
                last = Timeout(str(e) or "request timed out")
                continue
            except httpx.TransportError as e:
                last = GatewayError(f"transport error: {e}")
                continue
            if resp.status_code != 200:
                err = HttpStatus(resp.status_code, resp.text)
                if _is_transient(resp.status_code):
                    last = err
                    continue
                raise err
            if attempt:
                logger.info("request succeeded after %d retries", attempt)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise GatewayError(f"malformed completion response: {e}") from e
        assert last is not None
        raise ExhaustedRetries(attempts, last) from last


def chat_complete(
    cfg: EndpointConfig,
    prompt: RenderedPrompt,
    transport: httpx.BaseTransport | None = None,
    **kwargs,
) -> str:
    """One-shot completion; build a :class:`ChatGateway` to reuse connections."""
    with ChatGateway(cfg, transport=transport, **kwargs) as gw:
        return gw.complete(prompt)


# --- recorded transcripts ---


def load_transcript(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class TranscriptTransport(httpx.BaseTransport):
    """Replays recorded ``{"request", "response"}`` pairs in order.

    A recorded response is ``{"status": int, "body": object}`` or
    ``{"timeout": true}``. When a recorded request carries a ``"path"`` or
    ``"body"``, the live request must match it exactly. Every request seen is
    kept in ``self.seen`` for inspection.
    """

    def __init__(self, entries: Sequence[dict], cycle: bool = False):
        self.entries = list(entries)
        self.cycle = cycle
        self.seen: list[dict] = []
        self._pos = 0
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content.decode("utf-8"))
        with self._lock:
            self.seen.append(body)
            if self._pos >= len(self.entries):
                if not self.cycle:
                    raise AssertionError("transcript exhausted")
                self._pos = 0
            entry = self.entries[self._pos]
            self._pos += 1
        recorded = entry.get("request", {})
        if recorded.get("path") not in (None, request.url.path):
            raise AssertionError(f"request path {request.url.path} != recorded {recorded['path']}")
        expected = recorded.get("body")
        if expected is not None and expected != body:
            raise AssertionError(f"request differs from transcript: {body!r} != {expected!r}")
        resp = entry["response"]
        if resp.get("timeout"):
            raise httpx.ReadTimeout("recorded timeout", request=request)
        return httpx.Response(resp.get("status", 200), json=resp.get("body"), request=request)


def completion_body(text: str) -> dict:
    """Minimal chat-completions response object carrying ``text``."""
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


# --- mock model ---


@dataclass(frozen=True)
class MockOracleConfig:
    true_scores: Mapping[str, float]
    noise_stddev: float = 0.0
    malform_rate: float = 0.0
    format: PromptFormat = PromptFormat.COT_EXPLICIT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")
        if not 0.0 <= self.malform_rate <= 1.0:
            raise ValueError("malform_rate must lie in [0, 1]")
        object.__setattr__(self, "format", PromptFormat(self.format))


def _mock_rng(seed: int, prompt: RenderedPrompt, docids: Sequence[str]) -> np.random.Generator:
    h = hashlib.sha256()
    h.update(str(seed).encode())
    h.update(b"\0" + prompt.text.encode("utf-8"))
    for d in docids:
        h.update(b"\0" + d.encode("utf-8"))
    words = np.frombuffer(h.digest(), dtype="<u4").tolist()
    return np.random.default_rng(np.random.SeedSequence(words))


def mock_ranking(cfg: MockOracleConfig, prompt: RenderedPrompt, window_docids: Sequence[str]) -> tuple[list[int], bool]:
    """The index list the mock will emit, and whether it was malformed."""
    missing = [d for d in window_docids if d not in cfg.true_scores]
    if missing:
        raise UnknownDocid(missing[0])
    if prompt.num_passages != len(window_docids):
        raise ValueError(f"prompt lists {prompt.num_passages} passages but {len(window_docids)} docids were given")
    rng = _mock_rng(cfg.seed, prompt, window_docids)
    noise = rng.standard_normal(len(window_docids)) * cfg.noise_stddev
    malformed = bool(rng.random() < cfg.malform_rate)
    keyed = [(-(cfg.true_scores[d] + float(e)), d, i) for i, (d, e) in enumerate(zip(window_docids, noise), 1)]
    order = [i for _, _, i in sorted(keyed)]
    if malformed:
        # duplicate the top index in place of the last one
        if len(order) > 1:
            order[-1] = order[0]
        else:
            order.append(order[0])
    return order, malformed


def mock_complete(cfg: MockOracleConfig, prompt: RenderedPrompt, window_docids: Sequence[str]) -> str:
    """Noisy score sort of the window, rendered in ``cfg.format``.

    Noise and the malformation draw are seeded from ``cfg.seed``, the
    prompt text and the docids, so output depends only on those inputs.
    """
    order, _ = mock_ranking(cfg, prompt, window_docids)
    return render_order(order, cfg.format)


def sample_candidates(
    cfg: EndpointConfig | MockOracleConfig,
    prompt: RenderedPrompt,
    k: int = 3,
    window_docids: Sequence[str] | None = None,
    gateway: ChatGateway | None = None,
    temperature: float = DEFAULT_SAMPLE_TEMPERATURE,
) -> list[str]:
    """Draw ``k`` completions for one prompt.

    Mock candidates use seeds ``cfg.seed + i``, so the first one equals a
    plain :func:`mock_complete` call. Endpoint candidates are ``k``
    independent calls at ``temperature``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(cfg, MockOracleConfig):
        if window_docids is None:
            raise ValueError("mock sampling needs window_docids")
        return [mock_complete(dataclasses.replace(cfg, seed=cfg.seed + i), prompt, window_docids) for i in range(k)]
    own = gateway is None
    gw = gateway or ChatGateway(cfg)
    try:
        return [gw.complete(prompt, temperature=temperature) for _ in range(k)]
    finally:
        if own:
            gw.close()
