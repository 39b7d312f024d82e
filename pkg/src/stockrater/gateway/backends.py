import logging
import os
import random
import re
import threading
import time
from collections.abc import Callable, Sequence
from datetime import date, datetime, timezone
from email.utils import parsedate_to_datetime
from pathlib import Path
from typing import Protocol

import httpx
from tenacity import RetryCallState, RetryError, Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from stockrater.config import SR_API_KEY, GatewaySettings
from stockrater.errors import BackendUnavailable, ContextOverflow
from stockrater.gateway.models import ChatRequest, HorizonPrediction, PredictionRecord, Purpose
from stockrater.ratings import OrdinalRating
from stockrater.store import jsonl_store
from stockrater.utils import digest

logger = logging.getLogger(__name__)

TRANSIENT_STATUS_CODES = {408, 409, 429, 500, 502, 503, 504}
MAX_RETRY_AFTER_SECONDS = 300.0
CONTEXT_OVERFLOW_MARKERS = ("context_length_exceeded", "maximum context length", "too many tokens")

TARGET_DATE_LINE_RE = re.compile(r"^- (\d+) months?: (\d{4}-\d{2}-\d{2})$", re.MULTILINE)
THREE_MONTH_RETURN_RE = re.compile(r"\|\s*3-month return\s*\|\s*(-?[\d.,]+)%\s*\|")
CURRENT_PRICE_RE = re.compile(r"\|\s*Current price\s*\|\s*([\d.,]+)\s*\|")
COMPANY_LINE_RE = re.compile(r"^Company: .*\((?P<ticker>[^)]+)\)$", re.MULTILINE)
NEWS_MARKER = "## News summaries"


class ChatBackend(Protocol):
    def complete(self, request: ChatRequest) -> str:
        ...


class _TransientError(Exception):
    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


def parse_retry_after(value: str | None) -> float | None:
    """Seconds to wait from a Retry-After header, given either as delta-seconds or an HTTP date."""
    if not value:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        pass
    try:
        when = parsedate_to_datetime(value)
    except (TypeError, ValueError):
        logger.debug("Ignoring unparsable Retry-After header: %s", value)
        return None
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return max(0.0, (when - datetime.now(timezone.utc)).total_seconds())


def _wait_retry_after_or(fallback: Callable[[RetryCallState], float]) -> Callable[[RetryCallState], float]:
    def _wait(retry_state: RetryCallState) -> float:
        error = retry_state.outcome.exception() if retry_state.outcome else None
        retry_after = getattr(error, "retry_after", None)
        if retry_after is None:
            return fallback(retry_state)
        return min(retry_after, MAX_RETRY_AFTER_SECONDS)
    return _wait


class HttpChatBackend:
    """Chat-completions client for any endpoint speaking the OpenAI wire format."""

    def __init__(self, settings: GatewaySettings, api_key: str | None = None, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.settings = settings
        self.sleep = sleep
        key = api_key if api_key is not None else os.getenv(SR_API_KEY, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = httpx.Client(base_url=settings.base_url, headers=headers, timeout=settings.timeout_seconds, transport=transport)

    def complete(self, request: ChatRequest) -> str:
        retrying = Retrying(
            retry=retry_if_exception(lambda e: isinstance(e, _TransientError)),
            wait=_wait_retry_after_or(wait_exponential(multiplier=self.settings.backoff_seconds, max=60)),
            stop=stop_after_attempt(self.settings.max_retries + 1),
            sleep=self.sleep,
            before_sleep=lambda state: logger.warning("Transient failure on attempt [%d] for request [%s], backing off", state.attempt_number, request.digest()[:12]),
        )
        try:
            return retrying(self._post, request)
        except RetryError as e:
            raise BackendUnavailable(f"Chat backend unavailable after [{self.settings.max_retries}] retries: {e.last_attempt.exception()}") from e

    def _post(self, request: ChatRequest) -> str:
        try:
            response = self.client.post("/chat/completions", json=request.wire_payload())
        except httpx.TimeoutException as e:
            raise _TransientError(f"timeout: {e}") from e
        except httpx.TransportError as e:
            raise _TransientError(f"transport error: {e}") from e

        if response.status_code in TRANSIENT_STATUS_CODES:
            raise _TransientError(f"HTTP {response.status_code}", retry_after=parse_retry_after(response.headers.get("Retry-After")))
        if response.status_code >= 400:
            body = response.text
            if any(marker in body.lower() for marker in CONTEXT_OVERFLOW_MARKERS):
                raise ContextOverflow(f"Backend rejected request [{request.digest()[:12]}] as too long")
            raise BackendUnavailable(f"Backend returned HTTP {response.status_code}: {body[:200]}")
        choices = response.json().get("choices") or []
        if not choices:
            raise BackendUnavailable("Backend response contained no choices")
        if choices[0].get("finish_reason") == "length" and not choices[0]["message"].get("content"):
            raise ContextOverflow(f"Backend ran out of tokens for request [{request.digest()[:12]}]")
        return choices[0]["message"]["content"]

    def close(self) -> None:
        self.client.close()


class MockChatBackend:
    """
    Deterministic backend for tests and dry runs.

    With a script, replies are returned in order and the last one repeats once the script is
    exhausted. Without one, replies come from a seeded rule: the sign of the trailing 3-month
    return in the prompt decides the rating direction for every horizon.
    """

    def __init__(self, script: Sequence[str] | None = None, seed: int = 0, strong_threshold: float = 0.06, hold_band: float = 0.02) -> None:
        self.script = list(script) if script else []
        self.seed = seed
        self.strong_threshold = strong_threshold
        self.hold_band = hold_band
        self.call_history: list[ChatRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.call_history.append(request)
            if self.script:
                return self.script[min(len(self.call_history), len(self.script)) - 1]
        rng = random.Random(digest(f"{self.seed}:{request.digest()}"))
        match request.purpose:
            case Purpose.sentiment:
                return str(rng.randint(-5, 5))
            case Purpose.summary:
                return self._summary_reply(request)
            case _:
                return self._rating_reply(request, rng)

    def reset(self) -> None:
        self.call_history = []

    @staticmethod
    def _summary_reply(request: ChatRequest) -> str:
        titles = re.findall(r"^Title: (.+)$", request.user_text, re.MULTILINE)
        if not titles:
            titles = [line for line in request.user_text.splitlines() if line.strip()][-1:]
        return "Key events: " + "; ".join(titles[:5])

    def momentum_rating(self, three_month_return: float) -> OrdinalRating:
        if abs(three_month_return) < self.hold_band:
            return OrdinalRating.HOLD
        magnitude = 2 if abs(three_month_return) >= self.strong_threshold else 1
        return OrdinalRating(magnitude if three_month_return > 0 else -magnitude)

    def _rating_reply(self, request: ChatRequest, rng: random.Random) -> str:
        from stockrater.gateway.parsing import render_prediction_block

        text = request.user_text
        # The few-shot example comes first, so only the last data table is this company's
        tail = text.rsplit("## Technical snapshot", 1)[-1]
        three_month = THREE_MONTH_RETURN_RE.search(tail)
        price = CURRENT_PRICE_RE.search(tail)
        r3m = float(three_month.group(1).replace(",", "")) / 100 if three_month else 0.0
        current_price = float(price.group(1).replace(",", "")) if price else None
        rating = self.momentum_rating(r3m)

        entries = []
        for horizon, target in TARGET_DATE_LINE_RE.findall(text):
            target_price = None
            if current_price is not None:
                drift = r3m * int(horizon) / 3
                target_price = round(current_price * (1 + drift) * (1 + rng.uniform(-0.01, 0.01)), 2)
            entries.append(HorizonPrediction(int(horizon), date.fromisoformat(target), rating, target_price))
        company = COMPANY_LINE_RE.search(text)
        record = PredictionRecord(
            company_id=company.group("ticker") if company else "",
            rating_date=date.min,
            entries=tuple(entries),
            explanation=f"Trailing 3-month return of {r3m:.2%} points to a {rating.label} rating.",
            sentiment_assessment=rng.choice(("positive", "negative", "neutral", "mixed")) if NEWS_MARKER in text else None,
            horizons=tuple(sorted(e.horizon for e in entries)),
        )
        return render_prediction_block(record)


class ChatGateway:
    """
    Shared entry point for every chat call: applies the configured generation settings, bounds
    the number of in-flight requests and records a transcript line per call.
    """

    def __init__(self, backend: ChatBackend, settings: GatewaySettings, transcript_path: Path | None = None) -> None:
        self.backend = backend
        self.settings = settings
        self.transcript_path = transcript_path
        self._slots = threading.BoundedSemaphore(settings.concurrency)
        self._lock = threading.Lock()
        self.call_count = 0

    def request(self, system: str, user: str, purpose: Purpose) -> ChatRequest:
        return ChatRequest.of(
            system,
            user,
            model=self.settings.model,
            temperature=self.settings.temperature,
            max_output_tokens=self.settings.max_output_tokens,
            purpose=purpose,
        )

    def complete(self, request: ChatRequest) -> str:
        request_digest = request.digest()
        with self._slots:
            response = self.backend.complete(request)
        with self._lock:
            self.call_count += 1
            if self.transcript_path is not None:
                jsonl_store.append_records(self.transcript_path, [{
                    "request_digest": request_digest,
                    "purpose": request.purpose.value,
                    "request": request.wire_payload(),
                    "response": response,
                }])
        logger.debug("Response for request [%s] (%s): %d chars", request_digest[:12], request.purpose.value, len(response))
        return response

    def chat(self, system: str, user: str, purpose: Purpose) -> str:
        return self.complete(self.request(system, user, purpose))


def create_backend(settings: GatewaySettings, seed: int = 0) -> ChatBackend:
    if settings.backend == "http":
        return HttpChatBackend(settings)
    return MockChatBackend(seed=seed)
