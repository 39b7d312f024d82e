from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from typing import Any

from stockrater.ratings import OrdinalRating
from stockrater.utils import HORIZONS, digest


class Role(str, Enum):
    system = "system"
    user = "user"
    assistant = "assistant"


class Purpose(str, Enum):
    rating = "rating"
    summary = "summary"
    sentiment = "sentiment"


SENTIMENT_LABELS = ("positive", "negative", "neutral", "mixed")


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    model: str
    temperature: float = 0.0
    max_output_tokens: int = 2048
    purpose: Purpose = Purpose.rating

    def __post_init__(self) -> None:
        if not self.messages or self.messages[0].role != Role.system:
            raise ValueError("The first message of a chat request must be the system prompt")
        if any(not m.content.strip() for m in self.messages):
            raise ValueError("Chat messages must not be empty")

    @classmethod
    def of(cls, system: str, user: str, **kwargs: Any) -> "ChatRequest":
        return cls(messages=(ChatMessage(Role.system, system), ChatMessage(Role.user, user)), **kwargs)

    @property
    def system_text(self) -> str:
        return self.messages[0].content

    @property
    def user_text(self) -> str:
        return next((m.content for m in reversed(self.messages) if m.role == Role.user), "")

    def wire_payload(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": m.role.value, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        }

    def digest(self) -> str:
        return digest(self.wire_payload())


@dataclass(frozen=True)
class HorizonPrediction:
    horizon: int
    target_date: date
    rating: OrdinalRating
    price_target: float | None = None


@dataclass(frozen=True)
class PredictionRecord:
    company_id: str
    rating_date: date
    entries: tuple[HorizonPrediction, ...]
    explanation: str = ""
    sentiment_assessment: str | None = None
    response_digest: str = ""
    horizons: tuple[int, ...] = field(default=HORIZONS, compare=False)

    def __post_init__(self) -> None:
        found = sorted(e.horizon for e in self.entries)
        if found != sorted(self.horizons):
            raise ValueError(f"Expected horizons {list(self.horizons)}, found {found}")
        if self.sentiment_assessment is not None and self.sentiment_assessment not in SENTIMENT_LABELS:
            raise ValueError(f"Unknown sentiment assessment [{self.sentiment_assessment}]")

    def entry(self, horizon: int) -> HorizonPrediction:
        return next(e for e in self.entries if e.horizon == horizon)

    def to_dict(self) -> dict[str, Any]:
        return {
            "company": self.company_id,
            "rating_date": self.rating_date.isoformat(),
            "entries": [
                {
                    "horizon_months": e.horizon,
                    "target_date": e.target_date.isoformat(),
                    "rating": int(e.rating),
                    "price_target": e.price_target,
                }
                for e in sorted(self.entries, key=lambda e: e.horizon)
            ],
            "explanation": self.explanation,
            "sentiment_assessment": self.sentiment_assessment,
            "response_digest": self.response_digest,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PredictionRecord":
        entries = tuple(
            HorizonPrediction(
                horizon=e["horizon_months"],
                target_date=date.fromisoformat(e["target_date"]),
                rating=OrdinalRating(e["rating"]),
                price_target=e.get("price_target"),
            )
            for e in data["entries"]
        )
        return cls(
            company_id=data["company"],
            rating_date=date.fromisoformat(data["rating_date"]),
            entries=entries,
            explanation=data.get("explanation", ""),
            sentiment_assessment=data.get("sentiment_assessment"),
            response_digest=data.get("response_digest", ""),
            horizons=tuple(sorted(e.horizon for e in entries)),
        )
