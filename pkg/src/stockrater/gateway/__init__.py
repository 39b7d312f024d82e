from stockrater.gateway.backends import ChatBackend, ChatGateway, HttpChatBackend, MockChatBackend, create_backend
from stockrater.gateway.models import ChatMessage, ChatRequest, HorizonPrediction, PredictionRecord, Purpose, Role
from stockrater.gateway.parsing import DateMismatch, expected_target_dates, parse_prediction, render_prediction_block, verify_dates_cove

__all__ = [
    "ChatBackend",
    "ChatGateway",
    "ChatMessage",
    "ChatRequest",
    "DateMismatch",
    "HorizonPrediction",
    "HttpChatBackend",
    "MockChatBackend",
    "PredictionRecord",
    "Purpose",
    "Role",
    "create_backend",
    "expected_target_dates",
    "parse_prediction",
    "render_prediction_block",
    "verify_dates_cove",
]
