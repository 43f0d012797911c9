import json
import re
from typing import Optional

from config.prompts import get_prompt
from models.messages import ChatMessage
from utils.errors import JudgeParseError
from utils.logging import get_logger
from utils.text import tokenize
from .base import Responder

logger = get_logger(__name__)

_JSON_OBJECT = re.compile(r"\{[^{}]*\}")
_ABSTAIN_PHRASES = (
    "not mentioned", "unknown", "no information", "don't know", "do not know",
    "not sure", "cannot find", "can't find", "wasn't mentioned", "was not mentioned",
)


def parse_score(text: str) -> int:
    """Integer score out of a `{"score": n}` reply, clamped to 1..5."""
    for match in _JSON_OBJECT.finditer(text or ""):
        try:
            payload = json.loads(match.group(0))
        except ValueError:
            continue
        if isinstance(payload, dict) and "score" in payload:
            try:
                score = int(round(float(payload["score"])))
            except (TypeError, ValueError):
                continue
            if not 1 <= score <= 5:
                logger.warning(f"Judge score {score} outside 1..5, clamping")
                score = min(5, max(1, score))
            return score
    raise JudgeParseError(f"no score in judge reply: {(text or '')[:120]!r}")


def judge_score(question: str, ground_truth: str, answer: str, responder: Responder) -> int:
    """Ask a model judge for a 1..5 score; one reprompt on an unparseable reply."""
    messages = [ChatMessage("user", get_prompt(
        "judge", question=question, ground_truth=ground_truth, answer=answer))]
    reply = responder.complete(messages)
    try:
        return parse_score(reply.content)
    except JudgeParseError:
        logger.debug("Judge reply unparseable, reprompting once")

    messages += [ChatMessage("assistant", reply.content), ChatMessage("user", get_prompt("judge_reprompt"))]
    reply = responder.complete(messages)
    return parse_score(reply.content)


def is_abstention(answer: str) -> bool:
    lowered = (answer or "").lower()
    return any(phrase in lowered for phrase in _ABSTAIN_PHRASES)


class Judge:
    name = "judge"

    def score(self, question: str, ground_truth: str, answer: str, abstain: bool = False) -> int:
        raise NotImplementedError


class LLMJudge(Judge):
    """Model-backed judge; raises JudgeParseError when the reply stays unusable."""

    def __init__(self, responder: Responder, name: Optional[str] = None):
        self.responder = responder
        self.name = name or f"llm:{getattr(responder, 'name', 'judge')}"

    def score(self, question: str, ground_truth: str, answer: str, abstain: bool = False) -> int:
        return judge_score(question, ground_truth, answer, self.responder)


class ExactMatchJudge(Judge):
    """Offline judge: 5 when the normalised ground truth occurs in the answer, else 1."""

    name = "exact_match"

    def score(self, question: str, ground_truth: str, answer: str, abstain: bool = False) -> int:
        if abstain:
            return 5 if is_abstention(answer) else 1
        truth = " ".join(tokenize(ground_truth))
        if not truth:
            return 1
        return 5 if f" {truth} " in f" {' '.join(tokenize(answer))} " else 1
