"""
Deterministic offline responders: the probe-answering mock and the scripted keyword generator.
"""

import re
from typing import Any, Dict, List, Optional

from config.settings import MockConfig, mock_config
from models.bookmark import default_stopwords, rank_by_tfidf
from models.messages import ChatMessage, KeywordHints, ProbeHints, ToolCall, recall_param, tool_names
from utils.logging import get_logger
from utils.text import content_tokens, tokenize
from .base import Responder

logger = get_logger(__name__)

ABSTAIN_ANSWER = "Not mentioned in the conversation."
UNKNOWN_ANSWER = "unknown"
SNIPPET = re.compile(r'"([^"]*)"')


def _question_index(messages: List[ChatMessage]) -> int:
    for pos in range(len(messages) - 1, -1, -1):
        if messages[pos].role == "user":
            return pos
    return -1


def visible_context(messages: List[ChatMessage]) -> str:
    """Everything the model can read as conversation: non-system messages except the question."""
    question_at = _question_index(messages)
    return "\n".join(
        message.content for pos, message in enumerate(messages)
        if message.role != "system" and pos != question_at and message.content
    )


def _issued_calls(messages: List[ChatMessage]) -> List[ToolCall]:
    return [call for message in messages if message.role == "assistant" for call in message.tool_calls or []]


def _final(text: str) -> ChatMessage:
    return ChatMessage("assistant", text)


def _from_stub(rendered: str) -> str:
    """A stub-based guess quotes the snippet when the stub carries one."""
    quoted = SNIPPET.search(rendered)
    return f"From my notes: {quoted.group(1) if quoted else rendered}"


def mock_respond(messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]], hints: ProbeHints,
                 policy: Optional[MockConfig] = None) -> ChatMessage:
    """One deterministic model turn for a probe.

    1. a fact marker is visible: answer directly
    2. gullible and a stub looks like the answer: answer from the stub
    3. a bookmark's keywords overlap the question: recall the best page
    4. otherwise: unknown
    """
    policy = policy or mock_config
    stopwords = default_stopwords().words
    context = visible_context(messages)
    round_no = sum(1 for message in messages if message.role == "assistant")

    if any(marker and marker in context for marker in hints.fact_markers):
        return _final(ABSTAIN_ANSWER if hints.abstain else hints.answer)

    question_tokens = set(content_tokens(hints.question, stopwords))
    issued = _issued_calls(messages)
    recalled = {pid for call in issued if call.name == "recall" for pid in call.page_ids()}

    if policy.gullibility and not issued:
        for bookmark in sorted(hints.bookmarks, key=lambda b: b.page_id):
            stub_tokens = set(content_tokens(bookmark.rendered, stopwords))
            if len(stub_tokens & question_tokens) >= policy.gullibility_min_overlap:
                return _final(_from_stub(bookmark.rendered))

    param = recall_param(tools)
    if param is not None:
        best, best_overlap = None, 0
        for bookmark in sorted(hints.bookmarks, key=lambda b: b.page_id):
            if bookmark.page_id in recalled:
                continue
            keyword_tokens = {tok for kw in bookmark.keywords for tok in tokenize(kw)} - stopwords
            overlap = len(keyword_tokens & question_tokens)
            if overlap >= policy.min_overlap and overlap > best_overlap:
                best, best_overlap = bookmark.page_id, overlap
        if best is not None:
            call = ToolCall(id=f"call_{round_no}_{best}", name="recall", arguments={param: [best]})
            return ChatMessage("assistant", "", tool_calls=[call])

    if "memory_search" in tool_names(tools) and not any(call.name == "memory_search" for call in issued):
        call = ToolCall(id=f"call_{round_no}_search", name="memory_search", arguments={"query": hints.question})
        return ChatMessage("assistant", "", tool_calls=[call])

    return _final(ABSTAIN_ANSWER if hints.abstain else UNKNOWN_ANSWER)


def scripted_keywords(hints: KeywordHints) -> str:
    """Reply text a keyword-writing model could plausibly give, computed without a model."""
    ranked = rank_by_tfidf(hints.page_texts, default_stopwords())
    if hints.task == "contextual":
        return ", ".join(ranked.get(hints.target_page, [])[:hints.max_k])
    if hints.task == "batch":
        return "\n".join(f"p{pid}: {', '.join(toks[:hints.max_k])}" for pid, toks in sorted(ranked.items()))
    if hints.task == "hybrid":
        taken = {kw for kws in hints.keywords.values() for kw in kws}
        lines = []
        for pid, toks in sorted(ranked.items()):
            proposal = next((tok for tok in toks if tok not in taken), None)
            if proposal:
                taken.add(proposal)
                lines.append(f"p{pid}: {proposal}")
        return "\n".join(lines)
    return ""


class MockResponder(Responder):
    """Offline stand-in for the chat endpoint; reads the hints the harness attaches."""

    name = "mock"

    def __init__(self, policy: Optional[MockConfig] = None):
        super().__init__()
        self.policy = policy or mock_config

    def complete(self, messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]] = None,
                 hints: Any = None) -> ChatMessage:
        self.calls += 1
        if isinstance(hints, ProbeHints):
            return mock_respond(messages, tools, hints, self.policy)
        if isinstance(hints, KeywordHints):
            return _final(scripted_keywords(hints))
        logger.debug("mock responder called without hints")
        return _final(UNKNOWN_ANSWER)


class ScriptedKeywordResponder(Responder):
    """Keyword generator stub; optionally fails to exercise degradation paths."""

    name = "scripted_keywords"

    def __init__(self, replies: Optional[List[str]] = None, error: Optional[Exception] = None):
        super().__init__()
        self.replies = list(replies or [])
        self.error = error
        self.prompts: List[List[ChatMessage]] = []

    def complete(self, messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]] = None,
                 hints: Any = None) -> ChatMessage:
        self.calls += 1
        self.prompts.append(list(messages))
        if self.error is not None:
            raise self.error
        if self.replies:
            return _final(self.replies.pop(0))
        if isinstance(hints, KeywordHints):
            return _final(scripted_keywords(hints))
        return _final("")
