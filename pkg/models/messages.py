"""
Chat message types shared by the live client, the mock responder and the probe loop.
"""

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from utils.errors import InputError

ROLES = ("system", "user", "assistant", "tool")
TOOL_NAMES = ("recall", "memory_search")


@dataclass(frozen=True)
class ToolCall:
    id: str
    name: str
    arguments: Dict[str, Any] = field(default_factory=dict)

    def to_wire(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "type": "function",
            "function": {"name": self.name, "arguments": json.dumps(self.arguments, sort_keys=True)},
        }

    def page_ids(self) -> List[int]:
        """Integer ids of a recall call, whichever parameter name was registered."""
        for key in ("page_ids", "session_ids"):
            if key in self.arguments:
                return [int(value) for value in self.arguments[key]]
        return []


@dataclass
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: Optional[List[ToolCall]] = None
    tool_call_id: Optional[str] = None
    # Per-token logprobs of an assistant reply, when requested
    logprobs: Optional[List[float]] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"unknown message role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise InputError("tool messages need a tool_call_id")

    @property
    def has_tool_calls(self) -> bool:
        return bool(self.tool_calls)

    def to_wire(self) -> Dict[str, Any]:
        message: Dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            message["tool_calls"] = [call.to_wire() for call in self.tool_calls]
        if self.tool_call_id:
            message["tool_call_id"] = self.tool_call_id
        return message


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def tool_result(call_id: str, content: str) -> ChatMessage:
    return ChatMessage("tool", content, tool_call_id=call_id)


def tool_names(tools: Optional[List[Dict[str, Any]]]) -> List[str]:
    return [spec["function"]["name"] for spec in tools or []]


def recall_param(tools: Optional[List[Dict[str, Any]]]) -> Optional[str]:
    """Name of the recall tool's id parameter, or None when recall is not registered."""
    for spec in tools or []:
        if spec["function"]["name"] == "recall":
            return next(iter(spec["function"]["parameters"]["properties"]))
    return None


@dataclass(frozen=True)
class BookmarkHint:
    """What the mock responder may read about one evicted page."""

    page_id: int
    keywords: List[str]
    rendered: str


@dataclass
class ProbeHints:
    """Side information for the offline responder; live clients ignore it."""

    question: str
    answer: str
    fact_markers: List[str] = field(default_factory=list)
    bookmarks: List[BookmarkHint] = field(default_factory=list)
    abstain: bool = False


@dataclass
class KeywordHints:
    """Side information for the scripted keyword generator used offline."""

    task: str
    page_texts: Dict[int, str] = field(default_factory=dict)
    keywords: Dict[int, List[str]] = field(default_factory=dict)
    target_page: Optional[int] = None
    max_k: int = 5
