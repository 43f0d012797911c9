from typing import Any, Dict, List, Optional

from models.messages import ChatMessage


class Responder:
    """Base class for anything that answers a chat: the live endpoint or an offline stand-in."""

    name = "responder"

    def __init__(self):
        self.calls = 0

    def complete(self, messages: List[ChatMessage], tools: Optional[List[Dict[str, Any]]] = None,
                 hints: Any = None) -> ChatMessage:
        """Return one assistant message (text and/or tool calls)."""
        raise NotImplementedError

    @property
    def is_offline(self) -> bool:
        """True when no network is involved."""
        return True
