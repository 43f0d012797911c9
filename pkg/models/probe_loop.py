"""
Tool loop for one probe: ask, resolve recall / memory_search calls, ask again.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional

from config.settings import model_config
from models.messages import ChatMessage, ToolCall, tool_result
from models.pager import PageTable, end_probe, recall
from models.retrieval import MemorySearch
from utils.errors import InputError
from utils.logging import ProbeLogger

if TYPE_CHECKING:
    from integrations.base import Responder

ROUND_LIMIT_ERROR = "error: tool round limit reached"


@dataclass
class ProbeTranscript:
    messages: List[ChatMessage]
    tool_calls: List[ToolCall] = field(default_factory=list)
    recalled_ids: List[int] = field(default_factory=list)
    retrieved_ids: List[int] = field(default_factory=list)
    searches: List[str] = field(default_factory=list)
    final_answer: str = ""
    llm_calls: int = 0
    truncated: bool = False
    errors: List[str] = field(default_factory=list)

    @property
    def recall_called(self) -> bool:
        return any(call.name == "recall" for call in self.tool_calls)

    def to_record(self) -> Dict[str, Any]:
        return {
            "final_answer": self.final_answer,
            "llm_calls": self.llm_calls,
            "tool_calls": [{"id": c.id, "name": c.name, "arguments": c.arguments} for c in self.tool_calls],
            "recalled_ids": self.recalled_ids,
            "retrieved_ids": self.retrieved_ids,
            "searches": self.searches,
            "truncated": self.truncated,
            "errors": self.errors,
        }


def _run_tool(call: ToolCall, table: Optional[PageTable], search: Optional[MemorySearch],
              transcript: ProbeTranscript) -> str:
    if call.name == "recall":
        page_ids = call.page_ids()
        if table is None:
            transcript.recalled_ids.extend(page_ids)
            return "error: recall is not available"
        if "session_ids" in call.arguments:
            sessions = table.session_pages()
            unknown = [number for number in page_ids if number not in sessions]
            if unknown:
                transcript.errors.extend(f"S{number}: unknown session" for number in unknown)
            page_ids = [sessions[number] for number in page_ids if number in sessions]
            if unknown and not page_ids:
                return "error: " + ", ".join(f"no session {number}" for number in unknown)
        transcript.recalled_ids.extend(page_ids)
        try:
            results = recall(table, page_ids)
        except InputError as e:
            transcript.errors.append(str(e))
            return f"error: {e}"
        for result in results:
            if result.ok:
                transcript.retrieved_ids.append(result.page_id)
            else:
                transcript.errors.append(f"p{result.page_id}: {result.error}")
        return "\n\n".join(result.render() for result in results)

    if call.name == "memory_search":
        query = str(call.arguments.get("query", ""))
        transcript.searches.append(query)
        if search is None:
            return "error: memory_search is not available"
        try:
            return search.render(query)
        except InputError as e:
            transcript.errors.append(str(e))
            return f"error: {e}"

    transcript.errors.append(f"unknown tool {call.name}")
    return f"error: unknown tool {call.name}"


def run_probe(responder: "Responder", messages: List[ChatMessage], hints: Any = None,
              table: Optional[PageTable] = None, tools: Optional[List[Dict[str, Any]]] = None,
              max_tool_rounds: Optional[int] = None, search: Optional[MemorySearch] = None,
              probe_logger: Optional[ProbeLogger] = None) -> ProbeTranscript:
    """Drive one probe through at most `max_tool_rounds` tool round-trips.

    Every tool call gets exactly one tool message, including calls left over when the
    round limit is hit. The table's probe is always closed with `end_probe`.
    """
    max_tool_rounds = model_config.max_tool_rounds if max_tool_rounds is None else max_tool_rounds
    if max_tool_rounds < 0:
        raise InputError("max_tool_rounds must be >= 0")

    transcript = ProbeTranscript(messages=list(messages))
    try:
        for round_no in range(max_tool_rounds + 1):
            reply = responder.complete(transcript.messages, tools=tools, hints=hints)
            transcript.llm_calls += 1
            transcript.messages.append(reply)
            transcript.final_answer = reply.content

            if not reply.tool_calls:
                break

            out_of_rounds = round_no == max_tool_rounds
            for call in reply.tool_calls:
                transcript.tool_calls.append(call)
                if probe_logger:
                    probe_logger.log_tool_call(call.name, call.arguments)
                if out_of_rounds:
                    content = ROUND_LIMIT_ERROR
                else:
                    content = _run_tool(call, table, search, transcript)
                transcript.messages.append(tool_result(call.id, content))
            if out_of_rounds:
                transcript.truncated = True

        if probe_logger:
            if transcript.recalled_ids:
                probe_logger.log_recall(transcript.recalled_ids, transcript.errors)
            probe_logger.log_answer(transcript.final_answer, transcript.llm_calls, transcript.truncated)
    finally:
        if table is not None:
            end_probe(table)
    return transcript
