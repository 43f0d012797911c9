from dataclasses import replace

import pytest
import requests

from config.prompts import JUDGE_REPROMPT, get_prompt, recall_tool, memory_search_tool
from config.settings import MockConfig, model_config
from integrations import (
    ChatClient, ExactMatchJudge, MockResponder, Responder, ScriptedKeywordResponder, get_judges, get_responder,
    judge_score
)
from conftest import make_turns
from integrations.judge import is_abstention, parse_score
from integrations.mock import ABSTAIN_ANSWER, UNKNOWN_ANSWER, mock_respond
from integrations.openai_compat import RateLimiter, parse_response
from models.bookmark import heuristic_stub_builder
from models.messages import BookmarkHint, ChatMessage, ProbeHints, ToolCall, recall_param, system, tool_result, user
from models.pager import BoundaryStrategy, EvictionPolicy, PageStatus, PageTable, flush, ingest_turn, make_session_tag
from models.probe_loop import ROUND_LIMIT_ERROR, run_probe
from models.retrieval import MemorySearch
from utils.errors import ConfigError, HttpStatusError, InputError, JudgeParseError, ProtocolError

QUESTION = "What Allergy did I mention for Lisbon?"


def probe_hints(bookmarks=(), abstain=False):
    return ProbeHints(question=QUESTION, answer="peanuts", fact_markers=["Allergy is peanuts"],
                      bookmarks=list(bookmarks), abstain=abstain)


def travel_table(conversation, budget_k=1):
    table = PageTable(budget_k, EvictionPolicy("fifo"))
    strategy = BoundaryStrategy.parse("fixed_5")
    for turn in conversation.turns:
        ingest_turn(table, strategy, turn)
    flush(table)
    return table


def table_hints(table):
    return probe_hints(
        BookmarkHint(pid, list(stub.keywords.keywords), stub.rendered) for pid, stub in sorted(table.evicted.items()))


class TestMockRules:
    def test_answers_when_marker_visible(self):
        messages = [system("sys"), user("My Allergy is peanuts."), user(QUESTION)]
        assert mock_respond(messages, None, probe_hints()).content == "peanuts"
        assert mock_respond(messages, None, probe_hints(abstain=True)).content == ABSTAIN_ANSWER

    def test_marker_in_system_message_is_not_visible(self):
        messages = [system("Compressed memory:\n[p1:Allergy is peanuts]"), user(QUESTION)]
        assert mock_respond(messages, None, probe_hints()).content == UNKNOWN_ANSWER

    def test_recalls_best_overlapping_bookmark(self):
        bookmarks = [BookmarkHint(1, ["kitchen"], "[p1:kitchen]"), BookmarkHint(2, ["allergy", "lisbon"], "[p2]"),
                     BookmarkHint(3, ["lisbon"], "[p3:lisbon]")]
        reply = mock_respond([system("s"), user(QUESTION)], [recall_tool()], probe_hints(bookmarks))
        assert reply.tool_calls[0].name == "recall"
        assert reply.tool_calls[0].arguments == {"page_ids": [2]}

    def test_skips_already_recalled_pages(self):
        bookmarks = [BookmarkHint(2, ["allergy", "lisbon"], "[p2]"), BookmarkHint(3, ["lisbon"], "[p3]")]
        call = ToolCall("call_0_2", "recall", {"session_ids": [2]})
        messages = [system("s"), user(QUESTION), ChatMessage("assistant", "", tool_calls=[call]),
                    tool_result("call_0_2", "[p2]\nnothing useful")]
        reply = mock_respond(messages, [recall_tool("session_ids")], probe_hints(bookmarks))
        assert reply.tool_calls[0].arguments == {"session_ids": [3]}

    def test_searches_once_then_gives_up(self):
        tools = [memory_search_tool()]
        first = mock_respond([system("s"), user(QUESTION)], tools, probe_hints())
        assert first.tool_calls[0].name == "memory_search"
        messages = [system("s"), user(QUESTION), first, tool_result(first.tool_calls[0].id, "No matching sessions.")]
        assert mock_respond(messages, tools, probe_hints()).content == UNKNOWN_ANSWER

    def test_gullible_mock_answers_from_stub(self):
        bookmarks = [BookmarkHint(4, ["allergy", "lisbon"], "[p4:allergy,lisbon]")]
        policy = MockConfig(gullibility=True)
        reply = mock_respond([system("s"), user(QUESTION)], [recall_tool()], probe_hints(bookmarks), policy)
        assert reply.content == "From my notes: [p4:allergy,lisbon]"

    def test_gullible_mock_quotes_the_snippet(self):
        rendered = '[p4:lisbon,peanuts "For Lisbon, the allergy thing keeps coming back..."]'
        bookmarks = [BookmarkHint(4, ["lisbon", "peanuts"], rendered)]
        policy = MockConfig(gullibility=True)
        reply = mock_respond([system("s"), user(QUESTION)], [recall_tool()], probe_hints(bookmarks), policy)
        assert reply.content == "From my notes: For Lisbon, the allergy thing keeps coming back..."
        assert "peanuts" not in reply.content

    def test_no_recall_without_the_tool(self):
        bookmarks = [BookmarkHint(2, ["allergy", "lisbon"], "[p2]")]
        assert mock_respond([system("s"), user(QUESTION)], None, probe_hints(bookmarks)).content == UNKNOWN_ANSWER

    def test_recall_param_follows_tool_definition(self):
        assert recall_param([recall_tool("session_ids")]) == "session_ids"
        assert recall_param([memory_search_tool()]) is None


class TestProbeLoop:
    def test_recall_then_answer(self, travel_conversation):
        table = travel_table(travel_conversation)
        assert sorted(table.evicted) == [1, 2, 3]
        messages = [system(get_prompt("bookmark_system")), user(QUESTION)]
        transcript = run_probe(MockResponder(), messages, table_hints(table), table, [recall_tool()])
        assert transcript.final_answer == "peanuts"
        assert transcript.recalled_ids == [1]
        assert transcript.retrieved_ids == [1]
        assert transcript.llm_calls == 2
        assert not transcript.truncated
        assert table.pages[1].status == PageStatus.EVICTED

    def test_round_limit_answers_every_call(self, travel_conversation):
        class AlwaysRecall(Responder):
            def complete(self, messages, tools=None, hints=None):
                self.calls += 1
                return ChatMessage("assistant", "", tool_calls=[ToolCall(f"c{self.calls}", "recall", {"page_ids": [2]})])

        table = travel_table(travel_conversation)
        transcript = run_probe(AlwaysRecall(), [user(QUESTION)], None, table, [recall_tool()], max_tool_rounds=1)
        assert transcript.truncated
        assert transcript.llm_calls == 2
        tool_messages = [m for m in transcript.messages if m.role == "tool"]
        assert [m.tool_call_id for m in tool_messages] == ["c1", "c2"]
        assert tool_messages[-1].content == ROUND_LIMIT_ERROR
        assert table.active == [4]

    def test_unknown_page_is_reported_not_raised(self, travel_conversation):
        class RecallMissing(Responder):
            def complete(self, messages, tools=None, hints=None):
                self.calls += 1
                if self.calls == 1:
                    return ChatMessage("assistant", "", tool_calls=[ToolCall("c1", "recall", {"page_ids": [42]})])
                return ChatMessage("assistant", "unknown")

        transcript = run_probe(RecallMissing(), [user(QUESTION)], None, travel_table(travel_conversation),
                               [recall_tool()])
        assert transcript.errors == ["p42: unknown page"]
        assert transcript.retrieved_ids == []

    def test_search_tool(self, stopwords):
        search = MemorySearch({1: "My Allergy is peanuts, keep it in mind for Lisbon."}, stopwords.words)
        transcript = run_probe(MockResponder(), [system("s"), user(QUESTION)], probe_hints(), None,
                               [memory_search_tool()], search=search)
        assert transcript.searches == [QUESTION]
        assert transcript.final_answer == "peanuts"

    def test_negative_round_limit(self):
        with pytest.raises(InputError):
            run_probe(MockResponder(), [user(QUESTION)], probe_hints(), max_tool_rounds=-1)


def session_table():
    """Sessions 1, 3 and 4 of a stream whose session 2 was empty; one page per session."""
    tags = [make_session_tag(1, "2023-05-08")] * 2 + [make_session_tag(3, "2023-05-20")] * 2 + \
        [make_session_tag(4, "2023-05-27")] * 2
    turns = make_turns(["Lisbon trams", "Lisbon tiles", "Harborview kitchen", "Harborview cabinets", "hello", "ok"],
                       session_tags=tags)
    table = PageTable(1, EvictionPolicy("fifo"), heuristic_stub_builder(with_date=True))
    for turn in turns:
        ingest_turn(table, BoundaryStrategy("session"), turn)
    flush(table)
    return table


class RecallSession(Responder):
    def __init__(self, number):
        super().__init__()
        self.number = number

    def complete(self, messages, tools=None, hints=None):
        self.calls += 1
        if self.calls == 1:
            return ChatMessage("assistant", "", tool_calls=[ToolCall("c1", "recall", {"session_ids": [self.number]})])
        return ChatMessage("assistant", "done")


class TestSessionRecall:
    def test_stub_label_is_the_session_number(self):
        table = session_table()
        assert sorted(table.evicted) == [1, 2]
        assert table.evicted[2].rendered.startswith("[S3(2023-05-20):")
        assert table.evicted[2].recall_id == 3
        assert table.session_pages() == {1: 1, 3: 2, 4: 3}

    def test_recall_by_session_number(self):
        table = session_table()
        transcript = run_probe(RecallSession(3), [user(QUESTION)], None, table, [recall_tool("session_ids")])
        assert transcript.recalled_ids == [2]
        assert transcript.retrieved_ids == [2]
        assert not transcript.errors

    def test_skipped_session_is_reported(self):
        transcript = run_probe(RecallSession(2), [user(QUESTION)], None, session_table(), [recall_tool("session_ids")])
        assert transcript.errors == ["S2: unknown session"]
        assert transcript.recalled_ids == []


class FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


def completion(content="peanuts", tool_calls=None):
    message = {"role": "assistant", "content": content}
    if tool_calls:
        message["tool_calls"] = tool_calls
    return {"choices": [{"message": message}]}


@pytest.fixture
def live_config(monkeypatch):
    monkeypatch.setenv("PAGEBOOK_API_KEY", "test-key")
    return replace(model_config, endpoint_url="http://localhost:8000/", cache_dir="", max_retries=2,
                   requests_per_second=0)


def scripted_post(monkeypatch, client, responses):
    sent = []

    def post(url, headers=None, json=None, timeout=None):
        sent.append({"url": url, "headers": headers, "json": json})
        response = responses.pop(0)
        if isinstance(response, Exception):
            raise response
        return response

    monkeypatch.setattr(client.session, "post", post)
    return sent


class TestChatClient:
    def test_missing_key(self, monkeypatch):
        monkeypatch.delenv("PAGEBOOK_API_KEY", raising=False)
        with pytest.raises(ConfigError):
            ChatClient(replace(model_config, cache_dir=""))

    def test_payload_and_reply(self, monkeypatch, live_config):
        client = ChatClient(live_config, sleep=lambda s: None)
        sent = scripted_post(monkeypatch, client, [FakeResponse(200, completion())])
        reply = client.complete([user(QUESTION)], tools=[recall_tool()])
        assert reply.content == "peanuts"
        assert sent[0]["url"] == "http://localhost:8000/v1/chat/completions"
        assert sent[0]["headers"]["Authorization"] == "Bearer test-key"
        assert sent[0]["json"]["temperature"] == 0.0
        assert sent[0]["json"]["tools"][0]["function"]["name"] == "recall"

    def test_retries_transient_failures(self, monkeypatch, live_config):
        client = ChatClient(live_config, sleep=lambda s: None)
        scripted_post(monkeypatch, client, [
            FakeResponse(503, text="busy"), requests.ConnectionError("reset"), FakeResponse(200, completion("ok"))])
        assert client.complete([user("hi")]).content == "ok"
        assert client.calls == 3

    def test_client_errors_are_not_retried(self, monkeypatch, live_config):
        client = ChatClient(live_config, sleep=lambda s: None)
        scripted_post(monkeypatch, client, [FakeResponse(400, text="bad request")])
        with pytest.raises(HttpStatusError) as excinfo:
            client.complete([user("hi")])
        assert excinfo.value.status == 400
        assert client.calls == 1

    def test_non_json_body(self, monkeypatch, live_config):
        client = ChatClient(live_config, sleep=lambda s: None)
        scripted_post(monkeypatch, client, [FakeResponse(200, None, text="<html>")])
        with pytest.raises(ProtocolError):
            client.complete([user("hi")])

    def test_response_cache(self, monkeypatch, live_config, tmp_path):
        client = ChatClient(replace(live_config, cache_dir=str(tmp_path)), sleep=lambda s: None)
        sent = scripted_post(monkeypatch, client, [FakeResponse(200, completion("cached"))])
        first = client.complete([user("hi")])
        second = client.complete([user("hi")])
        assert first.content == second.content == "cached"
        assert len(sent) == 1
        assert client.cache_hits == 1


class TestParseResponse:
    def test_tool_calls_and_logprobs(self):
        body = completion(None, [{"id": "c1", "type": "function",
                                  "function": {"name": "recall", "arguments": '{"page_ids": [3]}'}}])
        body["choices"][0]["logprobs"] = {"content": [{"logprob": -0.5}, {"logprob": -0.25}]}
        message = parse_response(body)
        assert message.content == ""
        assert message.tool_calls[0].page_ids() == [3]
        assert message.logprobs == [-0.5, -0.25]

    def test_malformed_bodies(self):
        with pytest.raises(ProtocolError):
            parse_response({"choices": []})
        with pytest.raises(ProtocolError) as excinfo:
            parse_response(completion(None, [{"id": "c1", "function": {"name": "recall", "arguments": "{oops"}}]))
        assert excinfo.value.payload is not None


def test_rate_limiter_spaces_requests():
    now = [0.0]
    slept = []

    def sleep(seconds):
        slept.append(seconds)
        now[0] += seconds

    limiter = RateLimiter(2.0, clock=lambda: now[0], sleep=sleep)
    limiter.wait()
    limiter.wait()
    assert slept == [0.5]


class TestJudges:
    def test_parse_score(self):
        assert parse_score('{"score": 4}') == 4
        assert parse_score('Sure. {"score": 9}') == 5
        assert parse_score('{"note": 1} {"score": "2"}') == 2
        with pytest.raises(JudgeParseError):
            parse_score("four out of five")

    def test_reprompts_once(self):
        responder = ScriptedKeywordResponder(replies=["I think it is good", '{"score": 3}'])
        assert judge_score("q", "Biscuit", "Biscuit", responder) == 3
        assert responder.calls == 2
        assert responder.prompts[1][-1].content == JUDGE_REPROMPT.format()
        assert '{"score": n}' in responder.prompts[1][-1].content

    def test_judge_prompt_renders_json_hint(self):
        prompt = get_prompt("judge", question="q", ground_truth="g", answer="a")
        assert prompt.startswith("Rate how well the answer addresses the question given the ground truth.")
        assert '{"score": n}' in prompt

    def test_exact_match(self):
        judge = ExactMatchJudge()
        assert judge.score("q", "Biscuit", "Her greyhound is Biscuit.") == 5
        assert judge.score("q", "Sierra lakes", "the lakes") == 1
        assert judge.score("q", "", ABSTAIN_ANSWER, abstain=True) == 5
        assert judge.score("q", "", "She plays violin", abstain=True) == 1
        assert is_abstention("I don't know")


def test_manager():
    assert isinstance(get_responder("mock"), MockResponder)
    with pytest.raises(ConfigError):
        get_responder("remote")
    judges = get_judges(["gpt-4o-mini"], mode="mock")
    assert [judge.name for judge in judges] == ["exact_match"]
