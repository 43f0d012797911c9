"""
Experiment orchestration: per-method context assembly, the boundary x eviction grid,
bookmark / format / specificity ablations on shared traces, the six-method LoCoMo
comparison and the acceptance checks.
"""

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config.prompts import get_prompt, memory_search_tool, recall_tool
from config.settings import (
    BOOKMARK_FORMATS, BOOKMARK_STRATEGIES, EVICTION_KINDS, METHODS,
    bookmark_config, harness_config, mock_config, model_config, pager_config
)
from integrations import get_responder
from integrations.base import Responder
from integrations.judge import ExactMatchJudge, Judge, is_abstention
from integrations.mock import MockResponder, ScriptedKeywordResponder
from models.bookmark import (
    BookmarkFormat, KeywordSet, Stopwords, build_keyword_book, default_stopwords,
    extract_heuristic, keyword_book_builder, make_bookmark, render_bookmark, BookmarkInputs, select_strategy
)
from models.messages import BookmarkHint, ChatMessage, ProbeHints
from models.pager import (
    BoundaryStrategy, EvictionPolicy, Page, PageTable, RenderedContext, Turn,
    flush, ingest_turn, reference, render_context, segment
)
from models.probe_loop import ProbeTranscript, run_probe
from models.retrieval import DocumentIndex, MemorySearch, bm25_scorer, overlap_scorer, top_k
from services.datasets import Conversation, Probe
from services.metrics import (
    Metrics, ProbeResult, aggregate, aggregate_by, judge_agreement, judge_matrix, paired_bootstrap
)
from utils.errors import ConfigError, JudgeParseError, ModelIOError
from utils.logging import ProbeLogger, get_logger, log_performance
from utils.text import content_tokens, estimate_tokens, stable_hash

logger = get_logger(__name__)

DATASETS = ("synthetic_forward", "synthetic_revisit", "synthetic_controlled", "locomo")
ABLATION_STRATEGIES = list(BOOKMARK_STRATEGIES)
SELECTED = "selected"


@dataclass(frozen=True)
class MethodConfig:
    kind: str
    full_cap: int = 60
    trunc_window: int = 20
    top_k: int = 3
    recent_sessions_full: int = 3

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ConfigError(f"unknown method {self.kind!r}")
        for name in ("full_cap", "trunc_window", "top_k", "recent_sessions_full"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_config(cls, kind: str) -> "MethodConfig":
        return cls(
            kind=kind,
            full_cap=harness_config.full_cap,
            trunc_window=harness_config.trunc_window,
            top_k=harness_config.top_k,
            recent_sessions_full=harness_config.recent_sessions_full,
        )


@dataclass
class ExperimentPlan:
    dataset: str = "synthetic_forward"
    boundaries: List[str] = field(default_factory=lambda: list(pager_config.boundaries))
    evictions: List[str] = field(default_factory=lambda: list(pager_config.evictions))
    bookmark_strategy: str = "heuristic"
    bookmark_format: str = "minimal"
    responder: str = "mock"
    judges: List[str] = field(default_factory=list)
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    seed: int = 42
    budget_k: int = pager_config.budget_k
    max_tool_rounds: int = model_config.max_tool_rounds
    jobs: int = harness_config.jobs
    gullibility: bool = False

    def validate(self) -> "ExperimentPlan":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset: unknown {self.dataset!r}")
        self.boundary_strategies()
        for eviction in self.evictions:
            if eviction not in EVICTION_KINDS:
                raise ConfigError(f"evictions: unknown policy {eviction!r}")
        if self.bookmark_strategy not in ABLATION_STRATEGIES + ["generic", SELECTED]:
            raise ConfigError(f"bookmark_strategy: unknown {self.bookmark_strategy!r}")
        if self.bookmark_format not in BOOKMARK_FORMATS:
            raise ConfigError(f"bookmark_format: unknown {self.bookmark_format!r}")
        if self.responder not in ("mock", "live"):
            raise ConfigError(f"responder: unknown {self.responder!r}")
        if self.responder == "live" and not model_config.endpoint_url:
            raise ConfigError("responder: live mode needs model.endpoint_url")
        for method in self.methods:
            MethodConfig(method)
        if self.budget_k < 1:
            raise ConfigError("budget_k must be >= 1")
        if self.max_tool_rounds < 0:
            raise ConfigError("max_tool_rounds must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return self

    @property
    def locomo(self) -> bool:
        return self.dataset == "locomo"

    @property
    def max_k(self) -> int:
        return bookmark_config.locomo_max_k if self.locomo else bookmark_config.synthetic_max_k

    def boundary_strategies(self) -> List[BoundaryStrategy]:
        return [
            BoundaryStrategy.parse(name, pager_config.jaccard_threshold, pager_config.topic_window)
            for name in self.boundaries
        ]

    def bookmark_fmt(self, kind: Optional[str] = None) -> BookmarkFormat:
        return BookmarkFormat(kind or self.bookmark_format, bookmark_config.snippet_chars)

    def to_record(self) -> Dict[str, Any]:
        return dict(vars(self))


def probe_responder(plan: ExperimentPlan, gullibility: Optional[bool] = None) -> Responder:
    """Responder that answers probes: the mock (with the plan's gullibility) or the live client."""
    if plan.responder == "mock":
        gullible = plan.gullibility if gullibility is None else gullibility
        return MockResponder(replace(mock_config, gullibility=gullible))
    return get_responder("live")


def keyword_responder(plan: ExperimentPlan) -> Responder:
    """Generator for the LLM keyword strategies; offline runs use the scripted stub."""
    if plan.responder == "mock":
        return ScriptedKeywordResponder()
    return get_responder("live")


def keyword_book(pages: Sequence[Page], strategy: str, stopwords: Stopwords, client: Optional[Responder],
                 seed: int, max_k: int) -> Tuple[Dict[int, KeywordSet], str]:
    """Keyword sets for a conversation's pages; `selected` applies the data-aware rule first."""
    chosen = strategy
    if strategy == SELECTED:
        heuristic = [extract_heuristic(page, stopwords, max_k, bookmark_config.scan_turns) for page in pages]
        chosen = select_strategy(pages, heuristic, stopwords=stopwords)
    return build_keyword_book(pages, chosen, stopwords, client, seed, max_k), chosen


# Probe execution

def synthetic_messages(rendered: RenderedContext, question: str, system_prompt: str) -> List[ChatMessage]:
    """System prompt, stub section, in-context pages, then the question."""
    messages = [ChatMessage("system", system_prompt)]
    if rendered.stub_lines:
        messages.append(ChatMessage("system", rendered.stub_section()))
    if rendered.pages:
        messages.append(ChatMessage("user", rendered.page_section()))
    messages.append(ChatMessage("user", get_prompt("question", question=question)))
    return messages


def bookmark_hints(table: PageTable, fmt: BookmarkFormat) -> List[BookmarkHint]:
    hints = []
    for page_id in sorted(table.evicted):
        stub = table.evicted[page_id].with_format(fmt)
        keywords = [] if fmt.kind == "id_only" else list(stub.keywords.keywords)
        hints.append(BookmarkHint(stub.recall_id, keywords, stub.rendered))
    return hints


def answer_correct(probe: Probe, answer: str) -> bool:
    if probe.abstain:
        return is_abstention(answer)
    return bool(probe.answer) and probe.answer.lower() in (answer or "").lower()


def _probe_result(probe: Probe, transcript: ProbeTranscript, active: bool, needed: Sequence[int],
                  conv_id: str, method: str) -> ProbeResult:
    called = transcript.recall_called
    return ProbeResult(
        probe_id=probe.id,
        needed_page_active=active,
        recall_called=called,
        recalled_ids=list(transcript.recalled_ids),
        correct_page_recalled=called and bool(set(needed) & set(transcript.recalled_ids)),
        answer_correct=answer_correct(probe, transcript.final_answer),
        llm_calls=transcript.llm_calls,
        conv_id=conv_id,
        category=probe.category,
        method=method,
    )


def run_table_probe(table: PageTable, probe: Probe, responder: Responder, fmt: BookmarkFormat, conv_id: str,
                    max_tool_rounds: int, recall_param: str = "page_ids",
                    method: str = "bookmark_recall") -> Tuple[ProbeResult, ProbeTranscript, RenderedContext]:
    """Ask one probe against the table's current state; needed pages in context get a reference."""
    needed = probe.needed_page_ids(table.turn_to_page())
    in_context = [page_id for page_id in needed if table.in_context(page_id)]
    rendered = render_context(table, fmt)
    messages = synthetic_messages(rendered, probe.question, get_prompt("bookmark_system"))
    hints = ProbeHints(probe.question, probe.answer, list(probe.fact_markers), bookmark_hints(table, fmt), probe.abstain)

    reference(table, in_context)
    transcript = run_probe(
        responder, messages, hints, table,
        tools=[recall_tool(recall_param)],
        max_tool_rounds=max_tool_rounds,
        probe_logger=ProbeLogger(conv_id, probe.id),
    )
    return _probe_result(probe, transcript, bool(in_context), needed, conv_id, method), transcript, rendered


@dataclass
class ProbeSnapshot:
    probe_id: str
    active_ids: List[int]
    open_id: Optional[int]
    after_turn: int


@dataclass
class ConversationRun:
    conv_id: str
    results: List[ProbeResult]
    page_count: int
    evicted_count: int
    stub_tokens: List[int] = field(default_factory=list)
    snapshots: List[ProbeSnapshot] = field(default_factory=list)
    trace: List[Any] = field(default_factory=list)


def turn_to_page(pages: Sequence[Page]) -> Dict[int, int]:
    return {index: page.id for page in pages for index in range(page.first_index, page.last_index + 1)}


def probe_schedule(conv: Conversation, pages: Sequence[Page]) -> List[Tuple[int, int]]:
    """(probe ordinal, needed page id) in execution order; the future Bélády reads."""
    mapping = turn_to_page(pages)
    return [
        (ordinal, page_id)
        for ordinal, probe in enumerate(conv.ordered_probes())
        for page_id in probe.needed_page_ids(mapping)
    ]


def simulate_conversation(conv: Conversation, boundary: BoundaryStrategy, eviction: str, responder: Responder,
                          fmt: BookmarkFormat, pages: Sequence[Page], book: Dict[int, KeywordSet],
                          budget_k: int, max_tool_rounds: int, with_date: bool = False,
                          capture: bool = False) -> ConversationRun:
    """Stream a conversation turn by turn, asking interspersed probes on the way and end probes after flush."""
    schedule = probe_schedule(conv, pages) if eviction == "belady" else None
    table = PageTable(budget_k, EvictionPolicy(eviction, schedule), keyword_book_builder(book, fmt, with_date))
    probes = conv.ordered_probes()
    interspersed = [p for p in probes if p.position == "interspersed"]
    ends = [p for p in probes if p.position == "end"]
    run = ConversationRun(conv.conv_id, [], 0, 0)

    def ask(probe: Probe):
        if capture:
            open_id = table.open_page.id if table.open_page is not None else None
            run.snapshots.append(ProbeSnapshot(probe.id, sorted(table.active), open_id, probe.after_turn))
        result, _, rendered = run_table_probe(table, probe, responder, fmt, conv.conv_id, max_tool_rounds)
        run.results.append(result)
        run.stub_tokens.extend(estimate_tokens(line) for line in rendered.stub_lines)

    pos = 0
    for turn in conv.turns:
        ingest_turn(table, boundary, turn)
        while pos < len(interspersed) and interspersed[pos].after_turn <= turn.index:
            ask(interspersed[pos])
            pos += 1
    flush(table)
    for probe in interspersed[pos:] + ends:
        ask(probe)

    run.page_count = len(table.pages)
    run.evicted_count = len(table.evicted)
    return run


def replay_conversation(conv: Conversation, pages: Sequence[Page], snapshots: Sequence[ProbeSnapshot],
                        book: Dict[int, KeywordSet], fmt: BookmarkFormat, responder: Responder, budget_k: int,
                        max_tool_rounds: int, with_date: bool = False) -> ConversationRun:
    """Ask every probe again on its recorded active/evicted state with different stubs."""
    stubs = {page.id: make_bookmark(page, book[page.id], fmt, with_date) for page in pages}
    probes = {probe.id: probe for probe in conv.probes}
    run = ConversationRun(conv.conv_id, [], len(pages), 0)
    for snap in snapshots:
        table = PageTable.from_snapshot(pages, snap.active_ids, snap.open_id, stubs, budget_k,
                                        upto_index=snap.after_turn)
        open_id = table.open_page.id if table.open_page is not None else None
        run.trace.append([snap.probe_id, sorted(table.active), open_id, sorted(table.evicted)])
        result, _, rendered = run_table_probe(table, probes[snap.probe_id], responder, fmt, conv.conv_id,
                                              max_tool_rounds)
        run.results.append(result)
        run.stub_tokens.extend(estimate_tokens(line) for line in rendered.stub_lines)
        run.evicted_count = max(run.evicted_count, len(table.evicted))
    return run


# Grid

@dataclass
class CellResult:
    boundary: str
    eviction: str
    expected_probes: int
    status: str = "ok"
    error: str = ""
    results: List[ProbeResult] = field(default_factory=list)
    metrics: Optional[Metrics] = None
    per_category: Dict[str, Metrics] = field(default_factory=dict)
    avg_pages: Optional[float] = None
    eviction_rate: Optional[float] = None

    def summary(self) -> Dict[str, Any]:
        row = {
            "boundary": self.boundary,
            "eviction": self.eviction,
            "status": self.status,
            "error": self.error,
            "probes": len(self.results),
            "expected_probes": self.expected_probes,
            "avg_pages": self.avg_pages,
            "eviction_rate": self.eviction_rate,
        }
        if self.metrics is not None:
            row.update(self.metrics.to_record())
        return row


@dataclass
class GridReport:
    plan: ExperimentPlan
    cells: List[CellResult]

    def cell(self, boundary: str, eviction: str) -> Optional[CellResult]:
        return next((c for c in self.cells if c.boundary == boundary and c.eviction == eviction), None)

    @property
    def probe_total(self) -> int:
        return sum(len(cell.results) for cell in self.cells)


@log_performance
def run_grid(plan: ExperimentPlan, corpus: Sequence[Conversation], responder: Optional[Responder] = None) -> GridReport:
    """Every (boundary, eviction) cell over the whole corpus; a failing cell is reported, not raised."""
    plan.validate()
    responder = responder or probe_responder(plan)
    fmt = plan.bookmark_fmt()
    stopwords = default_stopwords()
    client = keyword_responder(plan) if plan.bookmark_strategy not in ("heuristic", "random", "tfidf", "generic") else None
    expected = sum(len(conv.probes) for conv in corpus)

    # Segmentation does not depend on eviction, so pages and keyword sets are shared by a boundary's cells
    prepared: Dict[Tuple[str, str], Tuple[List[Page], Dict[int, KeywordSet]]] = {}
    for boundary in plan.boundary_strategies():
        for conv in corpus:
            pages = segment(conv.turns, boundary)
            book, _ = keyword_book(pages, plan.bookmark_strategy, stopwords, client, plan.seed, plan.max_k)
            prepared[(boundary.name, conv.conv_id)] = (pages, book)

    def run_cell(cell: Tuple[BoundaryStrategy, str]) -> CellResult:
        boundary, eviction = cell
        outcome = CellResult(boundary.name, eviction, expected)
        try:
            runs = []
            for conv in corpus:
                pages, book = prepared[(boundary.name, conv.conv_id)]
                runs.append(simulate_conversation(
                    conv, boundary, eviction, responder, fmt, pages, book,
                    plan.budget_k, plan.max_tool_rounds, with_date=plan.locomo,
                ))
            outcome.results = [result for run in runs for result in run.results]
            outcome.metrics = aggregate(outcome.results, seed=plan.seed)
            outcome.per_category = aggregate_by(outcome.results, "category", seed=plan.seed)
            outcome.avg_pages = float(np.mean([run.page_count for run in runs]))
            outcome.eviction_rate = float(np.mean([not r.needed_page_active for r in outcome.results]))
        except Exception as e:
            logger.error(f"Cell {boundary.name}/{eviction} failed: {e}")
            outcome.status, outcome.error, outcome.results = "failed", str(e), []
        return outcome

    cells = list(itertools.product(plan.boundary_strategies(), plan.evictions))
    with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
        results = list(tqdm(pool.map(run_cell, cells), total=len(cells), desc="grid cells"))
    failed = sum(1 for cell in results if cell.status == "failed")
    if failed:
        logger.warning(f"{failed} of {len(results)} grid cell(s) failed")
    return GridReport(plan=plan, cells=results)


# Ablations

@dataclass
class AblationRow:
    variant: str
    metrics: Metrics
    trace_hash: str
    mean_stub_tokens: float
    scripted: bool = False
    chosen: Dict[str, int] = field(default_factory=dict)

    def summary(self) -> Dict[str, Any]:
        row = {
            "variant": self.variant,
            "trace_hash": self.trace_hash,
            "mean_stub_tokens": self.mean_stub_tokens,
            "scripted": self.scripted,
            "chosen": ",".join(f"{k}:{v}" for k, v in sorted(self.chosen.items())),
        }
        row.update(self.metrics.to_record())
        return row


@dataclass
class AblationReport:
    kind: str
    plan: ExperimentPlan
    rows: List[AblationRow]
    results: List[ProbeResult] = field(default_factory=list)

    @property
    def traces_identical(self) -> bool:
        return len({row.trace_hash for row in self.rows}) <= 1

    def row(self, variant: str) -> Optional[AblationRow]:
        return next((row for row in self.rows if row.variant == variant), None)


Trace = Dict[str, Tuple[List[Page], List[ProbeSnapshot]]]


def capture_traces(plan: ExperimentPlan, corpus: Sequence[Conversation]) -> Trace:
    """One recorded run per conversation: heuristic keywords, minimal stubs, no gullibility.

    The mock drives the recording in every mode, so live ablations vary only the stubs.
    """
    boundary = plan.boundary_strategies()[0]
    eviction = plan.evictions[0]
    stopwords = default_stopwords()
    recorder = MockResponder(replace(mock_config, gullibility=False))
    traces: Trace = {}
    for conv in corpus:
        pages = segment(conv.turns, boundary)
        book = build_keyword_book(pages, "heuristic", stopwords, max_k=plan.max_k)
        run = simulate_conversation(conv, boundary, eviction, recorder, plan.bookmark_fmt("minimal"), pages, book,
                                    plan.budget_k, plan.max_tool_rounds, with_date=plan.locomo, capture=True)
        traces[conv.conv_id] = (pages, run.snapshots)
    return traces


def _ablation_row(variant: str, runs: List[ConversationRun], seed: int, scripted: bool = False,
                  chosen: Optional[Dict[str, int]] = None) -> AblationRow:
    results = [result for run in runs for result in run.results]
    tokens = [tok for run in runs for tok in run.stub_tokens]
    return AblationRow(
        variant=variant,
        metrics=aggregate(results, seed=seed),
        trace_hash=stable_hash([run.trace for run in runs]),
        mean_stub_tokens=float(np.mean(tokens)) if tokens else 0.0,
        scripted=scripted,
        chosen=chosen or {},
    )


def _ablation_plan(plan: ExperimentPlan, stress: bool, boundary: Optional[str] = None,
                   budget_k: Optional[int] = None) -> ExperimentPlan:
    if stress:
        boundary = harness_config.stress_boundary
    return replace(plan, boundaries=[boundary or harness_config.ablation_boundary],
                   evictions=[harness_config.ablation_eviction], budget_k=budget_k or plan.budget_k).validate()


@log_performance
def run_bookmark_ablation(plan: ExperimentPlan, corpus: Sequence[Conversation],
                          strategies: Optional[Sequence[str]] = None, responder: Optional[Responder] = None,
                          client: Optional[Responder] = None, stress: bool = False,
                          include_selected: bool = True, kind: str = "bookmarks") -> AblationReport:
    """Same traces for every keyword strategy; only the stubs differ."""
    plan = _ablation_plan(plan, stress)
    strategies = list(strategies or ABLATION_STRATEGIES)
    if include_selected:
        strategies.append(SELECTED)
    responder = responder or probe_responder(plan)
    client = client or keyword_responder(plan)
    scripted = isinstance(client, ScriptedKeywordResponder)
    fmt = plan.bookmark_fmt()
    stopwords = default_stopwords()
    traces = capture_traces(plan, corpus)

    rows, all_results = [], []
    for strategy in tqdm(strategies, desc=f"{kind} ablation"):
        runs, chosen = [], {}
        for conv in corpus:
            pages, snapshots = traces[conv.conv_id]
            book, used = keyword_book(pages, strategy, stopwords, client, plan.seed, plan.max_k)
            chosen[used] = chosen.get(used, 0) + 1
            run = replay_conversation(conv, pages, snapshots, book, fmt, responder, plan.budget_k,
                                      plan.max_tool_rounds, with_date=plan.locomo)
            for result in run.results:
                result.method = strategy
            runs.append(run)
        llm_backed = strategy in ("llm_contextual", "llm_batch", "hybrid", SELECTED)
        rows.append(_ablation_row(strategy, runs, plan.seed, scripted and llm_backed,
                                  chosen if strategy == SELECTED else None))
        all_results.extend(result for run in runs for result in run.results)
    return AblationReport(kind=kind, plan=plan, rows=rows, results=all_results)


@log_performance
def run_format_ablation(plan: ExperimentPlan, corpus: Sequence[Conversation],
                        formats: Optional[Sequence[str]] = None, responder: Optional[Responder] = None,
                        stress: bool = False) -> AblationReport:
    """Accuracy and stub token cost per format, with a responder that can be fooled by rich stubs."""
    plan = _ablation_plan(plan, stress, harness_config.format_boundary, harness_config.format_budget_k)
    responder = responder or probe_responder(plan, gullibility=True)
    stopwords = default_stopwords()
    traces = capture_traces(plan, corpus)
    books = {
        conv.conv_id: build_keyword_book(traces[conv.conv_id][0], "heuristic", stopwords, max_k=plan.max_k)
        for conv in corpus
    }

    rows, all_results = [], []
    for kind in tqdm(list(formats or BOOKMARK_FORMATS), desc="format ablation"):
        fmt = plan.bookmark_fmt(kind)
        runs = []
        for conv in corpus:
            pages, snapshots = traces[conv.conv_id]
            run = replay_conversation(conv, pages, snapshots, books[conv.conv_id], fmt, responder,
                                      plan.budget_k, plan.max_tool_rounds, with_date=plan.locomo)
            for result in run.results:
                result.method = kind
            runs.append(run)
        rows.append(_ablation_row(kind, runs, plan.seed))
        all_results.extend(result for run in runs for result in run.results)
    return AblationReport(kind="formats", plan=plan, rows=rows, results=all_results)


def run_specificity_ablation(plan: ExperimentPlan, corpus: Sequence[Conversation],
                             responder: Optional[Responder] = None, stress: bool = False) -> AblationReport:
    """Generic topic-label keywords against domain-specific heuristic keywords."""
    return run_bookmark_ablation(plan, corpus, strategies=["generic", "heuristic"], responder=responder,
                                 stress=stress, include_selected=False, kind="specificity")


# Six-method comparison

@dataclass
class AssembledContext:
    messages: List[ChatMessage]
    tools: Optional[List[Dict[str, Any]]]
    hints: ProbeHints
    recent_hash: str
    visible_text: str
    search: Optional[MemorySearch] = None
    table: Optional[PageTable] = None


def session_groups(turns: Sequence[Turn]) -> List[List[Turn]]:
    """Consecutive runs of turns sharing a session tag."""
    groups: List[List[Turn]] = []
    for turn in turns:
        if groups and groups[-1][-1].session_tag == turn.session_tag:
            groups[-1].append(turn)
        else:
            groups.append([turn])
    return groups


def recent_block(turns: Sequence[Turn], method: MethodConfig) -> List[Turn]:
    """Last `trunc_window` turns of the most recent sessions; identical for every method."""
    recent = [turn for group in session_groups(turns)[-method.recent_sessions_full:] for turn in group]
    return recent[-method.trunc_window:]


def older_sessions(turns: Sequence[Turn], method: MethodConfig) -> Dict[int, str]:
    """Session position (1-based) -> rendered text, for sessions outside the recent ones."""
    groups = session_groups(turns)
    older = groups[:-method.recent_sessions_full] if len(groups) > method.recent_sessions_full else []
    return {pos: "\n".join(turn.render() for turn in group) for pos, group in enumerate(older, 1)}


def _render_turns(turns: Sequence[Turn]) -> str:
    return "\n".join(turn.render() for turn in turns)


def build_session_table(conv: Conversation, method: MethodConfig, book: Dict[int, KeywordSet]) -> PageTable:
    """Each session one page, the most recent ones active, everything older bookmarked."""
    table = PageTable(method.recent_sessions_full, EvictionPolicy("fifo"),
                      keyword_book_builder(book, BookmarkFormat("minimal", bookmark_config.snippet_chars), with_date=True))
    boundary = BoundaryStrategy("session")
    for turn in conv.turns:
        ingest_turn(table, boundary, turn)
    flush(table)
    return table


def assemble_context(method: MethodConfig, conv: Conversation, probe: Probe, table: Optional[PageTable] = None,
                     stopwords: Optional[Stopwords] = None) -> AssembledContext:
    """Messages, tools and responder hints for one probe under one method."""
    stopwords = stopwords or default_stopwords()
    recent = recent_block(conv.turns, method)
    recent_text = _render_turns(recent)
    sections: List[str] = []
    tools = None
    search = None
    system_prompt = get_prompt("baseline_system")
    stub_message: Optional[str] = None
    hints_bookmarks: List[BookmarkHint] = []

    if method.kind == "full_context":
        recent_ids = {turn.index for turn in recent}
        earlier = [turn for turn in conv.turns[-method.full_cap:] if turn.index not in recent_ids]
        if earlier:
            sections.append(get_prompt("earlier_context", earlier=_render_turns(earlier)))
    elif method.kind in ("bm25_top3", "overlap_top3"):
        texts = older_sessions(conv.turns, method)
        if texts:
            index = DocumentIndex.from_texts(texts, stopwords.words)
            scorer = bm25_scorer() if method.kind == "bm25_top3" else overlap_scorer()
            hits = top_k(content_tokens(probe.question, stopwords.words), index, method.top_k, scorer)
            retrieved = "\n\n".join(f"[S{doc_id}]\n{texts[doc_id]}" for doc_id, _ in hits)
            sections.append(get_prompt("retrieved_context", retrieved=retrieved))
    elif method.kind == "search_tool":
        system_prompt = get_prompt("search_system")
        tools = [memory_search_tool()]
        search = MemorySearch(older_sessions(conv.turns, method), stopwords.words, method.top_k)
    elif method.kind == "bookmark_recall":
        if table is None:
            raise ConfigError("bookmark_recall needs a page table")
        system_prompt = get_prompt("bookmark_system")
        tools = [recall_tool("session_ids")]
        fmt = BookmarkFormat("minimal", bookmark_config.snippet_chars)
        rendered = render_context(table, fmt)
        stub_message = rendered.stub_section() or None
        hints_bookmarks = bookmark_hints(table, fmt)

    sections.append(get_prompt("recent_context", recent=recent_text))
    messages = [ChatMessage("system", system_prompt)]
    if stub_message:
        messages.append(ChatMessage("system", stub_message))
    context_text = "\n\n".join(sections)
    messages.append(ChatMessage("user", context_text))
    messages.append(ChatMessage("user", get_prompt("question", question=probe.question)))

    hints = ProbeHints(probe.question, probe.answer, list(probe.fact_markers), hints_bookmarks, probe.abstain)
    return AssembledContext(
        messages=messages,
        tools=tools,
        hints=hints,
        recent_hash=stable_hash(recent_text),
        visible_text=context_text,
        search=search,
        table=table,
    )


@dataclass
class MethodReport:
    plan: ExperimentPlan
    results: List[ProbeResult]
    per_method: Dict[str, Metrics]
    per_category: Dict[str, Dict[str, Metrics]]
    judges: Dict[str, Dict[str, float]]
    agreement: Dict[Tuple[str, str], Optional[float]]
    significance: Dict[str, Dict[str, Any]]
    recent_blocks_identical: bool
    failed: int = 0
    unscored: int = 0


def _score(judges: Sequence[Judge], probe: Probe, answer: str) -> Tuple[Dict[str, int], int]:
    scores, unscored = {}, 0
    for judge in judges:
        try:
            scores[judge.name] = judge.score(probe.question, probe.answer, answer, probe.abstain)
        except (JudgeParseError, ModelIOError) as e:
            unscored += 1
            logger.warning(f"Judge {judge.name} could not score {probe.id}: {e}")
    return scores, unscored


def _significance(results: Sequence[ProbeResult], methods: Sequence[str], seed: int) -> Dict[str, Dict[str, Any]]:
    """Paired bootstrap of bookmark_recall against every other method over probes scored by both."""
    scores: Dict[str, Dict[Tuple[str, str], float]] = {}
    for result in results:
        if result.mean_score is not None:
            scores.setdefault(result.method, {})[(result.conv_id, result.probe_id)] = result.mean_score
    treatment = scores.get("bookmark_recall", {})
    tests = {}
    for method in methods:
        if method == "bookmark_recall" or method not in scores:
            continue
        shared = sorted(set(treatment) & set(scores[method]))
        if not shared:
            continue
        delta, p = paired_bootstrap([treatment[k] for k in shared], [scores[method][k] for k in shared], seed=seed)
        tests[method] = {"delta": delta, "p": p, "n": len(shared)}
    return tests


@log_performance
def run_methods(plan: ExperimentPlan, corpus: Sequence[Conversation], responder: Optional[Responder] = None,
                judges: Optional[Sequence[Judge]] = None) -> MethodReport:
    """Every method on every end-of-conversation probe, judged and compared."""
    plan.validate()
    responder = responder or probe_responder(plan)
    judges = list(judges) if judges else [ExactMatchJudge()]
    stopwords = default_stopwords()
    methods = [MethodConfig.from_config(kind) for kind in plan.methods]
    session_method = MethodConfig.from_config("bookmark_recall")

    def run_conversation(conv: Conversation) -> Tuple[List[ProbeResult], List[Tuple[str, str, str]], int, int]:
        results, hashes, failed, unscored = [], [], 0, 0
        table = None
        if "bookmark_recall" in plan.methods:
            pages = segment(conv.turns, BoundaryStrategy("session"))
            book = build_keyword_book(pages, "heuristic", stopwords, max_k=bookmark_config.locomo_max_k)
            table = build_session_table(conv, session_method, book)
        page_of = table.turn_to_page() if table is not None else {}

        for probe in conv.ordered_probes():
            for method in methods:
                context = assemble_context(method, conv, probe, table if method.kind == "bookmark_recall" else None,
                                           stopwords)
                hashes.append((conv.conv_id, probe.id, context.recent_hash))
                needed = probe.needed_page_ids(page_of)
                visible = any(marker in context.visible_text for marker in probe.fact_markers)
                try:
                    transcript = run_probe(
                        responder, context.messages, context.hints, context.table, context.tools,
                        plan.max_tool_rounds, context.search, ProbeLogger(conv.conv_id, probe.id),
                    )
                except ModelIOError as e:
                    failed += 1
                    logger.warning(f"{conv.conv_id}/{probe.id} [{method.kind}] failed: {e}")
                    continue
                result = _probe_result(probe, transcript, visible, needed, conv.conv_id, method.kind)
                result.judge_scores, missed = _score(judges, probe, transcript.final_answer)
                unscored += missed
                results.append(result)
        return results, hashes, failed, unscored

    with ThreadPoolExecutor(max_workers=plan.jobs) as pool:
        outcomes = list(tqdm(pool.map(run_conversation, corpus), total=len(corpus), desc="conversations"))

    results = [r for outcome in outcomes for r in outcome[0]]
    hashes = [h for outcome in outcomes for h in outcome[1]]
    failed = sum(outcome[2] for outcome in outcomes)
    unscored = sum(outcome[3] for outcome in outcomes)
    if failed:
        logger.warning(f"{failed} probe run(s) failed and were excluded")
    if unscored:
        logger.warning(f"{unscored} judgement(s) could not be parsed and were excluded")

    by_probe: Dict[Tuple[str, str], set] = {}
    for conv_id, probe_id, digest in hashes:
        by_probe.setdefault((conv_id, probe_id), set()).add(digest)

    by_method: Dict[str, List[ProbeResult]] = {}
    for result in results:
        by_method.setdefault(result.method, []).append(result)
    return MethodReport(
        plan=plan,
        results=results,
        per_method={m: aggregate(rs, seed=plan.seed) for m, rs in by_method.items()},
        per_category={m: aggregate_by(rs, "category", seed=plan.seed) for m, rs in by_method.items()},
        judges=judge_matrix(results),
        agreement=judge_agreement(results),
        significance=_significance(results, plan.methods, plan.seed),
        recent_blocks_identical=all(len(digests) == 1 for digests in by_probe.values()),
        failed=failed,
        unscored=unscored,
    )


# Acceptance

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _e2e(grid: GridReport, boundary: Optional[str] = None, eviction: Optional[str] = None) -> Optional[float]:
    values = [
        cell.metrics.e2e_accuracy for cell in grid.cells
        if cell.metrics is not None
        and (boundary is None or cell.boundary == boundary)
        and (eviction is None or cell.eviction == eviction)
    ]
    return float(np.mean(values)) if values else None


def _pages(grid: GridReport, boundary: str) -> Optional[float]:
    values = [cell.avg_pages for cell in grid.cells if cell.boundary == boundary and cell.avg_pages is not None]
    return float(np.mean(values)) if values else None


def check_belady(grid: GridReport) -> CheckResult:
    gaps = []
    for boundary in grid.plan.boundaries:
        oracle = _e2e(grid, boundary, "belady")
        for eviction in ("fifo", "lru", "lfu"):
            online = _e2e(grid, boundary, eviction)
            if oracle is None or online is None or oracle < online:
                gaps.append(f"{boundary}: belady {oracle} < {eviction} {online}")
    return CheckResult("belady_dominance", not gaps, "; ".join(gaps) or "belady >= online policies in every row")


def check_granularity(grid: GridReport) -> CheckResult:
    acc = {name: _e2e(grid, name) for name in ("fixed_5", "fixed_10", "fixed_20")}
    pages20, topic = _pages(grid, "fixed_20"), _pages(grid, "topic_shift")
    ok = None not in acc.values() and acc["fixed_20"] >= acc["fixed_10"] >= acc["fixed_5"]
    ok = ok and pages20 is not None and pages20 <= 10 and topic is not None and topic >= 2 * pages20
    return CheckResult("granularity", bool(ok), f"accuracy {acc}, pages fixed_20={pages20} topic_shift={topic}")


def check_inversion(forward: GridReport, revisit: GridReport) -> CheckResult:
    f_fifo, f_lfu = _e2e(forward, eviction="fifo"), _e2e(forward, eviction="lfu")
    r_fifo, r_lfu = _e2e(revisit, eviction="fifo"), _e2e(revisit, eviction="lfu")
    ok = None not in (f_fifo, f_lfu, r_fifo, r_lfu) and f_fifo > f_lfu and r_lfu > r_fifo
    return CheckResult("topology_inversion", bool(ok),
                       f"forward fifo={f_fifo} lfu={f_lfu}; revisit fifo={r_fifo} lfu={r_lfu}")


def check_false_positives(grid: GridReport) -> CheckResult:
    rates = [cell.metrics.false_positive_rate or 0.0 for cell in grid.cells if cell.metrics is not None]
    worst = max(rates) if rates else 0.0
    return CheckResult("zero_false_positives", worst == 0.0, f"max false positive rate {worst}")


def check_decomposition(grid: GridReport) -> CheckResult:
    bad = []
    for cell in grid.cells:
        m = cell.metrics
        if m is None or m.e2e_on_evicted is None or m.trigger_rate is None:
            continue
        product = m.trigger_rate * (m.selection_accuracy or 0.0)
        if abs(m.e2e_on_evicted - product) > 1e-9:
            bad.append(f"{cell.boundary}/{cell.eviction}: {m.e2e_on_evicted} vs {product}")
    return CheckResult("decomposition_identity", not bad, "; ".join(bad) or "holds in every cell")


def check_formats(report: AblationReport) -> CheckResult:
    rows = {row.variant: row for row in report.rows}
    if not all(kind in rows for kind in BOOKMARK_FORMATS):
        return CheckResult("format_direction", False, "missing format rows")
    acc = {k: rows[k].metrics.e2e_accuracy for k in BOOKMARK_FORMATS}
    tok = {k: rows[k].mean_stub_tokens for k in BOOKMARK_FORMATS}
    ok = (acc["minimal"] >= acc["medium"]
          and tok["id_only"] < tok["minimal"] < tok["structured"] <= tok["medium"])
    return CheckResult("format_direction", ok, f"accuracy {acc}; tokens {tok}")


def check_bookmarks(report: AblationReport) -> CheckResult:
    random_row, heuristic_row = report.row("random"), report.row("heuristic")
    ok = (report.traces_identical and random_row is not None and heuristic_row is not None
          and random_row.metrics.e2e_accuracy <= heuristic_row.metrics.e2e_accuracy)
    detail = (f"traces identical={report.traces_identical}; random="
              f"{random_row.metrics.e2e_accuracy if random_row else None} heuristic="
              f"{heuristic_row.metrics.e2e_accuracy if heuristic_row else None}")
    return CheckResult("bookmark_strategies", bool(ok), detail)


def check_token_envelope() -> CheckResult:
    fmt = BookmarkFormat("minimal")
    three = render_bookmark(fmt, BookmarkInputs(3, ["allergy", "peanut", "budget"]))
    five = render_bookmark(fmt, BookmarkInputs(12, ["allergy", "peanut", "budget", "lisbon", "deadline"]))
    ok = estimate_tokens(three) <= 10 and estimate_tokens(five) <= 30
    return CheckResult("token_envelope", ok, f"{three}={estimate_tokens(three)}, {five}={estimate_tokens(five)}")
