"""
Page table: groups a conversation's turns into pages, keeps at most k pages active,
compresses the rest into bookmark stubs and restores them on recall.
"""

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from utils.errors import ConfigError, InputError, PageStateError, SequencingError
from utils.text import estimate_tokens, token_set

SPEAKERS = ("user", "assistant")


@dataclass(frozen=True)
class Turn:
    """One utterance in the conversation stream."""

    index: int
    speaker: str
    text: str
    session_tag: str = ""
    topic: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise InputError(f"turn index must be >= 0, got {self.index}")
        if self.speaker not in SPEAKERS:
            raise InputError(f"unknown speaker {self.speaker!r}")
        if not self.text or not self.text.strip():
            raise InputError(f"turn {self.index} has empty text")

    def render(self) -> str:
        return f"{self.speaker}: {self.text}"

    def to_record(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "speaker": self.speaker,
            "text": self.text,
            "session_tag": self.session_tag,
            "topic": self.topic,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "Turn":
        return cls(
            index=int(record["index"]),
            speaker=record["speaker"],
            text=record["text"],
            session_tag=record.get("session_tag", ""),
            topic=record.get("topic", ""),
        )


def make_session_tag(number: int, date: str = "") -> str:
    """Session tags look like ``S4@2023-05-21``; the date part is optional."""
    return f"S{number}@{date}" if date else f"S{number}"


def split_session_tag(tag: str) -> Tuple[Optional[int], str]:
    """Inverse of `make_session_tag`; (None, "") for tags in another shape."""
    label, _, date = tag.partition("@")
    if label.startswith("S") and label[1:].isdigit():
        return int(label[1:]), date
    return None, ""


class PageStatus(str, Enum):
    OPEN = "open"
    ACTIVE = "active"
    EVICTED = "evicted"
    READMITTED = "readmitted"


@dataclass
class Page:
    """A contiguous run of turns; the unit of eviction and recall."""

    id: int
    created_at: int
    content: List[Turn] = field(default_factory=list)
    status: PageStatus = PageStatus.OPEN
    first_index: int = -1
    last_index: int = -1

    @property
    def turn_range(self) -> Tuple[int, int]:
        return (self.first_index, self.last_index)

    @property
    def session_tag(self) -> str:
        return self.content[0].session_tag if self.content else ""

    def append(self, turn: Turn):
        if not self.content and self.first_index < 0:
            self.first_index = turn.index
        self.content.append(turn)
        self.last_index = turn.index

    def text(self) -> str:
        return "\n".join(turn.render() for turn in self.content)

    def text_only(self) -> str:
        """Turn texts without speaker labels."""
        return "\n".join(turn.text for turn in self.content)


@dataclass(frozen=True)
class BoundaryStrategy:
    """Rule deciding where one page ends and the next begins."""

    kind: str
    n: int = 0
    jaccard_threshold: float = 0.15
    window: int = 5
    max_turns: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("fixed_n", "topic_shift", "exchange_n", "session"):
            raise ConfigError(f"unknown boundary kind {self.kind!r}")
        if self.kind in ("fixed_n", "exchange_n") and self.n < 1:
            raise ConfigError(f"{self.kind} requires n >= 1")
        if not 0.0 <= self.jaccard_threshold <= 1.0:
            raise ConfigError("jaccard_threshold must be in [0, 1]")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.max_turns is not None and self.max_turns < 1:
            raise ConfigError("max_turns must be >= 1")

    @property
    def name(self) -> str:
        if self.kind == "fixed_n":
            return f"fixed_{self.n}"
        if self.kind == "exchange_n":
            return f"exchange_{self.n}"
        return self.kind

    @classmethod
    def parse(cls, name: str, jaccard_threshold: float = 0.15, window: int = 5) -> "BoundaryStrategy":
        """Build a strategy from names like ``fixed_10``, ``exchange_5``, ``topic_shift``."""
        if name in ("topic_shift", "session"):
            return cls(kind=name, jaccard_threshold=jaccard_threshold, window=window)
        prefix, _, count = name.rpartition("_")
        if prefix in ("fixed", "exchange") and count.isdigit():
            return cls(kind=f"{prefix}_n", n=int(count))
        raise ConfigError(f"unknown boundary strategy {name!r}")


@dataclass
class EvictionPolicy:
    """Rule choosing which active page to compress when the budget is exceeded."""

    kind: str
    future_schedule: Optional[List[Tuple[int, int]]] = None

    def __post_init__(self):
        if self.kind not in ("fifo", "lru", "lfu", "belady"):
            raise ConfigError(f"unknown eviction policy {self.kind!r}")
        if self.kind == "belady" and self.future_schedule is None:
            raise ConfigError("belady eviction requires a future probe schedule")
        self._uses: Dict[int, List[int]] = {}
        for ordinal, page_id in sorted(self.future_schedule or []):
            self._uses.setdefault(page_id, []).append(ordinal)

    def next_use(self, page_id: int, probe_clock: int) -> float:
        """Ordinal of the next probe needing `page_id`, or +inf."""
        uses = self._uses.get(page_id, [])
        pos = bisect.bisect_left(uses, probe_clock)
        return uses[pos] if pos < len(uses) else math.inf


@dataclass
class AccessStats:
    last_ref: int
    ref_count: int = 0


@dataclass(frozen=True)
class PageEvent:
    kind: str
    page_id: int


@dataclass
class RecallResult:
    page_id: int
    turns: Optional[List[Turn]] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def render(self) -> str:
        if self.error:
            return f"[p{self.page_id}] error: {self.error}"
        body = "\n".join(turn.render() for turn in self.turns)
        return f"[p{self.page_id}]\n{body}"


@dataclass
class RenderedContext:
    stub_lines: List[str]
    pages: List[Tuple[int, str]]
    stub_tokens: int

    def stub_section(self) -> str:
        if not self.stub_lines:
            return ""
        return "Compressed memory:\n" + "\n".join(self.stub_lines)

    def page_section(self) -> str:
        return "\n\n".join(body for _, body in self.pages)

    def as_text(self) -> str:
        parts = [self.stub_section(), self.page_section()]
        return "\n\n".join(part for part in parts if part)


StubBuilder = Callable[[Page], Any]


def _default_stub_builder() -> StubBuilder:
    from models.bookmark import heuristic_stub_builder
    return heuristic_stub_builder()


class PageTable:
    """Bounded active set of pages plus the external store of evicted content."""

    def __init__(self, budget_k: int = 5, policy: Optional[EvictionPolicy] = None,
                 stub_builder: Optional[StubBuilder] = None):
        if budget_k < 1:
            raise ConfigError("budget_k must be >= 1")
        self.budget_k = budget_k
        self.policy = policy or EvictionPolicy("fifo")
        self.stub_builder = stub_builder or _default_stub_builder()

        self.pages: Dict[int, Page] = {}
        self.open_page: Optional[Page] = None
        self.active: List[int] = []
        self.evicted: Dict[int, Any] = {}
        self.store: Dict[int, Tuple[Turn, ...]] = {}
        self.access: Dict[int, AccessStats] = {}
        self.probe_clock = 0
        self.readmitted_this_probe: Set[int] = set()
        self.next_index = 0

        self._history: List[Set[str]] = []
        self._exchanges = 0
        self._pending_user = False

    @classmethod
    def from_snapshot(cls, pages: Sequence[Page], active_ids: Iterable[int], open_id: Optional[int],
                      stubs: Dict[int, Any], budget_k: int = 5,
                      upto_index: Optional[int] = None) -> "PageTable":
        """Rebuild a table in a recorded state: `active_ids` and `open_id` in context, every other page evicted.

        Pages starting after `upto_index` are left out and the open page is cut at it.
        """
        table = cls(budget_k=budget_k, stub_builder=lambda page: stubs[page.id])
        in_context = set(active_ids)
        if upto_index is not None:
            pages = [page for page in pages if page.first_index <= upto_index]
        for original in pages:
            turns = [turn for turn in original.content if upto_index is None or turn.index <= upto_index]
            page = Page(id=original.id, created_at=original.created_at,
                        first_index=original.first_index, last_index=turns[-1].index)
            table.pages[page.id] = page
            table.access[page.id] = AccessStats(last_ref=0)
            if page.id == open_id:
                page.content = turns
                table.open_page = page
            elif page.id in in_context:
                page.content = turns
                page.status = PageStatus.ACTIVE
                table.active.append(page.id)
            else:
                table.store[page.id] = tuple(turns)
                page.status = PageStatus.EVICTED
                table.evicted[page.id] = stubs[page.id]
        table.active.sort()
        if table.pages:
            table.next_index = max(page.last_index for page in table.pages.values()) + 1
        return table

    def in_context(self, page_id: int) -> bool:
        """True when the page's full text is visible: active or still open."""
        if self.open_page is not None and self.open_page.id == page_id:
            return True
        return page_id in self.active

    def turn_to_page(self) -> Dict[int, int]:
        mapping = {}
        for page in self.pages.values():
            for index in range(page.first_index, page.last_index + 1):
                mapping[index] = page.id
        return mapping

    def session_pages(self) -> Dict[int, int]:
        """Session number -> page id, for pages whose first turn carries a session tag."""
        mapping = {}
        for page in self.pages.values():
            number, _ = split_session_tag(page.session_tag)
            if number is not None:
                mapping.setdefault(number, page.id)
        return mapping


def jaccard_overlap(window_tokens: Set[str], new_tokens: Set[str]) -> float:
    """|A ∩ B| / |A ∪ B|; two empty sets count as identical."""
    union = window_tokens | new_tokens
    if not union:
        return 1.0
    return len(window_tokens & new_tokens) / len(union)


def _open(table: PageTable, at_index: int) -> PageEvent:
    page_id = len(table.pages) + 1
    page = Page(id=page_id, created_at=at_index)
    table.pages[page_id] = page
    table.open_page = page
    table.access[page_id] = AccessStats(last_ref=table.probe_clock)
    table._exchanges = 0
    table._pending_user = False
    return PageEvent("page_opened", page_id)


def _seal(table: PageTable) -> List[PageEvent]:
    page = table.open_page
    page.status = PageStatus.ACTIVE
    table.active.append(page.id)
    table.open_page = None
    events = [PageEvent("page_sealed", page.id)]
    if len(table.active) > table.budget_k:
        victim = select_victim(table.policy, table)
        evict(table, victim, table.stub_builder(table.pages[victim]))
        events.append(PageEvent("page_evicted", victim))
    return events


def _splits_before(table: PageTable, strategy: BoundaryStrategy, turn: Turn) -> bool:
    if strategy.kind == "session":
        return turn.session_tag != table.open_page.session_tag
    if strategy.kind == "topic_shift":
        if len(table._history) < strategy.window:
            return False
        window = set().union(*table._history[-strategy.window:])
        return jaccard_overlap(window, token_set(turn.text)) < strategy.jaccard_threshold
    return False


def _splits_after(table: PageTable, strategy: BoundaryStrategy) -> bool:
    size = len(table.open_page.content)
    if strategy.kind == "fixed_n":
        return size >= strategy.n
    if strategy.kind == "exchange_n":
        return table._exchanges >= strategy.n
    return strategy.max_turns is not None and size >= strategy.max_turns


def ingest_turn(table: PageTable, strategy: BoundaryStrategy, turn: Turn) -> List[PageEvent]:
    """Append one turn; seal and evict as the boundary strategy and budget require."""
    if turn.index != table.next_index:
        raise SequencingError(f"expected turn {table.next_index}, got {turn.index}")

    events: List[PageEvent] = []
    if table.open_page is not None and _splits_before(table, strategy, turn):
        events.extend(_seal(table))
    if table.open_page is None:
        events.append(_open(table, turn.index))

    table.open_page.append(turn)
    table._history.append(token_set(turn.text))
    table.next_index += 1

    if turn.speaker == "user":
        table._pending_user = True
    elif table._pending_user:
        table._exchanges += 1
        table._pending_user = False

    if _splits_after(table, strategy):
        events.extend(_seal(table))
    return events


def flush(table: PageTable) -> List[PageEvent]:
    """Seal the open page at end of stream."""
    if table.open_page is None:
        return []
    return _seal(table)


def select_victim(policy: EvictionPolicy, table: PageTable) -> int:
    if not table.active:
        raise PageStateError("no active page to evict")
    pages = table.pages
    if policy.kind == "fifo":
        return min(table.active, key=lambda pid: (pages[pid].created_at, pid))
    if policy.kind == "lru":
        return min(table.active, key=lambda pid: (table.access[pid].last_ref, pages[pid].created_at, pid))
    if policy.kind == "lfu":
        return min(table.active, key=lambda pid: (table.access[pid].ref_count, pages[pid].created_at, pid))
    # Furthest next use wins; among equal next uses the lowest id.
    return max(table.active, key=lambda pid: (policy.next_use(pid, table.probe_clock), -pid))


def evict(table: PageTable, page_id: int, stub: Any):
    """Move an active page's content to the store and leave `stub` in its place."""
    page = table.pages.get(page_id)
    if page is None or page.status != PageStatus.ACTIVE or page_id not in table.active:
        state = page.status.value if page else "unknown"
        raise PageStateError(f"cannot evict page {page_id} in state {state}")
    table.store[page_id] = tuple(page.content)
    page.content = []
    page.status = PageStatus.EVICTED
    table.active.remove(page_id)
    table.evicted[page_id] = stub


def reference(table: PageTable, page_ids: Iterable[int]):
    """Record a probe reference for pages answered from context."""
    for page_id in page_ids:
        stats = table.access.get(page_id)
        if stats is not None:
            stats.last_ref = table.probe_clock
            stats.ref_count += 1


def recall(table: PageTable, page_ids: Sequence[int]) -> List[RecallResult]:
    """Return full content for each id; evicted pages are readmitted until `end_probe`."""
    if not page_ids:
        raise InputError("recall needs at least one page id")

    results = []
    for page_id in page_ids:
        page = table.pages.get(page_id)
        if page is None:
            results.append(RecallResult(page_id, error="unknown page"))
            continue
        if page.status == PageStatus.EVICTED:
            page.content = list(table.store[page_id])
            page.status = PageStatus.READMITTED
            table.readmitted_this_probe.add(page_id)
        reference(table, [page_id])
        results.append(RecallResult(page_id, turns=list(page.content)))
    return results


def end_probe(table: PageTable) -> List[int]:
    """Re-evict pages readmitted during this probe and advance the probe clock."""
    re_evicted = sorted(table.readmitted_this_probe)
    for page_id in re_evicted:
        page = table.pages[page_id]
        page.content = []
        page.status = PageStatus.EVICTED
    table.readmitted_this_probe.clear()
    table.probe_clock += 1
    return re_evicted


def render_context(table: PageTable, fmt: Any = None) -> RenderedContext:
    """Stubs for evicted pages in id order, then full text of in-context pages in id order."""
    stub_lines = []
    for page_id in sorted(table.evicted):
        stub = table.evicted[page_id]
        if fmt is not None and hasattr(stub, "with_format"):
            stub = stub.with_format(fmt)
        stub_lines.append(stub.rendered if hasattr(stub, "rendered") else str(stub))

    in_context = sorted(table.active)
    if table.open_page is not None:
        in_context.append(table.open_page.id)
    pages = [(page_id, table.pages[page_id].text()) for page_id in sorted(in_context)]
    return RenderedContext(
        stub_lines=stub_lines,
        pages=pages,
        stub_tokens=sum(estimate_tokens(line) for line in stub_lines),
    )


def segment(turns: Sequence[Turn], strategy: BoundaryStrategy) -> List[Page]:
    """Final page partition of a stream, independent of any eviction."""
    table = PageTable(budget_k=len(turns) + 1, stub_builder=lambda page: None)
    for turn in turns:
        ingest_turn(table, strategy, turn)
    flush(table)
    return [table.pages[page_id] for page_id in sorted(table.pages)]


def check_invariants(table: PageTable) -> List[str]:
    """Violated page-table invariants, empty when the table is consistent."""
    problems = []
    if len(table.active) > table.budget_k:
        problems.append(f"{len(table.active)} active pages exceed budget {table.budget_k}")
    if set(table.active) & set(table.evicted):
        problems.append("a page is both active and evicted")
    open_ids = {table.open_page.id} if table.open_page else set()
    for page_id in table.pages:
        homes = (page_id in open_ids) + (page_id in table.active) + (page_id in table.evicted)
        if homes != 1:
            problems.append(f"page {page_id} lives in {homes} places")
    for page_id in table.evicted:
        if page_id not in table.store:
            problems.append(f"evicted page {page_id} has no stored content")

    expected = 0
    for page_id in sorted(table.pages):
        first, last = table.pages[page_id].turn_range
        if first != expected:
            problems.append(f"page {page_id} starts at {first}, expected {expected}")
        expected = last + 1
    if table.pages and expected != table.next_index:
        problems.append(f"pages cover {expected} turns, stream has {table.next_index}")
    return problems
