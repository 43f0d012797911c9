"""
Bookmark generation: keyword extraction for evicted pages under several strategies,
rendering in four stub formats and the data-aware strategy selection rule.
"""

import hashlib
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from config.prompts import get_prompt
from config.settings import bookmark_config
from models.messages import ChatMessage, KeywordHints
from models.pager import Page, split_session_tag
from utils.errors import ConfigError, InputError, ModelIOError
from utils.logging import get_logger
from utils.text import content_tokens, estimate_tokens, tokenize, unique

if TYPE_CHECKING:
    from integrations.base import Responder

logger = get_logger(__name__)

SOURCES = ("random", "heuristic", "tfidf", "llm_contextual", "llm_batch", "hybrid", "generic")
FORMAT_KINDS = ("id_only", "minimal", "medium", "structured")
STOPWORD_COUNT = 60

_CAPITALIZED = re.compile(r"[A-Z][A-Za-z]+")
_NUMERIC = re.compile(r"\$?\d(?:[\d,.:/-]*\d)?%?")
_MONTHS = {
    "january", "february", "march", "april", "june", "july", "august",
    "september", "october", "november", "december",
    "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
}
_EDGE_PUNCT = ".,!?;:\"'()[]{}<>*"
_BATCH_LINE = re.compile(r"^\s*[\-*]?\s*\[?p(\d+)\]?\s*[:\-]\s*(.*)$", re.IGNORECASE)


@dataclass(frozen=True)
class Stopwords:
    """The shipped stopword list; `digest` pins the exact file contents."""

    words: FrozenSet[str]
    digest: str
    path: str = ""

    def __post_init__(self):
        if len(self.words) != STOPWORD_COUNT:
            raise ConfigError(f"stopword list must hold {STOPWORD_COUNT} words, found {len(self.words)}")
        upper = sorted(word for word in self.words if word != word.lower())
        if upper:
            raise ConfigError(f"stopwords must be lowercase: {upper[:5]}")

    def __contains__(self, word: str) -> bool:
        return word in self.words

    @classmethod
    def load(cls, path: Optional[str] = None) -> "Stopwords":
        path = Path(path or bookmark_config.stopwords_path)
        if not path.is_absolute() and not path.exists():
            path = Path(__file__).resolve().parent.parent / path
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read stopword list {path}: {exc}") from exc
        words = [line.strip() for line in raw.decode("utf-8").splitlines() if line.strip()]
        return cls(words=frozenset(words), digest=hashlib.sha256(raw).hexdigest(), path=str(path))


_default_stopwords: Optional[Stopwords] = None


def default_stopwords() -> Stopwords:
    global _default_stopwords
    if _default_stopwords is None:
        _default_stopwords = Stopwords.load()
    return _default_stopwords


@dataclass(frozen=True)
class KeywordSet:
    page_id: int
    keywords: List[str]
    source: str
    fallback: bool = False

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InputError(f"unknown keyword source {self.source!r}")
        if not self.keywords:
            raise InputError(f"page {self.page_id} has an empty keyword set")
        if len(set(self.keywords)) != len(self.keywords):
            raise InputError(f"page {self.page_id} has duplicate keywords")

    def to_record(self) -> Dict:
        return {"page_id": self.page_id, "keywords": list(self.keywords),
                "source": self.source, "fallback": self.fallback}


@dataclass(frozen=True)
class BookmarkFormat:
    kind: str = "minimal"
    snippet_chars: int = 60

    def __post_init__(self):
        if self.kind not in FORMAT_KINDS:
            raise ConfigError(f"unknown bookmark format {self.kind!r}")
        if self.snippet_chars < 1:
            raise ConfigError("snippet_chars must be >= 1")


@dataclass(frozen=True)
class BookmarkInputs:
    page_id: int
    keywords: List[str] = field(default_factory=list)
    snippet_source: str = ""
    session_date: Optional[str] = None
    session_number: Optional[int] = None


@dataclass(frozen=True)
class Bookmark:
    page_id: int
    keywords: KeywordSet
    format: BookmarkFormat
    rendered: str
    token_estimate: int
    session_date: Optional[str] = None
    snippet_source: str = ""
    session_number: Optional[int] = None

    @property
    def recall_id(self) -> int:
        """The id a recall call names: the session number on LoCoMo tables, else the page id."""
        return self.page_id if self.session_number is None else self.session_number

    def with_format(self, fmt: BookmarkFormat) -> "Bookmark":
        """Same keywords re-rendered in another format."""
        if fmt == self.format:
            return self
        rendered = render_bookmark(fmt, self.inputs())
        return replace(self, format=fmt, rendered=rendered, token_estimate=token_estimate(rendered))

    def inputs(self) -> BookmarkInputs:
        return BookmarkInputs(self.page_id, list(self.keywords.keywords), self.snippet_source, self.session_date,
                              self.session_number)


def token_estimate(s: str) -> int:
    return estimate_tokens(s)


def render_bookmark(fmt: BookmarkFormat, inputs: BookmarkInputs) -> str:
    """Render one stub; the grammar is exact.

    id_only ``[pN]``, minimal ``[pN:kw1,kw2]``, medium ``[pN:kw1,kw2 "snippet..."]``,
    structured ``[pN:t=kw1;e=kw2,kw3]``. LoCoMo sessions use ``SN(date)`` as the label, N being the session number.
    """
    if inputs.session_date is not None:
        number = inputs.page_id if inputs.session_number is None else inputs.session_number
        label = f"S{number}({inputs.session_date})"
    else:
        label = f"p{inputs.page_id}"
    if fmt.kind == "id_only":
        return f"[{label}]"
    if not inputs.keywords:
        raise InputError(f"{fmt.kind} bookmark for {label} needs keywords")

    # Commas separate keywords in every format
    keywords = [kw.replace(",", "") for kw in inputs.keywords]
    if fmt.kind == "minimal":
        return f"[{label}:{','.join(keywords)}]"
    if fmt.kind == "medium":
        snippet = inputs.snippet_source[:fmt.snippet_chars].replace('"', "'")
        return f'[{label}:{",".join(keywords)} "{snippet}..."]'
    return f"[{label}:t={keywords[0]};e={','.join(keywords[1:])}]"


def _raw_tokens(text: str) -> List[str]:
    tokens = []
    for raw in text.split():
        token = raw.strip(_EDGE_PUNCT)
        if token.endswith(("'s", "’s")):
            token = token[:-2]
        if token:
            tokens.append(token)
    return tokens


def _is_anchor(token: str) -> bool:
    if _CAPITALIZED.fullmatch(token) or _NUMERIC.fullmatch(token):
        return True
    return token.lower() in _MONTHS


def _first_tokens(page: Page, stopwords: Stopwords, max_k: int, exclude: Sequence[str] = ()) -> List[str]:
    taken = set(exclude)
    tokens = [tok for tok in unique(content_tokens(page.text_only(), stopwords.words)) if tok not in taken]
    if not tokens:
        tokens = [tok for tok in unique(tokenize(page.text_only())) if tok not in taken]
    return tokens[:max_k]


def extract_heuristic(page: Page, stopwords: Stopwords, max_k: int = 5, scan_turns: int = 4) -> KeywordSet:
    """Capitalized tokens, numbers and dates from the first turns of a page."""
    if not page.content:
        raise InputError(f"page {page.id} is empty")
    found = []
    for turn in page.content[:scan_turns]:
        found.extend(tok.lower() for tok in _raw_tokens(turn.text) if _is_anchor(tok))
    keywords = [tok for tok in unique(found) if tok not in stopwords][:max_k]
    if keywords:
        return KeywordSet(page.id, keywords, "heuristic")

    keywords = _first_tokens(page, stopwords, max_k) or [f"page{page.id}"]
    return KeywordSet(page.id, keywords, "heuristic", fallback=True)


def extract_random(page: Page, stopwords: Stopwords, seed: int, count: int = 4) -> KeywordSet:
    eligible = unique(content_tokens(page.text_only(), stopwords.words))
    if not eligible:
        fallback = extract_heuristic(page, stopwords, max_k=count)
        return KeywordSet(page.id, fallback.keywords, "random", fallback=True)
    rng = random.Random(f"{seed}:{page.id}")
    return KeywordSet(page.id, rng.sample(eligible, min(count, len(eligible))), "random")


def tfidf_text_scores(texts: Mapping[int, str], stopwords: Stopwords) -> Dict[int, Dict[str, float]]:
    """Raw tf times ln((P + 1) / (df + 1)) for every non-stopword token of every text, keyed like `texts`."""
    counts = {key: Counter(content_tokens(text, stopwords.words)) for key, text in texts.items()}
    df: Counter = Counter()
    for counter in counts.values():
        df.update(counter.keys())
    total = len(texts)
    return {
        key: {tok: tf * math.log((total + 1) / (df[tok] + 1)) for tok, tf in counter.items()}
        for key, counter in counts.items()
    }


def tfidf_scores(all_pages: Sequence[Page], stopwords: Stopwords) -> Dict[int, Dict[str, float]]:
    return tfidf_text_scores({page.id: page.text_only() for page in all_pages}, stopwords)


def rank_by_tfidf(texts: Mapping[int, str], stopwords: Stopwords) -> Dict[int, List[str]]:
    """Tokens of each text by descending TF-IDF, ties broken by first occurrence."""
    scores = tfidf_text_scores(texts, stopwords)
    ranked = {}
    for key, text in texts.items():
        order = {tok: pos for pos, tok in enumerate(unique(content_tokens(text, stopwords.words)))}
        ranked[key] = sorted(scores[key], key=lambda tok: (-scores[key][tok], order[tok]))
    return ranked


def extract_tfidf(all_pages: Sequence[Page], page_id: int, k: int, stopwords: Stopwords) -> KeywordSet:
    page = next((p for p in all_pages if p.id == page_id), None)
    if page is None:
        raise InputError(f"page {page_id} not among the given pages")
    if len(all_pages) < 2:
        logger.warning(f"TF-IDF needs at least 2 pages, got {len(all_pages)}; using heuristic keywords for p{page_id}")
        fallback = extract_heuristic(page, stopwords, max_k=k)
        return KeywordSet(page_id, fallback.keywords, "tfidf", fallback=True)

    ranked = rank_by_tfidf({p.id: p.text_only() for p in all_pages}, stopwords)[page_id][:k]
    if not ranked:
        fallback = extract_heuristic(page, stopwords, max_k=k)
        return KeywordSet(page_id, fallback.keywords, "tfidf", fallback=True)
    return KeywordSet(page_id, ranked, "tfidf")


def parse_keyword_reply(text: str, max_k: int) -> List[str]:
    """Comma or line separated keywords, lowercased and deduped."""
    keywords = []
    for chunk in re.split(r"[,\n;]", text or ""):
        keyword = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", chunk).strip().strip(_EDGE_PUNCT).strip().lower()
        if keyword:
            keywords.append(keyword)
    return unique(keywords)[:max_k]


def page_digest(page: Page, chars: Optional[int] = None) -> str:
    chars = chars or bookmark_config.digest_chars
    first = page.content[0].text if page.content else ""
    return " ".join(first.split())[:chars]


def _excerpt(page: Page, chars: int = 300) -> str:
    return " ".join(page.text_only().split())[:chars]


def gen_llm_contextual(page: Page, other_digests: Sequence[str], client: "Responder",
                       stopwords: Stopwords, max_k: int = 5) -> KeywordSet:
    """One model call per page, told what every other page is about."""
    prompt = get_prompt(
        "keywords_contextual",
        page_id=page.id,
        page_text=_excerpt(page, 2000),
        digests="\n".join(other_digests) or "(none)",
        max_k=max_k,
    )
    messages = [ChatMessage("system", get_prompt("keyword_system")), ChatMessage("user", prompt)]
    hints = KeywordHints(task="contextual", page_texts={page.id: page.text_only()}, target_page=page.id, max_k=max_k)
    reply = client.complete(messages, tools=None, hints=hints)

    keywords = parse_keyword_reply(reply.content, max_k)
    if not keywords:
        logger.warning(f"unparseable keyword reply for p{page.id}; using heuristic keywords")
        fallback = extract_heuristic(page, stopwords, max_k=max_k)
        return KeywordSet(page.id, fallback.keywords, "llm_contextual", fallback=True)
    return KeywordSet(page.id, keywords, "llm_contextual")


def _parse_page_lines(text: str, max_k: int) -> Dict[int, List[str]]:
    parsed: Dict[int, List[str]] = {}
    for line in (text or "").splitlines():
        match = _BATCH_LINE.match(line)
        if match:
            page_id = int(match.group(1))
            if page_id not in parsed:
                parsed[page_id] = parse_keyword_reply(match.group(2).replace(";", ","), max_k)
    return parsed


def _batch_chunks(all_pages: Sequence[Page], max_k: int, prompt_chars: int) -> List[List[Page]]:
    def prompt_for(pages):
        listing = "\n".join(f"p{page.id}: {_excerpt(page)}" for page in pages)
        return get_prompt("keywords_batch", pages=listing, max_k=max_k)

    pending, chunks = [list(all_pages)], []
    while pending:
        pages = pending.pop(0)
        if len(pages) > 1 and len(prompt_for(pages)) > prompt_chars:
            middle = len(pages) // 2
            pending[:0] = [pages[:middle], pages[middle:]]
        else:
            chunks.append(pages)
    return chunks


def gen_llm_batch(all_pages: Sequence[Page], client: "Responder", stopwords: Stopwords,
                  max_k: int = 5, prompt_chars: Optional[int] = None) -> List[KeywordSet]:
    """One call over all pages (split in halves past the prompt budget), then cross-page dedupe."""
    prompt_chars = prompt_chars or bookmark_config.batch_prompt_chars
    proposed: Dict[int, List[str]] = {}
    for chunk in _batch_chunks(all_pages, max_k, prompt_chars):
        listing = "\n".join(f"p{page.id}: {_excerpt(page)}" for page in chunk)
        messages = [
            ChatMessage("system", get_prompt("keyword_system")),
            ChatMessage("user", get_prompt("keywords_batch", pages=listing, max_k=max_k)),
        ]
        hints = KeywordHints(task="batch", page_texts={page.id: page.text_only() for page in chunk}, max_k=max_k)
        reply = client.complete(messages, tools=None, hints=hints)
        for page_id, keywords in _parse_page_lines(reply.content, max_k).items():
            proposed.setdefault(page_id, keywords)

    used = set()
    results, gaps = [], 0
    for page in all_pages:
        keywords = [kw for kw in proposed.get(page.id, []) if kw not in used]
        fallback = not keywords
        if fallback:
            gaps += 1
            heuristic = extract_heuristic(page, stopwords, max_k=max_k).keywords
            keywords = [kw for kw in heuristic if kw not in used]
            keywords = keywords or _first_tokens(page, stopwords, max_k, exclude=used) or [f"page{page.id}"]
        used.update(keywords)
        results.append(KeywordSet(page.id, keywords, "llm_batch", fallback=fallback))
    if gaps:
        logger.warning(f"llm_batch fell back to heuristic keywords for {gaps} of {len(all_pages)} page(s)")
    return results


def gen_hybrid(all_pages: Sequence[Page], heuristic_sets: Sequence[KeywordSet],
               client: "Responder") -> List[KeywordSet]:
    """Heuristic keywords plus one model-proposed keyword no other page has."""
    base = {ks.page_id: list(ks.keywords) for ks in heuristic_sets}
    listing = "\n".join(
        f"p{page.id} [{', '.join(base.get(page.id, []))}]: {_excerpt(page)}" for page in all_pages
    )
    messages = [
        ChatMessage("system", get_prompt("keyword_system")),
        ChatMessage("user", get_prompt("keywords_hybrid", pages=listing)),
    ]
    hints = KeywordHints(task="hybrid", page_texts={page.id: page.text_only() for page in all_pages},
                         keywords=base, max_k=1)
    try:
        reply = client.complete(messages, tools=None, hints=hints)
    except ModelIOError as exc:
        logger.warning(f"hybrid keyword call failed ({exc}); keeping heuristic keywords")
        return [KeywordSet(ks.page_id, list(ks.keywords), "hybrid", fallback=True) for ks in heuristic_sets]

    proposals = _parse_page_lines(reply.content, 1)
    accepted: Dict[int, str] = {}
    results = []
    for ks in heuristic_sets:
        keywords = list(ks.keywords)
        proposal = (proposals.get(ks.page_id) or [None])[0]
        taken = {kw for pid, kws in base.items() if pid != ks.page_id for kw in kws}
        taken.update(accepted.values())
        if proposal and proposal not in taken and proposal not in keywords:
            keywords.append(proposal)
            accepted[ks.page_id] = proposal
        results.append(KeywordSet(ks.page_id, keywords, "hybrid", fallback=ks.page_id not in accepted))
    return results


def extract_generic(page: Page, stopwords: Stopwords, max_k: int = 5) -> KeywordSet:
    """Topic-label keywords ("travel", "plans"): the low-specificity end of the specificity ablation."""
    label = next((turn.topic for turn in page.content if turn.topic), "")
    keywords = unique(content_tokens(label, stopwords.words))[:max_k]
    if not keywords:
        fallback = extract_heuristic(page, stopwords, max_k=max_k)
        return KeywordSet(page.id, fallback.keywords, "generic", fallback=True)
    return KeywordSet(page.id, keywords, "generic")


def heuristic_mass(all_pages: Sequence[Page], heuristic_sets: Sequence[KeywordSet], stopwords: Stopwords) -> float:
    """Mean share of each page's TF-IDF mass carried by its heuristic keywords."""
    scores = tfidf_scores(all_pages, stopwords)
    shares = []
    for ks in heuristic_sets:
        page_scores = scores.get(ks.page_id, {})
        total = sum(page_scores.values())
        keyword_tokens = unique(tok for kw in ks.keywords for tok in tokenize(kw))
        covered = sum(page_scores.get(tok, 0.0) for tok in keyword_tokens)
        shares.append(covered / total if total > 0 else 0.0)
    return sum(shares) / len(shares) if shares else 0.0


def select_strategy(all_pages: Sequence[Page], heuristic_sets: Sequence[KeywordSet],
                    threshold: Optional[float] = None, stopwords: Optional[Stopwords] = None) -> str:
    """``hybrid`` when heuristic keywords carry enough of the TF-IDF mass, else ``llm_batch``."""
    threshold = bookmark_config.selection_threshold if threshold is None else threshold
    if len(all_pages) < 2:
        return "hybrid"
    mass = heuristic_mass(all_pages, heuristic_sets, stopwords or default_stopwords())
    choice = "hybrid" if mass >= threshold else "llm_batch"
    logger.debug(f"heuristic TF-IDF mass {mass:.3f} vs threshold {threshold:.3f} -> {choice}")
    return choice


def _session_label(page: Page) -> Tuple[Optional[int], Optional[str]]:
    number, date = split_session_tag(page.session_tag)
    return (number, date) if number is not None else (None, None)


def make_bookmark(page: Page, keywords: KeywordSet, fmt: Optional[BookmarkFormat] = None,
                  with_date: bool = False) -> Bookmark:
    fmt = fmt or BookmarkFormat("minimal", bookmark_config.snippet_chars)
    session_number, session_date = _session_label(page) if with_date else (None, None)
    snippet_source = page.content[0].text if page.content else ""
    inputs = BookmarkInputs(page.id, list(keywords.keywords), snippet_source, session_date, session_number)
    rendered = render_bookmark(fmt, inputs)
    return Bookmark(
        page_id=page.id,
        keywords=keywords,
        format=fmt,
        rendered=rendered,
        token_estimate=token_estimate(rendered),
        session_date=session_date,
        snippet_source=snippet_source,
        session_number=session_number,
    )


def heuristic_stub_builder(stopwords: Optional[Stopwords] = None, fmt: Optional[BookmarkFormat] = None,
                           max_k: Optional[int] = None, with_date: bool = False) -> Callable[[Page], Bookmark]:
    """Stub builder for a PageTable: heuristic keywords computed at eviction time."""
    stopwords = stopwords or default_stopwords()
    max_k = max_k or bookmark_config.synthetic_max_k

    def build(page: Page) -> Bookmark:
        keywords = extract_heuristic(page, stopwords, max_k=max_k, scan_turns=bookmark_config.scan_turns)
        return make_bookmark(page, keywords, fmt, with_date)

    return build


def keyword_book_builder(book: Dict[int, KeywordSet], fmt: Optional[BookmarkFormat] = None,
                         with_date: bool = False) -> Callable[[Page], Bookmark]:
    """Stub builder reading precomputed keyword sets by page id."""

    def build(page: Page) -> Bookmark:
        return make_bookmark(page, book[page.id], fmt, with_date)

    return build


def build_keyword_book(pages: Sequence[Page], strategy: str, stopwords: Stopwords,
                       client: Optional["Responder"] = None, seed: int = 0,
                       max_k: Optional[int] = None) -> Dict[int, KeywordSet]:
    """Keyword sets for every page of a conversation under one strategy."""
    max_k = max_k or bookmark_config.synthetic_max_k
    scan = bookmark_config.scan_turns
    if strategy in ("llm_contextual", "llm_batch", "hybrid") and client is None:
        raise ConfigError(f"keyword strategy {strategy} needs a responder")

    if strategy == "heuristic":
        sets = [extract_heuristic(page, stopwords, max_k, scan) for page in pages]
    elif strategy == "random":
        sets = [extract_random(page, stopwords, seed, bookmark_config.random_count) for page in pages]
    elif strategy == "tfidf":
        sets = [extract_tfidf(pages, page.id, max_k, stopwords) for page in pages]
    elif strategy == "generic":
        sets = [extract_generic(page, stopwords, max_k) for page in pages]
    elif strategy == "llm_contextual":
        digests = {page.id: f"p{page.id}: {page_digest(page)}" for page in pages}
        sets = [
            gen_llm_contextual(page, [d for pid, d in digests.items() if pid != page.id], client, stopwords, max_k)
            for page in pages
        ]
    elif strategy == "llm_batch":
        sets = gen_llm_batch(pages, client, stopwords, max_k)
    elif strategy == "hybrid":
        heuristic = [extract_heuristic(page, stopwords, max_k, scan) for page in pages]
        sets = gen_hybrid(pages, heuristic, client)
    else:
        raise ConfigError(f"unknown keyword strategy {strategy!r}")
    return {ks.page_id: ks for ks in sets}
