"""
Lexical retrieval for the baselines: BM25 and word-overlap ranking of evicted sessions.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from config.settings import retrieval_config
from utils.errors import ConfigError, InputError
from utils.text import content_tokens

OVERLAP_DENOMINATORS = ("query", "doc", "union")


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ConfigError("bm25 k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError("bm25 b must be in [0, 1]")

    @classmethod
    def from_config(cls) -> "Bm25Params":
        return cls(k1=retrieval_config.bm25_k1, b=retrieval_config.bm25_b)


@dataclass
class DocumentIndex:
    """Immutable token index over a small document collection."""

    docs: List[Tuple[int, List[str]]]
    df: Dict[str, int] = field(init=False)
    tf: Dict[int, Counter] = field(init=False)
    lengths: Dict[int, int] = field(init=False)
    avg_len: float = field(init=False)

    def __post_init__(self):
        ids = [doc_id for doc_id, _ in self.docs]
        if len(set(ids)) != len(ids):
            raise InputError("document ids must be unique")
        self.tf = {doc_id: Counter(tokens) for doc_id, tokens in self.docs}
        self.lengths = {doc_id: len(tokens) for doc_id, tokens in self.docs}
        self.df = Counter()
        for counter in self.tf.values():
            self.df.update(counter.keys())
        self.avg_len = sum(self.lengths.values()) / len(self.docs) if self.docs else 0.0

    @property
    def n(self) -> int:
        return len(self.docs)

    def doc_ids(self) -> List[int]:
        return [doc_id for doc_id, _ in self.docs]

    def tokens(self, doc_id: int) -> List[str]:
        for candidate, tokens in self.docs:
            if candidate == doc_id:
                return tokens
        raise InputError(f"document {doc_id} not in index")

    @classmethod
    def from_texts(cls, texts: Dict[int, str], stopwords: Iterable[str]) -> "DocumentIndex":
        stop = set(stopwords)
        return cls([(doc_id, content_tokens(text, stop)) for doc_id, text in sorted(texts.items())])


def bm25_idf(df: int, n: int) -> float:
    return math.log(1 + (n - df + 0.5) / (df + 0.5))


def bm25_score(query: Sequence[str], doc_id: int, index: DocumentIndex,
               params: Optional[Bm25Params] = None) -> float:
    """Okapi BM25 of one document; every distinct query term counts once."""
    params = params or Bm25Params()
    if doc_id not in index.tf:
        raise InputError(f"document {doc_id} not in index")
    if not query:
        return 0.0

    tf = index.tf[doc_id]
    length = index.lengths[doc_id]
    avg_len = index.avg_len or 1.0
    score = 0.0
    for term in dict.fromkeys(query):
        freq = tf.get(term, 0)
        if freq == 0:
            continue
        norm = freq + params.k1 * (1 - params.b + params.b * length / avg_len)
        score += bm25_idf(index.df[term], index.n) * freq * (params.k1 + 1) / norm
    return score


def word_overlap_score(query: Iterable[str], doc: Iterable[str], denominator: str = "query") -> float:
    """|Q ∩ D| over |Q| (default), |D| or |Q ∪ D|."""
    if denominator not in OVERLAP_DENOMINATORS:
        raise ConfigError(f"unknown overlap denominator {denominator!r}")
    q: Set[str] = set(query)
    d: Set[str] = set(doc)
    base = {"query": q, "doc": d, "union": q | d}[denominator]
    if not q or not base:
        return 0.0
    return len(q & d) / len(base)


Scorer = Callable[[Sequence[str], int, DocumentIndex], float]


def bm25_scorer(params: Optional[Bm25Params] = None) -> Scorer:
    params = params or Bm25Params.from_config()
    return lambda query, doc_id, index: bm25_score(query, doc_id, index, params)


def overlap_scorer(denominator: Optional[str] = None) -> Scorer:
    denominator = denominator or retrieval_config.overlap_denominator
    return lambda query, doc_id, index: word_overlap_score(query, index.tokens(doc_id), denominator)


def top_k(query: Sequence[str], index: DocumentIndex, k: int, scorer: Scorer) -> List[Tuple[int, float]]:
    """k best documents by descending score, ties by lowest id."""
    if k < 1:
        raise InputError("k must be >= 1")
    scored = [(doc_id, scorer(query, doc_id, index)) for doc_id in index.doc_ids()]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


class MemorySearch:
    """Backend of the free-form memory_search tool: BM25 over stored sessions."""

    def __init__(self, texts: Dict[int, str], stopwords: Iterable[str], k: Optional[int] = None):
        self.stopwords = set(stopwords)
        self.texts = dict(texts)
        self.index = DocumentIndex.from_texts(self.texts, self.stopwords)
        self.k = k or retrieval_config.top_k
        self.scorer = bm25_scorer()

    def search(self, query: str) -> List[Tuple[int, float]]:
        if not query or not query.strip():
            raise InputError("memory_search needs a non-empty query")
        hits = top_k(content_tokens(query, self.stopwords), self.index, self.k, self.scorer)
        return [(doc_id, score) for doc_id, score in hits if score > 0]

    def render(self, query: str) -> str:
        hits = self.search(query)
        if not hits:
            return "No matching sessions."
        return "\n\n".join(f"[S{doc_id}]\n{self.texts[doc_id]}" for doc_id, _ in hits)
