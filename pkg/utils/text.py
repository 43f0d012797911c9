"""
Text helpers shared by paging, bookmarks and retrieval.
"""

import hashlib
import json
import math
import re
from typing import Any, Iterable, List, Set

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation to spaces and split on whitespace."""
    cleaned = _PUNCT.sub(" ", text.lower()).replace("_", " ")
    return cleaned.split()


def token_set(text: str) -> Set[str]:
    return set(tokenize(text))


def content_tokens(text: str, stopwords: Iterable[str]) -> List[str]:
    """Tokens of `text` minus stopwords, in reading order."""
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    return [tok for tok in tokenize(text) if tok not in stop]


def unique(items: Iterable[str]) -> List[str]:
    """Dedupe preserving first-seen order."""
    return list(dict.fromkeys(items))


def estimate_tokens(text: str) -> int:
    """Model-agnostic token estimate: one token per four characters."""
    if not text:
        return 0
    return math.ceil(len(text) / 4)


def stable_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of `payload`."""
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
