"""
Configuration settings for pagebook.
"""

import os
from typing import Dict, Any, List
from dataclasses import dataclass, field

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass


@dataclass
class PagerConfig:
    """Configuration for the page table and boundary strategies."""

    budget_k: int = 5
    jaccard_threshold: float = 0.15
    topic_window: int = 5

    # Full grid
    boundaries: List[str] = field(default_factory=lambda: [
        "fixed_5", "fixed_10", "fixed_20", "topic_shift", "exchange_5"
    ])
    evictions: List[str] = field(default_factory=lambda: ["fifo", "lru", "lfu", "belady"])


@dataclass
class BookmarkConfig:
    """Configuration for keyword generation and stub rendering."""

    stopwords_path: str = "data/stopwords.txt"
    synthetic_max_k: int = 5
    locomo_max_k: int = 6
    scan_turns: int = 4
    random_count: int = 4
    snippet_chars: int = 60
    digest_chars: int = 80

    # Mean heuristic TF-IDF mass at or above which hybrid is chosen over llm_batch
    selection_threshold: float = 0.15

    # Character budget of one llm_batch prompt before it is split in halves
    batch_prompt_chars: int = 12000


@dataclass
class RetrievalConfig:
    """Configuration for the lexical baselines."""

    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    overlap_denominator: str = "query"
    top_k: int = 3


@dataclass
class ModelConfig:
    """Configuration for an OpenAI-compatible chat endpoint."""

    endpoint_url: str = os.getenv("PAGEBOOK_ENDPOINT", "https://api.openai.com")
    model_name: str = os.getenv("PAGEBOOK_MODEL", "gpt-4o-mini")
    temperature: float = 0.0
    max_output_tokens: int = 200
    logprobs: bool = False
    max_tool_rounds: int = 2
    api_key_env: str = "PAGEBOOK_API_KEY"

    # Transport
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    requests_per_second: float = 2.0
    cache_dir: str = "cache/responses"


@dataclass
class MockConfig:
    """Configuration for the deterministic offline responder."""

    trigger_rule: str = "keyword_overlap"
    min_overlap: int = 1
    gullibility: bool = False
    gullibility_min_overlap: int = 2


@dataclass
class DatasetConfig:
    """Configuration for corpus generation and loading."""

    num_conversations: int = 20
    turns_min: int = 120
    turns_max: int = 200
    facts_min: int = 6
    facts_max: int = 8
    seed: int = 42
    locomo_path: str = os.getenv("PAGEBOOK_LOCOMO", "")
    max_qa_per_conv: int = 10


@dataclass
class HarnessConfig:
    """Configuration for experiment orchestration."""

    full_cap: int = 60
    trunc_window: int = 20
    top_k: int = 3
    recent_sessions_full: int = 3
    bootstrap_samples: int = 10_000
    jobs: int = 1

    # Bookmark / format ablations
    ablation_boundary: str = "fixed_10"
    ablation_eviction: str = "lru"
    stress_boundary: str = "fixed_5"

    # Format ablation on the short controlled conversations
    format_boundary: str = "fixed_5"
    format_budget_k: int = 2


@dataclass
class LoggingConfig:
    """Configuration for logging and monitoring."""

    log_level: str = os.getenv("PAGEBOOK_LOG_LEVEL", "INFO")
    log_file: str = os.getenv("PAGEBOOK_LOG_FILE", "logs/pagebook.log")
    enable_console_logging: bool = True
    enable_file_logging: bool = bool(os.getenv("PAGEBOOK_LOG_FILE", "logs/pagebook.log"))


@dataclass
class AppConfig:
    """Main application configuration."""

    app_name: str = "pagebook"
    app_version: str = "0.1.0"

    # Data paths
    data_dir: str = "data"
    out_dir: str = "runs"
    logs_dir: str = "logs"

    environment: str = os.getenv("ENVIRONMENT", "development")


# Global configuration instances
pager_config = PagerConfig()
bookmark_config = BookmarkConfig()
retrieval_config = RetrievalConfig()
model_config = ModelConfig()
mock_config = MockConfig()
dataset_config = DatasetConfig()
harness_config = HarnessConfig()
logging_config = LoggingConfig()
app_config = AppConfig()

BOUNDARY_KINDS = ["fixed_n", "topic_shift", "exchange_n", "session"]
EVICTION_KINDS = ["fifo", "lru", "lfu", "belady"]
BOOKMARK_STRATEGIES = ["random", "heuristic", "tfidf", "llm_contextual", "llm_batch", "hybrid"]
BOOKMARK_FORMATS = ["id_only", "minimal", "medium", "structured"]
METHODS = ["full_context", "truncation", "bm25_top3", "overlap_top3", "search_tool", "bookmark_recall"]

FACT_CATEGORIES = [
    "allergy", "budget", "contact", "deadline",
    "medical", "number", "preference", "schedule"
]

LOCOMO_CATEGORIES = {
    1: "single-hop",
    2: "temporal",
    3: "multi-hop",
    4: "open-domain",
    5: "unanswerable"
}

def get_config() -> Dict[str, Any]:
    """Get all configuration as a dictionary."""
    return {
        "pager": pager_config,
        "bookmarks": bookmark_config,
        "retrieval": retrieval_config,
        "model": model_config,
        "mock": mock_config,
        "dataset": dataset_config,
        "harness": harness_config,
        "logging": logging_config,
        "app": app_config,
    }

def validate_config() -> bool:
    """Validate the configuration settings and create working directories."""
    try:
        for directory in [app_config.out_dir, app_config.logs_dir]:
            os.makedirs(directory, exist_ok=True)

        if not os.path.exists(bookmark_config.stopwords_path):
            print(f"Stopword list missing: {bookmark_config.stopwords_path}")
            return False

        if logging_config.enable_file_logging:
            os.makedirs(os.path.dirname(logging_config.log_file) or ".", exist_ok=True)

        return True

    except Exception as e:
        print(f"Configuration validation failed: {e}")
        return False
