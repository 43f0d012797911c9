"""
Declarative run configuration: one YAML file plus CLI overrides, validated before any work starts.
"""

import hashlib
import json
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Type

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from config import settings
from utils.errors import ConfigError


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True, protected_namespaces=())


class PagerSection(Section):
    budget_k: int = Field(settings.pager_config.budget_k, ge=1, description="Active page budget k")
    jaccard_threshold: float = Field(settings.pager_config.jaccard_threshold, ge=0.0, le=1.0,
                                     description="topic_shift split threshold")
    topic_window: int = Field(settings.pager_config.topic_window, ge=1, description="topic_shift window of turns")
    boundaries: List[str] = Field(default_factory=lambda: list(settings.pager_config.boundaries),
                                  description="Boundary strategies of the grid")
    evictions: List[str] = Field(default_factory=lambda: list(settings.pager_config.evictions),
                                 description="Eviction policies of the grid")

    @field_validator("evictions")
    @classmethod
    def known_evictions(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in settings.EVICTION_KINDS]
        if unknown:
            raise ValueError(f"unknown eviction policies {unknown}")
        return value


class BookmarkSection(Section):
    strategy: str = Field("heuristic", description="Keyword strategy for grid runs")
    format: str = Field("minimal", description="Stub format for grid runs")
    synthetic_max_k: int = Field(settings.bookmark_config.synthetic_max_k, ge=1, description="Keywords per synthetic stub")
    locomo_max_k: int = Field(settings.bookmark_config.locomo_max_k, ge=1, description="Keywords per LoCoMo stub")
    snippet_chars: int = Field(settings.bookmark_config.snippet_chars, ge=1, description="medium format snippet length")
    selection_threshold: float = Field(settings.bookmark_config.selection_threshold, ge=0.0,
                                       description="Heuristic TF-IDF mass at which hybrid is chosen")

    @field_validator("format")
    @classmethod
    def known_format(cls, value: str) -> str:
        if value not in settings.BOOKMARK_FORMATS:
            raise ValueError(f"unknown format {value!r}")
        return value


class RetrievalSection(Section):
    bm25_k1: float = Field(settings.retrieval_config.bm25_k1, ge=0.0, description="BM25 k1")
    bm25_b: float = Field(settings.retrieval_config.bm25_b, ge=0.0, le=1.0, description="BM25 b")
    overlap_denominator: str = Field(settings.retrieval_config.overlap_denominator,
                                     description="Word overlap denominator: query, doc or union")
    top_k: int = Field(settings.retrieval_config.top_k, ge=1, description="Sessions inlined by retrieval baselines")


class ModelSection(Section):
    endpoint_url: str = Field(settings.model_config.endpoint_url, description="OpenAI-compatible endpoint")
    model_name: str = Field(settings.model_config.model_name, description="Model identifier")
    temperature: float = Field(settings.model_config.temperature, ge=0.0, description="Sampling temperature")
    max_output_tokens: int = Field(settings.model_config.max_output_tokens, ge=1, description="Completion cap")
    max_tool_rounds: int = Field(settings.model_config.max_tool_rounds, ge=0, description="Tool round-trips per probe")
    api_key_env: str = Field(settings.model_config.api_key_env, description="Environment variable holding the key")
    requests_per_second: float = Field(settings.model_config.requests_per_second, gt=0.0, description="Rate limit")
    cache_dir: str = Field(settings.model_config.cache_dir, description="Response cache directory")


class MockSection(Section):
    min_overlap: int = Field(settings.mock_config.min_overlap, ge=1, description="Keyword overlap to trigger recall")
    gullibility: bool = Field(settings.mock_config.gullibility, description="Answer from stub text when it overlaps")
    gullibility_min_overlap: int = Field(settings.mock_config.gullibility_min_overlap, ge=1,
                                         description="Overlap that makes a stub look sufficient")


class DatasetSection(Section):
    num_conversations: int = Field(settings.dataset_config.num_conversations, ge=1, description="Synthetic conversations")
    turns_min: int = Field(settings.dataset_config.turns_min, ge=8, description="Shortest conversation")
    turns_max: int = Field(settings.dataset_config.turns_max, ge=8, description="Longest conversation")
    facts_min: int = Field(settings.dataset_config.facts_min, ge=1, description="Fewest planted facts")
    facts_max: int = Field(settings.dataset_config.facts_max, ge=1, description="Most planted facts")
    locomo_path: str = Field(settings.dataset_config.locomo_path, description="LoCoMo JSON file")
    max_qa_per_conv: int = Field(settings.dataset_config.max_qa_per_conv, ge=1, description="LoCoMo probes per conversation")


class HarnessSection(Section):
    full_cap: int = Field(settings.harness_config.full_cap, ge=1, description="full_context turn cap")
    trunc_window: int = Field(settings.harness_config.trunc_window, ge=1, description="Recent block turns")
    recent_sessions_full: int = Field(settings.harness_config.recent_sessions_full, ge=1,
                                      description="Most recent sessions shared by all methods")
    bootstrap_samples: int = Field(settings.harness_config.bootstrap_samples, ge=100, description="Bootstrap resamples")
    jobs: int = Field(settings.harness_config.jobs, ge=1, description="Parallel workers")
    ablation_boundary: str = Field(settings.harness_config.ablation_boundary, description="Ablation boundary")
    ablation_eviction: str = Field(settings.harness_config.ablation_eviction, description="Ablation eviction policy")
    format_boundary: str = Field(settings.harness_config.format_boundary, description="Format ablation boundary")
    format_budget_k: int = Field(settings.harness_config.format_budget_k, ge=1, description="Format ablation page budget")


class RunConfig(Section):
    dataset: str = Field("synthetic_forward", description="synthetic_forward, synthetic_revisit, "
                                                          "synthetic_controlled or locomo")
    corpus: Optional[str] = Field(None, description="Corpus file written by `gen`; generated in memory when unset")
    responder: str = Field("mock", description="mock or live")
    judges: List[str] = Field(default_factory=list, description="Judge model names; empty means exact match")
    methods: List[str] = Field(default_factory=lambda: list(settings.METHODS), description="LoCoMo methods")
    seed: int = Field(settings.dataset_config.seed, description="Seed for generation, sampling and bootstrap")
    out: str = Field(settings.app_config.out_dir, description="Output root")

    pager: PagerSection = Field(default_factory=PagerSection)
    bookmarks: BookmarkSection = Field(default_factory=BookmarkSection)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    model: ModelSection = Field(default_factory=ModelSection)
    mock: MockSection = Field(default_factory=MockSection)
    datasets: DatasetSection = Field(default_factory=DatasetSection)
    harness: HarnessSection = Field(default_factory=HarnessSection)

    @field_validator("responder")
    @classmethod
    def known_responder(cls, value: str) -> str:
        if value not in ("mock", "live"):
            raise ValueError("responder must be mock or live")
        return value

    @field_validator("methods")
    @classmethod
    def known_methods(cls, value: List[str]) -> List[str]:
        unknown = [v for v in value if v not in settings.METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}")
        return value


# Sections whose values are pushed into the module-level dataclass settings
_TARGETS: Dict[str, Any] = {
    "pager": settings.pager_config,
    "bookmarks": settings.bookmark_config,
    "retrieval": settings.retrieval_config,
    "model": settings.model_config,
    "mock": settings.mock_config,
    "datasets": settings.dataset_config,
    "harness": settings.harness_config,
}


def _error(e: ValidationError) -> ConfigError:
    problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
    return ConfigError(f"invalid run config: {problems}")


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``section.key=value``; the value is read as YAML so numbers, booleans and lists work."""
    path, sep, raw = text.partition("=")
    if not sep or not path:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}")
    return path.split("."), value


def _set_path(data: Dict[str, Any], keys: List[str], value: Any):
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {'.'.join(keys)} crosses a scalar")
    node[keys[-1]] = value


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                    flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """File, then ``--set`` overrides, then explicit flags; unknown keys are rejected."""
    data: Dict[str, Any] = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data = loaded or {}
    for override in overrides:
        keys, value = parse_override(override)
        _set_path(data, keys, value)
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set_path(data, dotted.split("."), value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise _error(e)


def apply(config: RunConfig):
    """Push section values into the dataclass settings the library modules read."""
    for name, target in _TARGETS.items():
        names = {f.name for f in fields(target)}
        for key, value in getattr(config, name).model_dump().items():
            if key in names:
                setattr(target, key, value)


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def describe(model: Type[BaseModel] = RunConfig, prefix: str = "") -> List[str]:
    """One ``key (default): description`` line per config key, from the pydantic schema."""
    lines = []
    for name, info in model.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            lines.extend(describe(annotation, f"{prefix}{name}."))
            continue
        default = info.get_default(call_default_factory=True)
        lines.append(f"  {prefix}{name} ({default!r}): {info.description or ''}")
    return lines
