"""
Metric definitions, bootstrap statistics, judge agreement and the rolling-NLL utility.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import harness_config
from utils.errors import InputError

SHARD_SIZE = 1000


@dataclass
class ProbeResult:
    probe_id: str
    needed_page_active: bool
    recall_called: bool
    recalled_ids: List[int] = field(default_factory=list)
    correct_page_recalled: bool = False
    answer_correct: bool = False
    judge_scores: Dict[str, int] = field(default_factory=dict)
    llm_calls: int = 1
    conv_id: str = ""
    category: str = ""
    method: str = ""

    def __post_init__(self):
        if self.correct_page_recalled and not self.recall_called:
            raise InputError(f"probe {self.probe_id}: correct recall without a recall call")

    @property
    def mean_score(self) -> Optional[float]:
        if not self.judge_scores:
            return None
        return float(np.mean(list(self.judge_scores.values())))

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["correct"] = score_probe(self)
        record["mean_score"] = self.mean_score
        return record


@dataclass
class Metrics:
    e2e_accuracy: float
    trigger_rate: Optional[float]
    selection_accuracy: Optional[float]
    recall_precision: Optional[float]
    false_positive_rate: Optional[float]
    mean_score: Optional[float]
    ci95: Tuple[float, float]
    n: int
    e2e_on_evicted: Optional[float] = None
    score_ci95: Optional[Tuple[float, float]] = None
    mean_llm_calls: float = 0.0

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["ci95_lo"], record["ci95_hi"] = record.pop("ci95")
        score_ci = record.pop("score_ci95") or (None, None)
        record["score_ci95_lo"], record["score_ci95_hi"] = score_ci
        return record


def score_probe(result: ProbeResult) -> bool:
    """Correct when the needed page was in context or recall fetched it."""
    return result.needed_page_active or result.correct_page_recalled


def _rate(hits: np.ndarray, given: np.ndarray) -> Optional[float]:
    if not given.any():
        return None
    return float(hits[given].mean())


def bootstrap_ci(values: Sequence[float], samples: Optional[int] = None, seed: int = 0,
                 level: float = 0.95) -> Tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        raise InputError("bootstrap needs at least one value")
    samples = samples or harness_config.bootstrap_samples
    means = _resampled_means(data, samples, seed)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


def _resampled_means(data: np.ndarray, samples: int, seed: int) -> np.ndarray:
    """Means of `samples` resamples; shards get child seeds so results do not depend on sharding order."""
    shards = -(-samples // SHARD_SIZE)
    means = []
    for shard, child in enumerate(np.random.SeedSequence(seed).spawn(shards)):
        rng = np.random.default_rng(child)
        rows = min(SHARD_SIZE, samples - shard * SHARD_SIZE)
        idx = rng.integers(0, data.size, size=(rows, data.size))
        means.append(data[idx].mean(axis=1))
    return np.concatenate(means)


def aggregate(results: Sequence[ProbeResult], samples: Optional[int] = None, seed: int = 0) -> Metrics:
    """Accuracy and the trigger / selection decomposition over a set of probes."""
    if not results:
        raise InputError("aggregate needs at least one probe result")
    # Order-independent: sort before the seeded bootstrap
    results = sorted(results, key=lambda r: (r.conv_id, r.method, r.probe_id))

    active = np.array([r.needed_page_active for r in results])
    called = np.array([r.recall_called for r in results])
    fetched = np.array([r.correct_page_recalled for r in results])
    correct = np.array([score_probe(r) for r in results], dtype=float)
    evicted = ~active

    scores = [r.mean_score for r in results if r.mean_score is not None]
    return Metrics(
        e2e_accuracy=float(correct.mean()),
        trigger_rate=_rate(called, evicted),
        selection_accuracy=_rate(fetched, called & evicted),
        recall_precision=_rate(fetched, called),
        false_positive_rate=_rate(called, active),
        mean_score=float(np.mean(scores)) if scores else None,
        ci95=bootstrap_ci(correct, samples, seed),
        n=len(results),
        e2e_on_evicted=_rate(correct.astype(bool), evicted),
        score_ci95=bootstrap_ci(scores, samples, seed) if scores else None,
        mean_llm_calls=float(np.mean([r.llm_calls for r in results])),
    )


def aggregate_by(results: Sequence[ProbeResult], key: Union[str, Callable[[ProbeResult], Any]],
                 samples: Optional[int] = None, seed: int = 0) -> Dict[Any, Metrics]:
    """`aggregate` per group, e.g. per fact category or per LoCoMo category."""
    get = key if callable(key) else (lambda r: getattr(r, key))
    groups: Dict[Any, List[ProbeResult]] = {}
    for result in results:
        groups.setdefault(get(result), []).append(result)
    return {group: aggregate(members, samples, seed) for group, members in sorted(groups.items(), key=lambda g: str(g[0]))}


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float], samples: Optional[int] = None,
                     seed: int = 0) -> Tuple[float, float]:
    """Mean paired difference a - b and its two-sided bootstrap p-value."""
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise InputError("paired bootstrap needs at least one pair")

    diff = a - b
    delta = float(diff.mean())
    if delta == 0:
        return 0.0, 1.0
    means = _resampled_means(diff, samples or harness_config.bootstrap_samples, seed)
    tail = float((means <= 0).mean()) if delta > 0 else float((means >= 0).mean())
    return delta, min(1.0, 2 * tail)


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Sample Pearson correlation; None when either side has zero variance."""
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.shape != ys.shape:
        raise InputError("pearson needs equal-length inputs")
    if xs.size < 2:
        raise InputError("pearson needs at least two points")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0:
        return None
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


def rolling_nll_delta(full_nll: Sequence[float], gist_nll: Sequence[float],
                      w: int = 32) -> Tuple[float, float, float, float]:
    """(mean_full, mean_gist, mean_gist - mean_full, largest windowed gist - full gap)."""
    if w < 1:
        raise InputError("window must be >= 1")
    full = np.asarray(full_nll, dtype=float)
    gist = np.asarray(gist_nll, dtype=float)
    if full.size == 0 or gist.size == 0:
        raise InputError("NLL sequences must be non-empty")

    mean_full, mean_gist = float(full.mean()), float(gist.mean())
    aligned = min(full.size, gist.size)
    # windows are cut at the aligned end
    gaps = [gist[s:min(s + w, aligned)].mean() - full[s:min(s + w, aligned)].mean() for s in range(aligned)]
    return mean_full, mean_gist, mean_gist - mean_full, float(max(gaps))


def judge_matrix(results: Iterable[ProbeResult]) -> Dict[str, Dict[str, float]]:
    """Mean score per judge per method."""
    table: Dict[str, Dict[str, List[int]]] = {}
    for result in results:
        for judge, score in result.judge_scores.items():
            table.setdefault(judge, {}).setdefault(result.method, []).append(score)
    return {
        judge: {method: float(np.mean(scores)) for method, scores in sorted(methods.items())}
        for judge, methods in sorted(table.items())
    }


def judge_agreement(results: Iterable[ProbeResult]) -> Dict[Tuple[str, str], Optional[float]]:
    """Pairwise Pearson between judges over probes both of them scored."""
    by_judge: Dict[str, Dict[Tuple[str, str, str], int]] = {}
    for result in results:
        for judge, score in result.judge_scores.items():
            by_judge.setdefault(judge, {})[(result.conv_id, result.method, result.probe_id)] = score
    names = sorted(by_judge)
    agreement = {}
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            shared = sorted(set(by_judge[first]) & set(by_judge[second]))
            if len(shared) < 2:
                agreement[(first, second)] = None
                continue
            agreement[(first, second)] = pearson(
                [by_judge[first][k] for k in shared], [by_judge[second][k] for k in shared])
    return agreement
