from dataclasses import replace

import pytest

from config.settings import METHODS, harness_config, model_config
from integrations.mock import MockResponder
from models.bookmark import BookmarkFormat, build_keyword_book, default_stopwords
from models.pager import BoundaryStrategy, segment
from services.datasets import SyntheticSpec, gen_synthetic, load_locomo_corpus
from services.harness import (
    CellResult, ExperimentPlan, GridReport, MethodConfig, assemble_context, build_session_table,
    capture_traces, check_belady, check_decomposition, check_false_positives, check_formats, check_inversion,
    check_token_envelope, recent_block, run_bookmark_ablation, run_format_ablation, run_grid, run_methods,
    run_specificity_ablation, simulate_conversation
)
from services.metrics import Metrics
from utils.errors import ConfigError


@pytest.fixture(autouse=True)
def fast_bootstrap(monkeypatch):
    monkeypatch.setattr(harness_config, "bootstrap_samples", 200)


@pytest.fixture(scope="module")
def small_corpus():
    return gen_synthetic(replace(SyntheticSpec.controlled(seed=11), num_conversations=3))


def heuristic_run(conv, eviction, budget_k=1):
    boundary = BoundaryStrategy.parse("fixed_5")
    pages = segment(conv.turns, boundary)
    book = build_keyword_book(pages, "heuristic", default_stopwords(), max_k=5)
    return simulate_conversation(conv, boundary, eviction, MockResponder(), BookmarkFormat("minimal"), pages,
                                 book, budget_k, max_tool_rounds=2, capture=True)


class TestPlan:
    @pytest.mark.parametrize("overrides", [
        {"dataset": "wiki"},
        {"evictions": ["random"]},
        {"boundaries": ["chunky_3"]},
        {"bookmark_format": "verbose"},
        {"bookmark_strategy": "oracle"},
        {"methods": ["rag"]},
        {"budget_k": 0},
        {"jobs": 0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            ExperimentPlan(**overrides).validate()

    def test_live_needs_endpoint(self, monkeypatch):
        monkeypatch.setattr(model_config, "endpoint_url", "")
        with pytest.raises(ConfigError):
            ExperimentPlan(responder="live").validate()

    def test_method_config(self):
        assert MethodConfig.from_config("bm25_top3").top_k == 3
        with pytest.raises(ConfigError):
            MethodConfig("bm25_top3", top_k=0)


class TestSimulation:
    def test_recall_recovers_evicted_fact(self, travel_conversation):
        run = heuristic_run(travel_conversation, "fifo")
        assert [r.probe_id for r in run.results] == ["c1-f0-i0", "c1-f0-end"]
        for result in run.results:
            assert not result.needed_page_active
            assert result.recall_called and result.recalled_ids == [1]
            assert result.correct_page_recalled and result.answer_correct
        assert run.page_count == 4 and run.evicted_count == 3
        assert len(run.stub_tokens) == 5

    def test_fact_in_context_needs_no_recall(self, travel_conversation):
        run = heuristic_run(travel_conversation, "fifo", budget_k=4)
        assert all(r.needed_page_active and not r.recall_called and r.answer_correct for r in run.results)

    def test_belady_keeps_the_page_probes_read(self, travel_conversation):
        run = heuristic_run(travel_conversation, "belady")
        assert all(r.needed_page_active for r in run.results)

    def test_snapshots(self, travel_conversation):
        run = heuristic_run(travel_conversation, "fifo")
        first, last = run.snapshots
        assert (first.active_ids, first.open_id, first.after_turn) == ([3], 4, 15)
        assert (last.active_ids, last.open_id, last.after_turn) == ([4], None, 19)


class TestGrid:
    def test_small_grid(self, small_corpus):
        plan = ExperimentPlan(dataset="synthetic_controlled", boundaries=["fixed_5", "fixed_10"],
                              evictions=["fifo", "lru", "belady"], budget_k=2)
        report = run_grid(plan, small_corpus)
        expected = sum(len(conv.probes) for conv in small_corpus)
        assert len(report.cells) == 6
        for cell in report.cells:
            assert cell.status == "ok", cell.error
            assert len(cell.results) == expected
        assert report.probe_total == 6 * expected
        assert check_false_positives(report).passed
        assert check_decomposition(report).passed

    def test_failed_cell_is_reported(self, small_corpus, monkeypatch):
        import services.harness as harness

        real = harness.simulate_conversation

        def flaky(conv, boundary, eviction, *args, **kwargs):
            if eviction == "lru":
                raise RuntimeError("boom")
            return real(conv, boundary, eviction, *args, **kwargs)

        monkeypatch.setattr(harness, "simulate_conversation", flaky)
        plan = ExperimentPlan(dataset="synthetic_controlled", boundaries=["fixed_10"], evictions=["fifo", "lru"])
        report = run_grid(plan, small_corpus)
        assert report.cell("fixed_10", "fifo").status == "ok"
        failed = report.cell("fixed_10", "lru")
        assert failed.status == "failed" and failed.error == "boom" and failed.results == []


class TestAblations:
    def test_bookmark_strategies_share_traces(self, small_corpus):
        plan = ExperimentPlan(dataset="synthetic_controlled", budget_k=1)
        report = run_bookmark_ablation(plan, small_corpus, strategies=["random", "heuristic", "tfidf", "llm_batch"])
        assert [row.variant for row in report.rows] == ["random", "heuristic", "tfidf", "llm_batch", "selected"]
        assert report.traces_identical
        assert len({row.metrics.n for row in report.rows}) == 1
        assert report.row("llm_batch").scripted and not report.row("heuristic").scripted
        assert sum(report.row("selected").chosen.values()) == len(small_corpus)
        assert set(report.row("selected").chosen) <= {"hybrid", "llm_batch"}

    def test_capture_matches_ablation_setting(self, small_corpus):
        plan = replace(ExperimentPlan(dataset="synthetic_controlled", budget_k=1),
                       boundaries=["fixed_10"], evictions=["lru"])
        traces = capture_traces(plan, small_corpus)
        for conv in small_corpus:
            pages, snapshots = traces[conv.conv_id]
            assert [snap.probe_id for snap in snapshots] == [p.id for p in conv.ordered_probes()]
            assert len(pages) == len(segment(conv.turns, BoundaryStrategy.parse("fixed_10")))

    def test_formats(self, small_corpus):
        plan = ExperimentPlan(dataset="synthetic_controlled", budget_k=1)
        report = run_format_ablation(plan, small_corpus)
        assert [row.variant for row in report.rows] == ["id_only", "minimal", "medium", "structured"]
        assert report.traces_identical
        assert check_formats(report).passed
        assert report.row("id_only").metrics.trigger_rate in (0.0, None)

    def test_formats_run_with_evictions(self, small_corpus):
        report = run_format_ablation(ExperimentPlan(dataset="synthetic_controlled"), small_corpus)
        assert report.plan.boundaries == [harness_config.format_boundary] == ["fixed_5"]
        assert report.plan.budget_k == harness_config.format_budget_k == 2
        tokens = {row.variant: row.mean_stub_tokens for row in report.rows}
        assert min(tokens.values()) > 0
        assert tokens["id_only"] < tokens["minimal"] < tokens["structured"] <= tokens["medium"]
        assert report.row("minimal").metrics.e2e_accuracy >= report.row("medium").metrics.e2e_accuracy

    def test_specificity(self, small_corpus):
        report = run_specificity_ablation(ExperimentPlan(dataset="synthetic_controlled", budget_k=1), small_corpus)
        assert report.kind == "specificity"
        assert [row.variant for row in report.rows] == ["generic", "heuristic"]
        assert report.traces_identical


@pytest.fixture
def locomo_corpus(locomo_file):
    return load_locomo_corpus(locomo_file)


class TestMethods:
    def test_context_assembly(self, locomo_corpus):
        [conv] = locomo_corpus
        probe = next(p for p in conv.probes if p.answer == "Biscuit")
        table = build_session_table(conv, MethodConfig.from_config("bookmark_recall"),
                                    build_keyword_book(segment(conv.turns, BoundaryStrategy("session")),
                                                       "heuristic", default_stopwords(), max_k=6))
        assert table.active == [3, 4, 5] and sorted(table.evicted) == [1, 2]

        contexts = {
            kind: assemble_context(MethodConfig.from_config(kind), conv, probe,
                                   table if kind == "bookmark_recall" else None)
            for kind in METHODS
        }
        assert len({c.recent_hash for c in contexts.values()}) == 1
        assert "Earlier conversation:" in contexts["full_context"].visible_text
        assert probe.fact_markers[0] in contexts["full_context"].visible_text
        assert probe.fact_markers[0] not in contexts["truncation"].visible_text
        assert contexts["bm25_top3"].visible_text.startswith("Retrieved sessions:\n[S1]")
        assert contexts["search_tool"].tools[0]["function"]["name"] == "memory_search"

        bookmark = contexts["bookmark_recall"]
        assert bookmark.messages[1].role == "system"
        assert bookmark.messages[1].content.startswith("Compressed memory:\n[S1(2023-05-08):")
        assert "session_ids" in bookmark.tools[0]["function"]["parameters"]["properties"]

    def test_bookmark_recall_needs_table(self, locomo_corpus):
        [conv] = locomo_corpus
        with pytest.raises(ConfigError):
            assemble_context(MethodConfig("bookmark_recall"), conv, conv.probes[0])

    def test_recent_block(self, locomo_corpus):
        [conv] = locomo_corpus
        block = recent_block(conv.turns, MethodConfig("truncation", trunc_window=5))
        assert [t.index for t in block] == [5, 6, 7, 8, 9]

    def test_run_methods(self, locomo_corpus):
        report = run_methods(ExperimentPlan(dataset="locomo"), locomo_corpus)
        assert report.recent_blocks_identical
        assert report.failed == 0 and report.unscored == 0
        assert len(report.results) == len(METHODS) * 4
        assert set(report.per_method) == set(METHODS)
        assert report.per_method["full_context"].e2e_accuracy == 1.0
        assert report.per_method["bookmark_recall"].false_positive_rate in (0.0, None)
        assert set(report.significance) == set(METHODS) - {"bookmark_recall"}
        assert list(report.judges) == ["exact_match"]

        biscuit = next(r for r in report.results if r.method == "bookmark_recall" and r.probe_id.endswith("q0"))
        assert not biscuit.needed_page_active
        assert biscuit.recalled_ids[0] == 1 and biscuit.correct_page_recalled


def _cell(boundary, eviction, e2e, pages=4.0):
    metrics = Metrics(e2e_accuracy=e2e, trigger_rate=None, selection_accuracy=None, recall_precision=None,
                      false_positive_rate=0.0, mean_score=None, ci95=(e2e, e2e), n=10)
    return CellResult(boundary, eviction, 10, metrics=metrics, avg_pages=pages)


class TestChecks:
    def test_belady_dominance(self):
        plan = ExperimentPlan(boundaries=["fixed_10"])
        good = GridReport(plan, [_cell("fixed_10", "belady", 0.9)] +
                          [_cell("fixed_10", e, 0.7) for e in ("fifo", "lru", "lfu")])
        assert check_belady(good).passed
        bad = GridReport(plan, [_cell("fixed_10", "belady", 0.5)] +
                         [_cell("fixed_10", e, 0.7) for e in ("fifo", "lru", "lfu")])
        assert not check_belady(bad).passed

    def test_inversion(self):
        plan = ExperimentPlan()
        forward = GridReport(plan, [_cell("fixed_10", "fifo", 0.8), _cell("fixed_10", "lfu", 0.6)])
        revisit = GridReport(plan, [_cell("fixed_10", "fifo", 0.5), _cell("fixed_10", "lfu", 0.7)])
        assert check_inversion(forward, revisit).passed
        assert not check_inversion(revisit, forward).passed

    def test_token_envelope(self):
        assert check_token_envelope().passed
