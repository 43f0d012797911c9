import pytest
from hypothesis import HealthCheck, given, settings as hsettings, strategies as st

from conftest import make_turns
from models.pager import (
    BoundaryStrategy, EvictionPolicy, PageStatus, PageTable, Turn, check_invariants, end_probe, evict, flush,
    ingest_turn, jaccard_overlap, make_session_tag, recall, reference, render_context, segment,
    split_session_tag
)
from utils.errors import ConfigError, InputError, PageStateError, SequencingError


def filled_table(n_turns=20, budget_k=2, policy=None, boundary="fixed_5"):
    table = PageTable(budget_k, policy or EvictionPolicy("fifo"))
    strategy = BoundaryStrategy.parse(boundary)
    for turn in make_turns([f"Turn {i} about Lisbon trams" for i in range(n_turns)]):
        ingest_turn(table, strategy, turn)
    return table, strategy


class TestBoundaries:
    def test_parse_names(self):
        assert BoundaryStrategy.parse("fixed_10") == BoundaryStrategy("fixed_n", n=10)
        assert BoundaryStrategy.parse("exchange_5").name == "exchange_5"
        assert BoundaryStrategy.parse("topic_shift").kind == "topic_shift"
        with pytest.raises(ConfigError):
            BoundaryStrategy.parse("chunky_3")

    def test_fixed_n_requires_positive_n(self):
        with pytest.raises(ConfigError):
            BoundaryStrategy("fixed_n", n=0)

    def test_fixed_partition(self):
        pages = segment(make_turns([f"t{i}" for i in range(23)]), BoundaryStrategy.parse("fixed_5"))
        assert [p.turn_range for p in pages] == [(0, 4), (5, 9), (10, 14), (15, 19), (20, 22)]

    def test_exchange_counts_user_assistant_pairs(self):
        pages = segment(make_turns([f"t{i}" for i in range(12)]), BoundaryStrategy.parse("exchange_2"))
        assert [p.turn_range for p in pages] == [(0, 3), (4, 7), (8, 11)]

    def test_topic_shift_splits_on_vocabulary_change(self, travel_conversation):
        pages = segment(travel_conversation.turns, BoundaryStrategy.parse("topic_shift"))
        assert [p.turn_range for p in pages] == [(0, 9), (10, 19)]

    def test_topic_shift_cap(self, travel_conversation):
        strategy = BoundaryStrategy("topic_shift", max_turns=4)
        pages = segment(travel_conversation.turns, strategy)
        assert all(len(p.content) <= 4 for p in pages)

    def test_session_boundary(self):
        tags = [make_session_tag(1, "2023-05-08")] * 3 + [make_session_tag(2, "2023-05-09")] * 2
        pages = segment(make_turns(["a", "b", "c", "d", "e"], session_tags=tags), BoundaryStrategy("session"))
        assert [p.turn_range for p in pages] == [(0, 2), (3, 4)]
        assert pages[1].session_tag == "S2@2023-05-09"

    def test_session_tags_round_trip(self):
        assert split_session_tag(make_session_tag(4, "2023-05-21")) == (4, "2023-05-21")
        assert split_session_tag("S7") == (7, "")
        assert split_session_tag("topic") == (None, "")

    def test_jaccard_of_empty_sets(self):
        assert jaccard_overlap(set(), set()) == 1.0
        assert jaccard_overlap({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)


class TestIngest:
    def test_out_of_order_turn(self):
        table = PageTable(2)
        turns = make_turns(["one", "two"])
        with pytest.raises(SequencingError):
            ingest_turn(table, BoundaryStrategy.parse("fixed_5"), turns[1])

    def test_budget_and_fifo_eviction(self):
        table, _ = filled_table()
        flush(table)
        assert table.active == [3, 4]
        assert sorted(table.evicted) == [1, 2]
        assert check_invariants(table) == []

    def test_evicted_stub_is_bookmark(self):
        table, _ = filled_table()
        stub = table.evicted[1]
        assert stub.rendered.startswith("[p1:")
        assert "lisbon" in stub.keywords.keywords

    def test_lru_keeps_referenced_page(self):
        table = PageTable(2, EvictionPolicy("lru"))
        strategy = BoundaryStrategy.parse("fixed_5")
        turns = make_turns([f"Turn {i} about Lisbon" for i in range(15)])
        for turn in turns[:10]:
            ingest_turn(table, strategy, turn)
        end_probe(table)
        reference(table, [1])
        end_probe(table)
        for turn in turns[10:]:
            ingest_turn(table, strategy, turn)
        assert 2 in table.evicted
        assert table.active == [1, 3]

    def test_lfu_evicts_least_referenced(self):
        table = PageTable(2, EvictionPolicy("lfu"))
        strategy = BoundaryStrategy.parse("fixed_5")
        turns = make_turns([f"Turn {i} about Lisbon" for i in range(15)])
        for turn in turns[:10]:
            ingest_turn(table, strategy, turn)
        reference(table, [1])
        reference(table, [1])
        reference(table, [2])
        for turn in turns[10:]:
            ingest_turn(table, strategy, turn)
        # page 3 was never referenced
        assert 3 in table.evicted

    def test_belady_keeps_page_needed_next(self):
        schedule = [(0, 1)]
        belady = PageTable(1, EvictionPolicy("belady", schedule))
        fifo = PageTable(1, EvictionPolicy("fifo"))
        strategy = BoundaryStrategy.parse("fixed_5")
        for turn in make_turns([f"Turn {i}" for i in range(10)]):
            ingest_turn(belady, strategy, turn)
            ingest_turn(fifo, strategy, turn)
        assert belady.active == [1]
        assert fifo.active == [2]

    def test_belady_requires_schedule(self):
        with pytest.raises(ConfigError):
            EvictionPolicy("belady")

    def test_next_use_is_infinite_without_future_reads(self):
        policy = EvictionPolicy("belady", [(0, 1), (4, 1), (2, 3)])
        assert policy.next_use(1, 1) == 4
        assert policy.next_use(3, 3) == float("inf")

    def test_evict_requires_active_page(self):
        table, _ = filled_table()
        with pytest.raises(PageStateError):
            evict(table, 1, None)


class TestRecall:
    def test_recall_restores_exact_content(self):
        table, _ = filled_table()
        stored = table.store[1]
        results = recall(table, [1])
        assert results[0].ok
        assert tuple(results[0].turns) == stored
        assert table.pages[1].status == PageStatus.READMITTED
        assert end_probe(table) == [1]
        assert table.pages[1].status == PageStatus.EVICTED
        assert table.pages[1].content == []

    def test_recall_unknown_and_active_ids(self):
        table, _ = filled_table()
        results = recall(table, [99, 3])
        assert results[0].error == "unknown page"
        assert results[0].render() == "[p99] error: unknown page"
        assert results[1].ok and results[1].render().startswith("[p3]\n")

    def test_recall_needs_ids(self):
        table, _ = filled_table()
        with pytest.raises(InputError):
            recall(table, [])

    def test_end_probe_advances_clock(self):
        table, _ = filled_table()
        end_probe(table)
        assert table.probe_clock == 1


class TestRender:
    def test_stubs_then_pages_in_id_order(self):
        table, _ = filled_table()
        rendered = render_context(table)
        assert [line[:3] for line in rendered.stub_lines] == ["[p1", "[p2"]
        assert [page_id for page_id, _ in rendered.pages] == [3, 4]
        assert rendered.as_text().startswith("Compressed memory:\n[p1")
        assert rendered.stub_tokens > 0


class TestSnapshot:
    def test_from_snapshot_cuts_open_page(self, travel_conversation):
        pages = segment(travel_conversation.turns, BoundaryStrategy.parse("fixed_5"))
        stubs = {page.id: f"[p{page.id}]" for page in pages}
        table = PageTable.from_snapshot(pages, [2], 3, stubs, budget_k=2, upto_index=12)
        assert table.open_page.turn_range == (10, 12)
        assert sorted(table.evicted) == [1]
        assert 4 not in table.pages
        assert check_invariants(table) == []
        assert table.next_index == 13


operations = st.lists(
    st.one_of(
        st.tuples(st.just("ingest"), st.integers(1, 4)),
        st.tuples(st.just("recall"), st.integers(1, 12)),
        st.tuples(st.just("probe"), st.integers(0, 0)),
    ),
    max_size=40,
)


@hsettings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(ops=operations, budget_k=st.integers(1, 4), kind=st.sampled_from(["fifo", "lru", "lfu"]),
       size=st.integers(1, 6))
def test_random_operation_sequences_keep_invariants(ops, budget_k, kind, size):
    table = PageTable(budget_k, EvictionPolicy(kind))
    strategy = BoundaryStrategy.parse(f"fixed_{size}")
    originals = {}
    for op, arg in ops:
        if op == "ingest":
            for _ in range(arg):
                index = table.next_index
                turn = Turn(index, "user" if index % 2 == 0 else "assistant", f"x{index}")
                originals[index] = turn
                ingest_turn(table, strategy, turn)
        elif op == "recall":
            for result in recall(table, [arg]):
                if result.ok:
                    first, last = table.pages[arg].turn_range
                    assert result.turns == [originals[i] for i in range(first, last + 1)]
        else:
            end_probe(table)
        assert len(table.active) <= budget_k
    end_probe(table)
    assert check_invariants(table) == []
