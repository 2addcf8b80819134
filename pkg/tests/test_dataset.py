import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmsbr.dataset import (
    CategoryPriceRange,
    CorpusError,
    PriceRangeError,
    Session,
    build_corpus,
    build_sessions,
    encode_price_level,
    load_corpus,
    make_cold_start_variant,
    split_chronological,
    write_corpus,
)
from conftest import make_interactions

DAY = 86400


class TestEncodePriceLevel:
    def test_direct_formula(self):
        r = CategoryPriceRange(0, 0.0, 100.0)
        assert encode_price_level(25.0, r, 100) == 25

    def test_boundary_clamps_to_top_level(self):
        r = CategoryPriceRange(0, 0.0, 100.0)
        assert encode_price_level(100.0, r, 100) == 99

    def test_offset_range(self):
        r = CategoryPriceRange(0, 5.0, 10.0)
        assert encode_price_level(7.5, r, 100) == 50

    def test_degenerate_range(self):
        r = CategoryPriceRange(0, 5.0, 5.0)
        assert encode_price_level(5.0, r, 10) == 0

    def test_out_of_range_raises_or_clamps(self):
        r = CategoryPriceRange(0, 5.0, 10.0)
        with pytest.raises(PriceRangeError):
            encode_price_level(11.0, r, 10)
        assert encode_price_level(11.0, r, 10, clamp=True) == 9
        assert encode_price_level(1.0, r, 10, clamp=True) == 0

    @given(st.lists(st.floats(min_value=0.0, max_value=100.0), min_size=2, max_size=20))
    def test_monotone_in_price(self, prices):
        r = CategoryPriceRange(0, 0.0, 100.0)
        prices = sorted(prices)
        levels = [encode_price_level(p, r, 17) for p in prices]
        assert levels == sorted(levels)
        assert all(0 <= lv <= 16 for lv in levels)


class TestBuildSessions:
    def test_same_day_events_form_one_session(self):
        rows = [("u1", i, 100 + 10 * i, 5.0, 0) for i in (1, 2, 3)]
        sessions = build_sessions(make_interactions(rows), min_item_freq=1)
        assert len(sessions) == 1
        assert sessions[0].context == (1, 2)
        assert sessions[0].target == 3

    def test_single_event_day_dropped(self):
        rows = [("u1", 1, 100, 5.0, 0), ("u1", 2, 100 + DAY, 5.0, 0),
                ("u2", 1, 50, 5.0, 0), ("u2", 2, 60, 5.0, 0)]
        sessions = build_sessions(make_interactions(rows), min_item_freq=1)
        assert len(sessions) == 1  # only u2's same-day pair survives
        assert sessions[0].items == (1, 2)

    def test_item_frequency_filter_applied_once(self):
        # item 9 appears once; removing it shortens u1's session to length 1
        rows = [("u1", 1, 100, 5.0, 0), ("u1", 9, 110, 5.0, 0),
                ("u2", 1, 200, 5.0, 0), ("u2", 1, 210, 5.0, 0)]
        sessions = build_sessions(make_interactions(rows), min_item_freq=2)
        assert all(9 not in s.items for s in sessions)
        assert len(sessions) == 1

    def test_empty_after_filter_raises(self):
        rows = [("u1", 1, 100, 5.0, 0)]
        with pytest.raises(CorpusError):
            build_sessions(make_interactions(rows), min_item_freq=1)

    def test_deterministic(self):
        rows = [(f"u{i % 5}", (i * 7) % 11, 1000 * i, 1.0 + i, 0) for i in range(1, 60)]
        a = build_sessions(make_interactions(rows), min_item_freq=2)
        b = build_sessions(make_interactions(rows), min_item_freq=2)
        assert a == b

    def test_timestamp_order_within_session(self):
        rows = [("u1", 3, 130, 5.0, 0), ("u1", 1, 110, 5.0, 0), ("u1", 2, 120, 5.0, 0)]
        sessions = build_sessions(make_interactions(rows), min_item_freq=1)
        assert sessions[0].items == (1, 2, 3)


def _uniform_sessions(n):
    return [Session(items=(1, 2), end_time=float(i)) for i in range(n)]


class TestSplitChronological:
    def test_exact_ratio(self):
        train, val, test = split_chronological(_uniform_sessions(10), drop_unseen=False)
        assert (len(train), len(val), len(test)) == (7, 2, 1)

    def test_stable_order_on_ties(self):
        sessions = [Session(items=(i, i + 1), end_time=0.0) for i in range(10)]
        train, val, test = split_chronological(sessions, drop_unseen=False)
        assert train == sessions[:7] and val == sessions[7:9] and test == sessions[9:]

    def test_too_few_sessions(self):
        with pytest.raises(CorpusError):
            split_chronological(_uniform_sessions(2))

    def test_unseen_items_dropped_from_standard_test(self):
        rng = np.random.default_rng(3)
        sessions = [Session(items=tuple(rng.integers(0, 30, size=3)), end_time=float(i))
                    for i in range(100)]
        # plant 5 test-block sessions with brand-new items
        for k, i in enumerate(range(95, 100)):
            sessions[i] = Session(items=(1000 + k, 2, 3), end_time=float(i))
        train, val, test_raw = split_chronological(sessions, drop_unseen=False)
        _, _, test = split_chronological(sessions, drop_unseen=True)
        known = {i for s in train for i in s.items}
        expected_drop = sum(1 for s in test_raw if any(i not in known for i in s.items))
        assert expected_drop >= 5
        assert len(test) == len(test_raw) - expected_drop
        assert all(all(i in known for i in s.items) for s in test)


class TestColdStartVariant:
    def test_retains_and_flags(self):
        train = [Session(items=(1, 2), end_time=0.0)]
        test_raw = [Session(items=(1, 99), end_time=1.0), Session(items=(2, 1), end_time=2.0)]
        test_plus, cold = make_cold_start_variant(train, test_raw)
        assert test_plus == test_raw
        assert cold == frozenset({99})

    def test_no_unseen_items_identity(self):
        train = [Session(items=(1, 2), end_time=0.0)]
        test_raw = [Session(items=(2, 1), end_time=1.0)]
        test_plus, cold = make_cold_start_variant(train, test_raw)
        assert test_plus == test_raw  # nothing to drop, so test_plus == standard test
        assert not cold

    def test_holdout_count_matches_brute_force(self):
        from mmsbr.embedding_store import SynthConfig, synthesize_corpus

        corpus, _ = synthesize_corpus(SynthConfig(n_items=60, n_sessions=800, d=8, seed=9,
                                                  cold_frac=0.1, min_item_freq=1))
        known = corpus.warm_items()
        touching = sum(1 for s in corpus.test_plus if any(i not in known for i in s.items))
        assert touching > 0
        assert len(corpus.test_plus) - len(corpus.sessions_test) == touching


class TestBuildCorpus:
    def test_splits_disjoint_and_standard_test_warm(self, tiny):
        corpus, _, _ = tiny
        warm = corpus.warm_items()
        for s in corpus.sessions_test:
            assert all(i in warm for i in s.items)
        n_all = len(corpus.sessions_train) + len(corpus.sessions_val) + len(corpus.test_plus)
        assert n_all >= len(corpus.sessions_test) + len(corpus.sessions_train)
        assert corpus.n == len(corpus.items)
        assert all(0 <= it.price_level < corpus.rho for it in corpus.items)

    def test_dense_ids(self, tiny):
        corpus, _, _ = tiny
        assert [it.item_id for it in corpus.items] == list(range(corpus.n))

    def test_roundtrip(self, tiny, tmp_path):
        corpus, _, _ = tiny
        write_corpus(corpus, tmp_path)
        loaded = load_corpus(tmp_path)
        assert loaded.n == corpus.n
        assert loaded.rho == corpus.rho
        assert [s.items for s in loaded.sessions_train] == [s.items for s in corpus.sessions_train]
        assert [s.items for s in loaded.test_plus] == [s.items for s in corpus.test_plus]
        assert loaded.cold_items == corpus.cold_items


@pytest.mark.skipif("MMSBR_AMAZON_CELLPHONES_CSV" not in os.environ,
                    reason="real interaction log not bundled")
def test_amazon_average_session_length():
    from mmsbr.dataset import read_interactions_csv

    rows = read_interactions_csv(os.environ["MMSBR_AMAZON_CELLPHONES_CSV"])
    sessions = build_sessions(rows, min_item_freq=5)
    avg = np.mean([len(s) for s in sessions])
    assert abs(avg - 2.52) < 0.1
