"""Tests for windowed farthest-first selection and batch construction."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rowstitch.core import PairVerdict, RejectReason, Transform2D, validate_config
from rowstitch.features import MatchSet
from rowstitch.sequencer import Batch, ChainBreakError, MemoMatcher, StitchChain, build_batches, build_chain


def accept() -> PairVerdict:
    return PairVerdict(True, Transform2D.translation(100, 0), MatchSet.empty(), 0.0, RejectReason.NONE)


def reject(reason: RejectReason = RejectReason.TOO_FEW_INLIERS) -> PairVerdict:
    return PairVerdict(False, None, MatchSet.empty(), math.inf, reason)


def distance_gate(d: int, calls: list | None = None):
    def gate(i: int, j: int) -> PairVerdict:
        if calls is not None:
            calls.append((i, j))
        return accept() if j - i <= d else reject()
    return gate


def chain_of(n_used: int) -> StitchChain:
    idx = list(range(n_used))
    return StitchChain(idx, [(i, i + 1, accept()) for i in range(n_used - 1)])


# ---------------------------------------------------------------------------
# Chain
# ---------------------------------------------------------------------------


class TestBuildChain:
    def test_window_three_distance_three(self):
        calls = []
        chain = build_chain(range(11), validate_config({"window": 3}), distance_gate(3, calls))
        assert chain.used_indices == [0, 3, 6, 9, 10]
        assert calls == [(0, 3), (3, 6), (6, 9), (9, 10)]
        assert not chain.gaps

    def test_farthest_first_from_log(self):
        cfg = validate_config({"window": 5})
        chain = build_chain(range(30), cfg, distance_gate(2))
        rejected = {(i, j) for i, j, v in chain.attempts if not v.accepted}
        for i, j, v in chain.links:
            assert v.accepted
            for k in range(j + 1, min(i + cfg.window, 29) + 1):
                assert (i, k) in rejected

    def test_two_images(self):
        chain = build_chain(range(2), validate_config(None), distance_gate(1))
        assert chain.used_indices == [0, 1] and len(chain.links) == 1

    def test_reject_all_partial(self):
        chain = build_chain(range(8), validate_config({"window": 4}), lambda i, j: reject())
        assert chain.used_indices == [0] and chain.links == []
        assert len(chain.gaps) == 1
        assert chain.gaps[0].line() == ("break_at=0 tried=4:too_few_inliers,3:too_few_inliers,"
                                        "2:too_few_inliers,1:too_few_inliers")

    def test_strict_raises(self):
        with pytest.raises(ChainBreakError) as exc:
            build_chain(range(8), validate_config({"window": 4}), lambda i, j: reject(), strict=True)
        assert exc.value.gap.break_at == 0

    def test_partial_keeps_prefix(self):
        def gate(i, j):
            return accept() if j - i <= 2 and j <= 6 else reject(RejectReason.MOTION_VIOLATION)
        chain = build_chain(range(12), validate_config({"window": 3}), gate)
        assert chain.used_indices == [0, 2, 4, 6]
        assert chain.gaps[0].break_at == 6

    def test_each_image_in_at_most_two_links(self):
        chain = build_chain(range(25), validate_config(None), distance_gate(4))
        for idx in chain.used_indices:
            assert sum(idx in (i, j) for i, j, _ in chain.links) <= 2

    def test_memo_gates_each_pair_once(self):
        calls = []
        memo = MemoMatcher(distance_gate(1, calls))
        memo(0, 1)
        memo(0, 1)
        assert calls == [(0, 1)] and memo.calls == [(0, 1)]

    def test_needs_two_images(self):
        with pytest.raises(ValueError):
            build_chain(range(1), validate_config(None), distance_gate(1))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 80), st.integers(1, 8), st.data())
    def test_used_count_formula(self, n, window, data):
        d = data.draw(st.integers(1, window))
        chain = build_chain(range(n), validate_config({"window": window}), distance_gate(d))
        assert len(chain.used_indices) == math.ceil((n - 1) / d) + 1
        steps = [b - a for a, b in zip(chain.used_indices, chain.used_indices[1:])]
        assert all(1 <= s <= window for s in steps)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


class TestBuildBatches:
    @pytest.mark.parametrize("n_used, expected", [
        (10, [(0, 9)]),
        (19, [(0, 9), (9, 18)]),
        (11, [(0, 9), (9, 10)]),
        (2, [(0, 1)]),
    ])
    def test_examples(self, n_used, expected):
        batches = build_batches(chain_of(n_used), 10)
        assert [(b.first, b.last) for b in batches] == expected

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 120), st.integers(2, 15))
    def test_cover_and_overlap(self, n_used, size):
        chain = chain_of(n_used)
        batches = build_batches(chain, size)
        assert set().union(*(b.indices for b in batches)) == set(chain.used_indices)
        for prev, nxt in zip(batches, batches[1:]):
            assert set(prev.indices) & set(nxt.indices) == {prev.last} and nxt.first == prev.last
        for b in batches:
            assert 2 <= len(b.indices) <= size and len(b.links) == len(b.indices) - 1
        # each chain link sits inside exactly one batch
        for i, j, _ in chain.links:
            assert sum(i in b.indices and j in b.indices for b in batches) == 1

    def test_short_chain_rejected(self):
        with pytest.raises(ValueError):
            build_batches(StitchChain([0], []), 10)

    def test_batch_properties(self):
        b = Batch((3, 5, 8), (accept(), accept()))
        assert (b.first, b.last) == (3, 8)
