import io

import numpy as np
import pytest
from scipy import stats

from roer.binio import FormatError
from roer.replay import (
    EmptyBufferError,
    InvalidTransitionError,
    PriorityBuffer,
    SumTree,
    Transition,
    UnsupportedModeError,
)


def make_transition(s=0, a=0, r=0.0, s2=1, terminal=False, step=0):
    return Transition(state=s, action=a, reward=r, next_state=s2,
                      terminal=terminal, insert_step=step)


def tabular_buffer(capacity=8):
    return PriorityBuffer(capacity, state_dim=1, action_dim=1, discrete=True)


def vector_buffer(capacity=8, ds=3, da=2):
    return PriorityBuffer(capacity, state_dim=ds, action_dim=da)


class TestSumTree:
    def test_set_and_total(self):
        t = SumTree(4)
        t.set_many(np.array([0, 1, 2]), np.array([1.0, 2.0, 3.0]))
        assert t.total() == 6.0
        assert t.get(1) == 2.0

    def test_find_prefix_deterministic(self):
        t = SumTree(4)
        t.set_many(np.array([0, 1, 2]), np.array([1.0, 2.0, 3.0]))
        # cumulative intervals: [0,1) -> 0, [1,3) -> 1, [3,6) -> 2
        found = t.find_prefix(np.array([0.0, 0.99, 1.0, 2.9, 3.0, 5.9]))
        assert list(found) == [0, 0, 1, 1, 2, 2]

    def test_reaggregate_matches_brute_force(self):
        rng = np.random.default_rng(0)
        t = SumTree(37)
        vals = rng.uniform(0.1, 5.0, size=37)
        t.set_many(np.arange(37), vals)
        t.reaggregate()
        assert t.total() == pytest.approx(vals.sum(), rel=1e-12)

    def test_random_interleaving_consistency(self):
        rng = np.random.default_rng(42)
        cap = 64
        t = SumTree(cap)
        ref = np.zeros(cap)
        for _ in range(10_000):
            i = int(rng.integers(cap))
            v = float(rng.uniform(1e-3, 10.0))
            t.set(i, v)
            ref[i] = v
        assert t.total() == pytest.approx(ref.sum(), rel=1e-9)


class TestPush:
    def test_push_into_empty(self):
        buf = tabular_buffer()
        buf.push(make_transition())
        assert len(buf) == 1
        assert buf.total_priority() == 1.0

    def test_priority_additivity(self):
        buf = tabular_buffer()
        for i in range(3):
            buf.push(make_transition(s=i))
        buf.update_priorities([0, 1, 2], [1.0, 2.0, 3.0])
        assert buf.total_priority() == 6.0

    def test_ring_overwrite(self):
        buf = tabular_buffer(capacity=4)
        for i in range(5):
            buf.push(make_transition(s=i))
        assert len(buf) == 4
        assert int(buf._states[0]) == 4  # slot 0 overwritten by the 5th push
        assert buf.write_cursor == 1

    def test_rejects_nonfinite(self):
        buf = vector_buffer()
        with pytest.raises(InvalidTransitionError):
            buf.push(Transition(np.full(3, np.nan), np.zeros(2), 0.0,
                                np.zeros(3), False))
        with pytest.raises(InvalidTransitionError):
            buf.push(Transition(np.zeros(3), np.zeros(2), float("inf"),
                                np.zeros(3), False))

    def test_rejects_wrong_shape(self):
        buf = vector_buffer(ds=3)
        with pytest.raises(InvalidTransitionError):
            buf.push(Transition(np.zeros(4), np.zeros(2), 0.0, np.zeros(3), False))

    def test_new_entries_get_unit_priority(self):
        buf = tabular_buffer(capacity=4)
        for i in range(3):
            buf.push(make_transition(s=i))
        buf.update_priorities([0, 1, 2], [9.0, 9.0, 9.0])
        buf.push(make_transition(s=3))
        assert buf.tree.get(3) == 1.0
        for i in range(2):  # wrap and evict
            buf.push(make_transition(s=10 + i))
        assert buf.tree.get(0) == 1.0


class TestSampling:
    def test_proportional_frequencies(self):
        buf = tabular_buffer()
        for i in range(3):
            buf.push(make_transition(s=i))
        buf.update_priorities([0, 1, 2], [1.0, 2.0, 3.0])
        rng = np.random.default_rng(2024)
        batch = buf.sample_proportional(60_000, rng)
        freqs = np.bincount(batch.indices, minlength=3) / 60_000
        expect = np.array([1 / 6, 1 / 3, 1 / 2])
        assert np.all(np.abs(freqs - expect) < 0.01)

    def test_single_entry(self):
        buf = tabular_buffer()
        buf.push(make_transition(s=7))
        batch = buf.sample_proportional(100, np.random.default_rng(0))
        assert np.all(batch.indices == 0)
        assert np.all(batch.states == 7)

    def test_equal_priorities_chi2_uniform(self):
        buf = tabular_buffer(capacity=10)
        for i in range(10):
            buf.push(make_transition(s=i))
        rng = np.random.default_rng(5)
        batch = buf.sample_proportional(10_000, rng)
        counts = np.bincount(batch.indices, minlength=10)
        expected = 1_000.0
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < stats.chi2.ppf(0.999, df=9)

    def test_empty_buffer_errors(self):
        with pytest.raises(EmptyBufferError):
            tabular_buffer().sample_proportional(1, np.random.default_rng(0))

    def test_uniform_mode_weights(self):
        buf = tabular_buffer()
        for i in range(4):
            buf.push(make_transition(s=i))
        buf.update_priorities([0, 1, 2, 3], [1.0, 2.0, 3.0, 4.0])
        rng = np.random.default_rng(1)
        batch = buf.sample_uniform(100, rng, priorities_as_weights=True)
        assert np.allclose(batch.sampling_weights, batch.indices + 1.0)
        plain = buf.sample_uniform(100, rng)
        assert np.all(plain.sampling_weights == 1.0)

    def test_proportional_equals_uniform_when_priorities_equal(self):
        # with all-ones priorities the two sampling paths induce the same
        # distribution over slots (chi-squared on each against uniform)
        buf = tabular_buffer(capacity=10)
        for i in range(10):
            buf.push(make_transition(s=i))
        rng = np.random.default_rng(31)
        crit = stats.chi2.ppf(0.999, df=9)
        for draw in (buf.sample_proportional, buf.sample_uniform):
            counts = np.bincount(draw(10_000, rng).indices, minlength=10)
            chi2 = ((counts - 1_000.0) ** 2 / 1_000.0).sum()
            assert chi2 < crit

    def test_batch_fields_consistent(self):
        buf = vector_buffer()
        rng = np.random.default_rng(3)
        for i in range(5):
            buf.push(Transition(rng.normal(size=3), rng.normal(size=2),
                                float(i), rng.normal(size=3), i % 2 == 0,
                                insert_step=i))
        batch = buf.sample_proportional(8, rng)
        assert len(batch) == 8
        ts = batch.transitions
        assert len(ts) == 8
        assert ts[0].reward == batch.rewards[0]


class TestUpdatePriorities:
    def test_replace_not_accumulate(self):
        buf = tabular_buffer()
        for i in range(3):
            buf.push(make_transition(s=i))
        buf.update_priorities([0], [5.0])
        assert buf.total_priority() == 7.0
        buf.update_priorities([0], [5.0])
        assert buf.total_priority() == 7.0

    def test_zero_priority_rejected(self):
        buf = tabular_buffer()
        buf.push(make_transition())
        with pytest.raises(InvalidTransitionError):
            buf.update_priorities([0], [0.0])
        with pytest.raises(InvalidTransitionError):
            buf.update_priorities([0], [float("nan")])

    def test_noop_update_bit_identical(self):
        buf = tabular_buffer()
        for i in range(3):
            buf.push(make_transition(s=i))
        buf.update_priorities([0, 1, 2], [0.3, 0.7, 1.9])
        before = buf.total_priority()
        buf.update_priorities([0, 1, 2], [0.3, 0.7, 1.9])
        assert buf.total_priority() == before  # exact, not approx

    def test_stale_entries_skipped_and_counted(self):
        buf = tabular_buffer(capacity=2)
        buf.push(make_transition(s=0))
        buf.push(make_transition(s=1))
        batch = buf.sample_proportional(2, np.random.default_rng(0))
        buf.push(make_transition(s=2))  # overwrites slot 0
        buf.update_priorities(batch.indices, [5.0, 5.0], entry_ids=batch.entry_ids)
        assert buf.stale_update_count == int(np.sum(batch.indices == 0))
        assert buf.tree.get(0) == 1.0  # stale slot untouched

    def test_eviction_preserves_consistency(self):
        rng = np.random.default_rng(9)
        buf = tabular_buffer(capacity=16)
        for step in range(2_000):
            buf.push(make_transition(s=step % 5, step=step))
            if len(buf) > 1 and step % 3 == 0:
                i = int(rng.integers(len(buf)))
                buf.update_priorities([i], [float(rng.uniform(0.1, 4.0))])
        leaves = buf.tree.leaves(len(buf))
        assert np.all(leaves > 0)
        assert buf.total_priority() == pytest.approx(leaves.sum(), rel=1e-9)


class TestImpliedDistribution:
    def test_two_entry_weights(self):
        buf = tabular_buffer()
        buf.push(make_transition(s=0, a=0))
        buf.push(make_transition(s=1, a=0))
        buf.update_priorities([0, 1], [1.0, 3.0])
        dist = buf.implied_distribution()
        assert dist[(0, 0)] == pytest.approx(0.25)
        assert dist[(1, 0)] == pytest.approx(0.75)

    def test_uniform_over_distinct_pairs(self):
        buf = tabular_buffer(capacity=12)
        for s in range(3):
            for a in range(2):
                buf.push(make_transition(s=s, a=a))
        dist = buf.implied_distribution()
        assert len(dist) == 6
        for v in dist.values():
            assert v == pytest.approx(1 / 6)
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)

    def test_continuous_requires_bucketing(self):
        buf = vector_buffer()
        buf.push(Transition(np.zeros(3), np.zeros(2), 0.0, np.zeros(3), False))
        with pytest.raises(UnsupportedModeError):
            buf.implied_distribution()
        dist = buf.implied_distribution(key=lambda s, a: "all")
        assert dist == {"all": 1.0}


class TestSnapshot:
    def test_round_trip(self):
        rng = np.random.default_rng(17)
        buf = vector_buffer(capacity=64)
        for i in range(100):  # wraps past capacity
            buf.push(Transition(rng.normal(size=3), rng.normal(size=2),
                                float(rng.normal()), rng.normal(size=3),
                                bool(rng.integers(2)), insert_step=i))
        buf.update_priorities(np.arange(64), rng.uniform(0.1, 3.0, size=64))
        stream = io.BytesIO()
        buf.snapshot(stream)
        stream.seek(0)
        loaded = PriorityBuffer.load(stream)
        assert loaded.size == buf.size
        assert loaded.write_cursor == buf.write_cursor
        assert np.array_equal(loaded._states[:64], buf._states[:64])
        assert np.array_equal(loaded.priorities, buf.priorities)
        key = lambda s, a: (round(float(s[0]), 6), round(float(a[0]), 6))
        assert buf.implied_distribution(key) == loaded.implied_distribution(key)

    def test_truncated_stream(self):
        buf = tabular_buffer()
        buf.push(make_transition())
        stream = io.BytesIO()
        buf.snapshot(stream)
        data = stream.getvalue()
        with pytest.raises(FormatError):
            PriorityBuffer.load(io.BytesIO(data[: len(data) // 2]))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            PriorityBuffer.load(io.BytesIO(b"NOTMAGIC" + b"\x00" * 32))

    def test_offline_fill_unit_priorities(self):
        buf = tabular_buffer(capacity=32)
        n = 20
        buf.fill_offline(
            states=np.arange(n), actions=np.zeros(n, dtype=int),
            rewards=np.linspace(0, 1, n), next_states=np.arange(n) + 1,
            terminals=np.zeros(n, dtype=bool),
        )
        assert len(buf) == n
        assert np.all(buf.priorities == 1.0)
