"""Fixed-capacity transition storage with O(log n) proportional sampling.

A ring buffer of transitions plus a sum-tree over per-transition priorities
d(s, a). New transitions always enter with priority 1; priority schemes
rewrite the leaves afterwards. The sum-tree stores partial sums in a flat
array (node i has children 2i and 2i+1, leaves in [n, 2n)), which keeps
both the root-to-leaf update path and the prefix-sum descent vectorizable
over a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import binio


class EmptyBufferError(RuntimeError):
    pass


class InvalidTransitionError(ValueError):
    pass


class UnsupportedModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    """One environment step plus buffer bookkeeping.

    state / next_state are float vectors in continuous mode or integer
    indices in tabular mode; actions likewise.
    """

    state: np.ndarray | int
    action: np.ndarray | int
    reward: float
    next_state: np.ndarray | int
    terminal: bool
    insert_step: int = 0


class SumTree:
    """Flat-array binary tree of partial priority sums."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        n = 1
        while n < capacity:
            n *= 2
        self._n = n
        self._levels = n.bit_length() - 1
        self.nodes = np.zeros(2 * n, dtype=np.float64)

    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, i: int) -> float:
        return float(self.nodes[self._n + i])

    def leaves(self, count: int | None = None) -> np.ndarray:
        end = self._n if count is None else count
        return self.nodes[self._n : self._n + end]

    def set_many(self, indices: np.ndarray, values: np.ndarray) -> None:
        """Replace leaf values and repair every affected ancestor.

        Duplicate parents in a level write identical sums, so no dedup
        pass is needed.
        """
        idx = np.asarray(indices, dtype=np.int64) + self._n
        self.nodes[idx] = values
        nodes = self.nodes
        for _ in range(self._levels):
            idx = idx >> 1
            nodes[idx] = nodes[2 * idx] + nodes[2 * idx + 1]

    def set(self, index: int, value: float) -> None:
        i = index + self._n
        nodes = self.nodes
        nodes[i] = value
        for _ in range(self._levels):
            i >>= 1
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1]

    def find_prefix(self, targets: np.ndarray) -> np.ndarray:
        """Descend to the leaves whose cumulative-sum interval contains each
        target; targets must lie in [0, total)."""
        u = np.asarray(targets, dtype=np.float64).copy()
        idx = np.ones(len(u), dtype=np.int64)
        for _ in range(self._levels):
            left = idx * 2
            left_sum = self.nodes[left]
            go_right = u >= left_sum
            u -= left_sum * go_right
            idx = left + go_right
        return idx - self._n

    def reaggregate(self) -> None:
        """Exactly rebuild all internal nodes from the leaves (drift bound)."""
        m = self._n
        while m > 1:
            m //= 2
            child = self.nodes[2 * m : 4 * m]
            self.nodes[m : 2 * m] = child[0::2] + child[1::2]


@dataclass
class SampledBatch:
    """A minibatch drawn from the buffer, stored columnar for speed.

    sampling_weights are all 1 under proportional sampling; under the
    uniform-sampling/weighted-objective mode they carry the priorities as
    explicit loss weights. entry_ids let priority writers detect slots that
    were overwritten between sampling and update.
    """

    indices: np.ndarray
    entry_ids: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    insert_steps: np.ndarray
    priorities: np.ndarray
    sampling_weights: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def transitions(self) -> list[Transition]:
        out = []
        for i in range(len(self.indices)):
            out.append(
                Transition(
                    state=self.states[i],
                    action=self.actions[i],
                    reward=float(self.rewards[i]),
                    next_state=self.next_states[i],
                    terminal=bool(self.terminals[i]),
                    insert_step=int(self.insert_steps[i]),
                )
            )
        return out


class PriorityBuffer:
    """Ring buffer + sum-tree of priorities d(s, a).

    Single-writer, multiple-reader: push/update_priorities need exclusive
    access; sampling and implied_distribution may run concurrently with
    each other but not with writes.
    """

    INITIAL_PRIORITY = 1.0

    def __init__(self, capacity: int, state_dim: int, action_dim: int,
                 discrete: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.discrete = discrete
        if discrete:
            self._states = np.zeros(capacity, dtype=np.int64)
            self._actions = np.zeros(capacity, dtype=np.int64)
            self._next_states = np.zeros(capacity, dtype=np.int64)
        else:
            self._states = np.zeros((capacity, state_dim), dtype=np.float64)
            self._actions = np.zeros((capacity, action_dim), dtype=np.float64)
            self._next_states = np.zeros((capacity, state_dim), dtype=np.float64)
        self._rewards = np.zeros(capacity, dtype=np.float64)
        self._terminals = np.zeros(capacity, dtype=bool)
        self._insert_steps = np.zeros(capacity, dtype=np.int64)
        self._entry_ids = np.full(capacity, -1, dtype=np.int64)
        self.tree = SumTree(capacity)
        self.size = 0
        self.write_cursor = 0
        self._next_entry_id = 0
        self.stale_update_count = 0

    def __len__(self) -> int:
        return self.size

    @property
    def priorities(self) -> np.ndarray:
        return self.tree.leaves(self.size)

    def total_priority(self) -> float:
        return self.tree.total()

    def _coerce_state(self, value, what: str) -> np.ndarray | int:
        if self.discrete:
            v = int(value)
            return v
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
        if arr.shape != (self.state_dim,):
            raise InvalidTransitionError(
                f"{what} has shape {arr.shape}, expected ({self.state_dim},)"
            )
        if not np.all(np.isfinite(arr)):
            raise InvalidTransitionError(f"{what} contains non-finite values")
        return arr

    def push(self, t: Transition) -> int:
        """Store t at the write cursor with priority 1; evicts the oldest
        entry once full. Returns the slot index."""
        if not np.isfinite(t.reward):
            raise InvalidTransitionError(f"reward {t.reward!r} is not finite")
        i = self.write_cursor
        self._states[i] = self._coerce_state(t.state, "state")
        self._next_states[i] = self._coerce_state(t.next_state, "next_state")
        if self.discrete:
            self._actions[i] = int(t.action)
        else:
            act = np.asarray(t.action, dtype=np.float64).reshape(-1)
            if act.shape != (self.action_dim,):
                raise InvalidTransitionError(
                    f"action has shape {act.shape}, expected ({self.action_dim},)"
                )
            if not np.all(np.isfinite(act)):
                raise InvalidTransitionError("action contains non-finite values")
            self._actions[i] = act
        self._rewards[i] = float(t.reward)
        self._terminals[i] = bool(t.terminal)
        self._insert_steps[i] = int(t.insert_step)
        self._entry_ids[i] = self._next_entry_id
        self._next_entry_id += 1
        self.tree.set(i, self.INITIAL_PRIORITY)
        self.write_cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def _gather(self, idx: np.ndarray, weights: np.ndarray) -> SampledBatch:
        return SampledBatch(
            indices=idx,
            entry_ids=self._entry_ids[idx].copy(),
            states=self._states[idx].copy(),
            actions=self._actions[idx].copy(),
            rewards=self._rewards[idx].copy(),
            next_states=self._next_states[idx].copy(),
            terminals=self._terminals[idx].copy(),
            insert_steps=self._insert_steps[idx].copy(),
            priorities=self.tree.leaves(self.capacity)[idx].copy(),
            sampling_weights=weights,
        )

    def sample_proportional(self, n: int, rng: np.random.Generator) -> SampledBatch:
        """Draw n slots, each with probability priority / root_sum."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        total = self.tree.total()
        targets = rng.random(n) * total
        idx = self.tree.find_prefix(targets)
        # guard: prefix rounding at the extreme right edge
        np.clip(idx, 0, self.size - 1, out=idx)
        return self._gather(idx, np.ones(n, dtype=np.float64))

    def sample_uniform(self, n: int, rng: np.random.Generator,
                       priorities_as_weights: bool = False) -> SampledBatch:
        """Uniform draw; optionally carry priorities as explicit loss
        weights (the weighted-objective mode)."""
        if self.size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        if priorities_as_weights:
            weights = self.tree.leaves(self.capacity)[idx].copy()
        else:
            weights = np.ones(n, dtype=np.float64)
        return self._gather(idx, weights)

    def all_live(self) -> SampledBatch:
        """All stored entries in slot order (full-buffer priority refresh)."""
        if self.size == 0:
            raise EmptyBufferError("buffer is empty")
        idx = np.arange(self.size, dtype=np.int64)
        return self._gather(idx, np.ones(self.size, dtype=np.float64))

    def update_priorities(self, indices, new_priorities, entry_ids=None) -> None:
        """Replace priorities at the given slots.

        Entries whose slot was overwritten since sampling (detected via
        entry_ids) are skipped and counted, not errored.
        """
        idx = np.asarray(indices, dtype=np.int64)
        vals = np.asarray(new_priorities, dtype=np.float64)
        if idx.shape != vals.shape:
            raise InvalidTransitionError("indices and priorities length mismatch")
        if np.any(idx < 0) or np.any(idx >= self.size):
            raise InvalidTransitionError("slot index out of range")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise InvalidTransitionError("priorities must be positive and finite")
        if entry_ids is not None:
            fresh = self._entry_ids[idx] == np.asarray(entry_ids, dtype=np.int64)
            self.stale_update_count += int(np.sum(~fresh))
            if not np.all(fresh):
                idx = idx[fresh]
                vals = vals[fresh]
                if len(idx) == 0:
                    return
        self.tree.set_many(idx, vals)

    def implied_distribution(self, key=None) -> dict:
        """Priority-weighted empirical distribution over (state, action)
        buckets; values sum to 1 within 1e-12.

        Discrete buffers bucket by the raw index pair. Continuous buffers
        require a key(state, action) -> hashable bucketing callable.
        """
        if self.size == 0:
            raise EmptyBufferError("buffer is empty")
        if key is None:
            if not self.discrete:
                raise UnsupportedModeError(
                    "continuous buffer needs an explicit (state, action) bucketing"
                )
            key = lambda s, a: (int(s), int(a))
        pri = self.tree.leaves(self.size)
        out: dict = {}
        for i in range(self.size):
            k = key(self._states[i], self._actions[i])
            out[k] = out.get(k, 0.0) + pri[i]
        total = sum(out.values())
        return {k: v / total for k, v in out.items()}

    # Snapshot format: binio envelope (magic, version, kind=1) wrapping the
    # header scalars and the live slots of every column in slot order.
    def snapshot(self, path_or_stream) -> None:
        n = self.size
        arrays = {
            "meta": np.array(
                [self.capacity, self.size, self.write_cursor, self._next_entry_id,
                 self.state_dim, self.action_dim, int(self.discrete),
                 self.stale_update_count],
                dtype=np.int64,
            ),
            "states": self._states[:n],
            "actions": self._actions[:n],
            "rewards": self._rewards[:n],
            "next_states": self._next_states[:n],
            "terminals": self._terminals[:n].astype(np.uint8),
            "insert_steps": self._insert_steps[:n],
            "entry_ids": self._entry_ids[:n],
            "priorities": self.tree.leaves(n),
        }
        binio.write_envelope(
            path_or_stream, binio.KIND_BUFFER, binio.arrays_to_payload(arrays)
        )

    @classmethod
    def load(cls, path_or_stream) -> "PriorityBuffer":
        payload = binio.read_envelope(path_or_stream, binio.KIND_BUFFER)
        arrays = binio.payload_to_arrays(payload)
        meta = arrays["meta"]
        capacity, size, cursor, next_id, sdim, adim, discrete, stale = (
            int(v) for v in meta
        )
        buf = cls(capacity, sdim, adim, discrete=bool(discrete))
        n = size
        buf._states[:n] = arrays["states"]
        buf._actions[:n] = arrays["actions"]
        buf._rewards[:n] = arrays["rewards"]
        buf._next_states[:n] = arrays["next_states"]
        buf._terminals[:n] = arrays["terminals"].astype(bool)
        buf._insert_steps[:n] = arrays["insert_steps"]
        buf._entry_ids[:n] = arrays["entry_ids"]
        buf.size = size
        buf.write_cursor = cursor
        buf._next_entry_id = next_id
        buf.stale_update_count = stale
        if n:
            buf.tree.set_many(np.arange(n), arrays["priorities"])
        return buf

    def fill_offline(self, states, actions, rewards, next_states, terminals) -> None:
        """Bulk-load an offline dataset; every record gets priority 1."""
        n = len(rewards)
        for i in range(n):
            self.push(
                Transition(
                    state=states[i],
                    action=actions[i],
                    reward=float(rewards[i]),
                    next_state=next_states[i],
                    terminal=bool(terminals[i]),
                    insert_step=0,
                )
            )
