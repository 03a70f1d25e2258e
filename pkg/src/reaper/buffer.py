"""Fixed-capacity replay buffer with per-episode TD-error bookkeeping.

Slots are a ring: once full, each push overwrites the oldest transition.
Transitions are grouped by episode tag; for every episode the buffer keeps
an inclusive prefix sum of the stored absolute TD errors, which gives
suffix sums (terminated episodes) and prefix sums (the running episode) in
O(1) and lets a single TD-error update propagate in O(n - t).

Reliabilities and tree priorities are recomputed lazily: an update only
marks its episode dirty, and :meth:`ReplayBuffer.refresh` rebuilds the
priorities of dirty episodes in one vectorised pass.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .priority import (
    PrioritizerConfig,
    Strategy,
    criterion,
    episode_reliabilities,
    importance_weights,
    reliability_ongoing,
)
from .sumtree import SumTree

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    state: Any
    action: int
    reward: float
    next_state: Any
    terminated: bool
    # time-limit endings still close the episode but keep the bootstrap
    truncated: bool = False
    episode_tag: int = -1
    slot: int = -1


@dataclass(frozen=True)
class TdeRecord:
    abs_tde: float
    reliability: float
    criterion: float
    priority: float
    fresh: bool


@dataclass
class Batch:
    slots: np.ndarray
    priorities: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    # 1 where the next state is a true terminal (no bootstrap)
    terminals: np.ndarray


class _Episode:
    """Ordered slot list plus inclusive prefix sums for one episode."""

    __slots__ = ("tag", "slots", "prefix", "head", "length", "terminated")

    def __init__(self, tag: int):
        self.tag = tag
        self.slots = np.zeros(16, dtype=np.int64)
        self.prefix = np.zeros(16)
        self.head = 0
        self.length = 0
        self.terminated = False

    def append(self, slot: int) -> int:
        if self.length == self.slots.size:
            self.slots = np.concatenate([self.slots, np.zeros_like(self.slots)])
            self.prefix = np.concatenate([self.prefix, np.zeros_like(self.prefix)])
        pos = self.length
        self.slots[pos] = slot
        self.prefix[pos] = self.prefix[pos - 1] if pos else 0.0
        self.length += 1
        return pos

    @property
    def base(self) -> float:
        return float(self.prefix[self.head - 1]) if self.head else 0.0

    @property
    def total(self) -> float:
        if self.length == self.head:
            return 0.0
        # incremental updates can leave rounding residue just below zero
        return max(float(self.prefix[self.length - 1]) - self.base, 0.0)

    def stored(self) -> np.ndarray:
        return self.slots[self.head:self.length]

    def reset(self, slots: np.ndarray, values: np.ndarray) -> None:
        n = slots.size
        size = max(16, 1 << max(n - 1, 0).bit_length())
        self.slots = np.zeros(size, dtype=np.int64)
        self.prefix = np.zeros(size)
        self.slots[:n] = slots
        self.prefix[:n] = np.cumsum(values)
        self.head = 0
        self.length = n


class ReplayBuffer:
    """Ring buffer, sum tree and episode registry behind one interface.

    Args:
        capacity: Number of slots N.
        config: Prioritizer settings used when priorities are refreshed.
    """

    def __init__(self, capacity: int, config: PrioritizerConfig | None = None):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.config = config or PrioritizerConfig()
        self.tree = SumTree(capacity)
        self.p_max = 1.0
        self.current_tag = 1
        self.max_episode_sum = 0.0
        self._max_tag: int | None = None
        self.episodes: dict[int, _Episode] = {}
        self._dirty: set[int] = set()
        self.write = 0
        self.count = 0
        self.bookkeeping_ops = 0
        self.uniform_fallbacks = 0

        self.abs_tde = np.zeros(capacity)
        self.reliability = np.ones(capacity)
        self.criterion = np.zeros(capacity)
        self.fresh = np.zeros(capacity, dtype=bool)
        self.tags = np.zeros(capacity, dtype=np.int64)
        self._pos = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminated = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.states: np.ndarray | None = None
        self.next_states: np.ndarray | None = None

    def __len__(self) -> int:
        return self.count

    # -- storage -----------------------------------------------------------

    def _allocate(self, state) -> None:
        state = np.asarray(state)
        dtype = np.int64 if np.issubdtype(state.dtype, np.integer) else float
        self.states = np.zeros((self.capacity,) + state.shape, dtype=dtype)
        self.next_states = np.zeros_like(self.states)

    def push(self, transition: Transition) -> int:
        """Store a transition at maximum priority and return its slot."""
        if self.states is None:
            self._allocate(transition.state)
        slot = self.write
        if self.count == self.capacity:
            self._evict(slot)

        tag = self.current_tag
        episode = self.episodes.get(tag)
        if episode is None:
            episode = self.episodes[tag] = _Episode(tag)
        self._pos[slot] = episode.append(slot)
        self.states[slot] = transition.state
        self.next_states[slot] = transition.next_state
        self.actions[slot] = transition.action
        self.rewards[slot] = transition.reward
        self.terminated[slot] = transition.terminated
        self.truncated[slot] = transition.truncated
        self.tags[slot] = tag
        self.abs_tde[slot] = 0.0
        self.criterion[slot] = 0.0
        self.fresh[slot] = True
        self.reliability[slot] = reliability_ongoing(episode.total, self.max_episode_sum)
        self.tree.update(slot, self.p_max)
        transition.slot, transition.episode_tag = slot, tag

        self.write = (self.write + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

        if transition.terminated:
            episode.terminated = True
            self._dirty.add(tag)
            self._refresh_episode(episode)
            self._dirty.discard(tag)
            self.current_tag += 1
        return slot

    def _evict(self, slot: int) -> None:
        tag = int(self.tags[slot])
        episode = self.episodes[tag]
        assert episode.slots[episode.head] == slot, "ring order broken"
        episode.head += 1
        self.tree.update(slot, 0.0)
        if episode.head == episode.length:
            del self.episodes[tag]
            self._dirty.discard(tag)
            if self._max_tag == tag:
                self._recompute_max()
        else:
            self._dirty.add(tag)
            self._total_changed(episode)

    def get(self, slot: int) -> Transition:
        self._check_slot(slot)
        return Transition(
            state=self.states[slot].copy() if self.states.ndim > 1 else self.states[slot].item(),
            action=int(self.actions[slot]),
            reward=float(self.rewards[slot]),
            next_state=(self.next_states[slot].copy() if self.next_states.ndim > 1
                        else self.next_states[slot].item()),
            terminated=bool(self.terminated[slot]),
            truncated=bool(self.truncated[slot]),
            episode_tag=int(self.tags[slot]),
            slot=slot,
        )

    def batch(self, slots, priorities=None) -> Batch:
        slots = np.asarray(slots, dtype=np.int64)
        if priorities is None:
            priorities = self.tree[slots] / self.tree.total
        return Batch(
            slots=slots,
            priorities=np.asarray(priorities, dtype=float),
            states=self.states[slots],
            actions=self.actions[slots],
            rewards=self.rewards[slots],
            next_states=self.next_states[slots],
            terminals=(self.terminated[slots] & ~self.truncated[slots]).astype(float),
        )

    def record(self, slot: int) -> TdeRecord:
        self._check_slot(slot)
        total = self.tree.total
        return TdeRecord(
            abs_tde=float(self.abs_tde[slot]),
            reliability=float(self.reliability[slot]),
            criterion=float(self.criterion[slot]),
            priority=float(self.tree[slot] / total) if total > 0 else 0.0,
            fresh=bool(self.fresh[slot]),
        )

    def _check_slot(self, slot: int) -> None:
        if not 0 <= slot < self.count:
            raise IndexError(f"slot {slot} is not occupied")

    # -- sampling ----------------------------------------------------------

    def sample(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``k`` slots with replacement, one stratified draw per segment.

        Returns the slots and their normalised sampling probabilities.
        """
        if self.count == 0:
            raise ValueError("cannot sample from an empty buffer")
        if k > self.count:
            logger.warning("batch size %d clamped to occupancy %d", k, self.count)
            k = self.count
        total = self.tree.total
        if total <= 0:
            self.uniform_fallbacks += 1
            logger.warning("total priority mass is zero; sampling uniformly")
            slots = rng.integers(0, self.count, size=k)
            return slots, np.full(k, 1.0 / self.count)
        u = 1.0 - rng.random(k)
        targets = (np.arange(k) + u) * (total / k)
        slots = self.tree.find(targets)
        return slots, self.tree[slots] / total

    def importance_weights(self, priorities, beta: float, normalization: str = "buffer") -> np.ndarray:
        """IS weights for sampled probabilities, max-normalised over the buffer or the batch."""
        total = self.tree.total
        if total <= 0:
            return np.ones(len(priorities))
        if normalization == "batch":
            return importance_weights(priorities, self.count, beta)
        if normalization != "buffer":
            raise ValueError(f"unknown weight normalization {normalization!r}")
        return importance_weights(priorities, self.count, beta, self.tree.min / total)

    # -- TD-error bookkeeping ----------------------------------------------

    def update_abs_tde(self, slot: int, new_abs_tde: float) -> None:
        """Replace one stored absolute TD error and propagate the episode sums."""
        self._check_slot(slot)
        if not new_abs_tde >= 0 or not np.isfinite(new_abs_tde):
            raise ValueError(f"absolute TD error must be finite and >= 0, got {new_abs_tde}")
        diff = new_abs_tde - self.abs_tde[slot]
        self.abs_tde[slot] = new_abs_tde
        self.fresh[slot] = False
        tag = int(self.tags[slot])
        episode = self.episodes[tag]
        pos = int(self._pos[slot])
        if diff != 0.0:
            episode.prefix[pos:episode.length] += diff
            self.bookkeeping_ops += episode.length - pos
            self._total_changed(episode)
        self._dirty.add(tag)

    def update_abs_tdes(self, slots, values) -> None:
        for slot, value in zip(np.asarray(slots).tolist(), np.asarray(values, dtype=float).tolist()):
            self.update_abs_tde(slot, value)

    def suffix_sum(self, slot: int) -> float:
        """Sum of stored absolute TD errors after ``slot`` within its episode."""
        self._check_slot(slot)
        episode = self.episodes[int(self.tags[slot])]
        return max(float(episode.prefix[episode.length - 1] - episode.prefix[self._pos[slot]]), 0.0)

    def prefix_sum(self, slot: int) -> float:
        """Stored absolute TD errors up to and including ``slot`` within its episode."""
        self._check_slot(slot)
        episode = self.episodes[int(self.tags[slot])]
        return max(float(episode.prefix[self._pos[slot]]) - episode.base, 0.0)

    def episode_sum(self, tag: int) -> float:
        return self.episodes[tag].total

    def episode_slots(self, tag: int) -> np.ndarray:
        return self.episodes[tag].stored().copy()

    def _total_changed(self, episode: _Episode) -> None:
        total = episode.total
        old = self.max_episode_sum
        if total >= self.max_episode_sum:
            self.max_episode_sum = total
            self._max_tag = episode.tag
        elif self._max_tag == episode.tag:
            self._recompute_max()
        if self.max_episode_sum != old:
            self._mark_ongoing_dirty()

    def _recompute_max(self) -> None:
        old = self.max_episode_sum
        best, best_tag = 0.0, None
        for tag, episode in self.episodes.items():
            total = episode.total
            if best_tag is None or total > best:
                best, best_tag = total, tag
        self.max_episode_sum, self._max_tag = best, best_tag
        if best != old:
            self._mark_ongoing_dirty()

    def _mark_ongoing_dirty(self) -> None:
        if self.current_tag in self.episodes:
            self._dirty.add(self.current_tag)

    @property
    def dirty(self) -> frozenset:
        return frozenset(self._dirty)

    def refresh(self) -> None:
        """Recompute reliabilities, criteria and tree priorities of dirty episodes."""
        # finished episodes first; the running one depends on the final max sum
        pending = []
        for tag in sorted(self._dirty, key=lambda t: t == self.current_tag):
            episode = self.episodes.get(tag)
            if episode is not None:
                pending.append(self._rescore_episode(episode))
        self._dirty.clear()
        self._write_leaves(pending)

    def _refresh_episode(self, episode: _Episode) -> None:
        self._write_leaves([self._rescore_episode(episode)])

    def _rescore_episode(self, episode: _Episode):
        slots = episode.stored().copy()
        values = self.abs_tde[slots]
        episode.reset(slots, values)
        self._pos[slots] = np.arange(slots.size)
        total = episode.total
        if self._max_tag == episode.tag or total > self.max_episode_sum:
            self.max_episode_sum, self._max_tag = total, episode.tag

        rel = episode_reliabilities(values, episode.terminated, self.max_episode_sum)
        self.reliability[slots] = rel
        self.bookkeeping_ops += slots.size
        trained = ~self.fresh[slots]
        slots = slots[trained]
        psi = np.atleast_1d(criterion(rel[trained], values[trained], self.config))
        self.criterion[slots] = psi
        return slots, psi

    def _write_leaves(self, pending) -> None:
        pending = [(slots, psi) for slots, psi in pending if slots.size]
        if not pending:
            return
        slots = np.concatenate([p[0] for p in pending])
        leaves = self.leaf_values(np.concatenate([p[1] for p in pending]))
        self.tree.update(slots, leaves)
        self.p_max = max(self.p_max, float(leaves.max()))

    def leaf_values(self, psi) -> np.ndarray:
        psi = np.asarray(psi, dtype=float)
        if self.config.strategy is Strategy.UNIFORM:
            return psi
        return psi + self.config.priority_floor

    # -- diagnostics -------------------------------------------------------

    def brute_force_max_episode_sum(self) -> float:
        sums: dict[int, float] = {}
        for slot in range(self.count):
            tag = int(self.tags[slot])
            sums[tag] = sums.get(tag, 0.0) + float(self.abs_tde[slot])
        return max(sums.values(), default=0.0)

    def snapshot_rows(self) -> list[dict]:
        total = self.tree.total
        rows = []
        for slot in range(self.count):
            rows.append({
                "slot": slot,
                "episode_tag": int(self.tags[slot]),
                "abs_tde": float(self.abs_tde[slot]),
                "reliability": float(self.reliability[slot]),
                "criterion": float(self.criterion[slot]),
                "priority": float(self.tree[slot] / total) if total > 0 else 0.0,
            })
        return rows

    def dump_snapshot(self, path) -> None:
        fields = ["slot", "episode_tag", "abs_tde", "reliability", "criterion", "priority"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.snapshot_rows())
