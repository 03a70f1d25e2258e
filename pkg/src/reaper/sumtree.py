"""Array-backed sum tree with a companion min tree.

Node 1 is the root, node ``i`` has children ``2i`` and ``2i + 1``, and the
leaves live at ``capacity .. 2 * capacity - 1`` where ``capacity`` is the
smallest power of two holding ``size`` leaves. Updates and searches take a
whole batch of indices at once and walk the tree level by level, so one
call costs O(k log N) node touches but only O(log N) numpy operations.
"""

from __future__ import annotations

import numpy as np


class SumTree:
    def __init__(self, size: int):
        if size < 1:
            raise ValueError("size must be at least 1")
        capacity = 1
        while capacity < size:
            capacity *= 2
        self.size = size
        self.capacity = capacity
        self.depth = capacity.bit_length() - 1
        self._sum = np.zeros(2 * capacity)
        self._min = np.full(2 * capacity, np.inf)
        # touched tree nodes, for complexity checks
        self.node_visits = 0

    @property
    def total(self) -> float:
        return float(self._sum[1])

    @property
    def min(self) -> float:
        """Smallest positive leaf value (``inf`` when no leaf is positive)."""
        return float(self._min[1])

    @property
    def leaves(self) -> np.ndarray:
        return self._sum[self.capacity:self.capacity + self.size]

    @property
    def nodes(self) -> np.ndarray:
        return self._sum

    def __getitem__(self, idx):
        return self._sum[np.asarray(idx) + self.capacity]

    def update(self, indices, values) -> None:
        if np.ndim(indices) == 0:
            self._update_one(int(indices), float(values))
            return
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        values = np.broadcast_to(np.asarray(values, dtype=float), indices.shape)
        if indices.size == 0:
            return
        if indices.min() < 0 or indices.max() >= self.size:
            raise IndexError("leaf index out of range")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("leaf values must be finite and non-negative")
        order = np.argsort(indices, kind="stable")
        indices, values = indices[order], values[order]
        # after a stable sort the last write of a repeated index ends its run
        keep = np.ones(indices.size, dtype=bool)
        keep[:-1] = indices[1:] != indices[:-1]
        nodes, values = indices[keep] + self.capacity, values[keep]
        self._sum[nodes] = values
        self._min[nodes] = np.where(values > 0, values, np.inf)
        self.node_visits += nodes.size
        while nodes[0] > 1:
            nodes = nodes >> 1
            if nodes.size > 1:
                nodes = nodes[np.concatenate(([True], nodes[1:] != nodes[:-1]))]
            left = 2 * nodes
            self._sum[nodes] = self._sum[left] + self._sum[left + 1]
            self._min[nodes] = np.minimum(self._min[left], self._min[left + 1])
            self.node_visits += nodes.size

    def _update_one(self, index: int, value: float) -> None:
        if not 0 <= index < self.size:
            raise IndexError("leaf index out of range")
        if not (value >= 0 and np.isfinite(value)):
            raise ValueError("leaf values must be finite and non-negative")
        s, m = self._sum, self._min
        node = index + self.capacity
        s[node] = value
        m[node] = value if value > 0 else np.inf
        visits = 1
        node >>= 1
        while node:
            left = 2 * node
            s[node] = s[left] + s[left + 1]
            m[node] = min(m[left], m[left + 1])
            node >>= 1
            visits += 1
        self.node_visits += visits

    def find(self, values) -> np.ndarray:
        """Leaf indices whose cumulative-sum interval contains each value.

        A value ``v`` in ``(0, total]`` maps to the leaf ``i`` with
        ``cumsum[i-1] < v <= cumsum[i]``, so zero leaves are never returned
        while any positive mass exists.
        """
        v = np.array(values, dtype=float, ndmin=1)
        idx = np.ones(v.shape, dtype=np.int64)
        for _ in range(self.depth):
            left = 2 * idx
            left_sum = self._sum[left]
            right_sum = self._sum[left + 1]
            go_right = ((v > left_sum) & (right_sum > 0)) | (left_sum <= 0)
            v = np.where(go_right, v - left_sum, v)
            idx = left + go_right
            self.node_visits += idx.size
        return idx - self.capacity

    def check(self, rtol: float = 1e-9) -> bool:
        """True when every internal node equals the sum of its children."""
        inner = np.arange(1, self.capacity)
        expect = self._sum[2 * inner] + self._sum[2 * inner + 1]
        scale = np.maximum(np.abs(expect), 1.0)
        return bool(np.all(np.abs(self._sum[inner] - expect) <= rtol * scale))
