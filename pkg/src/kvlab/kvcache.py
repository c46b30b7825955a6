"""Key/value and lookahead-query stores plus budgeted index-selection views.

Eviction here is non-destructive: applying a Selection yields a view that
keeps only index lists, so the full prefill cache survives the lookahead
stage and can be re-evicted afterwards. Views carry a private scratch
extension for decode-time appends; dropping the view discards the scratch
and leaves the base cache untouched. A destructive compaction
(`CacheView.materialize`) exists for the final decode phase.

A module-level counter tracks per-element key/value copies made while
realizing views, so tests can assert that view *creation* copies nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import StepOutput

_element_copies = 0


def element_copies() -> int:
    """Elements of key/value data copied so far by view gather/materialize."""
    return _element_copies


def reset_element_copies() -> None:
    global _element_copies
    _element_copies = 0


def _count_copies(n: int) -> None:
    global _element_copies
    _element_copies += int(n)


class KVCacheStore:
    """Per-layer/per-head keys, values, and original token positions.

    `keys[l][h]` and `values[l][h]` are float32 arrays of shape (T_lh, d);
    `positions[l][h]` holds the strictly increasing absolute token indices
    of those rows. Heads may hold different index sets (and, across layers,
    different counts) after eviction.
    """

    def __init__(self, keys, values, positions):
        self.keys = keys
        self.values = values
        self.positions = positions
        self.layers = len(keys)
        self.heads = len(keys[0]) if self.layers else 0
        self.head_dim = keys[0][0].shape[1] if self.layers and self.heads else 0
        self._validate()

    def _validate(self) -> None:
        for l in range(self.layers):
            if len(self.keys[l]) != self.heads or len(self.values[l]) != self.heads:
                raise ValueError("ragged head counts across layers")
            for h in range(self.heads):
                k, v, p = self.keys[l][h], self.values[l][h], self.positions[l][h]
                if k.shape != v.shape or k.shape[0] != p.shape[0]:
                    raise ValueError(f"key/value/position length mismatch at layer {l} head {h}")
                if k.shape[1] != self.head_dim:
                    raise ValueError("inconsistent head_dim")
                if p.shape[0] > 1 and not np.all(np.diff(p) > 0):
                    raise ValueError(f"positions not strictly increasing at layer {l} head {h}")

    @classmethod
    def empty(cls, layers: int, heads: int, head_dim: int) -> "KVCacheStore":
        mk = lambda: [[np.empty((0, head_dim), dtype=np.float32) for _ in range(heads)] for _ in range(layers)]
        pos = [[np.empty(0, dtype=np.int64) for _ in range(heads)] for _ in range(layers)]
        return cls(mk(), mk(), pos)

    @classmethod
    def from_uniform(cls, keys, values) -> "KVCacheStore":
        """Build a store from per-layer/head (T, d) arrays at positions 0..T-1."""
        positions = [
            [np.arange(keys[l][h].shape[0], dtype=np.int64) for h in range(len(keys[l]))]
            for l in range(len(keys))
        ]
        return cls(keys, values, positions)

    def length(self, l: int, h: int) -> int:
        return self.keys[l][h].shape[0]

    def keys_at(self, l: int, h: int) -> np.ndarray:
        return self.keys[l][h]

    def values_at(self, l: int, h: int) -> np.ndarray:
        return self.values[l][h]

    def positions_at(self, l: int, h: int) -> np.ndarray:
        return self.positions[l][h]

    def uniform_length(self) -> int:
        """Common entry count across all heads; raises if heads disagree."""
        lengths = {self.length(l, h) for l in range(self.layers) for h in range(self.heads)}
        if len(lengths) != 1:
            raise ValueError(f"cache is not uniform across heads: lengths {sorted(lengths)}")
        return lengths.pop()

    def append(self, step: "StepOutput") -> None:
        for l in range(self.layers):
            for h in range(self.heads):
                p = self.positions[l][h]
                if p.shape[0] and step.position <= p[-1]:
                    raise ValueError(f"non-monotone append: position {step.position} after {p[-1]}")
        for l in range(self.layers):
            for h in range(self.heads):
                self.keys[l][h] = np.concatenate([self.keys[l][h], step.new_keys[l][h][None, :]])
                self.values[l][h] = np.concatenate([self.values[l][h], step.new_values[l][h][None, :]])
                self.positions[l][h] = np.concatenate(
                    [self.positions[l][h], np.array([step.position], dtype=np.int64)]
                )

    def copy(self) -> "KVCacheStore":
        """Deep copy, used to snapshot prefill state for bit-exact checks."""
        cp = lambda grid: [[a.copy() for a in row] for row in grid]
        return KVCacheStore(cp(self.keys), cp(self.values), cp(self.positions))


@dataclass
class Selection:
    """Per-layer/per-head ascending retained-index lists under a budget."""

    indices: list  # [layer][head] -> int64 array, ascending, unique
    budget: int
    per_layer_budgets: list | None = None

    @property
    def layers(self) -> int:
        return len(self.indices)

    @property
    def heads(self) -> int:
        return len(self.indices[0]) if self.indices else 0

    def layer_budget(self, l: int) -> int:
        return self.per_layer_budgets[l] if self.per_layer_budgets is not None else self.budget

    def validate(self, cache) -> None:
        if self.layers != cache.layers or self.heads != cache.heads:
            raise ValueError("selection geometry does not match cache")
        for l in range(self.layers):
            for h in range(self.heads):
                idx = np.asarray(self.indices[l][h], dtype=np.int64)
                t = cache.length(l, h)
                if idx.shape[0] != min(self.layer_budget(l), t):
                    raise ValueError(
                        f"selection size {idx.shape[0]} != min(budget {self.layer_budget(l)}, T {t})"
                    )
                if idx.shape[0]:
                    if idx.min() < 0 or idx.max() >= t:
                        raise ValueError("selection index out of range")
                    if np.any(np.diff(idx) <= 0):
                        raise ValueError("selection indices must be unique and ascending")


class CacheView:
    """Zero-rewrite view of a base cache: index lists plus a scratch tail.

    Creation copies no key/value elements. Gathers happen on access and
    are charged to the module copy counter. Appends land in the scratch
    extension; the base store is never written.
    """

    def __init__(self, base: KVCacheStore, indices):
        self.base = base
        self.indices = indices
        self.layers = base.layers
        self.heads = base.heads
        self.head_dim = base.head_dim
        self._scratch_k = [[[] for _ in range(self.heads)] for _ in range(self.layers)]
        self._scratch_v = [[[] for _ in range(self.heads)] for _ in range(self.layers)]
        self._scratch_pos = [[[] for _ in range(self.heads)] for _ in range(self.layers)]

    def length(self, l: int, h: int) -> int:
        return self.indices[l][h].shape[0] + len(self._scratch_pos[l][h])

    def scratch_length(self, l: int, h: int) -> int:
        return len(self._scratch_pos[l][h])

    def _gather(self, grid, scratch, l: int, h: int) -> np.ndarray:
        rows = grid[l][h][self.indices[l][h]]
        _count_copies(rows.size)
        if scratch[l][h]:
            tail = np.stack(scratch[l][h])
            _count_copies(tail.size)
            rows = np.concatenate([rows, tail])
        return rows

    def keys_at(self, l: int, h: int) -> np.ndarray:
        return self._gather(self.base.keys, self._scratch_k, l, h)

    def values_at(self, l: int, h: int) -> np.ndarray:
        return self._gather(self.base.values, self._scratch_v, l, h)

    def positions_at(self, l: int, h: int) -> np.ndarray:
        pos = self.base.positions[l][h][self.indices[l][h]]
        if self._scratch_pos[l][h]:
            pos = np.concatenate([pos, np.array(self._scratch_pos[l][h], dtype=np.int64)])
        return pos

    def uniform_length(self) -> int:
        lengths = {self.length(l, h) for l in range(self.layers) for h in range(self.heads)}
        if len(lengths) != 1:
            raise ValueError(f"view is not uniform across heads: lengths {sorted(lengths)}")
        return lengths.pop()

    def append(self, step: "StepOutput") -> None:
        for l in range(self.layers):
            for h in range(self.heads):
                pos = self.positions_at(l, h)
                if pos.shape[0] and step.position <= pos[-1]:
                    raise ValueError(f"non-monotone append: position {step.position} after {pos[-1]}")
        for l in range(self.layers):
            for h in range(self.heads):
                self._scratch_k[l][h].append(step.new_keys[l][h])
                self._scratch_v[l][h].append(step.new_values[l][h])
                self._scratch_pos[l][h].append(int(step.position))

    def materialize(self) -> KVCacheStore:
        """Compact the view into a standalone store (destructive-mode decode)."""
        keys = [[self.keys_at(l, h) for h in range(self.heads)] for l in range(self.layers)]
        values = [[self.values_at(l, h) for h in range(self.heads)] for l in range(self.layers)]
        positions = [[self.positions_at(l, h) for h in range(self.heads)] for l in range(self.layers)]
        return KVCacheStore(keys, values, positions)


def apply_selection(cache, sel: Selection):
    """Realize a Selection as a CacheView; the underlying cache is untouched.

    Selecting from an existing view composes the index maps, so nested
    selections equal a single selection by the composed map.
    """
    sel.validate(cache)
    if isinstance(cache, KVCacheStore):
        idx = [
            [np.asarray(sel.indices[l][h], dtype=np.int64).copy() for h in range(cache.heads)]
            for l in range(cache.layers)
        ]
        return CacheView(cache, idx)
    if isinstance(cache, CacheView):
        base_counts = [[cache.indices[l][h].shape[0] for h in range(cache.heads)] for l in range(cache.layers)]
        composed = [
            [None for _ in range(cache.heads)] for _ in range(cache.layers)
        ]
        view = CacheView(cache.base, composed)
        for l in range(cache.layers):
            for h in range(cache.heads):
                idx = np.asarray(sel.indices[l][h], dtype=np.int64)
                n_base = base_counts[l][h]
                composed[l][h] = cache.indices[l][h][idx[idx < n_base]]
                for i in idx[idx >= n_base]:
                    j = int(i) - n_base
                    view._scratch_k[l][h].append(cache._scratch_k[l][h][j])
                    view._scratch_v[l][h].append(cache._scratch_v[l][h][j])
                    view._scratch_pos[l][h].append(cache._scratch_pos[l][h][j])
        return view
    raise TypeError(f"unsupported cache type {type(cache)!r}")


def append_step(cache, step: "StepOutput") -> None:
    """Append one decode step's key/value to every head of `cache`."""
    cache.append(step)


@dataclass
class QuerySet:
    """A stack of query rows per layer/head with their absolute positions."""

    queries: list  # [layer][head] -> (n, d) float32 array
    positions: np.ndarray  # (n,) int64, shared across heads

    @property
    def layers(self) -> int:
        return len(self.queries)

    @property
    def heads(self) -> int:
        return len(self.queries[0]) if self.queries else 0

    @property
    def head_dim(self) -> int:
        return self.queries[0][0].shape[1]

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def validate(self) -> None:
        n = len(self)
        if n > 1 and not np.all(np.diff(self.positions) > 0):
            raise ValueError("query positions must be strictly increasing")
        for row in self.queries:
            if len(row) != self.heads:
                raise ValueError("ragged head counts in query set")
            for q in row:
                if q.shape != (n, self.head_dim):
                    raise ValueError(f"query block shape {q.shape} != ({n}, {self.head_dim})")


@dataclass
class QCache(QuerySet):
    """Retained lookahead query states; positions sit past the prefill."""

    prefill_len: int = 0

    def validate(self) -> None:
        super().validate()
        if len(self) and self.positions[0] <= self.prefill_len - 1:
            raise ValueError("lookahead positions must follow the prefill")

    @property
    def steps(self) -> int:
        return len(self)


@dataclass
class WindowSpec:
    """A contiguous query window inside a recorded query sequence."""

    start: int
    length: int
    source: str = "input"  # "input" | "response"

    def validate(self, record_len: int) -> None:
        if self.source not in ("input", "response"):
            raise ValueError(f"unknown window source {self.source!r}")
        if self.length < 0 or self.start < 0 or self.start + self.length > record_len:
            raise ValueError(
                f"window [{self.start}, {self.start + self.length}) outside record of length {record_len}"
            )


def union_windows(window: QuerySet, qcache: QCache) -> QuerySet:
    """Merge window queries with lookahead queries, window rows first.

    Position disjointness (window inside the prefill, lookahead after it)
    rules out duplicate rows. Either side may be empty.
    """
    if len(qcache) == 0:
        return window
    if len(window) == 0:
        return QuerySet(qcache.queries, qcache.positions)
    if (window.layers, window.heads, window.head_dim) != (qcache.layers, qcache.heads, qcache.head_dim):
        raise ValueError("window and lookahead query geometry differ")
    if np.intersect1d(window.positions, qcache.positions).size:
        raise ValueError("window and lookahead positions overlap")
    merged = [
        [
            np.concatenate([window.queries[l][h], qcache.queries[l][h]])
            for h in range(window.heads)
        ]
        for l in range(window.layers)
    ]
    positions = np.concatenate([window.positions, qcache.positions])
    return QuerySet(merged, positions)
