"""Recall instrumentation and latency accounting.

The central question this module answers: of the cache entries that the
full generated response actually concentrated attention on (the golden
set), what fraction does a given budgeted selection recover? The sweep
variant slides a fixed-length query window across the recorded input and
response queries and plots that recovery rate against the window's start,
with start 0 anchored at the first generated token.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .kvcache import QuerySet, Selection
from .policies import attn_score_sum

STAGES = ("prefill", "lookahead", "re_evict", "decode")


@dataclass
class RecallReport:
    per_head: np.ndarray  # (layers, heads) float64 in [0, 1]
    mean: float
    budget: int
    window_len: int | None = None
    mode: str | None = None
    degenerate: bool = False  # empty gold sets were defined as recall 1.0

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "per_head": self.per_head.tolist(),
            "budget": self.budget,
            "window_len": self.window_len,
            "mode": self.mode,
            "degenerate": self.degenerate,
        }


@dataclass
class SweepCurve:
    starts: list  # window start offsets relative to the first generated token
    mean_recalls: list
    per_layer: np.ndarray  # (n_points, layers)
    window_len: int
    budget: int
    mode: str

    def csv_rows(self):
        header = ["start", "mean_recall"] + [f"layer{l}_recall" for l in range(self.per_layer.shape[1])]
        yield header
        for i, start in enumerate(self.starts):
            yield [start, self.mean_recalls[i]] + [float(x) for x in self.per_layer[i]]

    def to_json(self) -> dict:
        return {
            "window_len": self.window_len,
            "budget": self.budget,
            "mode": self.mode,
            "points": [
                {"start": s, "mean_recall": r, "per_layer": [float(x) for x in self.per_layer[i]]}
                for i, (s, r) in enumerate(zip(self.starts, self.mean_recalls))
            ],
        }


@dataclass
class LatencyReport:
    durations: dict  # stage -> seconds
    fractions: dict  # stage -> share of total
    total: float

    @property
    def lookahead_fraction(self) -> float:
        return self.fractions["lookahead"]

    def to_json(self) -> dict:
        return {
            "durations": dict(self.durations),
            "fractions": dict(self.fractions),
            "total": self.total,
            "lookahead_fraction": self.lookahead_fraction,
        }


class StageClock:
    """Collects (stage, timestamp) marks for latency_breakdown."""

    def __init__(self, now=time.perf_counter):
        self._now = now
        self.events = []

    def mark(self, stage: str) -> None:
        self.events.append((stage, self._now()))


def gold_selection(response_queries: QuerySet, cache, budget: int, mode: str = "raw") -> Selection:
    """Top-budget keys ranked by total attention from every recorded
    response query. No pooling, no forced window: the pure ranking."""
    if len(response_queries) == 0:
        raise ValueError("gold selection needs at least one response query")
    indices = []
    for l in range(cache.layers):
        row = []
        for h in range(cache.heads):
            scores = attn_score_sum(response_queries.queries[l][h], cache.keys_at(l, h), mode=mode)
            row.append(tensor.top_k_indices(scores, budget))
        indices.append(row)
    sel = Selection(indices, budget=budget)
    sel.validate(cache)
    return sel


def recall(pred: Selection, gold: Selection, window_len=None, mode=None) -> RecallReport:
    """Per-head |pred ∩ gold| / |gold|, plus the uniform layer-head mean."""
    if (pred.layers, pred.heads) != (gold.layers, gold.heads):
        raise ValueError("selection geometries differ")
    per_head = np.zeros((gold.layers, gold.heads), dtype=np.float64)
    degenerate = False
    for l in range(gold.layers):
        for h in range(gold.heads):
            g = set(gold.indices[l][h].tolist())
            if not g:
                per_head[l, h] = 1.0
                degenerate = True
                continue
            p = set(pred.indices[l][h].tolist())
            per_head[l, h] = len(p & g) / len(g)
    return RecallReport(
        per_head=per_head,
        mean=float(per_head.mean()),
        budget=gold.budget,
        window_len=window_len,
        mode=mode,
        degenerate=degenerate,
    )


def window_recall_sweep(trace, window_len: int, budget: int, mode: str = "raw") -> SweepCurve:
    """Slide a query window across the recorded input+response queries and
    measure how well each window's selection recovers the golden one.

    Start offsets are relative to the first generated token: offset 0
    means the window begins exactly where generation begins; negative
    offsets reach back into the input.
    """
    t_in, t_resp = trace.t_input, trace.t_response
    n = t_in + t_resp
    if t_resp < 1:
        raise ValueError("trace has no response queries")
    if window_len < 1 or window_len > n:
        raise ValueError(f"window_len {window_len} outside [1, {n}]")

    cache = trace.cache()
    gold = gold_selection(trace.response_query_set(), cache, budget, mode=mode)

    record = np.concatenate([trace.input_queries, trace.response_queries], axis=2)
    positions = np.arange(n, dtype=np.int64)
    key_positions = [
        [cache.positions_at(l, h) for h in range(cache.heads)] for l in range(cache.layers)
    ]

    starts, means = [], []
    layer_rows = []
    for start in range(0, n - window_len + 1):
        indices = []
        for l in range(cache.layers):
            row = []
            for h in range(cache.heads):
                w = record[l, h, start : start + window_len]
                scores = attn_score_sum(
                    w,
                    cache.keys_at(l, h),
                    mode=mode,
                    query_positions=positions[start : start + window_len],
                    key_positions=key_positions[l][h],
                )
                row.append(tensor.top_k_indices(scores, budget))
            indices.append(row)
        pred = Selection(indices, budget=budget)
        rep = recall(pred, gold, window_len=window_len, mode=mode)
        starts.append(start - t_in)
        means.append(rep.mean)
        layer_rows.append(rep.per_head.mean(axis=1))

    return SweepCurve(
        starts=starts,
        mean_recalls=means,
        per_layer=np.stack(layer_rows),
        window_len=window_len,
        budget=budget,
        mode=mode,
    )


def latency_breakdown(events) -> LatencyReport:
    """Durations and total-shares from ordered (stage, timestamp) marks.

    Expects one mark per stage in pipeline order plus a closing "end"
    mark; each stage's duration runs to the next mark.
    """
    names = [name for name, _ in events]
    if names != list(STAGES) + ["end"]:
        raise ValueError(f"expected marks {list(STAGES) + ['end']}, got {names}")
    times = [t for _, t in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("timestamps must be monotone")
    durations = {STAGES[i]: times[i + 1] - times[i] for i in range(len(STAGES))}
    total = times[-1] - times[0]
    if total <= 0:
        raise ValueError("zero total duration")
    fractions = {k: v / total for k, v in durations.items()}
    return LatencyReport(durations=durations, fractions=fractions, total=total)
