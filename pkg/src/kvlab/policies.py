"""Eviction policies: score cached keys with a set of queries, keep top-B.

All scored policies run through one helper (`_scored_select`), so the
exact collapse identities hold by construction rather than by numeric
coincidence: a lookahead-union selection with zero lookahead steps IS a
window selection, and a pyramid schedule with floor = budget IS a flat
window selection.

Score modes:
    raw     - per key, sum over queries of q.k / sqrt(d_h); entries hidden
              by the causal mask contribute 0.
    softmax - each query contributes its softmaxed attention row over the
              keys it can see; masked keys get probability 0.

Positions drive the mask: key j is visible to query i iff
key_position[j] <= query_position[i]. Lookahead queries sit past the
prefill, so they see every prefill key.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor
from .kvcache import (
    KVCacheStore,
    QCache,
    QuerySet,
    Selection,
    append_step,
    apply_selection,
    union_windows,
)
from .model import decode_step, greedy_token

log = logging.getLogger(__name__)

POLICY_IDS = ("h2o", "snapkv", "pyramidkv", "streaming", "laq", "laq_pp", "full")
LOOKAHEAD_POLICY_IDS = ("streaming", "snapkv", "h2o", "pyramidkv", "full")
SCORE_MODES = ("raw", "softmax")


@dataclass
class PolicyConfig:
    budget: int = 32
    window_len: int = 8
    lookahead_steps: int = 8
    sink_count: int = 4
    pool_kernel: int = 7
    score_mode: str = "softmax"
    keep_window: bool = True
    pyramid_floor: int = 8
    lookahead_policy: str = "snapkv"
    lookahead_budget: int | None = None  # None = same as budget

    def validate(self) -> None:
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.window_len < 0 or self.lookahead_steps < 0 or self.sink_count < 0:
            raise ValueError("window_len, lookahead_steps, sink_count must be non-negative")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be odd and >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if self.keep_window and self.budget < self.window_len:
            raise ValueError(
                f"budget {self.budget} < window_len {self.window_len} with keep_window"
            )
        if self.pyramid_floor > self.budget:
            raise ValueError("pyramid_floor must not exceed budget")
        if self.lookahead_policy not in LOOKAHEAD_POLICY_IDS:
            raise ValueError(f"lookahead_policy must be one of {LOOKAHEAD_POLICY_IDS}")
        if self.lookahead_budget is not None and self.lookahead_budget < 1:
            raise ValueError("lookahead_budget must be >= 1")

    @property
    def effective_lookahead_budget(self) -> int:
        return self.budget if self.lookahead_budget is None else self.lookahead_budget


@dataclass
class ScoredSelection:
    """Selection paired with the per-head score vectors that produced it
    (post-pooling, pre-top-k)."""

    selection: Selection
    scores: list  # [layer][head] -> (T,) float32


def attn_score_sum(queries, keys, mode="softmax", query_positions=None, key_positions=None):
    """Total attention mass each key receives from the given queries.

    queries (Q, d_h), keys (T, d_h). Supplying both position arrays turns
    on causal masking. Returns a (T,) float32 score vector.
    """
    q = np.asarray(queries, dtype=np.float32)
    k = np.asarray(keys, dtype=np.float32)
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError("queries and keys must be 2-D")
    if q.shape[0] == 0:
        raise ValueError("empty query set")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"head_dim mismatch: {q.shape[1]} vs {k.shape[1]}")
    if mode not in SCORE_MODES:
        raise ValueError(f"mode must be one of {SCORE_MODES}")

    # accumulate in float64, emit float32 at the contract boundary
    logits = (q.astype(np.float64) @ k.astype(np.float64).T) / np.sqrt(q.shape[1])
    if (query_positions is None) != (key_positions is None):
        raise ValueError("supply both position arrays or neither")
    visible = None
    if query_positions is not None:
        qp = np.asarray(query_positions, dtype=np.int64)
        kp = np.asarray(key_positions, dtype=np.int64)
        visible = kp[None, :] <= qp[:, None]

    if mode == "raw":
        if visible is not None:
            logits = np.where(visible, logits, 0.0)
        return logits.sum(axis=0).astype(np.float32)

    if visible is not None:
        logits = np.where(visible, logits, -np.inf)
    rowmax = logits.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    expd = np.exp(logits - rowmax)  # exp(-inf) = 0 for masked entries
    denom = expd.sum(axis=1, keepdims=True)
    rows = np.divide(expd, denom, where=denom > 0, out=np.zeros_like(expd))
    return rows.sum(axis=0).astype(np.float32)


def _budgeted_indices(pooled: np.ndarray, budget: int, keep_last: int) -> np.ndarray:
    """Top-budget indices of `pooled`, force-keeping the trailing window.

    keep_last is clamped to the effective budget, so schedules that hand a
    layer less than one full window still fill it with the freshest slots.
    """
    t = pooled.shape[0]
    b_eff = min(budget, t)
    w_eff = min(keep_last, b_eff)
    free = t - w_eff
    picked = tensor.top_k_indices(pooled[:free], b_eff - w_eff)
    forced = np.arange(free, t, dtype=np.int64)
    return np.concatenate([picked, forced])


def _scored_select(queries: QuerySet, cache, cfg: PolicyConfig, per_layer_budgets=None,
                   pool_kernel=None) -> ScoredSelection:
    """Shared scoring path: mask, sum, pool, force-keep window, top-k."""
    kernel = cfg.pool_kernel if pool_kernel is None else pool_kernel
    keep = cfg.window_len if cfg.keep_window else 0
    indices, scores = [], []
    for l in range(cache.layers):
        budget = per_layer_budgets[l] if per_layer_budgets is not None else cfg.budget
        row_idx, row_scores = [], []
        for h in range(cache.heads):
            s = attn_score_sum(
                queries.queries[l][h],
                cache.keys_at(l, h),
                mode=cfg.score_mode,
                query_positions=queries.positions,
                key_positions=cache.positions_at(l, h),
            )
            pooled = tensor.pool_avg_1d(s, kernel)
            row_idx.append(_budgeted_indices(pooled, budget, keep))
            row_scores.append(pooled)
        indices.append(row_idx)
        scores.append(row_scores)
    sel = Selection(indices, budget=cfg.budget, per_layer_budgets=per_layer_budgets)
    sel.validate(cache)
    return ScoredSelection(sel, scores)


def last_window_queries(prefill_queries: QuerySet, window_len: int) -> QuerySet:
    """The last `window_len` prefill query rows per layer/head."""
    n = len(prefill_queries)
    if window_len > n:
        raise ValueError(f"window_len {window_len} exceeds recorded queries {n}")
    w = min(window_len, n)
    sliced = [
        [prefill_queries.queries[l][h][n - w :] for h in range(prefill_queries.heads)]
        for l in range(prefill_queries.layers)
    ]
    return QuerySet(sliced, prefill_queries.positions[n - w :])


def select_h2o(all_queries: QuerySet, cache, cfg: PolicyConfig) -> ScoredSelection:
    """Cumulative attention over every prefill query, causally masked.
    No pooling; the trailing window is force-kept when configured."""
    cfg.validate()
    return _scored_select(all_queries, cache, cfg, pool_kernel=1)


def select_snapkv(window_queries: QuerySet, cache, cfg: PolicyConfig) -> ScoredSelection:
    """Observation-window scoring with average pooling."""
    cfg.validate()
    return _scored_select(window_queries, cache, cfg)


def select_streaming(t: int, cfg: PolicyConfig, layers: int = 1, heads: int = 1) -> Selection:
    """First sink_count positions plus the most recent remainder; no scores."""
    cfg.validate()
    b = min(cfg.budget, t)
    if b == t:
        idx = np.arange(t, dtype=np.int64)
    else:
        if cfg.sink_count + 1 > cfg.budget:
            raise ValueError(
                f"budget {cfg.budget} cannot hold {cfg.sink_count} sinks plus a recent window"
            )
        sinks = np.arange(min(cfg.sink_count, b), dtype=np.int64)
        recent = np.arange(t - (b - sinks.shape[0]), t, dtype=np.int64)
        idx = np.concatenate([sinks, recent])
    grid = [[idx.copy() for _ in range(heads)] for _ in range(layers)]
    return Selection(grid, budget=cfg.budget)


def pyramid_budgets(layers: int, budget: int, floor: int) -> list:
    """Linear shallow-to-deep budget schedule summing exactly to layers*budget.

    Shallow layers (low index) get the most. Fractional parts are settled
    by largest remainder, ties toward the shallower layer.
    """
    if floor > budget:
        raise ValueError(f"floor {floor} exceeds budget {budget}")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if layers == 1:
        return [budget]
    raw = [
        floor + (2 * budget - 2 * floor) * (layers - 1 - l) / (layers - 1)
        for l in range(layers)
    ]
    base = [int(np.floor(r)) for r in raw]
    leftover = layers * budget - sum(base)
    order = sorted(range(layers), key=lambda l: (-(raw[l] - base[l]), l))
    for l in order[:leftover]:
        base[l] += 1
    return base


def select_pyramidkv(window_queries: QuerySet, cache, cfg: PolicyConfig) -> ScoredSelection:
    """SnapKV scoring under the per-layer pyramid budget schedule."""
    cfg.validate()
    t = cache.uniform_length()
    if cfg.budget >= t:
        # nothing to evict; the schedule only matters under scarcity
        budgets = [t] * cache.layers
    else:
        budgets = pyramid_budgets(cache.layers, cfg.budget, cfg.pyramid_floor)
    return _scored_select(window_queries, cache, cfg, per_layer_budgets=budgets)


def select_full(t: int, layers: int, heads: int) -> Selection:
    idx = [[np.arange(t, dtype=np.int64) for _ in range(heads)] for _ in range(layers)]
    return Selection(idx, budget=t)


def select_laq(qcache: QCache, cache, cfg: PolicyConfig, variant: str = "laq",
               window_queries: QuerySet | None = None) -> ScoredSelection:
    """Second-round eviction scored by lookahead queries.

    laq ranks with the lookahead queries alone; laq_pp merges the prefill
    observation window in front of them. With no lookahead queries, laq is
    an error while laq_pp falls back to the plain window selection.
    """
    cfg.validate()
    if variant not in ("laq", "laq_pp"):
        raise ValueError(f"variant must be laq or laq_pp, got {variant!r}")
    if variant == "laq":
        if len(qcache) == 0:
            raise ValueError("lookahead selection needs at least one lookahead query")
        return _scored_select(qcache, cache, cfg)
    if window_queries is None:
        raise ValueError("laq_pp needs the window queries")
    if len(qcache) == 0:
        log.warning("no lookahead queries; falling back to window-only selection")
        return select_snapkv(window_queries, cache, cfg)
    merged = union_windows(window_queries, qcache)
    return _scored_select(merged, cache, cfg)


def run_lookahead(model, full_cache: KVCacheStore, cfg: PolicyConfig, *,
                  last_hidden, prefill_queries: QuerySet | None = None):
    """Cheap lookahead decode: evict to a scratch view, generate S pseudo
    tokens, keep only their queries.

    Returns (QCache, pseudo_tokens). The full cache is left untouched; the
    pseudo tokens' keys/values live in the discarded view scratch.
    """
    cfg.validate()
    t = full_cache.uniform_length()
    inner = replace(
        cfg,
        budget=cfg.effective_lookahead_budget,
        lookahead_steps=0,
        pyramid_floor=min(cfg.pyramid_floor, cfg.effective_lookahead_budget),
    )
    pol = cfg.lookahead_policy
    if pol == "full":
        sel = select_full(t, full_cache.layers, full_cache.heads)
    elif pol == "streaming":
        sel = select_streaming(t, inner, full_cache.layers, full_cache.heads)
    else:
        if prefill_queries is None:
            raise ValueError(f"lookahead policy {pol!r} needs the prefill queries")
        if pol == "h2o":
            sel = select_h2o(prefill_queries, full_cache, inner).selection
        elif pol == "snapkv":
            window = last_window_queries(prefill_queries, inner.window_len)
            sel = select_snapkv(window, full_cache, inner).selection
        else:
            window = last_window_queries(prefill_queries, inner.window_len)
            sel = select_pyramidkv(window, full_cache, inner).selection

    view = apply_selection(full_cache, sel)
    token = greedy_token(model, last_hidden)
    pseudo_tokens = []
    step_queries = []
    for i in range(cfg.lookahead_steps):
        out = decode_step(model, view, token, t + i)
        pseudo_tokens.append(token)
        step_queries.append(out.queries)
        append_step(view, out)
        token = out.next_token

    s = len(step_queries)
    if s:
        stacked = [
            [
                np.stack([step_queries[i][l][h] for i in range(s)])
                for h in range(full_cache.heads)
            ]
            for l in range(full_cache.layers)
        ]
    else:
        stacked = [
            [np.empty((0, full_cache.head_dim), dtype=np.float32) for _ in range(full_cache.heads)]
            for _ in range(full_cache.layers)
        ]
    qcache = QCache(stacked, np.arange(t, t + s, dtype=np.int64), prefill_len=t)
    qcache.validate()
    return qcache, pseudo_tokens
