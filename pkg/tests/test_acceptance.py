"""Acceptance gate: one test per contract criterion, stated tolerances.

Each test prints a single `[criterion NN] PASS` line on success (visible
with -s or -rA); pytest -v itself gives the one-line pass/fail verdict.
Criteria with wall-clock bounds assert them.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from kvlab.binio import (
    BadMagicError,
    ChecksumError,
    ContainerHeader,
    TraceShapeError,
    TraceTruncationError,
    write_container,
)
from kvlab.harness import (
    ExperimentConfig,
    TraceBundle,
    TraceParams,
    gen_synthetic_trace,
    read_trace,
    run_toy_pipeline,
    write_trace,
)
from kvlab.kvcache import QCache
from kvlab.metrics import gold_selection, recall, window_recall_sweep
from kvlab.model import ModelConfig, init_model, prefill
from kvlab.policies import (
    POLICY_IDS,
    PolicyConfig,
    last_window_queries,
    pyramid_budgets,
    select_full,
    select_h2o,
    select_laq,
    select_pyramidkv,
    select_snapkv,
    select_streaming,
)
from kvlab.tensor import top_k_indices

import oracles

PURE = PolicyConfig(score_mode="raw", pool_kernel=1, keep_window=False, pyramid_floor=0)

SUITE_PARAMS = [
    TraceParams(seed=0),
    TraceParams(seed=1, layers=3, heads=1, t_input=64, t_response=8, needle_count=4, head_dim=8),
    TraceParams(seed=2, heads=3, t_input=96, t_response=12, needle_count=6, head_dim=12),
    TraceParams(seed=3, layers=1, t_input=48, t_response=8, needle_count=8, divergence=6.0),
]


@pytest.fixture(scope="module")
def suite():
    return [gen_synthetic_trace(p) for p in SUITE_PARAMS]


def report(n, text):
    print(f"[criterion {n:02d}] PASS - {text}")


def bf_selection(queries, keys, budget):
    """Independent ranking path: einsum scores, lexsort tie-break."""
    s = np.einsum("qd,kd->k", queries.astype(np.float64), keys.astype(np.float64))
    s = (s / np.sqrt(keys.shape[1])).astype(np.float32)
    order = np.lexsort((np.arange(len(s)), -s.astype(np.float64)))
    return set(int(i) for i in order[: min(budget, len(s))])


def bf_window_recall(trace, l, h, start_abs, w, budget):
    """start_abs indexes the concatenated input+response query record."""
    record = np.concatenate([trace.input_queries[l, h], trace.response_queries[l, h]])
    window = record[start_abs : start_abs + w]
    # causal: window at absolute position p sees keys 0..p, and every
    # prefill key index is below any window position here by construction
    last_key = min(trace.t_input, start_abs + w)
    keys = trace.keys[l, h, :last_key]
    pred = bf_selection(window, keys, budget)
    gold = bf_selection(trace.response_queries[l, h], trace.keys[l, h], budget)
    return len(pred & gold) / len(gold)


def test_criterion_01_topk_matches_full_sort_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    for i in range(1000):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(0, n + 1))
        if i % 2:
            v = rng.integers(0, 4, size=n).astype(np.float32)  # dense ties
        else:
            v = rng.normal(size=n).astype(np.float32)
        got = top_k_indices(v, k).tolist()
        assert got == oracles.top_k_full_sort(v, k), f"instance {i}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    report(1, f"1000 top-k instances exact in {elapsed:.2f}s")


def test_criterion_02_gold_and_recall_match_naive_loops():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2002)
    from kvlab.kvcache import KVCacheStore, QuerySet, Selection

    for i in range(500):
        t = int(rng.integers(2, 40))
        d = int(rng.integers(2, 9))
        n = int(rng.integers(1, 7))
        b = int(rng.integers(1, t + 2))
        keys = rng.normal(size=(t, d)).astype(np.float32)
        values = rng.normal(size=(t, d)).astype(np.float32)
        queries = rng.normal(size=(n, d)).astype(np.float32)
        cache = KVCacheStore.from_uniform([[keys]], [[values]])
        qset = QuerySet([[queries]], np.arange(100, 100 + n, dtype=np.int64))
        gold = gold_selection(qset, cache, b, mode="raw")
        want = oracles.gold_indices(queries, keys, b)
        assert gold.indices[0][0].tolist() == want, f"instance {i}"
        pred = np.sort(rng.choice(t, size=min(b, t), replace=False)).astype(np.int64)
        rep = recall(Selection([[pred]], budget=b), gold)
        assert rep.per_head[0, 0] == oracles.recall_of(pred.tolist(), want), f"instance {i}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    report(2, f"500 gold/recall instances exact in {elapsed:.2f}s")


def test_criterion_03_golden_queries_as_qcache_reproduce_gold(suite):
    for trace, params in zip(suite, SUITE_PARAMS):
        cache = trace.cache()
        qc = trace.lookahead_qcache(trace.t_response)  # the full golden response
        for budget in (params.needle_count, 16, trace.t_input):
            budget = min(budget, trace.t_input)
            cfg = replace(PURE, budget=budget)
            pred = select_laq(qc, cache, cfg, "laq").selection
            gold = gold_selection(trace.response_query_set(), cache, budget, mode="raw")
            rep = recall(pred, gold)
            assert rep.mean == 1.0, (params.seed, budget)
            for l in range(trace.layers):
                for h in range(trace.heads):
                    assert pred.indices[l][h].tolist() == gold.indices[l][h].tolist()
    report(3, "Q=R selection equals gold on every head, recall exactly 1.0")


def test_criterion_04_degeneracy_collapses(suite):
    for trace in suite:
        cache = trace.cache()
        t = trace.t_input
        window = last_window_queries(trace.input_query_set(), 8)
        for budget in (max(8, trace.t_input // 8), 16):
            cfg = PolicyConfig(budget=budget)  # softmax, kernel 7, keep_window
            snap = select_snapkv(window, cache, cfg)
            collapsed = select_laq(trace.lookahead_qcache(0), cache, cfg, "laq_pp",
                                   window_queries=window)
            pyramid_flat = select_pyramidkv(window, cache, replace(cfg, pyramid_floor=budget))
            for l in range(trace.layers):
                for h in range(trace.heads):
                    want = snap.selection.indices[l][h].tolist()
                    assert collapsed.selection.indices[l][h].tolist() == want
                    assert pyramid_flat.selection.indices[l][h].tolist() == want

        # every policy hands back the whole cache once the budget covers it
        qc = trace.lookahead_qcache(min(4, trace.t_response))
        for budget in (t, t + 7):
            cfg = PolicyConfig(budget=budget)
            everything = list(range(t))
            sels = {
                "h2o": select_h2o(trace.input_query_set(), cache, cfg).selection,
                "snapkv": select_snapkv(window, cache, cfg).selection,
                "pyramidkv": select_pyramidkv(window, cache, replace(cfg, pyramid_floor=min(cfg.pyramid_floor, budget))).selection,
                "streaming": select_streaming(t, cfg, trace.layers, trace.heads),
                "laq": select_laq(qc, cache, cfg, "laq").selection,
                "laq_pp": select_laq(qc, cache, cfg, "laq_pp", window_queries=window).selection,
                "full": select_full(t, trace.layers, trace.heads),
            }
            assert set(sels) == set(POLICY_IDS)
            for name, sel in sels.items():
                for l in range(trace.layers):
                    for h in range(trace.heads):
                        assert sel.indices[l][h].tolist() == everything, name
    report(4, "S=0, m=B, and B>=T collapses all exact across the suite")


def test_criterion_05_generated_window_beats_input_windows():
    t0 = time.perf_counter()
    w, budget = 8, 8
    gaps = []
    for seed in range(20):
        trace = gen_synthetic_trace(TraceParams(seed=seed, t_input=64, t_response=16))
        curve = window_recall_sweep(trace, window_len=w, budget=budget, mode="raw")
        by_start = dict(zip(curve.starts, curve.mean_recalls))
        at_first_generated = by_start[0]
        input_only = [r for s, r in by_start.items() if s + w <= 0]

        # brute-force the two compared quantities before trusting the sweep
        bf_first = np.mean([
            bf_window_recall(trace, l, h, trace.t_input, w, budget)
            for l in range(trace.layers) for h in range(trace.heads)
        ])
        assert at_first_generated == bf_first
        best_in_start = int(np.argmax(input_only))
        bf_best = np.mean([
            bf_window_recall(trace, l, h, best_in_start, w, budget)
            for l in range(trace.layers) for h in range(trace.heads)
        ])
        assert max(input_only) == bf_best

        gaps.append(at_first_generated - max(input_only))
        assert gaps[-1] >= 0.3, f"seed {seed}: gap {gaps[-1]}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    report(5, f"20 seeds, min gap {min(gaps):.2f} >= 0.3 in {elapsed:.2f}s")


def test_criterion_06_recall_non_decreasing_in_lookahead_length():
    budget = 8
    for seed in range(8):
        trace = gen_synthetic_trace(TraceParams(seed=seed, t_input=64, t_response=16))
        cache = trace.cache()
        gold = gold_selection(trace.response_query_set(), cache, budget, mode="raw")
        curve = []
        for s in (1, 2, 4, 8):
            pred = select_laq(trace.lookahead_qcache(s), cache, replace(PURE, budget=budget), "laq").selection
            rep = recall(pred, gold)
            # brute-force the same quantity per seed before the trend claim
            bf = np.mean([
                len(bf_selection(trace.response_queries[l, h, :s], trace.keys[l, h], budget)
                    & bf_selection(trace.response_queries[l, h], trace.keys[l, h], budget))
                / budget
                for l in range(trace.layers) for h in range(trace.heads)
            ])
            assert rep.mean == bf, (seed, s)
            curve.append(rep.mean)
        assert all(b >= a for a, b in zip(curve, curve[1:])), (seed, curve)
    report(6, "LAQ recall non-decreasing over S in {1,2,4,8} on 8 seeds")


def test_criterion_07_pyramid_budget_accounting():
    rng = np.random.default_rng(7007)
    for i in range(200):
        layers = int(rng.integers(1, 33))
        budget = int(rng.integers(1, 257))
        floor = int(rng.integers(0, budget + 1))
        sched = pyramid_budgets(layers, budget, floor)
        assert sum(sched) == layers * budget, f"instance {i}"
        assert all(b >= floor for b in sched), f"instance {i}"
    report(7, "200 random schedules: sum = L*B exact, floor respected")


def test_criterion_08_end_to_end_toy_pipeline():
    config = ExperimentConfig(
        mode="toy-model",
        model=ModelConfig(vocab=256, layers=2, heads=2, head_dim=16),
        prompt_len=256,
        decode_steps=32,
        policy=PolicyConfig(budget=32, lookahead_steps=8),
        seed=0,
    )
    first = run_toy_pipeline(config, "laq_pp", budget=32)
    second = run_toy_pipeline(config, "laq_pp", budget=32)
    assert first.transcript == second.transcript
    assert len(first.transcript) == 32

    assert first.qcache.steps == 8
    for l in range(2):
        for h in range(2):
            assert first.qcache.queries[l][h].shape == (8, 16)

    # lookahead and re-evict must leave the prefill cache bit-identical
    fresh_cache, _, _ = prefill(
        init_model(config.model),
        np.random.default_rng(np.random.PCG64(config.seed + 1)).integers(
            0, 256, size=256
        ).astype(np.int64),
    )
    assert first.prefill_cache.uniform_length() == 256
    for l in range(2):
        for h in range(2):
            np.testing.assert_array_equal(first.prefill_cache.keys_at(l, h),
                                          fresh_cache.keys_at(l, h))
            np.testing.assert_array_equal(first.prefill_cache.values_at(l, h),
                                          fresh_cache.values_at(l, h))

    assert abs(sum(first.latency.fractions.values()) - 1.0) <= 1e-9
    frac = first.latency.lookahead_fraction
    assert isinstance(frac, float)
    report(8, f"toy pipeline bit-identical twice; lookahead fraction {frac:.3f} (reported, not asserted)")


def test_criterion_09_trace_format_round_trip_and_corruption(tmp_path):
    rng = np.random.default_rng(9009)
    for i in range(100):
        layers = int(rng.integers(1, 3))
        heads = int(rng.integers(1, 3))
        t_in = int(rng.integers(2, 24))
        t_resp = int(rng.integers(1, 8))
        d = int(rng.integers(1, 12))
        shape = (layers, heads, t_in, d)
        bundle = TraceBundle(
            layers=layers, heads=heads, head_dim=d, t_input=t_in, t_response=t_resp,
            vocab=1000, provenance=f"roundtrip-{i}",
            input_queries=rng.normal(size=shape).astype(np.float32),
            response_queries=rng.normal(size=(layers, heads, t_resp, d)).astype(np.float32),
            keys=rng.normal(size=shape).astype(np.float32),
            values=rng.normal(size=shape).astype(np.float32),
            input_tokens=rng.integers(0, 1000, size=t_in).astype(np.int64),
            response_tokens=rng.integers(0, 1000, size=t_resp).astype(np.int64),
        )
        path = tmp_path / f"r{i}.kvtr"
        write_trace(bundle, path)
        back = read_trace(path)
        for f in ("input_queries", "response_queries", "keys", "values"):
            np.testing.assert_array_equal(getattr(back, f), getattr(bundle, f))
        np.testing.assert_array_equal(back.input_tokens, bundle.input_tokens)
        np.testing.assert_array_equal(back.response_tokens, bundle.response_tokens)
        assert back.provenance == bundle.provenance

    base = tmp_path / "victim.kvtr"
    write_trace(gen_synthetic_trace(TraceParams(seed=1, t_input=32, t_response=8, needle_count=4)), base)
    buf = base.read_bytes()

    magic_p = tmp_path / "magic.kvtr"
    magic_p.write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(BadMagicError):
        read_trace(magic_p)

    trunc_p = tmp_path / "trunc.kvtr"
    trunc_p.write_bytes(buf[:-40])
    with pytest.raises(TraceTruncationError):
        read_trace(trunc_p)

    shape_p = tmp_path / "shape.kvtr"
    write_container(shape_p, ContainerHeader(1, 1, 4, 8, 2, 10, "incomplete"),
                    [("keys", np.zeros((1, 1, 8, 4), dtype=np.float32))])
    with pytest.raises(TraceShapeError):
        read_trace(shape_p)

    trio = (BadMagicError, TraceTruncationError, TraceShapeError)
    for a in trio:
        for b in trio:
            if a is not b:
                assert not issubclass(a, b)
    report(9, "100 round-trips bit-exact; magic/shape/truncation errors distinct")
