"""Experiment orchestration: policy x budget x trace/model sweeps.

Two modes. trace-replay scores recorded queries against recorded keys and
reports recall against the golden selection; toy-model runs the whole
pipeline (prefill, lookahead, re-evict, decode) on the in-repo
transformer, reporting recall, transcripts, and stage latency. Every cell
is isolated: one failure is recorded with its reason and the sweep
continues.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..kvcache import KVCacheStore, QCache, QuerySet, append_step, apply_selection
from ..metrics import RecallReport, StageClock, gold_selection, latency_breakdown, recall
from ..model import ModelConfig, decode_step, greedy_token, init_model, prefill
from ..policies import (
    POLICY_IDS,
    PolicyConfig,
    last_window_queries,
    run_lookahead,
    select_full,
    select_h2o,
    select_laq,
    select_pyramidkv,
    select_snapkv,
    select_streaming,
)
from .traces import TraceBundle, read_trace

SCHEMA_VERSION = 1

DEFAULT_POLICIES = ("h2o", "snapkv", "pyramidkv", "streaming", "laq", "laq_pp")
DEFAULT_BUDGETS = (8, 16, 32, 64)


@dataclass
class ExperimentConfig:
    mode: str = "trace-replay"  # or "toy-model"
    policies: tuple = DEFAULT_POLICIES
    budgets: tuple = DEFAULT_BUDGETS
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    seed: int = 0
    trace_paths: tuple = ()
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab=256, layers=2, heads=2, head_dim=16))
    prompt_len: int = 256
    decode_steps: int = 32
    out_dir: str | None = None

    def validate(self) -> None:
        if self.mode not in ("trace-replay", "toy-model"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.budgets or any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        unknown = [p for p in self.policies if p not in POLICY_IDS]
        if unknown:
            raise ValueError(f"unknown policies {unknown}; valid ids: {POLICY_IDS}")
        if self.mode == "trace-replay":
            if not self.trace_paths:
                raise ValueError("trace-replay mode needs at least one trace path")
            for p in self.trace_paths:
                if not Path(p).exists():
                    raise ValueError(f"trace file does not exist: {p}")
        if self.prompt_len < 1 or self.decode_steps < 1:
            raise ValueError("prompt_len and decode_steps must be >= 1")

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        kw = dict(data)
        if "policy" in kw and isinstance(kw["policy"], dict):
            kw["policy"] = PolicyConfig(**kw["policy"])
        if "model" in kw and isinstance(kw["model"], dict):
            kw["model"] = ModelConfig(**kw["model"])
        for key in ("policies", "budgets", "trace_paths"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def echo(self) -> dict:
        out = dataclasses.asdict(self)
        out["policies"] = list(self.policies)
        out["budgets"] = list(self.budgets)
        out["trace_paths"] = [str(p) for p in self.trace_paths]
        return out


@dataclass
class ResultRecord:
    config: dict
    cells: list
    schema_version: int = SCHEMA_VERSION

    @property
    def all_ok(self) -> bool:
        return all(c.get("status") == "ok" for c in self.cells)

    def to_json(self, strip_timing: bool = False) -> dict:
        cells = self.cells
        if strip_timing:
            cells = []
            for c in self.cells:
                c = {k: v for k, v in c.items() if k not in ("latency", "timing")}
                cells.append(c)
        return {"schema_version": self.schema_version, "config": self.config, "cells": cells}

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    CSV_FIELDS = ("policy", "budget", "trace", "steps", "quality", "status", "mean_recall", "reason")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.CSV_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for c in self.cells:
                row = dict(c)
                rec = c.get("recall")
                row["mean_recall"] = rec["mean"] if rec else ""
                writer.writerow(row)


def _trace_selection(policy: str, bundle: TraceBundle, cache, cfg: PolicyConfig,
                     qcache: QCache | None = None):
    input_qs = bundle.input_query_set()
    if policy == "h2o":
        return select_h2o(input_qs, cache, cfg).selection
    if policy == "snapkv":
        return select_snapkv(last_window_queries(input_qs, cfg.window_len), cache, cfg).selection
    if policy == "pyramidkv":
        return select_pyramidkv(last_window_queries(input_qs, cfg.window_len), cache, cfg).selection
    if policy == "streaming":
        return select_streaming(bundle.t_input, cfg, bundle.layers, bundle.heads)
    if policy == "full":
        return select_full(bundle.t_input, bundle.layers, bundle.heads)
    q = qcache if qcache is not None else bundle.lookahead_qcache(cfg.lookahead_steps)
    if policy == "laq":
        return select_laq(q, cache, cfg, "laq").selection
    if policy == "laq_pp":
        window = last_window_queries(input_qs, cfg.window_len)
        return select_laq(q, cache, cfg, "laq_pp", window_queries=window).selection
    raise ValueError(f"unknown policy {policy!r}")


def _replay_cell(bundle: TraceBundle, trace_label: str, policy: str, budget: int,
                 base_cfg: PolicyConfig, qcache=None, extra=None) -> dict:
    cell = {"policy": policy, "budget": budget, "trace": trace_label}
    if extra:
        cell.update(extra)
    t0 = time.perf_counter()
    try:
        cfg = replace(base_cfg, budget=budget,
                      pyramid_floor=min(base_cfg.pyramid_floor, budget))
        cache = bundle.cache()
        gold = gold_selection(bundle.response_query_set(), cache, budget, mode=cfg.score_mode)
        pred = _trace_selection(policy, bundle, cache, cfg, qcache=qcache)
        rep = recall(pred, gold, window_len=cfg.window_len, mode=cfg.score_mode)
        cell.update(status="ok", recall=rep.to_json())
    except Exception as err:  # cell isolation: record and continue
        cell.update(status="failed", reason=f"{type(err).__name__}: {err}")
    cell["timing"] = {"seconds": time.perf_counter() - t0}
    return cell


@dataclass
class ToyRunResult:
    transcript: list
    recall: RecallReport
    latency: object
    qcache: QCache | None
    prefill_cache: KVCacheStore
    response_queries: QuerySet
    pseudo_tokens: list


def run_toy_pipeline(config: ExperimentConfig, policy: str, budget: int) -> ToyRunResult:
    """One end-to-end toy cell: prefill, golden run, optional lookahead,
    re-evict, budgeted decode."""
    cfg = replace(config.policy, budget=budget,
                  pyramid_floor=min(config.policy.pyramid_floor, budget))
    cfg.validate()
    model = init_model(replace(config.model, seed=config.seed))
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    prompt = rng.integers(0, model.config.vocab, size=config.prompt_len).astype(np.int64)

    clock = StageClock()
    clock.mark("prefill")
    cache, last_hidden, prefill_queries = prefill(model, prompt)
    t = cache.uniform_length()

    # golden run: unrestricted decode, queries kept for the gold ranking
    golden_cache = cache.copy()
    token = greedy_token(model, last_hidden)
    golden_queries = []
    for i in range(config.decode_steps):
        out = decode_step(model, golden_cache, token, t + i)
        golden_queries.append(out.queries)
        append_step(golden_cache, out)
        token = out.next_token
    response_qs = QuerySet(
        [
            [
                np.stack([golden_queries[i][l][h] for i in range(config.decode_steps)])
                for h in range(cache.heads)
            ]
            for l in range(cache.layers)
        ],
        np.arange(t, t + config.decode_steps, dtype=np.int64),
    )
    gold = gold_selection(response_qs, cache, budget, mode=cfg.score_mode)

    clock.mark("lookahead")
    qcache, pseudo_tokens = None, []
    if policy in ("laq", "laq_pp"):
        qcache, pseudo_tokens = run_lookahead(model, cache, cfg, last_hidden=last_hidden,
                                              prefill_queries=prefill_queries)

    clock.mark("re_evict")
    window = last_window_queries(prefill_queries, cfg.window_len)
    if policy == "h2o":
        sel = select_h2o(prefill_queries, cache, cfg).selection
    elif policy == "snapkv":
        sel = select_snapkv(window, cache, cfg).selection
    elif policy == "pyramidkv":
        sel = select_pyramidkv(window, cache, cfg).selection
    elif policy == "streaming":
        sel = select_streaming(t, cfg, cache.layers, cache.heads)
    elif policy == "full":
        sel = select_full(t, cache.layers, cache.heads)
    elif policy == "laq":
        sel = select_laq(qcache, cache, cfg, "laq").selection
    elif policy == "laq_pp":
        sel = select_laq(qcache, cache, cfg, "laq_pp", window_queries=window).selection
    else:
        raise ValueError(f"unknown policy {policy!r}")
    compact = apply_selection(cache, sel).materialize()

    clock.mark("decode")
    token = greedy_token(model, last_hidden)
    transcript = []
    for i in range(config.decode_steps):
        transcript.append(int(token))
        out = decode_step(model, compact, token, t + i)
        append_step(compact, out)
        token = out.next_token
    clock.mark("end")

    rep = recall(sel, gold, window_len=cfg.window_len, mode=cfg.score_mode)
    lat = latency_breakdown(clock.events)
    return ToyRunResult(transcript, rep, lat, qcache, cache, response_qs, pseudo_tokens)


def _toy_cell(config: ExperimentConfig, policy: str, budget: int) -> dict:
    cell = {"policy": policy, "budget": budget, "trace": "toy-model"}
    try:
        run = run_toy_pipeline(config, policy, budget)
        cell.update(status="ok", recall=run.recall.to_json(), transcript=run.transcript,
                    latency=run.latency.to_json())
    except Exception as err:
        cell.update(status="failed", reason=f"{type(err).__name__}: {err}")
    return cell


def run_experiment(config: ExperimentConfig) -> ResultRecord:
    config.validate()
    cells = []
    if config.mode == "trace-replay":
        for path in config.trace_paths:
            try:
                bundle = read_trace(path)
            except Exception as err:
                for policy in config.policies:
                    for budget in config.budgets:
                        cells.append({
                            "policy": policy, "budget": budget, "trace": str(path),
                            "status": "failed",
                            "reason": f"{type(err).__name__}: {err}",
                        })
                continue
            for policy in config.policies:
                for budget in config.budgets:
                    cells.append(_replay_cell(bundle, str(path), policy, budget, config.policy))
    else:
        for policy in config.policies:
            for budget in config.budgets:
                cells.append(_toy_cell(config, policy, budget))
    return ResultRecord(config=config.echo(), cells=cells)


def run_ablation(config: ExperimentConfig, steps=(1, 2, 4, 8), qualities=None) -> ResultRecord:
    """Sweep lookahead length (steps) and lookahead quality.

    Quality in trace-replay picks where the stand-in lookahead queries
    come from: "response" (on-track pseudo-response) or "input" (a
    derailed lookahead that only echoes the input suffix). In toy-model
    mode quality is the lookahead stage's own cache budget.
    """
    config.validate()
    if any(s < 0 for s in steps):
        raise ValueError("steps must be non-negative")
    cells = []
    if config.mode == "trace-replay":
        qualities = tuple(qualities) if qualities is not None else ("response",)
        bad = [q for q in qualities if q not in ("response", "input")]
        if bad:
            raise ValueError(f"unknown quality levels {bad}")
        for path in config.trace_paths:
            bundle = read_trace(path)
            for quality in qualities:
                for s in steps:
                    if quality == "response":
                        qc = bundle.lookahead_qcache(s)
                    else:
                        n = bundle.t_input
                        take = min(s, n)
                        qc = QCache(
                            [
                                [bundle.input_queries[l, h, n - take :] for h in range(bundle.heads)]
                                for l in range(bundle.layers)
                            ],
                            np.arange(n, n + take, dtype=np.int64),
                            prefill_len=n,
                        )
                    for policy in ("laq", "laq_pp"):
                        for budget in config.budgets:
                            cfg = replace(config.policy, lookahead_steps=s)
                            cells.append(
                                _replay_cell(bundle, str(path), policy, budget, cfg,
                                             qcache=qc, extra={"steps": s, "quality": quality})
                            )
    else:
        qualities = tuple(qualities) if qualities is not None else (config.policy.effective_lookahead_budget,)
        for quality in qualities:
            for s in steps:
                for policy in ("laq", "laq_pp"):
                    for budget in config.budgets:
                        cfg = replace(config.policy, lookahead_steps=s,
                                      lookahead_budget=int(quality))
                        cell = _toy_cell(replace(config, policy=cfg), policy, budget)
                        cell.update(steps=s, quality=int(quality))
                        cells.append(cell)
    return ResultRecord(config=config.echo(), cells=cells)
