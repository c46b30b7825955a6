"""Recorded query/key/value bundles: file format and synthetic generator.

A trace holds everything needed to replay selection experiments offline:
per-layer/per-head input queries, response queries, prefill keys/values,
and the token ids. Files use the shared KVTR container (see binio).

The synthetic generator builds traces with a planted structure: a small
set of "needle" keys that the response genuinely needs, a disjoint set of
"distractor" keys that the input suffix chases, and neutral background
keys. Directions are orthogonal by construction, which makes the
guarantees exact in raw score mode:

  * the golden selection at budget = needle_count is exactly the needles;
  * an input-position query scores every needle strictly below zero, so
    input-only windows recover no needles at all;
  * the s-th response query targets needle s (after the needles run out,
    queries spread evenly over all of them), so a lookahead prefix of S
    response queries recovers exactly S needles.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..binio import ContainerHeader, TraceShapeError, read_container, write_container
from ..kvcache import KVCacheStore, QCache, QuerySet

SECTION_NAMES = (
    "input_queries",
    "response_queries",
    "keys",
    "values",
    "input_tokens",
    "response_tokens",
)


@dataclass
class TraceBundle:
    layers: int
    heads: int
    head_dim: int
    t_input: int
    t_response: int
    vocab: int
    provenance: str
    input_queries: np.ndarray  # (L, H, T_input, d_h) float32
    response_queries: np.ndarray  # (L, H, T_response, d_h)
    keys: np.ndarray  # (L, H, T_input, d_h)
    values: np.ndarray  # (L, H, T_input, d_h)
    input_tokens: np.ndarray  # (T_input,) int64
    response_tokens: np.ndarray  # (T_response,) int64

    def validate(self) -> None:
        lhd = (self.layers, self.heads)
        want = {
            "input_queries": lhd + (self.t_input, self.head_dim),
            "response_queries": lhd + (self.t_response, self.head_dim),
            "keys": lhd + (self.t_input, self.head_dim),
            "values": lhd + (self.t_input, self.head_dim),
        }
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise TraceShapeError(f"{name} has shape {arr.shape}, header implies {shape}")
            if not np.isfinite(arr).all():
                raise TraceShapeError(f"{name} contains non-finite values")
        if self.input_tokens.shape != (self.t_input,):
            raise TraceShapeError("input_tokens length disagrees with header")
        if self.response_tokens.shape != (self.t_response,):
            raise TraceShapeError("response_tokens length disagrees with header")

    # --- adapters the selection/metrics code consumes ---

    def cache(self) -> KVCacheStore:
        keys = [[self.keys[l, h] for h in range(self.heads)] for l in range(self.layers)]
        values = [[self.values[l, h] for h in range(self.heads)] for l in range(self.layers)]
        return KVCacheStore.from_uniform(keys, values)

    def input_query_set(self) -> QuerySet:
        q = [[self.input_queries[l, h] for h in range(self.heads)] for l in range(self.layers)]
        return QuerySet(q, np.arange(self.t_input, dtype=np.int64))

    def response_query_set(self) -> QuerySet:
        q = [[self.response_queries[l, h] for h in range(self.heads)] for l in range(self.layers)]
        return QuerySet(
            q, np.arange(self.t_input, self.t_input + self.t_response, dtype=np.int64)
        )

    def lookahead_qcache(self, steps: int) -> QCache:
        """Trace-replay stand-in for the lookahead stage: the first `steps`
        recorded response queries."""
        s = min(steps, self.t_response)
        q = [
            [self.response_queries[l, h, :s] for h in range(self.heads)]
            for l in range(self.layers)
        ]
        return QCache(
            q, np.arange(self.t_input, self.t_input + s, dtype=np.int64), prefill_len=self.t_input
        )


def write_trace(bundle: TraceBundle, path) -> None:
    bundle.validate()
    header = ContainerHeader(
        bundle.layers,
        bundle.heads,
        bundle.head_dim,
        bundle.t_input,
        bundle.t_response,
        bundle.vocab,
        bundle.provenance,
    )
    sections = [
        ("input_queries", bundle.input_queries),
        ("response_queries", bundle.response_queries),
        ("keys", bundle.keys),
        ("values", bundle.values),
        ("input_tokens", bundle.input_tokens.astype(np.float32)),
        ("response_tokens", bundle.response_tokens.astype(np.float32)),
    ]
    write_container(path, header, sections)


def read_trace(path) -> TraceBundle:
    header, sections = read_container(path)
    missing = [n for n in SECTION_NAMES if n not in sections]
    if missing:
        raise TraceShapeError(f"trace file missing sections {missing}")
    bundle = TraceBundle(
        layers=header.layers,
        heads=header.heads,
        head_dim=header.head_dim,
        t_input=header.t_input,
        t_response=header.t_response,
        vocab=header.vocab,
        provenance=header.provenance,
        input_queries=sections["input_queries"],
        response_queries=sections["response_queries"],
        keys=sections["keys"],
        values=sections["values"],
        input_tokens=sections["input_tokens"].astype(np.int64),
        response_tokens=sections["response_tokens"].astype(np.int64),
    )
    bundle.validate()
    return bundle


@dataclass
class TraceParams:
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    t_input: int = 128
    t_response: int = 24
    vocab: int = 512
    needle_count: int = 8
    divergence: float = 4.0
    seed: int = 0

    # direction weights; divergence scales the dominant components
    response_weight: float = 1.0
    floor_weight: float = 0.25
    needle_repulsion: float = 0.5  # negative floor component on needle keys


def gen_synthetic_trace(params: TraceParams) -> TraceBundle:
    p = params
    nc = p.needle_count
    if nc < 1:
        raise ValueError("needle_count must be >= 1")
    if p.head_dim < nc + 2:
        raise ValueError(
            f"head_dim {p.head_dim} too small: needs needle_count + 2 = {nc + 2} directions"
        )
    if 2 * nc > p.t_input:
        raise ValueError("needles plus distractors exceed t_input")
    if p.t_input < 4 * nc:
        raise ValueError(f"t_input must be at least 4*needle_count = {4 * nc}")
    if p.t_response < 1:
        raise ValueError("t_response must be >= 1")
    if p.t_response < nc:
        # each needle needs at least one covering response query or the
        # uncovered ones sink below the background floor
        raise ValueError(
            f"t_response {p.t_response} must be >= needle_count {nc}"
        )
    if p.divergence <= 0:
        raise ValueError("divergence must be positive")

    rng = np.random.default_rng(np.random.PCG64(p.seed))
    d = p.head_dim
    kappa = p.divergence
    alpha, beta, delta = p.response_weight, p.floor_weight, p.needle_repulsion

    input_q = np.zeros((p.layers, p.heads, p.t_input, d), dtype=np.float32)
    resp_q = np.zeros((p.layers, p.heads, p.t_response, d), dtype=np.float32)
    keys = np.zeros((p.layers, p.heads, p.t_input, d), dtype=np.float32)
    values = rng.normal(size=(p.layers, p.heads, p.t_input, d)).astype(np.float32)

    for l in range(p.layers):
        for h in range(p.heads):
            # random orthonormal frame, sign-fixed for stability
            raw = rng.normal(size=(d, d))
            q_mat, r_mat = np.linalg.qr(raw)
            basis = (q_mat * np.sign(np.diag(r_mat))).astype(np.float64)
            needles_dir = basis[:, :nc]  # column j = needle direction j
            distract_dir = basis[:, nc]
            floor_dir = basis[:, nc + 1]

            # needles live in a fixed band below the last 2*nc positions:
            # high enough that zero-score ties in early windows resolve to
            # lower-index background keys, clear of trailing observation
            # windows so force-keep never hands them out for free
            band_start = p.t_input - 3 * nc
            needle_pos = np.arange(band_start, band_start + nc)
            distract_pos = np.sort(rng.choice(band_start, size=nc, replace=False))

            k = np.tile(floor_dir, (p.t_input, 1))  # background: pure floor
            k[needle_pos] = (kappa * needles_dir.T - delta * floor_dir[None, :])
            k[distract_pos] = kappa * distract_dir[None, :]
            keys[l, h] = k.astype(np.float32)

            input_q[l, h] = (alpha * distract_dir + beta * floor_dir).astype(np.float32)[None, :]

            spread = needles_dir.sum(axis=1) / np.sqrt(nc)
            for s in range(p.t_response):
                target = needles_dir[:, s] if s < nc else spread
                resp_q[l, h, s] = (alpha * target + beta * floor_dir).astype(np.float32)

            _check_margins(resp_q[l, h], input_q[l, h], keys[l, h], needle_pos, kappa)

    bundle = TraceBundle(
        layers=p.layers,
        heads=p.heads,
        head_dim=d,
        t_input=p.t_input,
        t_response=p.t_response,
        vocab=p.vocab,
        provenance=f"synthetic seed={p.seed} needles={nc} divergence={kappa}",
        input_queries=input_q,
        response_queries=resp_q,
        keys=keys,
        values=values,
        input_tokens=rng.integers(0, p.vocab, size=p.t_input).astype(np.int64),
        response_tokens=rng.integers(0, p.vocab, size=p.t_response).astype(np.int64),
    )
    bundle.validate()
    return bundle


def _check_margins(resp_q, input_q, keys, needle_pos, kappa) -> None:
    """Verify the planted structure actually separates, head by head."""
    needle_mask = np.zeros(keys.shape[0], dtype=bool)
    needle_mask[needle_pos] = True
    resp_scores = (resp_q.astype(np.float64) @ keys.astype(np.float64).T).sum(axis=0)
    margin = resp_scores[needle_mask].min() - resp_scores[~needle_mask].max()
    if margin <= 0:
        raise ValueError(f"construction failed: response-score margin {margin:.4f} <= 0")
    in_scores = (input_q.astype(np.float64) @ keys.astype(np.float64).T).sum(axis=0)
    if in_scores[needle_mask].max() >= 0:
        raise ValueError("construction failed: input queries give a needle non-negative score")
