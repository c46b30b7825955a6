"""Deterministic toy decoder-only transformer.

Small untrained model used to exercise the eviction pipeline end to end:
prefill over a prompt, greedy stepwise decoding against a (possibly
compressed) cache, and capture of the per-layer/per-head query and
key/value tensors that the policies score over.

Weight layout (draw order fixed; PCG64(seed), uniform(-1, 1) scaled by
1/sqrt(fan_in); D = heads * head_dim):

    section        shape                 fan_in
    -------        -----                 ------
    embedding      (vocab, D)            D
    layer i wq     (D, D)                D
    layer i wk     (D, D)                D
    layer i wv     (D, D)                D
    layer i wo     (D, D)                D
    layer i w1     (D, mlp_mult*D)       D
    layer i w2     (mlp_mult*D, D)       mlp_mult*D
    head           (D, vocab)            D

Blocks are pre-norm with a parameter-free RMSNorm; the MLP activation is
tanh (bounded, so random weights cannot blow up activations). Rotary
position embeddings (rotate-half form, theta 10000) are applied to
queries and keys at their absolute token positions; cached keys are
stored post-rotation and never re-rotated after eviction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kvcache import KVCacheStore, QuerySet

ROPE_THETA = 10000.0
_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    mlp_mult: int = 2
    max_pos: int = 4096
    seed: int = 0
    rope_enabled: bool = True
    model_dim: int | None = None  # derived as heads * head_dim when omitted

    def validate(self) -> None:
        for name in ("vocab", "layers", "heads", "head_dim", "mlp_mult", "max_pos"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim is not None and self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != heads*head_dim {self.heads * self.head_dim}"
            )
        if self.rope_enabled and self.head_dim % 2:
            raise ValueError("rotary embedding needs an even head_dim")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ModelState:
    config: ModelConfig
    embedding: np.ndarray
    layers: list
    head: np.ndarray


@dataclass
class StepOutput:
    """One decode step: sampled token plus captured per-layer/head tensors."""

    next_token: int
    queries: list  # [layer][head] -> (d_h,) float32, post-rotary
    new_keys: list  # [layer][head] -> (d_h,) float32, post-rotary
    new_values: list
    position: int

    @property
    def new_kv(self):
        return self.new_keys, self.new_values


def init_model(config: ModelConfig) -> ModelState:
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    d = config.dim

    def draw(shape, fan_in):
        return (rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)).astype(np.float32)

    embedding = draw((config.vocab, d), d)
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerWeights(
                wq=draw((d, d), d),
                wk=draw((d, d), d),
                wv=draw((d, d), d),
                wo=draw((d, d), d),
                w1=draw((d, config.mlp_mult * d), d),
                w2=draw((config.mlp_mult * d, d), config.mlp_mult * d),
            )
        )
    head = draw((d, config.vocab), d)
    return ModelState(config, embedding, layers, head)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)
    return (x / scale).astype(np.float32)


def _rope_tables(positions: np.ndarray, head_dim: int):
    half = head_dim // 2
    inv_freq = ROPE_THETA ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    return np.concatenate([cos, cos], axis=-1), np.concatenate([sin, sin], axis=-1)


def apply_rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate-half rotary embedding at absolute positions; x is (n, d_h)."""
    cos, sin = _rope_tables(positions, x.shape[-1])
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return (x * cos + rotated * sin).astype(np.float32)


def _split_heads(x: np.ndarray, heads: int, head_dim: int) -> np.ndarray:
    # (T, D) -> (heads, T, d_h)
    return np.ascontiguousarray(x.reshape(x.shape[0], heads, head_dim).transpose(1, 0, 2))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def prefill(model: ModelState, tokens) -> tuple[KVCacheStore, np.ndarray, QuerySet]:
    """Run the prompt through the model with causal attention.

    Returns the populated cache, the final normalized hidden state of the
    last position (what the output head consumes for the first generated
    token), and every position's post-rotary queries for window policies.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    t = tokens.shape[0]
    if t < 1 or t > cfg.max_pos:
        raise ValueError(f"prompt length {t} outside [1, {cfg.max_pos}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token id outside vocab")

    positions = np.arange(t, dtype=np.int64)
    hidden = model.embedding[tokens]
    causal = np.triu(np.full((t, t), -np.inf, dtype=np.float32), k=1)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    all_keys, all_values, all_queries = [], [], []
    for lw in model.layers:
        normed = _rmsnorm(hidden)
        q = _split_heads(normed @ lw.wq, cfg.heads, cfg.head_dim)
        k = _split_heads(normed @ lw.wk, cfg.heads, cfg.head_dim)
        v = _split_heads(normed @ lw.wv, cfg.heads, cfg.head_dim)
        if cfg.rope_enabled:
            q = np.stack([apply_rope(q[h], positions) for h in range(cfg.heads)])
            k = np.stack([apply_rope(k[h], positions) for h in range(cfg.heads)])
        att_heads = []
        for h in range(cfg.heads):
            logits = (q[h] @ k[h].T) * scale + causal
            probs = _softmax_last(logits)
            att_heads.append(probs @ v[h])
        att = np.concatenate(att_heads, axis=-1)
        hidden = hidden + att @ lw.wo
        hidden = hidden + np.tanh(_rmsnorm(hidden) @ lw.w1) @ lw.w2

        all_keys.append([np.ascontiguousarray(k[h]) for h in range(cfg.heads)])
        all_values.append([np.ascontiguousarray(v[h]) for h in range(cfg.heads)])
        all_queries.append([np.ascontiguousarray(q[h]) for h in range(cfg.heads)])

    final = _rmsnorm(hidden)
    cache = KVCacheStore.from_uniform(all_keys, all_values)
    queries = QuerySet(all_queries, positions)
    return cache, final[-1], queries


def greedy_token(model: ModelState, hidden: np.ndarray) -> int:
    """Argmax over head logits; ties resolve to the lower token id."""
    logits = hidden @ model.head
    return int(np.argmax(logits))


def decode_step(model: ModelState, cache_view, last_token: int, position: int) -> StepOutput:
    """One greedy decode step attending over `cache_view` plus itself.

    The view is not mutated; the produced key/value row is returned for
    the caller to append. Retained entries are consumed with the keys
    exactly as cached (rotated at their original positions).
    """
    cfg = model.config
    if position >= cfg.max_pos:
        raise ValueError(f"position {position} >= max_pos {cfg.max_pos}")
    if not (0 <= last_token < cfg.vocab):
        raise ValueError("token id outside vocab")
    for l in range(cache_view.layers):
        for h in range(cache_view.heads):
            if cache_view.length(l, h) == 0:
                raise ValueError(f"empty cache at layer {l} head {h}")

    pos_arr = np.array([position], dtype=np.int64)
    hidden = model.embedding[last_token][None, :]
    scale = 1.0 / np.sqrt(cfg.head_dim)

    queries, new_keys, new_values = [], [], []
    for l, lw in enumerate(model.layers):
        normed = _rmsnorm(hidden)
        q = _split_heads(normed @ lw.wq, cfg.heads, cfg.head_dim)
        k = _split_heads(normed @ lw.wk, cfg.heads, cfg.head_dim)
        v = _split_heads(normed @ lw.wv, cfg.heads, cfg.head_dim)
        if cfg.rope_enabled:
            q = np.stack([apply_rope(q[h], pos_arr) for h in range(cfg.heads)])
            k = np.stack([apply_rope(k[h], pos_arr) for h in range(cfg.heads)])
        att_heads = []
        for h in range(cfg.heads):
            cached_pos = cache_view.positions_at(l, h)
            if cached_pos.shape[0] and cached_pos[-1] >= position:
                raise ValueError("cache positions must precede the decoding position")
            keys = np.concatenate([cache_view.keys_at(l, h), k[h]])
            values = np.concatenate([cache_view.values_at(l, h), v[h]])
            logits = (keys @ q[h, 0]) * scale
            probs = _softmax_last(logits)
            att_heads.append(probs @ values)
        att = np.concatenate(att_heads)[None, :]
        hidden = hidden + att @ lw.wo
        hidden = hidden + np.tanh(_rmsnorm(hidden) @ lw.w1) @ lw.w2
        queries.append([np.ascontiguousarray(q[h, 0]) for h in range(cfg.heads)])
        new_keys.append([np.ascontiguousarray(k[h, 0]) for h in range(cfg.heads)])
        new_values.append([np.ascontiguousarray(v[h, 0]) for h in range(cfg.heads)])

    final = _rmsnorm(hidden)[0]
    return StepOutput(greedy_token(model, final), queries, new_keys, new_values, position)


_WEIGHT_PROVENANCE = "kvlab-model-weights"


def save_weights(model: ModelState, path) -> None:
    """Dump weights in the shared binary container (same tensor encoding
    as trace files)."""
    from . import binio

    cfg = model.config
    sections = [("embedding", model.embedding)]
    for i, lw in enumerate(model.layers):
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            sections.append((f"layer{i}.{name}", getattr(lw, name)))
    sections.append(("head", model.head))
    header = binio.ContainerHeader(
        cfg.layers, cfg.heads, cfg.head_dim, 0, 0, cfg.vocab, _WEIGHT_PROVENANCE
    )
    binio.write_container(path, header, sections)


def load_weights(path, config: ModelConfig) -> ModelState:
    from . import binio

    header, sections = binio.read_container(path)
    if (header.layers, header.heads, header.head_dim, header.vocab) != (
        config.layers,
        config.heads,
        config.head_dim,
        config.vocab,
    ):
        raise binio.TraceShapeError("weight file geometry does not match config")
    try:
        layers = [
            LayerWeights(*(sections[f"layer{i}.{n}"] for n in ("wq", "wk", "wv", "wo", "w1", "w2")))
            for i in range(config.layers)
        ]
        state = ModelState(config, sections["embedding"], layers, sections["head"])
    except KeyError as missing:
        raise binio.TraceShapeError(f"weight file missing section {missing}") from None
    if state.embedding.shape != (config.vocab, config.dim):
        raise binio.TraceShapeError("embedding shape does not match config")
    return state
