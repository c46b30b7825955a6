"""Attention-input capture via the transformers attention registry.

A single custom attention implementation is registered once under
ATTN_IMPL_NAME. It delegates all math to the stock eager path and, when
a CaptureState is active, records the exact tensors attention consumes:
post-projection, post-rotary queries per call, and the accumulated
key/value cache (still in grouped-query layout) from the latest call.
One session at a time; the state is installed with `activate`.
"""

from contextlib import contextmanager

import torch
from transformers import AttentionInterface
from transformers.models.llama.modeling_llama import eager_attention_forward

ATTN_IMPL_NAME = "kvtrace_capture"

_active = None


class HookError(RuntimeError):
    """The runtime never handed us attention inputs."""


class CaptureState:
    def __init__(self):
        self.queries = {}  # layer_idx -> list of (H, q_len, d) tensors
        self.keys = {}  # layer_idx -> (H_kv, kv_len, d), latest call wins
        self.values = {}

    def record(self, layer_idx, query, key, value):
        if query.shape[0] != 1:
            raise HookError(f"capture expects batch 1, got {query.shape[0]}")
        self.queries.setdefault(layer_idx, []).append(
            query[0].detach().to(torch.float32).clone()
        )
        self.keys[layer_idx] = key[0].detach().to(torch.float32).clone()
        self.values[layer_idx] = value[0].detach().to(torch.float32).clone()

    def layer_queries(self, layer_idx):
        return torch.cat(self.queries[layer_idx], dim=1)  # (H, total_len, d)


def _capture_attention(module, query, key, value, attention_mask,
                       scaling=None, dropout=0.0, **kwargs):
    if _active is not None:
        _active.record(module.layer_idx, query, key, value)
    return eager_attention_forward(module, query, key, value, attention_mask,
                                   scaling=scaling, dropout=dropout, **kwargs)


def ensure_registered() -> None:
    try:
        AttentionInterface.register(ATTN_IMPL_NAME, _capture_attention)
    except (KeyError, ValueError):
        pass  # already registered in this process


@contextmanager
def activate(state: CaptureState):
    global _active
    if _active is not None:
        raise HookError("a capture session is already active")
    _active = state
    try:
        yield state
    finally:
        _active = None
