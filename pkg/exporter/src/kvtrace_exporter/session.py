"""Export sessions: drive a checkpoint, collect attention inputs, write KVTR."""

from dataclasses import dataclass, field

import numpy as np
import torch
from transformers import AutoModelForCausalLM

from .capture import ATTN_IMPL_NAME, CaptureState, HookError, activate, ensure_registered
from .kvtr import write_kvtr


class GeometryError(RuntimeError):
    """Captured tensor geometry disagrees with the model or the session."""


@dataclass
class ExportSession:
    model_id: str  # hub id or local checkpoint directory
    prompt_tokens: list
    gen_len: int = 8
    out_path: str = "trace.kvtr"
    capture_queries: bool = True
    capture_keys: bool = True
    capture_values: bool = True
    # optional geometry pins; export fails loudly if the model disagrees
    expect_layers: int | None = None
    expect_heads: int | None = None
    expect_head_dim: int | None = None
    device: str = "cpu"
    extra_provenance: str = ""

    def validate(self) -> None:
        if len(self.prompt_tokens) < 1:
            raise ValueError("prompt must contain at least one token")
        if self.gen_len < 1:
            raise ValueError("gen_len must be >= 1")
        if any(int(t) < 0 for t in self.prompt_tokens):
            raise ValueError("token ids must be non-negative")


@dataclass
class ExportResult:
    path: str
    layers: int
    heads: int
    head_dim: int
    t_input: int
    t_response: int
    vocab: int
    input_queries: np.ndarray
    response_queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    input_tokens: np.ndarray
    response_tokens: np.ndarray


def _check_geometry(session, layers, heads, head_dim):
    pins = (
        ("layers", session.expect_layers, layers),
        ("heads", session.expect_heads, heads),
        ("head_dim", session.expect_head_dim, head_dim),
    )
    for name, want, got in pins:
        if want is not None and want != got:
            raise GeometryError(f"model {name} is {got}, session pinned {want}")


def _grouped_to_full(tensor: torch.Tensor, heads: int) -> np.ndarray:
    """(H_kv, T, d) -> (H, T, d), each kv head repeated for its query group."""
    h_kv = tensor.shape[0]
    if heads % h_kv != 0:
        raise GeometryError(f"{heads} query heads not divisible by {h_kv} kv heads")
    return tensor.repeat_interleave(heads // h_kv, dim=0).numpy()


def export_trace(session: ExportSession) -> ExportResult:
    session.validate()
    ensure_registered()
    model = AutoModelForCausalLM.from_pretrained(session.model_id)
    model.set_attn_implementation(ATTN_IMPL_NAME)
    model.to(session.device).eval()

    cfg = model.config
    layers = cfg.num_hidden_layers
    heads = cfg.num_attention_heads
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // heads
    _check_geometry(session, layers, heads, head_dim)

    prompt = torch.tensor([list(map(int, session.prompt_tokens))], dtype=torch.long,
                          device=session.device)
    t_input = prompt.shape[1]

    state = CaptureState()
    generated = []
    with activate(state), torch.no_grad():
        out = model(prompt, use_cache=True)
        past = out.past_key_values
        token = out.logits[0, -1].argmax()
        # one forward per generated token, so its query enters the record
        for _ in range(session.gen_len):
            generated.append(int(token))
            out = model(token.reshape(1, 1), past_key_values=past, use_cache=True)
            past = out.past_key_values
            token = out.logits[0, -1].argmax()

    if not state.queries:
        raise HookError(
            f"attention implementation {ATTN_IMPL_NAME!r} was never invoked"
        )
    if sorted(state.queries) != list(range(layers)):
        raise GeometryError(
            f"captured layers {sorted(state.queries)} != expected {list(range(layers))}"
        )

    input_q = np.zeros((layers, heads, t_input, head_dim), dtype=np.float32)
    resp_q = np.zeros((layers, heads, session.gen_len, head_dim), dtype=np.float32)
    keys = np.zeros((layers, heads, t_input, head_dim), dtype=np.float32)
    values = np.zeros((layers, heads, t_input, head_dim), dtype=np.float32)
    for l in range(layers):
        q_all = state.layer_queries(l)  # (H, t_input + gen_len, d)
        if q_all.shape != (heads, t_input + session.gen_len, head_dim):
            raise GeometryError(
                f"layer {l} queries came out {tuple(q_all.shape)}, expected "
                f"{(heads, t_input + session.gen_len, head_dim)}"
            )
        if session.capture_queries:
            input_q[l] = q_all[:, :t_input].numpy()
            resp_q[l] = q_all[:, t_input:].numpy()
        if session.capture_keys:
            keys[l] = _grouped_to_full(state.keys[l], heads)[:, :t_input]
        if session.capture_values:
            values[l] = _grouped_to_full(state.values[l], heads)[:, :t_input]

    toggles = [
        name
        for name, on in (
            ("queries", session.capture_queries),
            ("keys", session.capture_keys),
            ("values", session.capture_values),
        )
        if not on
    ]
    provenance = f"kvtrace-exporter model={session.model_id} gen={session.gen_len}"
    if toggles:
        provenance += f" zeroed={','.join(toggles)}"
    if session.extra_provenance:
        provenance += f" {session.extra_provenance}"

    input_tokens = prompt[0].cpu().numpy().astype(np.float32)
    response_tokens = np.asarray(generated, dtype=np.float32)
    write_kvtr(
        session.out_path,
        layers=layers,
        heads=heads,
        head_dim=head_dim,
        t_input=t_input,
        t_response=session.gen_len,
        vocab=cfg.vocab_size,
        provenance=provenance,
        sections=[
            ("input_queries", input_q),
            ("response_queries", resp_q),
            ("keys", keys),
            ("values", values),
            ("input_tokens", input_tokens),
            ("response_tokens", response_tokens),
        ],
    )
    return ExportResult(
        path=str(session.out_path),
        layers=layers,
        heads=heads,
        head_dim=head_dim,
        t_input=t_input,
        t_response=session.gen_len,
        vocab=cfg.vocab_size,
        input_queries=input_q,
        response_queries=resp_q,
        keys=keys,
        values=values,
        input_tokens=input_tokens.astype(np.int64),
        response_tokens=response_tokens.astype(np.int64),
    )
