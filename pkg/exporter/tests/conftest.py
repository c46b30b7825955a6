import pytest
import torch
from transformers import LlamaConfig, LlamaForCausalLM


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    """Tiny randomly-initialized Llama-architecture checkpoint with
    grouped-query attention, saved to disk like any downloaded model."""
    torch.manual_seed(7)
    config = LlamaConfig(
        vocab_size=256,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=128,
    )
    model = LlamaForCausalLM(config)
    path = tmp_path_factory.mktemp("ckpt") / "tiny-llama-gqa"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def prompt_ids():
    return [(7 * i + 3) % 256 for i in range(32)]
