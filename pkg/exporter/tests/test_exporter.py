"""Exporter conformance: files the replay engine accepts, tensors the
runtime actually attends with."""

import numpy as np
import pytest
import torch
from transformers import AutoModelForCausalLM
from transformers.models.llama.modeling_llama import apply_rotary_pos_emb

from kvtrace_exporter import ExportSession, GeometryError, export_trace
from kvtrace_exporter.cli import main

from kvlab.harness import read_trace
from kvlab.metrics import gold_selection, recall
from kvlab.policies import PolicyConfig, last_window_queries, select_laq


@pytest.fixture(scope="module")
def exported(checkpoint, prompt_ids, tmp_path_factory):
    out = tmp_path_factory.mktemp("traces") / "tiny.kvtr"
    session = ExportSession(model_id=checkpoint, prompt_tokens=prompt_ids,
                            gen_len=8, out_path=str(out))
    return export_trace(session), out


class TestConformance:
    def test_primary_reader_validates_the_file(self, exported):
        result, path = exported
        bundle = read_trace(path)  # checksum + shape validation happens here
        assert (bundle.layers, bundle.heads, bundle.head_dim) == (2, 4, 16)
        assert bundle.t_input == 32
        assert bundle.t_response == 8
        assert "kvtrace-exporter" in bundle.provenance

    def test_sections_round_trip_bit_exact(self, exported):
        result, path = exported
        bundle = read_trace(path)
        np.testing.assert_array_equal(bundle.input_queries, result.input_queries)
        np.testing.assert_array_equal(bundle.response_queries, result.response_queries)
        np.testing.assert_array_equal(bundle.keys, result.keys)
        np.testing.assert_array_equal(bundle.values, result.values)
        np.testing.assert_array_equal(bundle.input_tokens, result.input_tokens)
        np.testing.assert_array_equal(bundle.response_tokens, result.response_tokens)

    def test_response_queries_cover_every_generated_token(self, exported):
        result, _ = exported
        assert len(result.response_tokens) == 8
        assert result.response_queries.shape[2] == 8
        assert np.abs(result.response_queries).max() > 0

    def test_export_is_deterministic(self, checkpoint, prompt_ids, tmp_path):
        a, b = tmp_path / "a.kvtr", tmp_path / "b.kvtr"
        for out in (a, b):
            export_trace(ExportSession(model_id=checkpoint, prompt_tokens=prompt_ids,
                                       gen_len=4, out_path=str(out)))
        assert a.read_bytes() == b.read_bytes()


class TestRecordedTensors:
    def test_layer0_queries_match_manual_forward(self, exported, checkpoint, prompt_ids):
        """Recompute layer-0 post-rotary queries from raw weights."""
        result, _ = exported
        model = AutoModelForCausalLM.from_pretrained(checkpoint).eval()
        layer = model.model.layers[0]
        heads, d = 4, 16
        ids = torch.tensor([prompt_ids], dtype=torch.long)
        with torch.no_grad():
            hidden = model.model.embed_tokens(ids)
            normed = layer.input_layernorm(hidden)
            q = layer.self_attn.q_proj(normed)
            q = q.view(1, len(prompt_ids), heads, d).transpose(1, 2)
            cos, sin = model.model.rotary_emb(hidden, torch.arange(len(prompt_ids)).unsqueeze(0))
            q, _ = apply_rotary_pos_emb(q, q, cos, sin)
        manual = q[0].to(torch.float32).numpy()
        got = result.input_queries[0]
        denom = np.maximum(np.abs(manual), 1e-6)
        assert (np.abs(got - manual) / denom).max() < 1e-4

    def test_gqa_keys_replicated_per_group(self, exported, checkpoint, prompt_ids):
        """Exported keys equal the runtime's per-group replicated cache."""
        result, _ = exported
        model = AutoModelForCausalLM.from_pretrained(checkpoint).eval()
        ids = torch.tensor([prompt_ids], dtype=torch.long)
        with torch.no_grad():
            past = model(ids, use_cache=True).past_key_values
        raw = past.layers[0].keys[0]  # (H_kv=2, T, d), post-rotary
        replicated = raw.repeat_interleave(2, dim=0).to(torch.float32).numpy()
        np.testing.assert_array_equal(result.keys[0], replicated)
        # the two heads of one group share a key stream, neighbours do not
        assert np.array_equal(result.keys[0][0], result.keys[0][1])
        assert not np.array_equal(result.keys[0][1], result.keys[0][2])

    def test_laqpp_replay_reports_recall_in_unit_interval(self, exported):
        result, path = exported
        bundle = read_trace(path)
        cache = bundle.cache()
        for budget in (8, 16):
            cfg = PolicyConfig(budget=budget)
            window = last_window_queries(bundle.input_query_set(), cfg.window_len)
            pred = select_laq(bundle.lookahead_qcache(cfg.lookahead_steps), cache, cfg,
                              "laq_pp", window_queries=window).selection
            gold = gold_selection(bundle.response_query_set(), cache, budget,
                                  mode=cfg.score_mode)
            rep = recall(pred, gold)
            assert rep.per_head.shape == (2, 4)
            assert np.all(rep.per_head >= 0.0) and np.all(rep.per_head <= 1.0)
            assert 0.0 <= rep.mean <= 1.0


class TestSessionContract:
    def test_capture_toggles_zero_sections(self, checkpoint, prompt_ids, tmp_path):
        out = tmp_path / "nokeys.kvtr"
        result = export_trace(ExportSession(model_id=checkpoint, prompt_tokens=prompt_ids,
                                            gen_len=2, out_path=str(out),
                                            capture_keys=False, capture_values=False))
        bundle = read_trace(out)
        assert not bundle.keys.any()
        assert not bundle.values.any()
        assert bundle.input_queries.any()
        assert "zeroed=keys,values" in bundle.provenance
        assert result.path == str(out)

    def test_geometry_pin_mismatch(self, checkpoint, prompt_ids, tmp_path):
        session = ExportSession(model_id=checkpoint, prompt_tokens=prompt_ids,
                                gen_len=2, out_path=str(tmp_path / "x.kvtr"),
                                expect_heads=8)
        with pytest.raises(GeometryError, match="heads"):
            export_trace(session)

    def test_rejects_empty_prompt(self, checkpoint, tmp_path):
        session = ExportSession(model_id=checkpoint, prompt_tokens=[],
                                out_path=str(tmp_path / "x.kvtr"))
        with pytest.raises(ValueError):
            export_trace(session)


class TestCli:
    def test_happy_path(self, checkpoint, prompt_ids, tmp_path, capsys):
        prompt_file = tmp_path / "prompt.txt"
        prompt_file.write_text(" ".join(str(t) for t in prompt_ids))
        out = tmp_path / "cli.kvtr"
        rc = main(["--model", checkpoint, "--prompt-file", str(prompt_file),
                   "--gen-len", "8", "--out", str(out)])
        assert rc == 0
        assert "T_input=32 T_response=8" in capsys.readouterr().out
        bundle = read_trace(out)
        assert bundle.t_input == 32

    def test_bad_model_path_exits_nonzero(self, tmp_path, capsys):
        prompt_file = tmp_path / "prompt.txt"
        prompt_file.write_text("1 2 3")
        rc = main(["--model", str(tmp_path / "missing"), "--prompt-file", str(prompt_file),
                   "--out", str(tmp_path / "x.kvtr")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_geometry_pin_via_flags(self, checkpoint, prompt_ids, tmp_path, capsys):
        prompt_file = tmp_path / "prompt.txt"
        prompt_file.write_text(" ".join(str(t) for t in prompt_ids))
        rc = main(["--model", checkpoint, "--prompt-file", str(prompt_file),
                   "--out", str(tmp_path / "x.kvtr"), "--expect-layers", "5"])
        assert rc == 1
        assert "GeometryError" in capsys.readouterr().err
