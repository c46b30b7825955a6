import argparse
import sys

from .session import ExportSession, export_trace


def _load_prompt(path: str):
    """Prompt file containing whitespace-separated token ids, or raw text
    (text requires the checkpoint to ship a tokenizer)."""
    with open(path) as f:
        content = f.read()
    fields = content.split()
    if fields and all(tok.lstrip("-").isdigit() for tok in fields):
        return [int(tok) for tok in fields], None
    return None, content


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="kvtrace-export",
        description="Record post-rotary query/key/value traces from a causal LM checkpoint.",
    )
    p.add_argument("--model", required=True, help="checkpoint directory or hub id")
    p.add_argument("--prompt-file", required=True,
                   help="token ids (whitespace separated) or raw text")
    p.add_argument("--gen-len", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--no-queries", action="store_true")
    p.add_argument("--no-keys", action="store_true")
    p.add_argument("--no-values", action="store_true")
    p.add_argument("--expect-layers", type=int, default=None)
    p.add_argument("--expect-heads", type=int, default=None)
    p.add_argument("--expect-head-dim", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ids, text = _load_prompt(args.prompt_file)
        if ids is None:
            from transformers import AutoTokenizer

            tok = AutoTokenizer.from_pretrained(args.model)
            ids = tok(text, return_tensors=None)["input_ids"]
        session = ExportSession(
            model_id=args.model,
            prompt_tokens=ids,
            gen_len=args.gen_len,
            out_path=args.out,
            capture_queries=not args.no_queries,
            capture_keys=not args.no_keys,
            capture_values=not args.no_values,
            expect_layers=args.expect_layers,
            expect_heads=args.expect_heads,
            expect_head_dim=args.expect_head_dim,
        )
        result = export_trace(session)
    except Exception as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.path}: L={result.layers} H={result.heads} "
        f"d_h={result.head_dim} T_input={result.t_input} T_response={result.t_response}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
