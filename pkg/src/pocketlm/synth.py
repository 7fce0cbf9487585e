"""Synthetic model construction: random tiny containers for tests and demos.

Real pretrained checkpoints are gigabytes; everything in this repo is
verifiable on randomly initialized weights at desk scale. The builder
seeds every tensor deterministically, so a (seed, config) pair names one
exact model.

Run as a module to write a demo container:

    python -m pocketlm.synth --out tiny.plm --vocab chat --seed 7
"""

from __future__ import annotations

import argparse

import numpy as np

from .container import ContainerBuilder, ModelContainer, TypedValue, ValueType, save_file
from .model import layer_tensor_names
from .quant import DType, quantize
from .tokenizer import TokenType, byte_token_text

# small merge vocabulary so chat-style tests exercise real BPE merges
_MERGE_TOKENS = [
    ("th", 5.0), ("he", 4.5), ("in", 4.0), ("er", 3.9), ("an", 3.8),
    ("re", 3.7), ("on", 3.6), ("at", 3.5), ("en", 3.4), ("nd", 3.3),
    ("the", 6.0), ("ing", 5.5), ("and", 5.2), ("ion", 5.1),
]


def byte_vocab_metadata() -> tuple[list[str], list[float], list[int], int, int]:
    """Minimal total vocabulary: exactly the 256 byte tokens."""
    tokens = [byte_token_text(b) for b in range(256)]
    return tokens, [0.0] * 256, [int(TokenType.BYTE)] * 256, 0, 0


def chat_vocab_metadata() -> tuple[list[str], list[float], list[int], int, int]:
    """bos/eos controls, full byte coverage, and a few scored merges."""
    tokens = ["<s>", "</s>"] + [byte_token_text(b) for b in range(256)]
    scores = [0.0] * 258
    types = [int(TokenType.CONTROL)] * 2 + [int(TokenType.BYTE)] * 256
    for text, score in _MERGE_TOKENS:
        tokens.append(text)
        scores.append(score)
        types.append(int(TokenType.NORMAL))
    return tokens, scores, types, 0, 1


def build_tiny_container(
    seed: int = 0,
    n_layers: int = 2,
    d_model: int = 64,
    n_heads: int = 4,
    n_kv_heads: int = 2,
    d_ff: int | None = None,
    ctx_max: int = 256,
    vocab: str = "bytes",
    weight_dtype: DType = DType.F32,
    name: str | None = None,
) -> ModelContainer:
    """Random llama-like model; 2-D tensors encoded as ``weight_dtype``.

    The float weights depend only on (seed, shapes), so the same seed
    quantized to different formats holds the same underlying tensor.
    """
    if d_ff is None:
        d_ff = _round_up(d_model * 8 // 3, 32)
    if vocab == "bytes":
        tokens, scores, types, bos, eos = byte_vocab_metadata()
    elif vocab == "chat":
        tokens, scores, types, bos, eos = chat_vocab_metadata()
    else:
        raise ValueError(f"vocab must be 'bytes' or 'chat', got {vocab!r}")
    vocab_size = len(tokens)

    rng = np.random.default_rng(seed)
    kv_dim = n_kv_heads * (d_model // n_heads)
    dims = {
        "tok_embed.weight": (vocab_size, d_model),
        "final_norm.weight": (d_model,),
        "output.weight": (vocab_size, d_model),
    }
    for i in range(n_layers):
        dims[f"layers.{i}.attn_norm.weight"] = (d_model,)
        dims[f"layers.{i}.attn_q.weight"] = (d_model, d_model)
        dims[f"layers.{i}.attn_k.weight"] = (kv_dim, d_model)
        dims[f"layers.{i}.attn_v.weight"] = (kv_dim, d_model)
        dims[f"layers.{i}.attn_out.weight"] = (d_model, d_model)
        dims[f"layers.{i}.ffn_norm.weight"] = (d_model,)
        dims[f"layers.{i}.ffn_gate.weight"] = (d_ff, d_model)
        dims[f"layers.{i}.ffn_up.weight"] = (d_ff, d_model)
        dims[f"layers.{i}.ffn_down.weight"] = (d_model, d_ff)

    b = ContainerBuilder()
    if name is None:
        name = f"tiny-{weight_dtype.name.lower()}-s{seed}"
    b.add_metadata("general.name", TypedValue.string(name))
    b.add_metadata("model.arch", TypedValue.string("llama-like"))
    b.add_metadata("model.n_layers", TypedValue.u32(n_layers))
    b.add_metadata("model.d_model", TypedValue.u32(d_model))
    b.add_metadata("model.n_heads", TypedValue.u32(n_heads))
    b.add_metadata("model.n_kv_heads", TypedValue.u32(n_kv_heads))
    b.add_metadata("model.d_ff", TypedValue.u32(d_ff))
    b.add_metadata("model.vocab_size", TypedValue.u32(vocab_size))
    b.add_metadata("model.ctx_max", TypedValue.u32(ctx_max))
    b.add_metadata("model.rope_theta", TypedValue.f32(10000.0))
    b.add_metadata("model.norm_eps", TypedValue.f32(1e-5))
    b.add_metadata("tokenizer.tokens", TypedValue.array(ValueType.STRING, tokens))
    b.add_metadata("tokenizer.scores", TypedValue.array(ValueType.F32, scores))
    b.add_metadata("tokenizer.types", TypedValue.array(ValueType.U32, types))
    b.add_metadata("tokenizer.bos_id", TypedValue.u32(bos))
    b.add_metadata("tokenizer.eos_id", TypedValue.u32(eos))

    for tensor_name, kind in layer_tensor_names(n_layers):
        shape = dims[tensor_name]
        if kind == "norm":
            w = (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
            b.add_tensor(tensor_name, shape, DType.F32, w.tobytes())
        else:
            scale = 1.0 / np.sqrt(shape[-1])
            w = (scale * rng.standard_normal(shape)).astype(np.float32)
            b.add_tensor(tensor_name, shape, weight_dtype, quantize(w.reshape(-1), weight_dtype))
    return b.finish()


def _round_up(n: int, mult: int) -> int:
    return ((n + mult - 1) // mult) * mult


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="write a random tiny model container")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--kv-heads", type=int, default=2)
    ap.add_argument("--ctx", type=int, default=256)
    ap.add_argument("--vocab", choices=["bytes", "chat"], default="chat")
    ap.add_argument("--dtype", choices=[d.name for d in DType], default="F32")
    args = ap.parse_args(argv)
    c = build_tiny_container(
        seed=args.seed,
        n_layers=args.layers,
        d_model=args.d_model,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        ctx_max=args.ctx,
        vocab=args.vocab,
        weight_dtype=DType[args.dtype],
    )
    save_file(c, args.out)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
