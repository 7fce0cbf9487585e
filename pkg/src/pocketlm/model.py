"""Decoder-only transformer engine: weights, KV-cached sessions, generation.

The architecture is the usual pre-norm rotary decoder: per layer
  rmsnorm -> q/k/v projections -> rope(q, k) -> append k,v to cache
  -> causal attention (grouped-query head sharing) -> output projection
  -> residual -> rmsnorm -> silu(gate) * up -> down -> residual
then a final rmsnorm and the vocabulary head.

Weights are immutable and shared; a Session owns its mutable KV cache and
must not be driven from two threads at once. Distinct sessions over the
same Model are fully independent.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, ModelContainer, get_tensor
from .kernels import TensorView, matvec, rmsnorm, rope, silu, softmax_in_place
from .quant import DType
from .sampler import SamplerParams, Xoshiro256, sample
from .tokenizer import StreamingDecoder, Vocabulary, decode_bytes, vocabulary_from_metadata


class ModelError(Exception):
    pass


class MissingMetadata(ModelError):
    pass


class MissingTensor(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class WrongDType(ModelError):
    pass


class ContextOverflow(ModelError):
    pass


class TokenOutOfRange(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    ctx_max: int
    rope_theta: float
    norm_eps: float

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "ctx_max"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ShapeMismatch("d_model must divide evenly into n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ShapeMismatch("n_heads must be a multiple of n_kv_heads")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ShapeMismatch("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


_META_KEYS = {
    "n_layers": "model.n_layers",
    "d_model": "model.d_model",
    "n_heads": "model.n_heads",
    "n_kv_heads": "model.n_kv_heads",
    "d_ff": "model.d_ff",
    "vocab_size": "model.vocab_size",
    "ctx_max": "model.ctx_max",
}


def config_from_metadata(container: ModelContainer) -> ModelConfig:
    try:
        arch = container.meta_str("model.arch")
    except ContainerError:
        raise MissingMetadata("model.arch")
    if arch != "llama-like":
        raise MissingMetadata(f"unsupported model.arch {arch!r}")
    vals = {}
    for attr, key in _META_KEYS.items():
        try:
            vals[attr] = container.meta_int(key)
        except ContainerError:
            raise MissingMetadata(key)
    try:
        theta = container.meta_float("model.rope_theta")
        eps = container.meta_float("model.norm_eps")
    except ContainerError as e:
        raise MissingMetadata(str(e))
    return ModelConfig(rope_theta=theta, norm_eps=eps, **vals)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: TensorView
    wk: TensorView
    wv: TensorView
    wo: TensorView
    ffn_norm: np.ndarray
    w_gate: TensorView
    w_up: TensorView
    w_down: TensorView


@dataclass
class Weights:
    tok_embed: TensorView
    layers: list[LayerWeights]
    final_norm: np.ndarray
    output: TensorView


def layer_tensor_names(n_layers: int) -> list[tuple[str, str]]:
    """(tensor name, kind) pairs the loader expects, in order."""
    names = [("tok_embed.weight", "embed")]
    for i in range(n_layers):
        names += [
            (f"layers.{i}.attn_norm.weight", "norm"),
            (f"layers.{i}.attn_q.weight", "proj"),
            (f"layers.{i}.attn_k.weight", "proj"),
            (f"layers.{i}.attn_v.weight", "proj"),
            (f"layers.{i}.attn_out.weight", "proj"),
            (f"layers.{i}.ffn_norm.weight", "norm"),
            (f"layers.{i}.ffn_gate.weight", "proj"),
            (f"layers.{i}.ffn_up.weight", "proj"),
            (f"layers.{i}.ffn_down.weight", "proj"),
        ]
    names += [("final_norm.weight", "norm"), ("output.weight", "proj")]
    return names


def _expected_dims(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    kv_dim = cfg.n_kv_heads * cfg.head_dim
    dims: dict[str, tuple[int, ...]] = {
        "tok_embed.weight": (cfg.vocab_size, cfg.d_model),
        "final_norm.weight": (cfg.d_model,),
        "output.weight": (cfg.vocab_size, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        dims[f"layers.{i}.attn_norm.weight"] = (cfg.d_model,)
        dims[f"layers.{i}.attn_q.weight"] = (cfg.d_model, cfg.d_model)
        dims[f"layers.{i}.attn_k.weight"] = (kv_dim, cfg.d_model)
        dims[f"layers.{i}.attn_v.weight"] = (kv_dim, cfg.d_model)
        dims[f"layers.{i}.attn_out.weight"] = (cfg.d_model, cfg.d_model)
        dims[f"layers.{i}.ffn_norm.weight"] = (cfg.d_model,)
        dims[f"layers.{i}.ffn_gate.weight"] = (cfg.d_ff, cfg.d_model)
        dims[f"layers.{i}.ffn_up.weight"] = (cfg.d_ff, cfg.d_model)
        dims[f"layers.{i}.ffn_down.weight"] = (cfg.d_model, cfg.d_ff)
    return dims


def vocabulary_from_container(container: ModelContainer) -> Vocabulary:
    try:
        tokens = container.meta_array("tokenizer.tokens")
        scores = container.meta_array("tokenizer.scores")
        types = container.meta_array("tokenizer.types")
        bos = container.meta_int("tokenizer.bos_id")
        eos = container.meta_int("tokenizer.eos_id")
    except ContainerError as e:
        raise MissingMetadata(str(e))
    return vocabulary_from_metadata(tokens, scores, types, bos, eos)


class Model:
    """Loaded weights + config + vocabulary; immutable and thread-shareable."""

    def __init__(self, config: ModelConfig, weights: Weights, vocab: Vocabulary, name: str = "model"):
        self.config = config
        self.weights = weights
        self.vocab = vocab
        self.name = name
        self.weight_bytes = 0
        self.weight_elements = 0
        self.dtype_mix: dict[str, int] = {}

    @property
    def effective_bits_per_weight(self) -> float:
        if not self.weight_elements:
            return 0.0
        return 8.0 * self.weight_bytes / self.weight_elements

    def new_session(self, ctx: int | None = None) -> "Session":
        ctx = self.config.ctx_max if ctx is None else ctx
        if not 1 <= ctx <= self.config.ctx_max:
            raise ShapeMismatch(f"session ctx {ctx} outside 1..{self.config.ctx_max}")
        return Session(self, ctx)

    # ------------------------------------------------------------------
    # forward pass
    # ------------------------------------------------------------------

    def forward(self, session: "Session", token: int) -> np.ndarray:
        cfg = self.config
        if session.pos >= session.ctx:
            raise ContextOverflow(f"context of {session.ctx} tokens is full")
        if not 0 <= token < cfg.vocab_size:
            raise TokenOutOfRange(f"token {token} outside vocab of {cfg.vocab_size}")
        pos = session.pos
        hd = cfg.head_dim
        inv_sqrt_hd = np.float32(1.0 / math.sqrt(hd))

        x = self.weights.tok_embed.row_f32(token).copy()
        for li, lw in enumerate(self.weights.layers):
            xn = rmsnorm(x, lw.attn_norm, cfg.norm_eps)
            q = rope(matvec(lw.wq, xn).reshape(cfg.n_heads, hd), pos, cfg.rope_theta)
            k = rope(matvec(lw.wk, xn).reshape(cfg.n_kv_heads, hd), pos, cfg.rope_theta)
            v = matvec(lw.wv, xn).reshape(cfg.n_kv_heads, hd)
            session.k_cache[li][pos] = k
            session.v_cache[li][pos] = v
            keys = session.k_cache[li][: pos + 1]  # (t, n_kv, hd); causal by construction
            vals = session.v_cache[li][: pos + 1]
            att = np.empty((cfg.n_heads, hd), dtype=np.float32)
            for h in range(cfg.n_heads):
                kvh = h * cfg.n_kv_heads // cfg.n_heads
                scores = (keys[:, kvh, :] @ q[h]) * inv_sqrt_hd
                softmax_in_place(scores)
                att[h] = scores @ vals[:, kvh, :]
            x = x + matvec(lw.wo, att.reshape(-1))
            xn = rmsnorm(x, lw.ffn_norm, cfg.norm_eps)
            gate = silu(matvec(lw.w_gate, xn))
            up = matvec(lw.w_up, xn)
            x = x + matvec(lw.w_down, gate * up)

        xn = rmsnorm(x, self.weights.final_norm, cfg.norm_eps)
        logits = matvec(self.weights.output, xn)
        if not np.isfinite(logits).all():
            raise ModelError("non-finite logits; weights are corrupt or unstable")
        session.pos += 1
        session.token_history.append(token)
        return logits

    def prefill(self, session: "Session", tokens: list[int]) -> np.ndarray:
        if not tokens:
            raise ModelError("prefill requires at least one token")
        if session.pos + len(tokens) > session.ctx:
            raise ContextOverflow(
                f"{len(tokens)} tokens do not fit: {session.pos}/{session.ctx} used"
            )
        logits = None
        for t in tokens:
            logits = self.forward(session, t)
        return logits

    # ------------------------------------------------------------------
    # generation loop
    # ------------------------------------------------------------------

    def generate(
        self,
        session: "Session",
        prompt_tokens: list[int],
        params: SamplerParams,
        stops: "StopConditions",
        on_token=None,
    ) -> "GenerationResult":
        """Prefill then sample until a stop condition fires.

        ``on_token(token_id, new_text)`` runs per sampled token with the
        newly safe decoded text (may lag while a stop pattern or UTF-8
        sequence is still open); returning False cancels at the next
        token boundary.
        """
        vocab = self.vocab
        logits = self.prefill(session, prompt_tokens)
        seed = params.seed if params.seed is not None else secrets.randbits(63)
        rng = Xoshiro256(seed)
        stop_bytes = [s.encode("utf-8") for s in stops.stop_texts if s]
        max_hold = max((len(s) for s in stop_bytes), default=0)

        tokens: list[int] = []
        acc = b""
        token_ends: list[int] = []
        emitted = 0
        decoder = StreamingDecoder(vocab)
        pieces: list[str] = []
        finish = None
        stop_at: int | None = None

        def emit_until(limit: int) -> str:
            nonlocal emitted
            if limit <= emitted:
                return ""
            text = decoder.feed_bytes(acc[emitted:limit])
            emitted = limit
            if text:
                pieces.append(text)
            return text

        while True:
            if stops.max_tokens is not None and len(tokens) >= stops.max_tokens:
                finish = "length"
                break
            t = sample(logits, params, session.token_history, rng)
            if t == vocab.eos_id:
                finish = "eos"
                break
            tokens.append(t)
            piece = decode_bytes(vocab, [t])
            acc += piece
            token_ends.append(len(acc))

            if stop_bytes:
                start = max(0, len(acc) - len(piece) - max_hold + 1)
                hit = _find_stop(acc, start, stop_bytes)
                if hit is not None:
                    stop_at = hit
                    keep = sum(1 for e in token_ends if e <= hit)
                    tokens = tokens[:keep]
                    finish = "stop_text"
                    break

            hold = _holdback(acc, stop_bytes, max_hold)
            new_text = emit_until(len(acc) - hold)
            if on_token is not None and on_token(t, new_text) is False:
                finish = "cancelled"
                break
            if stops.max_tokens is not None and len(tokens) >= stops.max_tokens:
                # done: the final token is not forwarded, so a follow-up
                # generate([last_token], ...) continues the same trajectory
                finish = "length"
                break
            if session.pos >= session.ctx:
                finish = "context_full"
                break
            logits = self.forward(session, t)

        limit = stop_at if stop_at is not None else len(acc)
        emit_until(limit)
        tail = decoder.flush()
        if tail:
            pieces.append(tail)
        return GenerationResult(tokens, finish, "".join(pieces), seed)


def _find_stop(acc: bytes, start: int, stop_bytes: list[bytes]) -> int | None:
    best = None
    for pat in stop_bytes:
        p = acc.find(pat, start)
        if p != -1 and (best is None or p < best):
            best = p
    return best


def _holdback(acc: bytes, stop_bytes: list[bytes], max_hold: int) -> int:
    """Longest suffix of acc that is a proper prefix of any stop pattern."""
    limit = min(len(acc), max_hold - 1) if max_hold else 0
    for n in range(limit, 0, -1):
        tail = acc[-n:]
        if any(pat.startswith(tail) for pat in stop_bytes):
            return n
    return 0


@dataclass(frozen=True)
class StopConditions:
    max_tokens: int | None = None
    stop_texts: tuple[str, ...] = ()


@dataclass
class GenerationResult:
    tokens: list[int]
    finish_reason: str  # eos | stop_text | length | context_full | cancelled
    text: str
    seed: int


class Session:
    """Mutable per-conversation state: KV cache, position, token history."""

    def __init__(self, model: Model, ctx: int):
        cfg = model.config
        self.model = model
        self.ctx = ctx
        self.pos = 0
        self.token_history: list[int] = []
        shape = (ctx, cfg.n_kv_heads, cfg.head_dim)
        self.k_cache = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]
        self.v_cache = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]

    @property
    def kv_bytes(self) -> int:
        cfg = self.model.config
        return cfg.n_layers * 2 * self.ctx * cfg.n_kv_heads * cfg.head_dim * 4

    def truncate(self, n: int) -> None:
        """Rewind to the first n consumed tokens; cache entries past n go stale."""
        if not 0 <= n <= self.pos:
            raise ShapeMismatch(f"cannot truncate to {n}, position is {self.pos}")
        self.pos = n
        del self.token_history[n:]

    def reset(self) -> None:
        self.truncate(0)


def load_model(container: ModelContainer) -> Model:
    """Validate and wire up all tensors; returns the ready-to-run model."""
    cfg = config_from_metadata(container)
    vocab = vocabulary_from_container(container)
    if vocab.size != cfg.vocab_size:
        raise ShapeMismatch(
            f"tokenizer has {vocab.size} tokens but model.vocab_size is {cfg.vocab_size}"
        )
    expected = _expected_dims(cfg)

    views: dict[str, TensorView] = {}
    norms: dict[str, np.ndarray] = {}
    total_bytes = 0
    total_elems = 0
    mix: dict[str, int] = {}
    for name, kind in layer_tensor_names(cfg.n_layers):
        try:
            desc, raw = get_tensor(container, name)
        except ContainerError:
            raise MissingTensor(name)
        if desc.dims != expected[name]:
            raise ShapeMismatch(
                f"tensor {name}: dims {desc.dims}, expected {expected[name]}"
            )
        total_bytes += desc.nbytes
        total_elems += desc.n_elements
        mix[desc.dtype.name] = mix.get(desc.dtype.name, 0) + 1
        if kind == "norm":
            if desc.dtype != DType.F32:
                raise WrongDType(f"norm tensor {name} must be F32, found {desc.dtype.name}")
            norms[name] = np.frombuffer(raw, dtype=np.float32).copy()
        else:
            views[name] = TensorView(desc.dtype, desc.dims, raw)

    layers = [
        LayerWeights(
            attn_norm=norms[f"layers.{i}.attn_norm.weight"],
            wq=views[f"layers.{i}.attn_q.weight"],
            wk=views[f"layers.{i}.attn_k.weight"],
            wv=views[f"layers.{i}.attn_v.weight"],
            wo=views[f"layers.{i}.attn_out.weight"],
            ffn_norm=norms[f"layers.{i}.ffn_norm.weight"],
            w_gate=views[f"layers.{i}.ffn_gate.weight"],
            w_up=views[f"layers.{i}.ffn_up.weight"],
            w_down=views[f"layers.{i}.ffn_down.weight"],
        )
        for i in range(cfg.n_layers)
    ]
    weights = Weights(
        tok_embed=views["tok_embed.weight"],
        layers=layers,
        final_norm=norms["final_norm.weight"],
        output=views["output.weight"],
    )
    name = "model"
    if "general.name" in container.metadata:
        name = container.meta_str("general.name")
    model = Model(cfg, weights, vocab, name=name)
    model.weight_bytes = total_bytes
    model.weight_elements = total_elems
    model.dtype_mix = mix
    return model
