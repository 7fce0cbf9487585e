"""Logits-to-token sampling with seeded, platform-independent randomness.

Pipeline order is fixed: repetition penalty, temperature, top-k, softmax,
top-p nucleus truncation, then one draw from the surviving distribution.
Temperature 0 short-circuits to argmax (lowest index on ties).

The RNG is xoshiro256** seeded through splitmix64 — a named, portable
generator so the same (logits, params, history, seed) picks the same token
on every platform. State lives in the Xoshiro256 object passed by the
caller; there is no global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULTS = {
    "temperature": 0.8,
    "top_k": 40,
    "top_p": 0.95,
    "repeat_penalty": 1.1,
    "repeat_window": 64,
    "seed": None,  # random if absent
}


class SamplerError(Exception):
    pass


class NonFiniteLogits(SamplerError):
    pass


_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** 1.0; explicit value state, no hidden globals."""

    __slots__ = ("s",)

    def __init__(self, seed: int):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        self.s = s

    @staticmethod
    def _rotl(x: int, k: int) -> int:
        return ((x << k) | (x >> (64 - k))) & _MASK64

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (self._rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = self._rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """53-bit uniform in [0, 1)."""
        return (self.next_u64() >> 11) * (2.0**-53)


@dataclass(frozen=True)
class SamplerParams:
    temperature: float = DEFAULTS["temperature"]
    top_k: int = DEFAULTS["top_k"]  # 0 disables
    top_p: float = DEFAULTS["top_p"]
    repeat_penalty: float = DEFAULTS["repeat_penalty"]
    repeat_window: int = DEFAULTS["repeat_window"]
    seed: int | None = DEFAULTS["seed"]

    def __post_init__(self):
        if self.temperature < 0:
            raise SamplerError("temperature must be >= 0")
        if self.top_k < 0:
            raise SamplerError("top_k must be 0 (off) or >= 1")
        if not 0 < self.top_p <= 1:
            raise SamplerError("top_p must be in (0, 1]")
        if self.repeat_penalty < 1:
            raise SamplerError("repeat_penalty must be >= 1")
        if self.repeat_window < 0:
            raise SamplerError("repeat_window must be >= 0")


def sample(
    logits: np.ndarray,
    params: SamplerParams,
    history: list[int],
    rng: Xoshiro256,
) -> int:
    """Pick the next token id. Pure given (logits, params, history, rng state)."""
    logits = np.asarray(logits, dtype=np.float32)
    if not np.isfinite(logits).all():
        raise NonFiniteLogits("logits contain NaN/Inf")
    work = logits.astype(np.float64)

    # (1) repetition penalty over the trailing window, once per distinct token
    if params.repeat_penalty > 1.0 and params.repeat_window > 0 and history:
        recent = history[-params.repeat_window :]
        for t in set(recent):
            if work[t] > 0:
                work[t] /= params.repeat_penalty
            else:
                work[t] *= params.repeat_penalty

    # T = 0: greedy, lowest index wins ties
    if params.temperature == 0:
        return int(np.argmax(work))

    # (2) temperature
    work /= params.temperature

    # (3) top-k truncation (stable order: ties keep lowest ids)
    order = np.argsort(-work, kind="stable")
    if params.top_k and params.top_k < order.size:
        order = order[: params.top_k]

    # (4) softmax over the kept candidates
    kept = work[order]
    kept -= kept.max()
    probs = np.exp(kept)
    probs /= probs.sum()

    # (5) nucleus: smallest descending-probability prefix with mass >= top_p
    if params.top_p < 1.0:
        cum = np.cumsum(probs)
        cut = int(np.searchsorted(cum, params.top_p, side="left"))
        cut = min(cut, probs.size - 1)
        order = order[: cut + 1]
        probs = probs[: cut + 1]
        probs /= probs.sum()

    # (6) one inverse-CDF draw
    r = rng.uniform()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, r, side="right"))
    idx = min(idx, probs.size - 1)
    return int(order[idx])
