"""Byte-fallback BPE tokenizer driven by container vocabulary metadata.

Encoding starts from the 256 single-byte tokens (guaranteed present, so
encoding is total on any UTF-8 input) and greedily merges the adjacent
pair whose concatenation exists in the vocabulary with the highest score,
leftmost on ties, until no merge applies.

Byte tokens are spelled ``<0xNN>`` in the container's text array; control
tokens are skipped during decoding. Streaming decode buffers incomplete
UTF-8 sequences so multi-byte characters split across tokens never emit
replacement characters mid-stream.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import IntEnum


class TokenizerError(Exception):
    pass


class IdOutOfRange(TokenizerError):
    pass


class InvalidVocabulary(TokenizerError):
    pass


class TokenType(IntEnum):
    NORMAL = 0
    BYTE = 1
    CONTROL = 2


def byte_token_text(b: int) -> str:
    return f"<0x{b:02X}>"


@dataclass
class Vocabulary:
    tokens: list[bytes]  # raw byte sequence per token
    scores: list[float]
    types: list[TokenType]
    bos_id: int
    eos_id: int

    def __post_init__(self):
        n = len(self.tokens)
        if not (len(self.scores) == len(self.types) == n):
            raise InvalidVocabulary("tokens/scores/types lengths differ")
        if not (0 <= self.bos_id < n and 0 <= self.eos_id < n):
            raise InvalidVocabulary("bos/eos id out of bounds")
        self._byte_ids = [-1] * 256
        merges: dict[bytes, tuple[float, int]] = {}
        for i, (tok, score, typ) in enumerate(zip(self.tokens, self.scores, self.types)):
            if typ == TokenType.BYTE:
                if len(tok) != 1:
                    raise InvalidVocabulary(f"byte token {i} has length {len(tok)}")
                self._byte_ids[tok[0]] = i
            elif typ == TokenType.NORMAL:
                # merge table: highest score wins, lowest id on ties
                prev = merges.get(tok)
                if prev is None or (score, -i) > prev:
                    merges[tok] = (score, -i)
        missing = [b for b, i in enumerate(self._byte_ids) if i < 0]
        if missing:
            raise InvalidVocabulary(
                f"{len(missing)} single-byte tokens missing (first: {missing[0]:#04x}); "
                "byte fallback requires full coverage"
            )
        self._merges = {tok: (-neg_id, score) for tok, (score, neg_id) in merges.items()}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def byte_id(self, b: int) -> int:
        return self._byte_ids[b]

    def lookup_merge(self, seq: bytes) -> tuple[int, float] | None:
        return self._merges.get(seq)

    def is_control(self, token_id: int) -> bool:
        return self.types[token_id] == TokenType.CONTROL


def vocabulary_from_metadata(
    tokens: list[str], scores: list[float], types: list[int], bos_id: int, eos_id: int
) -> Vocabulary:
    """Build a vocabulary from the container's text/score/type arrays."""
    raw: list[bytes] = []
    tok_types: list[TokenType] = []
    for text, typ in zip(tokens, types):
        try:
            t = TokenType(typ)
        except ValueError:
            raise InvalidVocabulary(f"unknown token type tag {typ}")
        if t == TokenType.BYTE:
            if not (len(text) == 6 and text.startswith("<0x") and text.endswith(">")):
                raise InvalidVocabulary(f"byte token spelled {text!r}, expected <0xNN>")
            raw.append(bytes([int(text[3:5], 16)]))
        else:
            raw.append(text.encode("utf-8"))
        tok_types.append(t)
    return Vocabulary(raw, [float(s) for s in scores], tok_types, int(bos_id), int(eos_id))


# ---------------------------------------------------------------------------
# encoding: greedy highest-score adjacent merge over a linked token list
# ---------------------------------------------------------------------------


def encode(vocab: Vocabulary, text: str, add_bos: bool = False) -> list[int]:
    """Tokenize UTF-8 text; never fails thanks to byte fallback."""
    data = text.encode("utf-8")
    ids = [vocab.byte_id(b) for b in data]
    seqs = [bytes([b]) for b in data]
    n = len(ids)
    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    alive = [True] * n

    heap: list[tuple[float, int, int, bytes]] = []

    def push(i: int):
        j = nxt[i]
        if j >= n:
            return
        merged = seqs[i] + seqs[j]
        hit = vocab.lookup_merge(merged)
        if hit is not None:
            tok_id, score = hit
            heapq.heappush(heap, (-score, i, tok_id, merged))

    for i in range(n - 1):
        push(i)

    while heap:
        _, i, tok_id, merged = heapq.heappop(heap)
        j = nxt[i] if i < n else n
        # stale entries: partner changed or nodes already merged away
        if i >= n or not alive[i] or j >= n or not alive[j] or seqs[i] + seqs[j] != merged:
            continue
        seqs[i] = merged
        ids[i] = tok_id
        alive[j] = False
        nxt[i] = nxt[j]
        if nxt[j] < n:
            prev[nxt[j]] = i
        push(i)
        if prev[i] >= 0:
            push(prev[i])

    out = [ids[i] for i in range(n) if alive[i]]
    if add_bos:
        out.insert(0, vocab.bos_id)
    return out


def decode(vocab: Vocabulary, ids: list[int]) -> str:
    """Concatenate token bytes (controls omitted); replacement chars only
    for byte sequences that are invalid UTF-8 in their final form."""
    return decode_bytes(vocab, ids).decode("utf-8", errors="replace")


def decode_bytes(vocab: Vocabulary, ids: list[int]) -> bytes:
    parts = []
    for t in ids:
        if not 0 <= t < vocab.size:
            raise IdOutOfRange(f"token id {t} outside vocabulary of {vocab.size}")
        if vocab.is_control(t):
            continue
        parts.append(vocab.tokens[t])
    return b"".join(parts)


class StreamingDecoder:
    """Incremental decoder that withholds incomplete UTF-8 tail bytes.

    feed() returns only text whose byte encoding is complete; flush()
    surfaces whatever remains, using replacement characters if the stream
    ended mid-character.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._buf = b""

    def feed(self, token_id: int) -> str:
        self._buf += decode_bytes(self.vocab, [token_id])
        return self._drain()

    def feed_bytes(self, data: bytes) -> str:
        self._buf += data
        return self._drain()

    def _drain(self) -> str:
        cut = len(self._buf) - _incomplete_utf8_tail(self._buf)
        out, self._buf = self._buf[:cut], self._buf[cut:]
        return out.decode("utf-8", errors="replace")

    def flush(self) -> str:
        out, self._buf = self._buf, b""
        return out.decode("utf-8", errors="replace")


def _incomplete_utf8_tail(buf: bytes) -> int:
    """Length of a trailing incomplete multi-byte sequence (0 if none)."""
    if not buf:
        return 0
    # scan back over up to 3 continuation bytes
    i = len(buf) - 1
    back = 0
    while i >= 0 and back < 3 and (buf[i] & 0xC0) == 0x80:
        i -= 1
        back += 1
    if i < 0:
        return 0  # lone continuation bytes: invalid, emit as-is
    lead = buf[i]
    if lead >= 0xF0:
        need = 4
    elif lead >= 0xE0:
        need = 3
    elif lead >= 0xC0:
        need = 2
    else:
        return 0  # ASCII or stray continuation handled above
    have = back + 1
    return have if have < need else 0
