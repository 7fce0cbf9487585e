"""Shared generators for randomized containers used across test modules."""

from __future__ import annotations

import numpy as np

from pocketlm.container import ContainerBuilder, ModelContainer, TypedValue, ValueType
from pocketlm.quant import DType, block_length, encoded_nbytes

_SCALAR_TYPES = [
    ValueType.U8,
    ValueType.I8,
    ValueType.U16,
    ValueType.I16,
    ValueType.U32,
    ValueType.I32,
    ValueType.U64,
    ValueType.I64,
    ValueType.F32,
    ValueType.F64,
    ValueType.BOOL,
    ValueType.STRING,
]


def random_typed_value(rng: np.random.Generator, depth: int = 0) -> TypedValue:
    kind = rng.choice(len(_SCALAR_TYPES) + (1 if depth < 1 else 0))
    if kind == len(_SCALAR_TYPES):  # array
        elem = _SCALAR_TYPES[int(rng.integers(0, len(_SCALAR_TYPES)))]
        values = [random_scalar(rng, elem) for _ in range(int(rng.integers(0, 5)))]
        return TypedValue.array(elem, values)
    t = _SCALAR_TYPES[kind]
    return TypedValue(t, random_scalar(rng, t))


def random_scalar(rng: np.random.Generator, t: ValueType):
    if t == ValueType.BOOL:
        return bool(rng.integers(0, 2))
    if t == ValueType.STRING:
        return "".join(chr(int(c)) for c in rng.integers(0x20, 0x2FF, size=int(rng.integers(0, 12))))
    if t == ValueType.F32:
        # keep exactly representable in f32 for round-trip equality
        return float(np.float32(rng.standard_normal()))
    if t == ValueType.F64:
        return float(rng.standard_normal())
    lo, hi = {
        ValueType.U8: (0, 255),
        ValueType.I8: (-128, 127),
        ValueType.U16: (0, 2**16 - 1),
        ValueType.I16: (-(2**15), 2**15 - 1),
        ValueType.U32: (0, 2**32 - 1),
        ValueType.I32: (-(2**31), 2**31 - 1),
        ValueType.U64: (0, 2**63 - 1),
        ValueType.I64: (-(2**62), 2**62 - 1),
    }[t]
    return int(rng.integers(lo, hi, dtype=np.int64 if lo < 0 else np.uint64))


def random_container(rng: np.random.Generator, n_tensors: int | None = None) -> ModelContainer:
    alignment = int(rng.choice([32, 32, 64, 128]))
    b = ContainerBuilder(alignment=alignment)
    b.add_metadata("general.name", TypedValue.string(f"rand-{int(rng.integers(1e9))}"))
    for i in range(int(rng.integers(0, 6))):
        b.add_metadata(f"x.key{i}", random_typed_value(rng))
    count = int(rng.integers(0, 6)) if n_tensors is None else n_tensors
    for i in range(count):
        dtype = DType(int(rng.choice([0, 1, 2, 3, 4])))
        block = block_length(dtype)
        n_dims = int(rng.integers(1, 5))
        dims = [int(rng.integers(1, 5)) for _ in range(n_dims - 1)]
        dims.append(block * int(rng.integers(1, 4)))
        n_elem = int(np.prod(dims))
        data = rng.integers(0, 256, size=encoded_nbytes(n_elem, dtype), dtype=np.uint8).tobytes()
        b.add_tensor(f"t{i}.{dtype.name.lower()}", tuple(dims), dtype, data)
    return b.finish()
