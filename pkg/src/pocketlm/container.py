"""Binary model container: header, typed metadata, tensor directory, payload.

File layout, all little-endian:

  magic   b"PLM1"
  version u32  (currently 1)
  n_meta  u64
  n_tens  u64
  metadata entries:   key (u64 len + UTF-8) | type tag u32 | value
  tensor directory:   name (u64 len + UTF-8) | n_dims u32 | dims u64*n
                      | dtype u32 | offset u64
  zero padding up to `alignment`
  payload (every tensor offset is payload-relative and alignment-padded)

Alignment defaults to 32 bytes and may be overridden through the metadata
key ``general.alignment``; all other keys are free-form and preserved in
order. A parsed container is immutable and safe to share across threads.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .quant import DType, block_length, encoded_nbytes

MAGIC = b"PLM1"
VERSION = 1
DEFAULT_ALIGNMENT = 32
ALIGNMENT_KEY = "general.alignment"
MAX_DIMS = 4


class ContainerError(Exception):
    """Base class for every container parse/serialize failure."""


class BadMagic(ContainerError):
    pass


class UnsupportedVersion(ContainerError):
    pass


class Truncated(ContainerError):
    """An offset or length field points past the end of the data."""


class MisalignedTensor(ContainerError):
    pass


class DuplicateTensorName(ContainerError):
    pass


class InvalidContainer(ContainerError):
    """Structurally impossible field values (bad tags, dims, overlaps, UTF-8)."""


class InvariantViolation(ContainerError):
    """Caller-supplied container is internally inconsistent."""


class NotFound(ContainerError, KeyError):
    pass


class ValueType(enum.IntEnum):
    U8 = 0
    I8 = 1
    U16 = 2
    I16 = 3
    U32 = 4
    I32 = 5
    U64 = 6
    I64 = 7
    F32 = 8
    F64 = 9
    BOOL = 10
    STRING = 11
    ARRAY = 12


_SCALAR_FMT = {
    ValueType.U8: "<B",
    ValueType.I8: "<b",
    ValueType.U16: "<H",
    ValueType.I16: "<h",
    ValueType.U32: "<I",
    ValueType.I32: "<i",
    ValueType.U64: "<Q",
    ValueType.I64: "<q",
    ValueType.F32: "<f",
    ValueType.F64: "<d",
}

_INT_RANGES = {
    ValueType.U8: (0, 2**8 - 1),
    ValueType.I8: (-(2**7), 2**7 - 1),
    ValueType.U16: (0, 2**16 - 1),
    ValueType.I16: (-(2**15), 2**15 - 1),
    ValueType.U32: (0, 2**32 - 1),
    ValueType.I32: (-(2**31), 2**31 - 1),
    ValueType.U64: (0, 2**64 - 1),
    ValueType.I64: (-(2**63), 2**63 - 1),
}


@dataclass(frozen=True)
class TypedValue:
    """A tagged metadata value; arrays carry their element tag."""

    type: ValueType
    value: object
    elem_type: ValueType | None = None

    @staticmethod
    def u32(v: int) -> "TypedValue":
        return TypedValue(ValueType.U32, v)

    @staticmethod
    def u64(v: int) -> "TypedValue":
        return TypedValue(ValueType.U64, v)

    @staticmethod
    def f32(v: float) -> "TypedValue":
        return TypedValue(ValueType.F32, v)

    @staticmethod
    def boolean(v: bool) -> "TypedValue":
        return TypedValue(ValueType.BOOL, bool(v))

    @staticmethod
    def string(v: str) -> "TypedValue":
        return TypedValue(ValueType.STRING, v)

    @staticmethod
    def array(elem_type: ValueType, values: list) -> "TypedValue":
        return TypedValue(ValueType.ARRAY, list(values), elem_type)


@dataclass(frozen=True)
class TensorDescriptor:
    name: str
    dims: tuple[int, ...]  # row-major, innermost last
    dtype: DType
    offset: int  # bytes from payload start

    @property
    def n_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return encoded_nbytes(self.n_elements, self.dtype)


@dataclass
class ModelContainer:
    version: int
    metadata: dict[str, TypedValue]
    tensors: list[TensorDescriptor]
    alignment: int
    payload: bytes

    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {t.name: i for i, t in enumerate(self.tensors)}

    def tensor(self, name: str) -> tuple[TensorDescriptor, memoryview]:
        return get_tensor(self, name)

    def meta_int(self, key: str) -> int:
        tv = self._require(key)
        if tv.type not in _INT_RANGES:
            raise InvalidContainer(f"metadata key {key!r} is not an integer")
        return int(tv.value)

    def meta_float(self, key: str) -> float:
        tv = self._require(key)
        if tv.type not in (ValueType.F32, ValueType.F64):
            raise InvalidContainer(f"metadata key {key!r} is not a float")
        return float(tv.value)

    def meta_str(self, key: str) -> str:
        tv = self._require(key)
        if tv.type != ValueType.STRING:
            raise InvalidContainer(f"metadata key {key!r} is not a string")
        return str(tv.value)

    def meta_array(self, key: str) -> list:
        tv = self._require(key)
        if tv.type != ValueType.ARRAY:
            raise InvalidContainer(f"metadata key {key!r} is not an array")
        return list(tv.value)

    def _require(self, key: str) -> TypedValue:
        if key not in self.metadata:
            raise NotFound(f"metadata key {key!r} not present")
        return self.metadata[key]


def get_tensor(container: ModelContainer, name: str) -> tuple[TensorDescriptor, memoryview]:
    """Descriptor plus a zero-copy byte view of exactly the encoded size."""
    idx = container._index.get(name)
    if idx is None:
        raise NotFound(f"tensor {name!r} not present")
    desc = container.tensors[idx]
    return desc, memoryview(container.payload)[desc.offset : desc.offset + desc.nbytes]


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


class _Cursor:
    """Bounds-checked little-endian reader; every overrun raises Truncated."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        view = memoryview(self.data)[self.pos : self.pos + n]
        self.pos += n
        return view

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        n = self.u64()
        raw = self.take(n)
        try:
            return str(raw, "utf-8")
        except UnicodeDecodeError as e:
            raise InvalidContainer(f"invalid UTF-8 text at offset {self.pos - n}") from e


def _read_value(cur: _Cursor, tag_int: int) -> TypedValue:
    try:
        tag = ValueType(tag_int)
    except ValueError:
        raise InvalidContainer(f"unknown metadata type tag {tag_int}")
    if tag in _SCALAR_FMT:
        fmt = _SCALAR_FMT[tag]
        (v,) = struct.unpack(fmt, cur.take(struct.calcsize(fmt)))
        return TypedValue(tag, v)
    if tag == ValueType.BOOL:
        b = cur.take(1)[0]
        if b not in (0, 1):
            raise InvalidContainer(f"boolean byte must be 0 or 1, got {b}")
        return TypedValue(tag, bool(b))
    if tag == ValueType.STRING:
        return TypedValue(tag, cur.string())
    # array: elem tag + count + packed elements
    elem_int = cur.u32()
    try:
        elem = ValueType(elem_int)
    except ValueError:
        raise InvalidContainer(f"unknown array element tag {elem_int}")
    count = cur.u64()
    if count > cur.remaining():  # every element costs >= 1 byte
        raise Truncated(f"array count {count} exceeds remaining {cur.remaining()} bytes")
    values = []
    for _ in range(count):
        values.append(_read_value(cur, elem_int).value if elem != ValueType.ARRAY
                      else _read_value(cur, elem_int))
    return TypedValue(ValueType.ARRAY, values, elem)


def read_container(data: bytes | bytearray | memoryview) -> ModelContainer:
    """Parse and fully validate a container byte stream.

    The returned container's payload references the input buffer without
    copying where possible.
    """
    data = bytes(data) if not isinstance(data, bytes) else data
    cur = _Cursor(data)
    magic = bytes(cur.take(4))
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    version = cur.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version} not supported")
    n_meta = cur.u64()
    n_tensors = cur.u64()
    if n_meta > len(data) or n_tensors > len(data):
        raise Truncated("entry counts exceed file size")

    metadata: dict[str, TypedValue] = {}
    for _ in range(n_meta):
        key = cur.string()
        if key in metadata:
            raise InvalidContainer(f"duplicate metadata key {key!r}")
        metadata[key] = _read_value(cur, cur.u32())

    alignment = DEFAULT_ALIGNMENT
    if ALIGNMENT_KEY in metadata:
        tv = metadata[ALIGNMENT_KEY]
        if tv.type not in _INT_RANGES:
            raise InvalidContainer(f"{ALIGNMENT_KEY} must be an integer")
        alignment = int(tv.value)
    if alignment < 1 or alignment & (alignment - 1):
        raise InvalidContainer(f"alignment {alignment} is not a power of two")

    tensors: list[TensorDescriptor] = []
    names: set[str] = set()
    for _ in range(n_tensors):
        name = cur.string()
        if name in names:
            raise DuplicateTensorName(f"tensor {name!r} appears twice")
        names.add(name)
        n_dims = cur.u32()
        if not 1 <= n_dims <= MAX_DIMS:
            raise InvalidContainer(f"tensor {name!r}: n_dims {n_dims} outside 1..{MAX_DIMS}")
        dims = tuple(cur.u64() for _ in range(n_dims))
        if any(d < 1 for d in dims):
            raise InvalidContainer(f"tensor {name!r}: dims must be positive, got {dims}")
        dtype_int = cur.u32()
        try:
            dtype = DType(dtype_int)
        except ValueError:
            raise InvalidContainer(f"tensor {name!r}: unknown dtype code {dtype_int}")
        offset = cur.u64()
        tensors.append(TensorDescriptor(name, dims, dtype, offset))

    # skip zero padding to alignment, payload is the rest of the file
    pad = (-cur.pos) % alignment
    cur.take(pad)
    payload = data[cur.pos :]

    _validate_tensors(tensors, alignment, len(payload))
    return ModelContainer(version, metadata, tensors, alignment, payload)


def _validate_tensors(tensors: list[TensorDescriptor], alignment: int, payload_len: int) -> None:
    regions = []
    for t in tensors:
        if t.dims[-1] % block_length(t.dtype):
            raise InvalidContainer(
                f"tensor {t.name!r}: innermost dim {t.dims[-1]} not a multiple of "
                f"{t.dtype.name} block length"
            )
        if t.offset % alignment:
            raise MisalignedTensor(
                f"tensor {t.name!r}: offset {t.offset} not a multiple of alignment {alignment}"
            )
        end = t.offset + t.nbytes
        if end > payload_len:
            raise Truncated(
                f"tensor {t.name!r}: data [{t.offset}, {end}) exceeds payload size {payload_len}"
            )
        regions.append((t.offset, end, t.name))
    regions.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(regions, regions[1:]):
        if s1 < e0:
            raise InvalidContainer(f"tensors {n0!r} and {n1!r} overlap")


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------


def _write_value(out: bytearray, tv: TypedValue) -> None:
    if tv.type in _SCALAR_FMT:
        if tv.type in _INT_RANGES:
            lo, hi = _INT_RANGES[tv.type]
            if not lo <= int(tv.value) <= hi:
                raise InvariantViolation(f"{tv.value} out of range for {tv.type.name}")
        out += struct.pack(_SCALAR_FMT[tv.type], tv.value)
    elif tv.type == ValueType.BOOL:
        out += bytes([1 if tv.value else 0])
    elif tv.type == ValueType.STRING:
        raw = str(tv.value).encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
    elif tv.type == ValueType.ARRAY:
        if tv.elem_type is None:
            raise InvariantViolation("array value missing element type")
        out += struct.pack("<IQ", int(tv.elem_type), len(tv.value))
        for v in tv.value:
            if tv.elem_type == ValueType.ARRAY:
                if not isinstance(v, TypedValue) or v.type != ValueType.ARRAY:
                    raise InvariantViolation("nested array elements must be array TypedValues")
                _write_value(out, v)
            else:
                _write_value(out, TypedValue(tv.elem_type, v))
    else:
        raise InvariantViolation(f"cannot serialize value type {tv.type!r}")


def write_container(container: ModelContainer) -> bytes:
    """Serialize; the exact inverse of :func:`read_container` for valid input."""
    if container.version != VERSION:
        raise InvariantViolation(f"can only write version {VERSION}")
    alignment = container.alignment
    if alignment < 1 or alignment & (alignment - 1):
        raise InvariantViolation(f"alignment {alignment} is not a power of two")
    if ALIGNMENT_KEY in container.metadata:
        declared = container.metadata[ALIGNMENT_KEY].value
        if int(declared) != alignment:
            raise InvariantViolation(
                f"{ALIGNMENT_KEY}={declared} disagrees with container alignment {alignment}"
            )
    elif alignment != DEFAULT_ALIGNMENT:
        raise InvariantViolation(
            f"non-default alignment {alignment} requires metadata key {ALIGNMENT_KEY}"
        )
    try:
        _validate_tensors(container.tensors, alignment, len(container.payload))
    except ContainerError as e:
        raise InvariantViolation(str(e)) from e

    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQQ", container.version, len(container.metadata), len(container.tensors))
    for key, tv in container.metadata.items():
        raw = key.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<I", int(tv.type))
        _write_value(out, tv)
    seen = set()
    for t in container.tensors:
        if t.name in seen:
            raise InvariantViolation(f"duplicate tensor name {t.name!r}")
        seen.add(t.name)
        raw = t.name.encode("utf-8")
        out += struct.pack("<Q", len(raw)) + raw
        out += struct.pack("<I", len(t.dims))
        for d in t.dims:
            out += struct.pack("<Q", d)
        out += struct.pack("<IQ", int(t.dtype), t.offset)
    out += b"\x00" * ((-len(out)) % alignment)
    out += container.payload
    return bytes(out)


class ContainerBuilder:
    """Assembles a canonical container: sequential aligned tensor layout."""

    def __init__(self, alignment: int = DEFAULT_ALIGNMENT):
        if alignment < 1 or alignment & (alignment - 1):
            raise InvariantViolation(f"alignment {alignment} is not a power of two")
        self.alignment = alignment
        self.metadata: dict[str, TypedValue] = {}
        if alignment != DEFAULT_ALIGNMENT:
            self.metadata[ALIGNMENT_KEY] = TypedValue.u32(alignment)
        self._tensors: list[TensorDescriptor] = []
        self._payload = bytearray()

    def add_metadata(self, key: str, value: TypedValue) -> "ContainerBuilder":
        self.metadata[key] = value
        return self

    def add_tensor(self, name: str, dims: tuple[int, ...], dtype: DType, data: bytes) -> "ContainerBuilder":
        if any(t.name == name for t in self._tensors):
            raise DuplicateTensorName(name)
        desc = TensorDescriptor(name, tuple(dims), dtype, 0)
        if len(data) != desc.nbytes:
            raise InvariantViolation(
                f"tensor {name!r}: got {len(data)} bytes, dims/dtype require {desc.nbytes}"
            )
        self._payload += b"\x00" * ((-len(self._payload)) % self.alignment)
        desc = TensorDescriptor(name, tuple(dims), dtype, len(self._payload))
        self._payload += data
        self._tensors.append(desc)
        return self

    def finish(self) -> ModelContainer:
        payload = bytes(self._payload) + b"\x00" * ((-len(self._payload)) % self.alignment)
        return ModelContainer(VERSION, dict(self.metadata), list(self._tensors), self.alignment, payload)


def load_file(path: str) -> ModelContainer:
    with open(path, "rb") as f:
        return read_container(f.read())


def save_file(container: ModelContainer, path: str) -> None:
    with open(path, "wb") as f:
        f.write(write_container(container))
