"""Model containers and the FXF1 / FXQ1 binary formats.

All integers are little-endian. FXF1 stores float models as binary32;
FXQ1 stores 8-bit codes, nibble-packed 4-bit scale exponents and, for
Lloyd-quantized models, the per-group codebooks.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

FXF1_MAGIC = b"FXF1"
FXQ1_MAGIC = b"FXQ1"
EXP_MIN, EXP_MAX = -8, 7
# refuse absurd dimensions before allocating
MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    """Base class for model validation and parse failures."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class Scheme(enum.IntEnum):
    LQ = 0
    NLQ = 1
    LLOYD = 2


class Grouping(enum.IntEnum):
    LW = 0
    CW = 1


@dataclass(frozen=True)
class FixedPointFormat:
    """Bit budget ``{1, IL, FL}`` of one stored weight.

    The non-linear codebook additionally resolves the smallest-magnitude
    region at ``FL + 2`` fractional bits (``ext``).
    """

    il: int = 1
    fl: int = 6

    def __post_init__(self):
        if 1 + self.il + self.fl != 8:
            raise ValueError(f"1 + IL + FL must be 8, got {{1,{self.il},{self.fl}}}")
        if self.il < 1 or not 2 <= self.fl <= 6:
            raise ValueError(f"unsupported format {{1,{self.il},{self.fl}}}")

    @property
    def ext(self) -> int:
        return self.fl + 2

    @classmethod
    def from_fl(cls, fl: int) -> "FixedPointFormat":
        return cls(il=7 - fl, fl=fl)


@dataclass(frozen=True)
class LayerShape:
    o: int
    i: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.o * self.i * self.h * self.w

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.o, self.i, self.h, self.w)


@dataclass(frozen=True)
class ModelManifest:
    layers: tuple[LayerShape, ...]

    def __post_init__(self):
        if len(self.layers) < 1:
            raise DimensionError("a model needs at least one layer")
        for k, s in enumerate(self.layers):
            if min(s.dims) < 1:
                raise DimensionError(f"layer {k}: all dimensions must be >= 1, got {s.dims}")

    @classmethod
    def from_dims(cls, dims: Sequence[Sequence[int]]) -> "ModelManifest":
        return cls(tuple(LayerShape(*map(int, d)) for d in dims))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layers)


@dataclass
class WeightTensor:
    """4-D convolution kernel in ``[out][in][kh][kw]`` order, held as float64."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise DimensionError(f"weight tensor must be 4-D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise DimensionError(f"weight tensor has an empty dimension: {v.shape}")
        self.values = np.ascontiguousarray(v)

    @property
    def shape(self) -> LayerShape:
        return LayerShape(*self.values.shape)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


@dataclass
class FloatModel:
    tensors: list[WeightTensor]

    def __post_init__(self):
        self.tensors = [t if isinstance(t, WeightTensor) else WeightTensor(t) for t in self.tensors]
        if not self.tensors:
            raise DimensionError("a model needs at least one layer")

    @property
    def manifest(self) -> ModelManifest:
        return ModelManifest(tuple(t.shape for t in self.tensors))

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "FloatModel":
        return cls([WeightTensor(a) for a in arrays])

    def arrays(self) -> list[np.ndarray]:
        return [t.values for t in self.tensors]

    def __eq__(self, other):
        if not isinstance(other, FloatModel) or len(self.tensors) != len(other.tensors):
            return NotImplemented if not isinstance(other, FloatModel) else False
        return all(
            a.values.shape == b.values.shape and np.array_equal(a.values, b.values)
            for a, b in zip(self.tensors, other.tensors)
        )


@dataclass
class QuantizedModel:
    manifest: ModelManifest
    scheme: Scheme
    grouping: Grouping
    fmt: FixedPointFormat
    codes: list[np.ndarray]
    exponents: list[np.ndarray]
    codebooks: list[np.ndarray] | None = field(default=None)

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.grouping = Grouping(self.grouping)
        self.codes = [np.ascontiguousarray(c, dtype=np.uint8).reshape(-1) for c in self.codes]
        self.exponents = [np.asarray(e, dtype=np.int64).reshape(-1) for e in self.exponents]
        self.validate()

    def validate(self) -> None:
        n = len(self.manifest)
        if len(self.codes) != n or len(self.exponents) != n:
            raise DimensionError(f"expected {n} code and exponent arrays")
        for k, s in enumerate(self.manifest.layers):
            if self.codes[k].size != s.size:
                raise DimensionError(
                    f"layer {k}: code array length {self.codes[k].size} != {s.size}"
                )
            g = 1 if self.grouping is Grouping.LW else s.o
            if self.exponents[k].size != g:
                raise DimensionError(f"layer {k}: expected {g} exponents, got {self.exponents[k].size}")
            bad = (self.exponents[k] < EXP_MIN) | (self.exponents[k] > EXP_MAX)
            if bad.any():
                grp = int(np.flatnonzero(bad)[0])
                raise FormatError(
                    f"layer {k} group {grp}: exponent {int(self.exponents[k][grp])} "
                    f"outside 4-bit range [{EXP_MIN}, {EXP_MAX}]"
                )
        if self.scheme is Scheme.LLOYD:
            if self.codebooks is None or len(self.codebooks) != n:
                raise FormatError("LLOYD models need one codebook array per layer")
            ks = {np.shape(cb)[-1] for cb in self.codebooks}
            if len(ks) != 1:
                raise FormatError("all codebooks must have the same size K")
            for k, cb in enumerate(self.codebooks):
                if np.shape(cb)[0] != self.exponents[k].size:
                    raise FormatError(f"layer {k}: need one codebook per group")
                if int(self.codes[k].max(initial=0)) >= np.shape(cb)[-1]:
                    raise FormatError(f"layer {k}: code exceeds codebook size")
        elif self.codebooks is not None:
            raise FormatError(f"{self.scheme.name} models carry no codebooks")

    @property
    def group_counts(self) -> list[int]:
        return [e.size for e in self.exponents]

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        same = (
            self.manifest == other.manifest
            and self.scheme == other.scheme
            and self.grouping == other.grouping
            and self.fmt == other.fmt
            and all(np.array_equal(a, b) for a, b in zip(self.codes, other.codes))
            and all(np.array_equal(a, b) for a, b in zip(self.exponents, other.exponents))
        )
        if not same or self.scheme is not Scheme.LLOYD:
            return same
        return all(np.array_equal(a, b) for a, b in zip(self.codebooks, other.codebooks))


def float_file_size(manifest: ModelManifest) -> int:
    return 8 + sum(16 + 4 * s.size for s in manifest.layers)


def pack_nibbles(exps: np.ndarray) -> bytes:
    """Two's-complement nibbles, low nibble first, zero-padded at the end."""
    nib = np.asarray(exps, dtype=np.int64) & 0xF
    if nib.size % 2:
        nib = np.append(nib, 0)
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8).astype(np.int64)
    nib = np.empty(b.size * 2, dtype=np.int64)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count]
    return np.where(nib >= 8, nib - 16, nib)


def _write(dest, data: bytes) -> int:
    dest.write(data)
    return len(data)


def save_float_model(model: FloatModel, dest: BinaryIO) -> int:
    for k, t in enumerate(model.tensors):
        if not t.is_finite():
            raise FormatError(f"layer {k}: non-finite weight value")
        with np.errstate(over="ignore"):
            f32 = t.values.astype("<f4")
        if not np.isfinite(f32).all():
            raise FormatError(f"layer {k}: weight overflows binary32")
    n = _write(dest, FXF1_MAGIC + struct.pack("<I", len(model.tensors)))
    for t in model.tensors:
        n += _write(dest, struct.pack("<4I", *t.values.shape))
        n += _write(dest, t.values.astype("<f4").tobytes())
    return n


class _Reader:
    def __init__(self, src: BinaryIO):
        self.src = src

    def take(self, n: int, what: str) -> bytes:
        data = self.src.read(n)
        if len(data) != n:
            raise TruncatedError(f"truncated while reading {what}: wanted {n} bytes, got {len(data)}")
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def dims(self, k: int) -> LayerShape:
        d = struct.unpack("<4I", self.take(16, f"layer {k} dimensions"))
        if min(d) < 1:
            raise DimensionError(f"layer {k}: zero dimension in {d}")
        if math.prod(d) > MAX_ELEMENTS:
            raise DimensionError(f"layer {k}: dimension overflow {d}")
        return LayerShape(*d)

    def ensure_eof(self) -> None:
        if self.src.read(1):
            raise FormatError("trailing bytes after model payload")


def _open_magic(r: _Reader, magic: bytes) -> None:
    head = r.take(4, "magic")
    if head != magic:
        raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")


def load_float_model(src: BinaryIO) -> FloatModel:
    r = _Reader(src)
    _open_magic(r, FXF1_MAGIC)
    count = r.u32("layer count")
    if count < 1:
        raise DimensionError("layer count must be >= 1")
    tensors = []
    for k in range(count):
        s = r.dims(k)
        raw = r.take(4 * s.size, f"layer {k} weights")
        vals = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(s.dims)
        if not np.isfinite(vals).all():
            raise FormatError(f"layer {k}: non-finite weight value")
        tensors.append(WeightTensor(vals))
    r.ensure_eof()
    return FloatModel(tensors)


def save_quantized_model(model: QuantizedModel, dest: BinaryIO) -> int:
    model.validate()
    head = FXQ1_MAGIC + struct.pack(
        "<4BI", int(model.scheme), int(model.grouping), model.fmt.fl, 0, len(model.manifest)
    )
    n = _write(dest, head)
    for k, s in enumerate(model.manifest.layers):
        g = model.exponents[k].size
        n += _write(dest, struct.pack("<5I", *s.dims, g))
        n += _write(dest, pack_nibbles(model.exponents[k]))
        if model.scheme is Scheme.LLOYD:
            cb = np.asarray(model.codebooks[k], dtype=np.float64).reshape(g, -1)
            f32 = cb.astype("<f4")
            if not np.array_equal(f32.astype(np.float64), cb):
                raise FormatError(f"layer {k}: codebook not exactly representable in binary32")
            n += _write(dest, struct.pack("<I", cb.shape[1]) + f32.tobytes())
        n += _write(dest, model.codes[k].tobytes())
    return n


def load_quantized_model(src: BinaryIO) -> QuantizedModel:
    r = _Reader(src)
    _open_magic(r, FXQ1_MAGIC)
    raw_scheme = r.u8("scheme")
    raw_grouping = r.u8("grouping")
    fl = r.u8("FL")
    r.u8("reserved")
    try:
        scheme = Scheme(raw_scheme)
    except ValueError:
        raise FormatError(f"unknown scheme tag {raw_scheme}") from None
    try:
        grouping = Grouping(raw_grouping)
    except ValueError:
        raise FormatError(f"unknown grouping tag {raw_grouping}") from None
    try:
        fmt = FixedPointFormat.from_fl(fl)
    except ValueError as e:
        raise FormatError(str(e)) from None
    count = r.u32("layer count")
    if count < 1:
        raise DimensionError("layer count must be >= 1")
    shapes, codes, exps, books = [], [], [], []
    for k in range(count):
        s = r.dims(k)
        g = r.u32(f"layer {k} group count")
        want = 1 if grouping is Grouping.LW else s.o
        if g != want:
            raise DimensionError(f"layer {k}: group count {g}, expected {want}")
        exps.append(unpack_nibbles(r.take((g + 1) // 2, f"layer {k} exponents"), g))
        if scheme is Scheme.LLOYD:
            kk = r.u32(f"layer {k} codebook size")
            if kk < 1 or kk > 256:
                raise DimensionError(f"layer {k}: codebook size {kk} outside [1, 256]")
            cb = np.frombuffer(r.take(4 * g * kk, f"layer {k} codebook"), dtype="<f4")
            books.append(cb.astype(np.float64).reshape(g, kk))
        codes.append(np.frombuffer(r.take(s.size, f"layer {k} codes"), dtype=np.uint8).copy())
        shapes.append(s)
    r.ensure_eof()
    return QuantizedModel(
        ModelManifest(tuple(shapes)),
        scheme,
        grouping,
        fmt,
        codes,
        exps,
        books if scheme is Scheme.LLOYD else None,
    )


def dumps_float(model: FloatModel) -> bytes:
    buf = io.BytesIO()
    save_float_model(model, buf)
    return buf.getvalue()


def loads_float(data: bytes) -> FloatModel:
    return load_float_model(io.BytesIO(data))


def dumps_quantized(model: QuantizedModel) -> bytes:
    buf = io.BytesIO()
    save_quantized_model(model, buf)
    return buf.getvalue()


def loads_quantized(data: bytes) -> QuantizedModel:
    return load_quantized_model(io.BytesIO(data))


def read_float_file(path) -> FloatModel:
    with open(path, "rb") as f:
        return load_float_model(f)


def write_float_file(model: FloatModel, path) -> int:
    data = dumps_float(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def read_quantized_file(path) -> QuantizedModel:
    with open(path, "rb") as f:
        return load_quantized_model(f)


def write_quantized_file(model: QuantizedModel, path) -> int:
    data = dumps_quantized(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
