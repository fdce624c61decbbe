import io
import struct

import numpy as np
import pytest

from fixq.store import (
    BadMagicError,
    DimensionError,
    FixedPointFormat,
    FloatModel,
    FormatError,
    Grouping,
    ModelManifest,
    QuantizedModel,
    Scheme,
    TruncatedError,
    WeightTensor,
    dumps_float,
    dumps_quantized,
    float_file_size,
    loads_float,
    loads_quantized,
    pack_nibbles,
    read_float_file,
    unpack_nibbles,
    write_float_file,
)
from fixq.quantizer import quantize_model

from conftest import random_model
from oracles import fxf_bytes, nibbles


def test_float_roundtrip_bit_exact(model):
    data = dumps_float(model)
    assert loads_float(data) == model
    assert len(data) == float_file_size(model.manifest)


def test_float_bytes_match_hand_packing(model):
    assert dumps_float(model) == fxf_bytes(model.arrays())


def test_float_file_size_single_layer():
    m = ModelManifest.from_dims([(4, 2, 3, 3)])
    assert float_file_size(m) == 8 + 16 + 4 * 72 == 312


def test_float_file_roundtrip(tmp_path, model):
    p = tmp_path / "m.fxf"
    n = write_float_file(model, p)
    assert p.stat().st_size == n
    assert read_float_file(p) == model


def test_float_refuses_nonfinite():
    w = np.zeros((1, 1, 1, 2))
    w[0, 0, 0, 1] = np.nan
    with pytest.raises(ValueError):
        dumps_float(FloatModel([WeightTensor(w)]))
    with pytest.raises(ValueError):
        dumps_float(FloatModel([WeightTensor(np.full((1, 1, 1, 1), 1e300))]))


def test_every_truncated_prefix_fails():
    m = random_model(1, dims=((2, 1, 2, 2), (1, 2, 1, 1)))
    data = dumps_float(m)
    for n in range(len(data)):
        with pytest.raises(FormatError):
            loads_float(data[:n])


def test_truncation_names_layer():
    m = random_model(1, dims=((2, 1, 2, 2), (1, 2, 1, 1)))
    data = dumps_float(m)
    with pytest.raises(TruncatedError, match="layer 1"):
        loads_float(data[:-1])


def test_bad_magic_and_trailing_bytes(model):
    data = dumps_float(model)
    with pytest.raises(BadMagicError):
        loads_float(b"FXQ1" + data[4:])
    with pytest.raises(FormatError):
        loads_float(data + b"\0")


def test_zero_dimension_rejected():
    data = b"FXF1" + struct.pack("<I", 1) + struct.pack("<4I", 1, 0, 1, 1)
    with pytest.raises(DimensionError):
        loads_float(data)


@pytest.mark.parametrize("count", [1, 2, 3, 8, 17])
def test_nibbles_roundtrip(count):
    e = np.arange(count) % 16 - 8
    buf = pack_nibbles(e)
    assert buf == nibbles(e)
    assert len(buf) == (count + 1) // 2
    assert np.array_equal(unpack_nibbles(buf, count), e)


def test_nibble_order_low_first():
    assert pack_nibbles(np.array([1, -1])) == bytes([0xF1])


@pytest.mark.parametrize("scheme", ["lq", "nlq"])
@pytest.mark.parametrize("grouping", ["lw", "cw"])
def test_quantized_roundtrip(model, scheme, grouping):
    qm = quantize_model(model, scheme, grouping)
    data = dumps_quantized(qm)
    assert loads_quantized(data) == qm
    ng = sum(qm.group_counts)
    assert len(data) == 12 + sum(20 + (g + 1) // 2 + s.size for g, s in zip(qm.group_counts, qm.manifest.layers))
    assert ng == (3 if grouping == "lw" else 14)


def test_quantized_single_layer_size():
    m = random_model(2, dims=((4, 2, 3, 3),))
    data = dumps_quantized(quantize_model(m, "nlq", "cw"))
    # 72 code bytes + 2 nibble bytes, plus 12 file and 20 layer header bytes
    assert len(data) == 74 + 32


def test_quantized_lloyd_roundtrip():
    m = random_model(3, dims=((2, 4, 3, 3), (3, 2, 3, 3)))
    qm = quantize_model(m, "lloyd", "lw", lloyd_k=8)
    data = dumps_quantized(qm)
    back = loads_quantized(data)
    assert back == qm
    assert len(data) == 12 + sum(20 + 1 + 4 + 8 * 4 + s.size for s in m.manifest.layers)


def test_quantized_truncation_and_tags(model):
    data = dumps_quantized(quantize_model(model, "nlq", "cw"))
    for n in range(0, len(data), 7):
        with pytest.raises(FormatError):
            loads_quantized(data[:n])
    with pytest.raises(FormatError):
        loads_quantized(data[:4] + bytes([9]) + data[5:])
    with pytest.raises(FormatError):
        loads_quantized(data[:5] + bytes([7]) + data[6:])
    with pytest.raises(BadMagicError):
        loads_quantized(b"FXF1" + data[4:])


def test_quantized_model_validation(model):
    qm = quantize_model(model, "nlq", "lw")
    with pytest.raises(FormatError):
        QuantizedModel(qm.manifest, Scheme.NLQ, Grouping.LW, qm.fmt, qm.codes, [np.array([9])] * 3)
    with pytest.raises(DimensionError):
        QuantizedModel(qm.manifest, Scheme.NLQ, Grouping.CW, qm.fmt, qm.codes, qm.exponents)


@pytest.mark.parametrize("il,fl", [(1, 6), (2, 5), (5, 2)])
def test_format_valid(il, fl):
    f = FixedPointFormat(il, fl)
    assert f.ext == fl + 2
    assert FixedPointFormat.from_fl(fl) == f


@pytest.mark.parametrize("il,fl", [(0, 7), (1, 5), (6, 1)])
def test_format_invalid(il, fl):
    with pytest.raises(ValueError):
        FixedPointFormat(il, fl)


def test_stream_io(model):
    buf = io.BytesIO()
    from fixq.store import load_float_model, save_float_model

    n = save_float_model(model, buf)
    assert n == buf.tell()
    buf.seek(0)
    assert load_float_model(buf) == model
