import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spinalis.core import (
    VERTEBRA_CODES, Label, MaskVolume, Slice, SvolFormatError, Volume, decode_volume, encode_volume,
    extract_slice, insert_slice, load_pgm, load_volume, normalize_intensity, payload_offset, save_pgm,
    save_volume, vertebra_code,
)
from spinalis.phantom import PhantomConfig, generate_phantom


def test_label_schema_codes():
    assert [int(c) for c in VERTEBRA_CODES] == list(range(10, 17))
    assert Label.TUMOR == 100 and Label.VERTEBRA == 20
    assert vertebra_code("l3") == 14 and vertebra_code(Label.T11) == 10
    with pytest.raises(ValueError):
        vertebra_code("C7")
    with pytest.raises(ValueError):
        vertebra_code(20)


def test_round_trip_4x4x2(tmp_path, rng):
    v = Volume(rng.random((2, 4, 4)), (0.5, 0.5, 3.0))
    save_volume(v, tmp_path / "v.svol")
    w = load_volume(tmp_path / "v.svol")
    assert w == v
    assert w.spacing == (0.5, 0.5, 3.0)
    assert (w.width, w.height, w.depth) == (4, 4, 2)


def test_save_of_load_is_byte_identical(tmp_path, rng):
    v = Volume(rng.random((3, 5, 6)), (1.0, 2.0, 3.0))
    raw = encode_volume(v)
    (tmp_path / "a.svol").write_bytes(raw)
    save_volume(load_volume(tmp_path / "a.svol"), tmp_path / "b.svol")
    assert (tmp_path / "b.svol").read_bytes() == raw


def test_header_layout_and_zero_payload():
    raw = encode_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)))
    assert raw.startswith(b"SVOL1 {")
    payload = raw[payload_offset(raw):]
    assert len(payload) == 8 * 4 and payload == bytes(32)


def test_payload_is_x_fastest_little_endian():
    data = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    raw = encode_volume(Volume(data, (1, 1, 1)))
    vals = np.frombuffer(raw[payload_offset(raw):], dtype="<f4")
    assert vals.tolist() == list(range(12))


def test_length_mismatch_error():
    raw = encode_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)))
    with pytest.raises(SvolFormatError, match="length"):
        decode_volume(raw[:-4])  # header declares 8 voxels, payload holds 7


@pytest.mark.parametrize("raw", [
    b"NOPE",
    b"SVOL1 {not json}\n",
    b'SVOL1 {"width": 1}\n',
    b'SVOL1 {"width":1,"height":1,"depth":1,"sx":1,"sy":1,"sz":"inf","dtype":"f32"}\n\x00\x00\x00\x00',
    b'SVOL1 {"width":1,"height":1,"depth":1,"sx":1,"sy":1,"sz":1,"dtype":"f64"}\n\x00\x00\x00\x00',
    b'SVOL1 {"width":0,"height":1,"depth":1,"sx":1,"sy":1,"sz":1,"dtype":"u8"}\n',
])
def test_malformed_headers(raw):
    with pytest.raises(SvolFormatError):
        decode_volume(raw)


def test_nan_rejected():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]), (1, 1, 1))
    raw = bytearray(encode_volume(Volume(np.zeros((1, 1, 1)), (1, 1, 1))))
    raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(SvolFormatError):
        decode_volume(bytes(raw))


def test_bad_spacing_rejected():
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1)), (1, 0, 1))


def test_mask_volume_label_validation(tmp_path):
    m = MaskVolume(np.array([[[0, 1, 2, 100]]], dtype=np.uint8), (1, 1, 1))
    save_volume(m, tmp_path / "m.svol")
    back = load_volume(tmp_path / "m.svol")
    assert isinstance(back, MaskVolume) and back == m
    with pytest.raises(ValueError):
        MaskVolume(np.array([[[7]]], dtype=np.uint8), (1, 1, 1))


def test_volumes_are_immutable(rng):
    v = Volume(rng.random((1, 2, 2)), (1, 1, 1))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_phantom_payload_checksum_is_stable(tmp_path):
    cfg = PhantomConfig(width=64, height=128, depth=8, seed=9)
    sums = []
    for i in range(2):
        save_volume(generate_phantom(cfg).volume, tmp_path / f"p{i}.svol")
        raw = (tmp_path / f"p{i}.svol").read_bytes()
        sums.append(hashlib.sha256(raw[payload_offset(raw):]).hexdigest())
    assert sums[0] == sums[1]


def test_extract_middle_plane_and_range(rng):
    v = Volume(rng.random((3, 4, 5)), (1, 1, 1))
    s = extract_slice(v, 1)
    assert np.array_equal(s.data, v.data[1]) and s.source_index == 1
    with pytest.raises(IndexError):
        extract_slice(v, 3)


def test_extract_insert_identity(rng):
    v = Volume(rng.random((3, 4, 5)), (1, 1, 1))
    for z in range(3):
        assert insert_slice(v, z, extract_slice(v, z)) == v


def test_insert_constant_touches_one_plane(rng):
    v = Volume(rng.random((3, 4, 5)), (1, 1, 1))
    w = insert_slice(v, 2, Slice(np.full((4, 5), 0.5)))
    assert np.all(w.data[2] == 0.5)
    assert np.array_equal(w.data[:2], v.data[:2])
    with pytest.raises(ValueError):
        insert_slice(v, 0, Slice(np.zeros((4, 6))))


def test_normalize_examples():
    v = normalize_intensity(Volume(np.array([[[2.0, 4.0, 6.0]]]), (1, 1, 1)))
    assert np.allclose(v.data.ravel(), [0, 0.5, 1])
    c = normalize_intensity(Volume(np.array([[[5.0, 5.0]]]), (1, 1, 1)))
    assert np.all(c.data == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e3, 1e3)))
def test_normalize_idempotent_and_order_preserving(a):
    v = normalize_intensity(Volume(a, (1, 1, 1)))
    w = normalize_intensity(v)
    assert v.data.min() >= 0 and v.data.max() <= 1
    assert np.max(np.abs(w.data.astype(float) - v.data.astype(float))) <= 1e-6
    flat, src = v.data.ravel(), a.ravel().astype(np.float32).astype(float)
    order = np.argsort(src, kind="stable")
    assert np.all(np.diff(flat[order]) >= -1e-7)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(a):
    v = Volume(a, (0.25, 0.5, 2.0))
    assert decode_volume(encode_volume(v)) == v


def test_pgm_round_trip(tmp_path):
    q = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
    save_pgm(Slice(q), tmp_path / "s.pgm")
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
    back = load_pgm(tmp_path / "s.pgm")
    assert np.allclose(back.data, q)
