import hashlib
import io
import struct

import numpy as np
import pytest

from splitrelay.nn import flatten_params, init_segment
from splitrelay.rng import Stream, seed_material
from splitrelay.serialization import (
    FormatError, decode_segment, decode_tensor, encode_segment, encode_tensor, load_segment, save_segment,
)


def test_stream_reproducible_and_domain_separated():
    a = Stream.of("x", 1).words(8)
    np.testing.assert_array_equal(a, Stream.of("x", 1).words(8))
    assert not np.array_equal(a, Stream.of("x", 2).words(8))
    assert not np.array_equal(a, Stream.of("y", 1).words(8))


def test_seed_material_is_unambiguous():
    assert seed_material("ab", "c") != seed_material("a", "bc")
    with pytest.raises(TypeError):
        seed_material(True)


def test_uniform_open_interval_and_moments():
    u = Stream.of("u").uniform(200_000)
    assert 0 < u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_moments():
    z = Stream.of("n").normal(200_001)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_permutation_is_permutation():
    p = Stream.of("p").permutation(1000)
    assert sorted(p.tolist()) == list(range(1000))


def test_tensor_roundtrip_bit_exact():
    t = np.array([[1.5, -0.0, np.pi], [1e-300, -2.0, 7.0]])
    back = decode_tensor(encode_tensor(t))
    assert back.tobytes() == t.tobytes() and back.shape == t.shape


def test_tensor_layout():
    data = encode_tensor(np.array([1.0, 2.0]))
    assert data == struct.pack("<HI", 1, 2) + struct.pack("<2d", 1.0, 2.0)


def test_checkpoint_roundtrip(tmp_path):
    seg = init_segment([6, 5, 3], seed=2, activations=["relu", "identity"])
    path = tmp_path / "s.clwc"
    save_segment(seg, path)
    back = load_segment(path)
    assert back.frozen
    assert [l.activation for l in back.layers] == ["relu", "identity"]
    assert flatten_params(back).tobytes() == flatten_params(seg).tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"CLWC"
    assert struct.unpack_from("<HH", raw, 4) == (1, 2)
    assert encode_segment(back) == raw


def test_checkpoint_rejects_garbage():
    with pytest.raises(FormatError):
        decode_segment(b"XXXX" + bytes(10))
    good = encode_segment(init_segment([2, 2], seed=0))
    with pytest.raises(FormatError):
        decode_segment(good[:-3])
