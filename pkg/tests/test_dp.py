import hashlib
import math
import struct

import numpy as np
import pytest

from splitrelay.dp import (
    DigestMismatch, DpActivationBatch, DpParams, canonical_digest, clip_l1, clip_l1_backward,
    decode_cache, encode_cache, laplace_log_density_ratio, laplace_perturb, load_cache, protect, save_cache,
)
from splitrelay.labelspace import build_label_map, expand_dataset
from splitrelay.nn import init_segment, segment_forward
from splitrelay.serialization import FormatError

from conftest import fd_grad, rel_err


def test_clip_inside_ball_unchanged():
    np.testing.assert_array_equal(clip_l1([0.2, -0.3], 1.0), [0.2, -0.3])


def test_clip_boundary_scaling():
    out = clip_l1([1.0, -1.0], 1.0)
    np.testing.assert_array_equal(out, [0.5, -0.5])
    assert np.abs(out).sum() == 1.0


def test_clip_random_rows(rng):
    rows = rng.normal(scale=3.0, size=(1000, 12))
    out = clip_l1(rows, 1.5)
    assert np.all(np.abs(out).sum(axis=1) <= 1.5 + 1e-12)


def test_clip_zero_row_and_bad_radius():
    np.testing.assert_array_equal(clip_l1(np.zeros((2, 3)), 1.0), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        clip_l1([1.0], 0.0)


def test_clip_backward_fd(rng):
    a = rng.normal(size=(5, 6))
    a[0] *= 0.01  # one row inside the ball
    g = rng.normal(size=a.shape)
    got = clip_l1_backward(a, g, 1.0)
    want = fd_grad(lambda: float(np.sum(clip_l1(a, 1.0) * g)), a)
    assert rel_err(got, want) < 1e-6


def test_params():
    p = DpParams(2.0, 1.0)
    assert p.sensitivity == 2.0 and p.scale == 1.0
    assert DpParams(math.inf, 1.0).scale == 0.0
    with pytest.raises(ValueError):
        DpParams(0.0, 1.0)
    with pytest.raises(ValueError):
        DpParams(-1.0, 1.0)


def test_laplace_mean_abs_monte_carlo():
    b = laplace_perturb(np.zeros((1000, 1000)), DpParams(2.0, 1.0), seed=17)
    assert abs(np.abs(b.values).mean() - 1.0) < 0.01


@pytest.mark.parametrize("eps", [2.0, 5.0, 10.0])
def test_operating_points_scale(eps):
    assert DpParams(eps, 1.0).scale == 2.0 / eps


def test_perturb_deterministic_and_digest():
    x = clip_l1(np.arange(12.0).reshape(3, 4), 1.0)
    a = laplace_perturb(x, DpParams(5.0, 1.0), seed=3)
    b = laplace_perturb(x, DpParams(5.0, 1.0), seed=3)
    assert a.values.tobytes() == b.values.tobytes() and a.digest == b.digest
    a.verify()


def _client_and_data():
    client = init_segment([6, 4], seed=0).freeze()
    r = np.random.default_rng(0)
    x = r.normal(size=(40, 6))
    y = np.repeat(np.arange(2), 20)
    m = build_label_map(2, [2, 2], seed=0)
    return client, expand_dataset(x, y, m, 0.05, seed=1)


def test_protect_shapes_and_determinism():
    client, ex = _client_and_data()
    a = protect(client, ex, DpParams(5.0, 1.0), seed=2)
    b = protect(client, ex, DpParams(5.0, 1.0), seed=2)
    assert a.values.shape == (len(ex), 4)
    assert a.digest == b.digest


def test_protect_zero_noise_limit():
    client, ex = _client_and_data()
    out = protect(client, ex, DpParams(math.inf, 1.0), seed=2)
    act, _ = segment_forward(client, ex.features)
    np.testing.assert_array_equal(out.values, clip_l1(act, 1.0))


def test_protect_rejects_unfrozen():
    client, ex = _client_and_data()
    client.frozen = False
    with pytest.raises(ValueError, match="frozen"):
        protect(client, ex, DpParams(5.0, 1.0), seed=2)


def test_digest_layout_and_sensitivity():
    t = np.array([[1.0, -2.0]])
    want = hashlib.sha256(struct.pack("<2I", 1, 2) + struct.pack("<2d", 1.0, -2.0)).digest()
    assert canonical_digest(t) == want == canonical_digest(t.copy())
    flipped = t.copy()
    flipped[0, 0] = -1.0
    assert canonical_digest(flipped) != want


def test_digest_empty_and_nonfinite():
    assert canonical_digest(np.zeros((0,))) == hashlib.sha256(struct.pack("<I", 0)).digest()
    with pytest.raises(ValueError):
        canonical_digest(np.array([np.nan]))


def test_cache_roundtrip_and_tamper(tmp_path):
    client, ex = _client_and_data()
    batch = protect(client, ex, DpParams(5.0, 1.0), seed=2)
    path = tmp_path / "c.cldp"
    save_cache(batch, path)
    back = load_cache(path)
    assert back.values.tobytes() == batch.values.tobytes()
    assert back.params == batch.params and back.seed == 2
    raw = bytearray(path.read_bytes())
    assert raw[:4] == b"CLDP"
    raw[60] ^= 0x01  # inside the tensor values
    with pytest.raises(DigestMismatch):
        decode_cache(bytes(raw))
    assert decode_cache(bytes(raw), check=False).digest == batch.digest
    with pytest.raises(FormatError):
        decode_cache(b"NOPE" + bytes(40))


def test_sensitivity_bound(rng):
    a = clip_l1(rng.normal(size=(2000, 8)) * 5, 1.0)
    b = clip_l1(rng.normal(size=(2000, 8)) * 5, 1.0)
    assert np.all(np.abs(a - b).sum(axis=1) <= 2.0 + 1e-12)


def test_density_ratio_bound(rng):
    eps = 3.0
    scale = DpParams(eps, 1.0).scale
    for _ in range(2000):
        x, xp = clip_l1(rng.normal(size=(2, 5)) * 3, 1.0)
        y = x + rng.laplace(scale=scale, size=5)
        lr = laplace_log_density_ratio(y, x, xp, scale)
        assert lr <= eps * np.abs(x - xp).sum() / 2.0 + 1e-9
        assert lr <= eps + 1e-9


def test_pair_ratio_bounded_by_two_epsilon(rng):
    from splitrelay.dp import pair_log_likelihood_ratio
    eps = 2.0
    scale = DpParams(eps, 1.0).scale
    worst = -np.inf
    for _ in range(500):
        t = clip_l1(rng.normal(size=(rng.integers(1, 4), 3)) * 3, 1.0)
        u = clip_l1(rng.normal(size=(rng.integers(1, 4), 3)) * 3, 1.0)
        ya, yb = rng.normal(size=(2, 3)) * 2
        worst = max(worst, pair_log_likelihood_ratio(ya, yb, t, u, scale))
    assert worst <= 2 * eps + 1e-9


def test_pair_ratio_literal_partner_swap_is_unbounded():
    # Same class, partner y_b versus a far-away partner y_c: not bounded by e^(2 eps).
    scale = DpParams(1.0, 1.0).scale
    t = np.array([[0.5, 0.0]])
    ya = np.zeros(2)
    near, far = np.array([0.5, 0.0]), np.array([50.0, 0.0])
    num = -np.abs(ya - t[0]).sum() / scale - np.abs(near - t[0]).sum() / scale
    den = -np.abs(ya - t[0]).sum() / scale - np.abs(far - t[0]).sum() / scale
    assert num - den > 2 * 1.0
