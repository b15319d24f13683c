import math

import numpy as np
import pytest
from sklearn.cluster import DBSCAN as SkDBSCAN
from sklearn.metrics import silhouette_score

from splitrelay.attacks import (
    InversionDiverged, dbscan, extraction_attack, jitter_probes, kmeans_auto, perfect_cluster_accuracy, ssim,
    unsplit_invert,
)
from splitrelay.attacks.clustering import NOISE, k_distances, pairwise_distances, silhouette
from splitrelay.attacks.inversion import attack_loss
from splitrelay.dp import DpParams, protect
from splitrelay.nn import DenseLayer, Segment


def _blobs(rng, centers, n=30, spread=0.1):
    x = np.concatenate([c + spread * rng.normal(size=(n, len(c))) for c in centers])
    return x, np.repeat(np.arange(len(centers)), n)


# clustering ---------------------------------------------------------------

def test_perfect_accuracy_examples():
    t = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    assert perfect_cluster_accuracy(t, t) == 1.0
    assert perfect_cluster_accuracy(np.array([5, 5, 7, 7, 9, 9, 9, 9]), t) == 2 / 4
    assert perfect_cluster_accuracy(np.zeros(8), t) == 0.0
    assert perfect_cluster_accuracy(np.full(8, NOISE), t) == 0.0


def test_kmeans_two_far_blobs(rng):
    x, y = _blobs(rng, [np.zeros(3), np.full(3, 10.0)])
    out = kmeans_auto(x, range(2, 6), seed=0, true_groups=y)
    assert out.k_found == 2 and out.perfect_accuracy == 1.0


def test_kmeans_identical_points():
    out = kmeans_auto(np.ones((10, 2)), range(2, 4), true_groups=np.repeat([0, 1], 5))
    assert out.k_found == 1 and out.perfect_accuracy == 0.0
    assert kmeans_auto(np.ones((10, 2)), [2], true_groups=np.zeros(10)).perfect_accuracy == 1.0


def test_kmeans_errors_and_determinism(rng):
    with pytest.raises(ValueError):
        kmeans_auto(np.zeros((3, 2)), range(2, 6))
    x, _ = _blobs(rng, [np.zeros(2), np.ones(2) * 3, np.array([3.0, -3.0])])
    a = kmeans_auto(x, range(2, 6), seed=4)
    b = kmeans_auto(x, range(2, 6), seed=4)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.k_found == 3


def test_silhouette_matches_sklearn(rng):
    x = rng.normal(size=(60, 4))
    labels = rng.integers(0, 4, 60)
    labels[0] = 5  # a singleton cluster
    ours = silhouette(pairwise_distances(x), labels)
    assert ours == pytest.approx(silhouette_score(x, labels), abs=1e-10)


def test_dbscan_two_blobs(rng):
    x, y = _blobs(rng, [np.zeros(2), np.full(2, 5.0)])
    out = dbscan(x, 4, true_groups=y)
    assert out.k_found == 2


def test_dbscan_sparse_scatter_is_noise(rng):
    x = rng.uniform(0, 100, size=(6, 2))
    out = dbscan(x, 8, true_groups=np.arange(6) % 2)
    assert (out.assignments == NOISE).all() and out.perfect_accuracy == 0.0
    out = dbscan(x, 2, eps=1e-3)
    assert (out.assignments == NOISE).all()
    with pytest.raises(ValueError):
        dbscan(x, 1)


def _reachability_oracle(x, eps, min_pts):
    n = len(x)
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    nb = d <= eps
    core = nb.sum(1) >= min_pts
    # transitive closure of "core p reaches q"
    reach = nb & core[:, None]
    closure = reach | np.eye(n, dtype=bool)
    for k in range(n):
        closure |= closure[:, [k]] & closure[[k], :]
    comps = []
    seen = set()
    for p in np.flatnonzero(core):
        if p in seen:
            continue
        members = {int(q) for q in np.flatnonzero(closure[p]) if core[q] and closure[q, p]}
        seen |= members
        comps.append(members)
    return core, comps, closure


def test_dbscan_matches_bruteforce_reachability(rng):
    # fixed radii avoid ties with pairwise distances, where two distance formulas may round apart
    for trial, eps in enumerate([0.15, 0.25, 0.35, 0.5, 0.8]):
        x, _ = _blobs(rng, [np.zeros(2), np.full(2, 1.0), np.array([2.0, 0.0])], n=15, spread=0.3)
        out = dbscan(x, 4, eps=eps)
        core, comps, closure = _reachability_oracle(x, eps, 4)
        labels = out.assignments
        assert out.k_found == len(comps)
        for comp in comps:
            ids = {labels[p] for p in comp}
            assert len(ids) == 1  # core points of one component share a cluster
        for q in range(len(x)):
            reachable = any(closure[p, q] for comp in comps for p in comp)
            assert (labels[q] != NOISE) == reachable
        # core-point clustering agrees with sklearn given the same eps
        sk = SkDBSCAN(eps=out.eps, min_samples=4).fit(x).labels_
        for p in np.flatnonzero(core):
            for r in np.flatnonzero(core):
                assert (labels[p] == labels[r]) == (sk[p] == sk[r])


def test_k_distance_counts_self():
    x = np.array([[0.0], [1.0], [3.0]])
    np.testing.assert_array_equal(k_distances(pairwise_distances(x), 2), [1.0, 1.0, 2.0])


# SSIM ----------------------------------------------------------------------

def _ssim_loop(a, b, L=1.0, win=8):
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa = a[i:i + win, j:j + win].ravel()
            pb = b[i:i + win, j:j + win].ravel()
            ma, mb = pa.mean(), pb.mean()
            va = sum((v - ma) ** 2 for v in pa) / pa.size
            vb = sum((v - mb) ** 2 for v in pb) / pb.size
            cov = sum((u - ma) * (v - mb) for u, v in zip(pa, pb)) / pa.size
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_identity_and_inversion(rng):
    x = rng.uniform(size=(8, 8))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, 1.0 - x) < 1.0
    with pytest.raises(ValueError):
        ssim(x, x[:, :7])


def test_ssim_matches_loop(rng):
    for shape in [(8, 8), (12, 10), (16, 16)]:
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        assert abs(ssim(a, b) - _ssim_loop(a, b)) < 1e-9
        assert abs(ssim(a, b, 2.0) - _ssim_loop(a, b, 2.0)) < 1e-9


# inversion -----------------------------------------------------------------

def test_invert_identity_encoder_exactly(rng):
    enc = Segment([DenseLayer(np.eye(16), np.zeros(16), "identity")])
    x = rng.uniform(size=(5, 16))
    out = unsplit_invert(x, [16, 16], iters=200, lr=0.5, init=enc, freeze_weights=True, x_init=0.0,
                         targets=x)
    np.testing.assert_allclose(out.reconstructions, x, atol=1e-10)
    assert out.mse.max() < 1e-20


def test_invert_loss_descends_with_small_lr(desk):
    x = desk.prep.data.x_test[:20]
    obs = protect(desk.prep.client, x, DpParams(10.0, 1.0), 0)
    out = unsplit_invert(obs, desk.plan.client_widths, iters=100, lr=0.1, weight_lr=0.01, seed=1,
                         clip_radius=1.0)
    h = np.array(out.loss_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] < h[0]


def test_invert_random_surrogate_runs(desk):
    x = desk.prep.data.x_test[:10]
    obs = protect(desk.prep.client, x, DpParams(5.0, 1.0), 0)
    out = unsplit_invert(obs, desk.plan.client_widths, iters=20, seed=2, clip_radius=1.0,
                         targets=x, image_shape=(8, 8))
    assert out.ssim.shape == (10,) and out.surrogate.frozen
    assert attack_loss(out.surrogate, out.reconstructions, obs.values, 1.0) >= 0


def test_invert_divergence_reported(rng):
    enc = Segment([DenseLayer(np.eye(4) * 10, np.zeros(4), "identity")])
    with pytest.raises(InversionDiverged):
        unsplit_invert(rng.normal(size=(3, 4)), [4, 4], iters=500, lr=10.0, init=enc, freeze_weights=True)


# extraction ----------------------------------------------------------------

def _victim(desk):
    from splitrelay.verifier import assemble
    return assemble(desk.prep.client, desk.segments, 1.0)


def test_extraction_random_mapping_near_chance(desk):
    model = _victim(desk)
    probes = jitter_probes(desk.prep.data.x_train, 0.05, 1, 0)
    accs = [extraction_attack(model.predict, probes, 4, s, desk.prep.data.x_test, desk.prep.data.y_test,
                              n_pseudo=8).surrogate_true_accuracy for s in range(8)]
    assert abs(np.mean(accs) - 0.25) < 0.2


def test_extraction_control_recovers_victim(desk):
    model = _victim(desk)
    probes = jitter_probes(desk.prep.data.x_train, 0.05, 1, 0)
    victim = np.mean(np.asarray(desk.prep.label_map.inverse)[model.predict(desk.prep.data.x_test)]
                     == desk.prep.data.y_test)
    out = extraction_attack(model.predict, probes, 4, 0, desk.prep.data.x_test, desk.prep.data.y_test,
                            mapping=desk.prep.label_map.inverse)
    assert out.pseudo_label_queries == len(probes)
    assert abs(out.surrogate_true_accuracy - victim) <= 0.05
