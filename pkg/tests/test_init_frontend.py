import warnings

import numpy as np
import pytest

from ssmd.convsim import simulate_conversation
from ssmd.init_frontend import (
    build_memory,
    cluster_speakers,
    kmeans,
    labels_to_mask,
    window_embeddings,
    window_intervals,
)


def blobs(rng, n_per, dim=16, k=2, spread=0.05):
    centers = np.linalg.qr(rng.standard_normal((dim, k)))[0].T
    X = np.concatenate([c + spread * rng.standard_normal((n_per, dim)) for c in centers])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X, np.repeat(np.arange(k), n_per)


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all(len(set(b[a == v])) == 1 for v in set(a)) and len(set(a)) == len(set(b))


# -- windows ---------------------------------------------------------------------


def test_three_second_input_gives_three_windows():
    assert window_intervals(300, 0.01) == [(0.0, 1.5), (0.75, 2.25), (1.5, 3.0)]
    assert len(window_embeddings(np.random.default_rng(0).standard_normal((300, 40)), dim=8)) == 3


def test_constant_features_identical_embeddings():
    embs = window_embeddings(np.ones((400, 40)), dim=8)
    for _, e in embs[1:]:
        np.testing.assert_array_equal(e, embs[0][1])


def test_embeddings_unit_norm_and_finite():
    embs = window_embeddings(np.random.default_rng(1).standard_normal((700, 40)))
    for _, e in embs:
        assert np.isfinite(e).all() and abs(np.linalg.norm(e) - 1) < 1e-12


def test_too_short_input():
    with pytest.raises(ValueError):
        window_embeddings(np.ones((100, 40)))


# -- clustering ------------------------------------------------------------------


def test_two_blobs_perfect_split():
    X, truth = blobs(np.random.default_rng(2), 15)
    assert same_partition(cluster_speakers(X, n_speakers=2), truth)
    assert same_partition(cluster_speakers(X), truth)  # eigengap finds 2


def test_eigengap_three_blobs():
    X, truth = blobs(np.random.default_rng(3), 10, k=3)
    assert same_partition(cluster_speakers(X), truth)


def test_single_speaker_all_zero():
    X, _ = blobs(np.random.default_rng(4), 5)
    assert (cluster_speakers(X, n_speakers=1) == 0).all()


def test_permutation_consistent_partition():
    rng = np.random.default_rng(5)
    X, _ = blobs(rng, 12, k=3)
    perm = rng.permutation(len(X))
    a = cluster_speakers(X, 3)
    b = cluster_speakers(X[perm], 3)
    assert same_partition(a[perm], b)


def test_scale_invariance_partition():
    X, _ = blobs(np.random.default_rng(6), 10, k=3)
    assert same_partition(cluster_speakers(X * 7.3, 3), cluster_speakers(X, 3))


def test_degenerate_affinity_warns():
    X = np.tile(np.arange(1.0, 5.0), (6, 1))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        labels = cluster_speakers(X)
    assert (labels == 0).all() and any(issubclass(x.category, RuntimeWarning) for x in w)


def test_cluster_needs_two_windows():
    with pytest.raises(ValueError):
        cluster_speakers(np.ones((1, 3)))


# -- masks -----------------------------------------------------------------------


def test_one_window_one_speaker_row_of_ones():
    m = labels_to_mask([0], [(0.0, 1.5)], 150)
    assert m.shape == (1, 150) and (m.matrix == 1).all()


def test_disjoint_windows_disjoint_rows():
    m = labels_to_mask([0, 1], [(0.0, 1.5), (1.5, 3.0)], 300)
    assert (m.matrix[0, :150] == 1).all() and (m.matrix[0, 150:] == 0).all()
    assert (m.matrix[1, 150:] == 1).all() and (m.matrix[1, :150] == 0).all()


def test_oracle_labels_reproduce_frame_labels():
    # turn boundaries midway between window centres, so nearest-centre resolution is exact;
    # the frame centred exactly on a midpoint goes to the earlier window
    hop, T = 0.01, 900
    truth = np.zeros((2, T))
    bounds = [0, 113, 413, 638, T]  # just after 1.125 s, 4.125 s, 6.375 s
    for i, (a, b) in enumerate(zip(bounds, bounds[1:])):
        truth[i % 2, a:b] = 1
    intervals = window_intervals(T, hop)
    centres = [int(round(0.5 * (a + b) / hop)) for a, b in intervals]
    oracle = [int(truth[:, c].argmax()) for c in centres]
    m = labels_to_mask(oracle, intervals, T, hop, n_speakers=2)
    # the ends are covered by a single window only
    np.testing.assert_array_equal(m.matrix[:, :T], truth)


def test_mask_is_binary_and_nxt():
    sim = simulate_conversation(3, 30, 0.1, seed=2)
    embs = window_embeddings(sim.features.matrix, dim=32)
    labels = cluster_speakers([e for _, e in embs], n_speakers=3)
    m = labels_to_mask(labels, [iv for iv, _ in embs], sim.features.n_frames, n_speakers=3)
    assert m.shape == (3, sim.features.n_frames)
    assert set(np.unique(m.matrix)) <= {0.0, 1.0}


# -- memory ----------------------------------------------------------------------


def test_memory_centres_match_blob_means():
    X, truth = blobs(np.random.default_rng(7), 20, dim=12, k=4, spread=0.02)
    bank = build_memory(X, K=4, seed=0).bank
    means = np.stack([X[truth == k].mean(axis=0) for k in range(4)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    # match rows up to order
    for m in means:
        assert np.min(np.abs(bank - m).max(axis=1)) < 1e-6


def test_memory_k1_is_normalised_global_mean():
    X = np.random.default_rng(8).standard_normal((30, 6))
    g = X.mean(axis=0)
    np.testing.assert_allclose(build_memory(X, K=1).bank[0], g / np.linalg.norm(g), atol=1e-12)


def test_memory_seed_reproducible_and_unit_rows():
    X = np.random.default_rng(9).standard_normal((50, 6))
    a, b = build_memory(X, K=5, seed=3), build_memory(X, K=5, seed=3)
    np.testing.assert_array_equal(a.bank, b.bank)
    np.testing.assert_allclose(np.linalg.norm(a.bank, axis=1), 1.0)


def test_memory_k_too_large():
    with pytest.raises(ValueError):
        build_memory(np.ones((3, 2)), K=4)


def test_kmeans_objective_non_increasing():
    X = np.random.default_rng(10).standard_normal((200, 5))
    hist = kmeans(X, 6, seed=1, n_init=1).history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
