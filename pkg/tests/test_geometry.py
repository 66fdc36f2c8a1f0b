import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xfrn import geometry as g
from xfrn.errors import DataError


def brute_knn(x, k):
    b = len(x)
    sets = []
    for i in range(b):
        sims = []
        for j in range(b):
            if j != i:
                c = float(np.dot(x[i], x[j]) / (np.linalg.norm(x[i]) * np.linalg.norm(x[j])))
                sims.append((-c, j))
        sims.sort()
        sets.append({j for _, j in sims[:k]})
    return sets


def brute_mutual_knn(phi, psi, k):
    a, b = brute_knn(phi, k), brute_knn(psi, k)
    return sum(len(a[i] & b[i]) for i in range(len(phi))) / (k * len(phi))


def test_centroid_examples(rng):
    assert np.array_equal(g.centroid(np.array([[1.0, 0], [-1, 0]])), [0, 0])
    assert np.array_equal(g.centroid(np.array([[3.0, 4]])), [3, 4])
    x = rng.standard_normal((100, 7))
    oracle = [sum(float(x[i, j]) for i in range(100)) / 100 for j in range(7)]
    assert np.abs(g.centroid(x) - oracle).max() < 1e-9
    with pytest.raises(DataError):
        g.centroid(np.zeros((0, 3)))


def test_centroid_shared(rng):
    en, l2 = rng.standard_normal((30, 5)), rng.standard_normal((30, 5))
    cs = g.centroid_shared(en, l2)
    assert np.abs(cs - (g.centroid(en) + g.centroid(l2)) / 2).max() < 1e-9
    oracle = np.mean([(en[k] + l2[k]) / 2 for k in range(30)], axis=0)
    assert np.abs(cs - oracle).max() < 1e-9
    assert np.allclose(g.centroid_shared(en, en), g.centroid(en))
    with pytest.raises(DataError):
        g.centroid_shared(en, l2[:3])


def test_cevr_examples(rng):
    r1 = np.outer(rng.standard_normal(10), rng.standard_normal(6))
    assert all(g.cevr_dimensionality(r1, t) == 1 for t in (0.5, 0.9, 1.0))
    assert g.cevr_dimensionality(np.eye(4) * 3, 0.5) == 2
    with pytest.raises(DataError):
        g.cevr_dimensionality(np.zeros((3, 3)), 0.9)


def test_cevr_matches_gram_oracle(rng):
    x = rng.standard_normal((50, 16))
    ev = np.sort(np.linalg.eigvalsh(x.T @ x))[::-1]
    ratios = np.cumsum(ev) / ev.sum()
    for t in (0.90, 0.95, 0.99):
        assert g.cevr_dimensionality(x, t) == int(np.argmax(ratios >= t - 1e-12)) + 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-5, 5)), st.floats(0.05, 0.95))
def test_cevr_monotone_in_threshold(x, t):
    if np.linalg.norm(x) < 1e-6:
        return
    assert g.cevr_dimensionality(x, t) <= g.cevr_dimensionality(x, min(1.0, t + 0.04))


def test_similarity_gap_curve(rng):
    a = rng.standard_normal((20, 6))
    par, non = g.similarity_gap_curve([(a, a)] * 3, [(a, np.roll(a, 1, axis=0))] * 3)
    assert par.metric == "hs_parallel" and non.metric == "hs_nonparallel"
    assert np.allclose(par.array(), 1.0)
    e1, e2 = np.eye(4)[:1].repeat(5, 0), np.eye(4)[1:2].repeat(5, 0)
    par, _ = g.similarity_gap_curve([(e1, e2)], [(e1, e1)], "mlp_activation")
    assert par.metric == "act_parallel" and par.values == [0.0]
    b = rng.standard_normal((20, 6))
    par, _ = g.similarity_gap_curve([(a, b)], [(a, b)])
    naive = np.mean([a[i] @ b[i] / np.linalg.norm(a[i]) / np.linalg.norm(b[i]) for i in range(20)])
    assert abs(par.values[0] - naive) < 1e-9
    z = a.copy()
    z[0] = 0
    par, _ = g.similarity_gap_curve([(z, b)], [(a, b)])
    assert par.metadata["skipped_pairs"] == 1


def test_mutual_knn_examples(rng):
    x = rng.standard_normal((6, 5))
    assert g.mutual_knn_alignment(x, x, 2) == 1.0
    assert g.mutual_knn_alignment(x, rng.standard_normal((6, 3)), 5) == 1.0
    y = rng.standard_normal((6, 5))
    assert abs(g.mutual_knn_alignment(x, y, 2) - brute_mutual_knn(x, y, 2)) < 1e-12
    with pytest.raises(DataError):
        g.mutual_knn_alignment(x, y, 6)
    with pytest.raises(DataError):
        g.mutual_knn_alignment(x, y, 0)


def test_knn_ties_go_to_lower_index():
    x = np.array([[1.0, 0], [0, 1], [0, 1], [0, 1]])
    assert g.knn_sets(x, 1)[0].tolist() == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.data())
def test_mutual_knn_brute_force_and_symmetry(b, d, data):
    elems = st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3)
    phi = data.draw(arrays(np.float64, (b, d), elements=elems))
    psi = data.draw(arrays(np.float64, (b, d), elements=elems))
    k = data.draw(st.integers(1, b - 1))
    v = g.mutual_knn_alignment(phi, psi, k)
    assert abs(v - g.mutual_knn_alignment(psi, phi, k)) < 1e-12
    if not _has_ties(phi) and not _has_ties(psi):
        assert abs(v - brute_mutual_knn(phi, psi, k)) < 1e-9
        perm = np.random.default_rng(b).permutation(b)
        assert abs(v - g.mutual_knn_alignment(phi[perm], psi[perm], k)) < 1e-12


def _has_ties(x):
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    s = u @ u.T
    vals = [s[i, j] for i, j in itertools.combinations(range(len(x)), 2)]
    return any(abs(p - q) < 1e-9 for p, q in itertools.combinations(vals, 2))


def test_centroid_distance_curve():
    a = [np.array([1.0, 0]), np.array([1.0, 1])]
    c = g.centroid_distance_curve(a, a)
    assert np.allclose(c.array(), 1.0)
    c = g.centroid_distance_curve([np.array([1.0, 0])], [np.array([0.0, 2])])
    assert c.values == [0.0]
    with pytest.raises(DataError):
        g.centroid_distance_curve([np.zeros(2)], [np.ones(2)])


def test_trajectory_linearity():
    p = np.array([1.0, 2, -1])
    line = [p * t for t in (0, 0.5, 2, 3, 7)]
    assert np.allclose(g.trajectory_linearity(line, 5).array(), 1.0)
    back = [np.zeros(3), p * 2, p * 1, p * 3]
    c = g.trajectory_linearity(back, 4)
    assert c.first_layer == 2 and abs(c.values[1] + 1.0) < 1e-12
    stall = [np.zeros(3), p, p, 2 * p]
    assert g.trajectory_linearity(stall, 4).values[1] is None
    with pytest.raises(DataError):
        g.trajectory_linearity(line, 9)


def test_trajectory_random_walk_oracle(rng):
    cs = list(np.cumsum(rng.standard_normal((10, 4)), axis=0))
    c = g.trajectory_linearity(cs, 10)
    P = cs[9] - cs[0]
    for l in range(2, 11):
        s = cs[l - 1] - cs[l - 2]
        assert abs(c.values[l - 2] - s @ P / np.linalg.norm(s) / np.linalg.norm(P)) < 1e-12


def test_separability_probe(rng):
    pos = [rng.standard_normal((60, 4)) + 4]
    neg = [rng.standard_normal((60, 4)) - 4]
    acc = g.separability_probe(pos, neg, 5, 0)
    assert acc.values[0] >= 0.99
    assert g.separability_probe(pos, neg, 5, 0).values == acc.values
    x = rng.standard_normal((1000, 4))
    chance = g.separability_probe([x[:500]], [x[500:]], 5, 1)
    assert abs(chance.values[0] - 0.5) <= 0.08
    with pytest.raises(DataError):
        g.separability_probe([x[:3]], [x[3:10]], 5)


def test_pca_projection(rng):
    basis = np.linalg.qr(rng.standard_normal((8, 2)))[0].T
    plane = rng.standard_normal((20, 2)) @ basis
    proj = g.pca_project({"en": plane[:10], "ja": plane[10:]}, 3)
    d0 = np.linalg.norm(plane[:, None] - plane[None], axis=-1)
    d1 = np.linalg.norm(proj.coords[:, None] - proj.coords[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-6
    same = g.pca_project({"a": plane, "b": plane}, 1)
    assert np.allclose(same.coords[:20], same.coords[20:])
    x = rng.standard_normal((30, 5))
    c = x - x.mean(0)
    ev = np.sort(np.linalg.eigvalsh(c.T @ c))[::-1]
    assert np.allclose(g.pca_project({"en": x}, 1).explained_variance, ev[:2] / ev.sum())
    line = np.outer(rng.standard_normal(6), np.ones(4))
    assert g.pca_project({"en": line}, 1).degenerate


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(0.1, 4)), st.floats(0.01, 100))
def test_cosine_curves_scale_invariant(x, c):
    a = g.similarity_gap_curve([(x, x[::-1])], [(x, x)])[0].values[0]
    b = g.similarity_gap_curve([(c * x, x[::-1])], [(x, x)])[0].values[0]
    assert math.isclose(a, b, abs_tol=1e-9)


def test_curves_csv_round_trip(tmp_path):
    curves = [g.SimilarityCurve("hs_parallel", [0.5, None, 1.0], {"pair": "en-ja"}),
              g.SimilarityCurve("trajectory_cos", [1.0, 0.25], {"m": 3}, first_layer=2)]
    g.write_curves_csv(curves, tmp_path / "c.csv", ["prov: x"])
    back = g.read_curves_csv(tmp_path / "c.csv")
    assert [c.to_dict() for c in back] == [c.to_dict() for c in curves]
    with pytest.raises(DataError):
        g.SimilarityCurve("bogus", [])
