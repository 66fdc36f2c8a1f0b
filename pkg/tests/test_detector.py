import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import capture_run
from xfrn.detector import (
    DetectionResult,
    all_scores,
    detect_language_specific_neurons,
    detect_transfer_neurons,
    layer_score,
    neuron_score,
    per_layer_top,
    rank_neurons,
    score_layer,
    transfer_score,
)
from xfrn.errors import DataError
from xfrn.model import GatedMlpLayer, GatedMlpModel, boundary_layer, silu
from xfrn.store import ActivationRecord, ModelManifest, write_capture_run


def test_layer_and_neuron_score_examples(rng):
    c = np.array([1.0, 0.0])
    assert layer_score(c, c) == 1.0
    assert layer_score(np.array([0.0, 1.0]), c) == 0.0
    assert neuron_score(np.array([0.0, 1.0]), 1.0, np.array([1.0, -1.0]), c) == pytest.approx(1.0, abs=1e-15)
    x, v, cc = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(6)
    assert neuron_score(x, 0.0, v, cc) == layer_score(x, cc)
    y = x + 0.7 * v
    assert abs(neuron_score(x, 0.7, v, cc) - y @ cc / np.linalg.norm(y) / np.linalg.norm(cc)) < 1e-12
    with pytest.raises(DataError):
        layer_score(np.zeros(2), c)


def test_transfer_score_zero_activation_is_exactly_zero(rng):
    pre = rng.standard_normal((9, 5))
    assert transfer_score(pre, np.zeros(9), rng.standard_normal(5), rng.standard_normal(5)) == 0.0
    res = score_layer(pre, np.zeros((9, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5))
    assert np.all(res.scores == 0.0)


def test_score_layer_matches_per_sample_loop(rng):
    pre, alpha = rng.standard_normal((7, 5)), rng.standard_normal((7, 3))
    vals, c = rng.standard_normal((3, 5)), rng.standard_normal(5)
    res = score_layer(pre, alpha, vals, c)
    for i in range(3):
        loop = np.mean([neuron_score(pre[k], alpha[k, i], vals[i], c) - layer_score(pre[k], c) for k in range(7)])
        assert abs(res.scores[i] - loop) < 1e-12


def test_zero_sum_samples_excluded_and_counted():
    pre = np.array([[1.0, 0.0], [0.0, 1.0]])
    alpha = np.array([[1.0], [0.5]])
    vals = np.array([[-1.0, 0.0]])
    res = score_layer(pre, alpha, vals, np.array([1.0, 1.0]))
    assert res.excluded_zero[0] == 1 and res.valid[0] == 1
    expect = neuron_score(pre[1], 0.5, vals[0], np.array([1.0, 1.0])) - layer_score(pre[1], np.array([1.0, 1.0]))
    assert abs(res.scores[0] - expect) < 1e-12
    res = score_layer(pre[:1], alpha[:1], vals, np.array([1.0, 1.0]))
    assert np.isnan(res.scores[0])
    assert rank_neurons({1: np.array([np.nan, 0.1])})[-1][:2] == (1, 0)


def test_rank_ties_layer_then_index():
    ranked = rank_neurons({2: np.array([0.5, 0.5]), 1: np.array([0.1, 0.5])})
    assert [(l, i) for l, i, _ in ranked] == [(1, 1), (2, 0), (2, 1), (1, 0)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True), st.floats(-5, 5))
def test_ranking_invariant_under_monotone_transform(scores, shift):
    s = np.array(scores) / 1000.0
    base = [(l, i) for l, i, _ in rank_neurons({1: s})]
    assert [(l, i) for l, i, _ in rank_neurons({1: s + shift})] == base
    assert [(l, i) for l, i, _ in rank_neurons({1: np.exp(3 * s)})] == base


def toy2(seed=0, L=2, d=6, dm=12):
    rng = np.random.default_rng(seed)
    layers = [GatedMlpLayer(*(rng.standard_normal(s).astype(np.float32) * 0.6 for s in ((d, dm), (d, dm), (dm, d))))
              for _ in range(L)]
    vocab = ["</s>", "<unk>", "unknown"] + [f"{l}:{p}" for l in ("en", "ja") for p in range(12)]
    emb = rng.standard_normal((len(vocab), d)).astype(np.float32)
    return GatedMlpModel("toy2", layers, vocab, emb, emb.copy())


@pytest.mark.parametrize("neuron_type", ["type1", "type2"])
def test_full_ranking_matches_brute_force(tmp_path, neuron_type):
    m = toy2(L=2, dm=32)
    run = capture_run(m, {"en": lambda p: f"en:{p}", "ja": lambda p: f"ja:{p}"}, tmp_path / "r.xfrn", range(12))
    res = detect_transfer_neurons(run, m.value_table(), "ja", neuron_type, top_n=10_000)
    # brute force: recompute every forward by hand in float64 from the weights
    def forward(tok):
        h = m.embed[m.tokenize(tok)].sum(0).astype(np.float64)
        pres, alphas, hs = [], [], []
        for lay in m.layers:
            a = silu(h @ lay.gate) * (h @ lay.up)
            pres.append(h)
            alphas.append(a)
            h = h + sum(a[i] * lay.down[i].astype(np.float64) for i in range(m.mlp_dim))
            hs.append(h)
        return pres, alphas, hs
    runs = {lang: [forward(f"{lang}:{p}") for p in range(12)] for lang in ("en", "ja")}
    b = boundary_layer(2)
    layers = range(1, b + 1) if neuron_type == "type1" else range(b + 1, 3)
    cos = lambda u, v: float(u @ v / np.linalg.norm(u) / np.linalg.norm(v))
    brute = []
    for l in layers:
        if neuron_type == "type1":
            c = np.mean([(runs["en"][p][2][l - 1] + runs["ja"][p][2][l - 1]) / 2 for p in range(12)], axis=0)
        else:
            c = np.mean([runs["ja"][p][2][l - 1] for p in range(12)], axis=0)
        for i in range(m.mlp_dim):
            v = m.layers[l - 1].down[i].astype(np.float64)
            diffs = []
            for p in range(12):
                pre, a = runs["ja"][p][0][l - 1], runs["ja"][p][1][l - 1][i]
                diffs.append(cos(pre + a * v, c) - cos(pre, c))
            brute.append((l, i, float(np.mean(diffs))))
    brute.sort(key=lambda t: (-t[2], t[0], t[1]))
    got = [(r.layer, r.index) for r in res.ranked]
    assert got == [(l, i) for l, i, _ in brute]
    assert np.allclose([r.score for r in res.ranked], [s for _, _, s in brute], atol=1e-5)


def test_detection_contract(tmp_path, fixture0):
    fx = fixture0
    run = capture_run(fx.model, {l: (lambda p, l=l: fx.sentence(l, p)) for l in fx.languages},
                      tmp_path / "r.xfrn", range(0, 120))
    vals = fx.model.value_table()
    b = boundary_layer(fx.model.num_layers)
    r2 = detect_transfer_neurons(run, vals, "ja", "type2", 5)
    assert len(r2.ranked) == 5 and all(r.layer > b for r in r2.ranked)
    assert r2.population == fx.model.num_layers * fx.model.mlp_dim
    big = detect_transfer_neurons(run, vals, "ko", "type2", 10**6)
    assert big.truncated and len(big.ranked) == big.candidate_count == (fx.model.num_layers - b) * fx.model.mlp_dim
    with pytest.raises(DataError):
        detect_transfer_neurons(run, vals, "en", "type1", 5)
    top = per_layer_top(all_scores(run, vals, "ja", "type1"), 4)
    assert len(top & fx.ground_truth("type1", "ja")) >= 0.9 * len(fx.ground_truth("type1", "ja"))
    for l, i in fx.ground_truth("type1", "ja"):
        assert all_scores(run, vals, "ja", "type1")[l][i] > 0
    assert r2.train_ids == list(range(120))
    r2.write(tmp_path / "d.csv", tmp_path / "d.json", ["config_sha256: x"])
    back = DetectionResult.read(tmp_path / "d.json")
    assert back.neurons == r2.neurons and back.to_dict() == r2.to_dict()
    text = (tmp_path / "d.csv").read_text()
    assert text.startswith("# config_sha256: x") and text.count("\n") == 5 + 1 + 6
    big.write(tmp_path / "b.csv", tmp_path / "b.json")
    assert "# warning: top_n exceeds candidate count" in (tmp_path / "b.csv").read_text()


def _act_run(tmp_path, acts_by_lang):
    dm = next(iter(acts_by_lang.values())).shape[1]
    m = ModelManifest("t", 2, 1, dm, capture_kinds=("mlp_activation",))
    recs = []
    for lang, acts in acts_by_lang.items():
        for k, a in enumerate(acts):
            for layer in (1, 2):
                recs.append(ActivationRecord(f"{lang}-{k:08d}", lang, layer, mlp_activation=a.astype(np.float32), pair_index=k))
    return write_capture_run(m, recs, tmp_path / "a.xfrn")


def test_language_specific_neurons(tmp_path, rng):
    ja = np.column_stack([np.ones(10), np.full(10, 2.0), rng.standard_normal(10)])
    en = np.column_stack([np.zeros(10), np.full(10, 2.0), rng.standard_normal(10)])
    run = _act_run(tmp_path, {"ja": ja, "en": en})
    res = detect_language_specific_neurons(run, "ja", 0.99)
    assert {(l, i) for l, i, _ in res.neurons} == {(1, 0), (2, 0)}
    assert res.histogram == {1: 1, 2: 1}
    res0 = detect_language_specific_neurons(run, "ja", 0.0)
    eta = {(l, i): e for l, i, e in res0.neurons}
    assert eta[(1, 1)] == 0.0
    x, y = np.r_[ja[:, 2], en[:, 2]], np.r_[np.ones(10), np.zeros(10)]
    sb = sum(10 * (x[y == c].mean() - x.mean()) ** 2 for c in (0, 1))
    sw = sum(((x[y == c] - x[y == c].mean()) ** 2).sum() for c in (0, 1))
    assert abs(eta[(1, 2)] - sb / (sb + sw)) < 1e-9
    with pytest.raises(DataError):
        detect_language_specific_neurons(_act_run(tmp_path, {"ja": ja}), "ja", 0.5)
