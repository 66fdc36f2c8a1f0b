import json

import numpy as np
import pytest

from xfrn.corpus import sample_id
from xfrn.errors import ConfigError, ModelError
from xfrn.model import (
    GatedMlpLayer,
    GatedMlpModel,
    boundary_layer,
    build_planted_fixture,
    fixture_corpus,
    forward_capture,
    generate,
    load_adapter,
    silu,
    type_layers,
)
from xfrn.store import DeactivationMask


def toy_model(seed=0, L=3, d=8, dm=16):
    rng = np.random.default_rng(seed)
    layers = [GatedMlpLayer(rng.standard_normal((d, dm)).astype(np.float32) * 0.5,
                            rng.standard_normal((d, dm)).astype(np.float32) * 0.5,
                            rng.standard_normal((dm, d)).astype(np.float32) * 0.3) for _ in range(L)]
    vocab = ["</s>", "<unk>", "unknown", "a", "b", "c", "d"]
    embed = rng.standard_normal((len(vocab), d)).astype(np.float32)
    return GatedMlpModel("toy", layers, vocab, embed, embed.copy(), max_context=8)


def test_boundary_rule():
    assert boundary_layer(32) == 20
    assert boundary_layer(8) == 5
    assert list(type_layers("type1", 8)) == [1, 2, 3, 4, 5]
    assert list(type_layers("type2", 8)) == [6, 7, 8]
    with pytest.raises(ConfigError):
        type_layers("type3", 8)


def test_activation_is_gated_product():
    m = toy_model()
    caps = m.capture(["a b"], None)
    x = caps["pre_mlp"][0, 0].astype(np.float64)
    lay = m.layers[0]
    expect = silu(x @ lay.gate) * (x @ lay.up)
    assert np.allclose(caps["mlp_activation"][0, 0], expect, atol=1e-5)


def test_mlp_output_equals_value_sum():
    m = toy_model()
    caps = m.capture(["a b c", "d"], None)
    vals = m.value_table()
    for row in range(2):
        for l in range(1, m.num_layers + 1):
            out = caps["hidden_state"][row, l - 1] - caps["pre_mlp"][row, l - 1]
            recon = sum(caps["mlp_activation"][row, l - 1, i] * vals.layer(l)[i] for i in range(m.mlp_dim))
            assert np.abs(out - recon).max() < 1e-4


def test_empty_mask_matches_unmasked():
    m = toy_model()
    a = m.capture(["a b", "c"], None)
    b = m.capture(["a b", "c"], DeactivationMask())
    for k in a:
        assert np.abs(a[k] - b[k]).max() <= 1e-5


def test_full_layer_mask_zeroes_mlp_output():
    m = toy_model()
    mask = DeactivationMask(frozenset((2, i) for i in range(m.mlp_dim)))
    caps = m.capture(["a b"], mask)
    assert np.all(caps["mlp_activation"][0, 1] == 0)
    assert np.array_equal(caps["hidden_state"][0, 1], caps["pre_mlp"][0, 1])


def test_single_neuron_mask_removes_its_term():
    m = toy_model()
    base = m.capture(["a c"], None)
    masked = m.capture(["a c"], DeactivationMask(frozenset({(2, 5)})))
    alpha = base["mlp_activation"][0, 1, 5]
    v = m.value_table().layer(2)[5]
    diff = masked["hidden_state"][0, 1] - base["hidden_state"][0, 1]
    assert np.abs(diff - (-alpha * v)).max() < 1e-4
    assert masked["mlp_activation"][0, 1, 5] == 0.0


def test_invalid_mask_rejected_before_forward():
    m = toy_model()

    def boom(*a, **k):
        raise AssertionError("forward ran")

    m.capture = boom
    with pytest.raises(ModelError, match="outside"):
        list(forward_capture(m, ["a"], mask=DeactivationMask(frozenset({(1, 99)}))))
    assert list(forward_capture(m, [], mask=None)) == []


def test_forward_capture_records():
    m = toy_model()
    recs = list(forward_capture(m, ["a", "b"], kinds=("hidden_state",), sample_ids=["x", "y"],
                                languages=["en", "ja"], pair_indices=[0, 1]))
    assert len(recs) == 2 * m.num_layers
    assert recs[0].kinds() == ["hidden_state"] and recs[0].mlp_activation is None
    assert recs[-1].sample_id == "y" and recs[-1].layer == m.num_layers and recs[-1].pair_index == 1


def test_generate_contract():
    m = toy_model()
    assert generate(m, "a b", None, 3) == generate(m, "a b", None, 3)
    assert generate(m, "a b", DeactivationMask(), 3) == generate(m, "a b", None, 3)
    with pytest.raises(ModelError, match="max context length 8"):
        generate(m, "a " * 8, None, 4)
    with pytest.raises(ModelError, match="max context length 8"):
        m.capture(["a " * 9], None)
    with pytest.raises(ModelError):
        generate(m, "a", None, 0)


def test_save_load_round_trip(tmp_path):
    m = toy_model()
    m.save(tmp_path / "w.npz")
    (tmp_path / "adapter.json").write_text(json.dumps({"family": "numpy", "weights": "w.npz"}))
    back = load_adapter(tmp_path / "adapter.json")
    a, b = m.capture(["a b"], None), back.capture(["a b"], None)
    assert np.array_equal(a["hidden_state"], b["hidden_state"])


def test_load_adapter_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_adapter(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_adapter(tmp_path / "bad.json")
    (tmp_path / "np.json").write_text('{"family": "numpy", "weights": "missing.npz"}')
    with pytest.raises(ModelError, match="missing.npz"):
        load_adapter(tmp_path / "np.json")


def test_fixture_seeded_and_validated():
    a = build_planted_fixture(3, L=4, d=32, d_m=32, n_pairs=20, n_questions=2)
    b = build_planted_fixture(3, L=4, d=32, d_m=32, n_pairs=20, n_questions=2)
    for la, lb in zip(a.model.layers, b.model.layers):
        assert la.gate.tobytes() == lb.gate.tobytes() and la.down.tobytes() == lb.down.tobytes()
    assert a.model.embed.tobytes() == b.model.embed.tobytes()
    empty = build_planted_fixture(0, L=4, d=32, d_m=32, planted_per_layer=0, n_pairs=20, n_questions=2)
    assert all(not empty.ground_truth(t, l) for t in ("type1", "type2") for l in empty.languages)
    with pytest.raises(ModelError):
        build_planted_fixture(0, d=1)
    with pytest.raises(ModelError):
        build_planted_fixture(0, languages=("en",))
    with pytest.raises(ModelError):
        build_planted_fixture(0, d_m=4, planted_per_layer=8)


def test_fixture_ground_truth_layout(fixture0):
    b = boundary_layer(fixture0.model.num_layers)
    for lang in ("ja", "ko"):
        t1, t2 = fixture0.ground_truth("type1", lang), fixture0.ground_truth("type2", lang)
        assert {l for l, _ in t1} == set(range(1, b + 1))
        assert {l for l, _ in t2} == set(range(b + 1, fixture0.model.num_layers + 1))
        assert len(t1) == 4 * b
    assert not fixture0.ground_truth("type1", "ja") & fixture0.ground_truth("type1", "ko")


def test_fixture_clusters_separable_at_layer_one(fixture0):
    fx = fixture0
    caps = {l: fx.model.capture([fx.sentence(l, p) for p in range(60)], None)["hidden_state"][:, 0]
            for l in fx.languages}
    means = {l: x.mean(axis=0) for l, x in caps.items()}
    for l, x in caps.items():
        d = {k: np.linalg.norm(x - m, axis=1) for k, m in means.items()}
        nearest = np.argmin(np.stack([d[k] for k in fx.languages]), axis=0)
        assert (np.array(fx.languages)[nearest] == l).all()


def test_fixture_routing_shift_under_mask(fixture0):
    fx = fixture0
    mask = DeactivationMask(fx.ground_truth("type1", "ja"))
    q = fx.question("ja", 1)
    assert generate(fx.model, q, None, 4) == fx.answer(1)
    assert generate(fx.model, q, mask, 4) != fx.answer(1)
    # planted Type-1 neurons really move ja toward en
    corpus = fixture_corpus(fx, 30)
    texts = [p.sentences["ja"] for p in corpus.pairs]
    en = fx.model.capture([p.sentences["en"] for p in corpus.pairs], None)["hidden_state"][:, 4].mean(0)
    base = fx.model.capture(texts, None)["hidden_state"][:, 4].mean(0)
    masked = fx.model.capture(texts, mask)["hidden_state"][:, 4].mean(0)
    cos = lambda u, v: u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    assert cos(base, en) > cos(masked, en) + 0.1
    assert sample_id("ja", 3) == "ja-00000003"
