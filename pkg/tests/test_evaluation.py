from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xfrn.corpus import QaDataset, QaItem
from xfrn.errors import DataError, ModelError
from xfrn.evaluation import (
    build_prompt,
    delta_report,
    extract_answer,
    normalize_tokens,
    run_qa_protocol,
    token_f1,
    QaResult,
)
from xfrn.intervention import baseline_mask
from xfrn.model import fixture_qa
from xfrn.store import DeactivationMask


def test_tagged_examples():
    assert token_f1("paris", ["paris"]) == 1.0
    assert token_f1("the red fox", ["a red dog"]) == pytest.approx(1 / 3, abs=1e-15)
    assert token_f1("alpha beta", ["gamma delta"]) == 0.0


def test_edge_cases():
    assert token_f1("", [""]) == 1.0
    assert token_f1("", ["x"]) == 0.0
    assert token_f1("x", ["!!"]) == 0.0
    assert token_f1("Paris!", ["paris"]) == 1.0
    assert token_f1("rome", ["paris", "Rome"]) == 1.0
    assert token_f1("東京都", ["東京"], "ja") == pytest.approx(0.8)
    assert normalize_tokens("서울, 한국", "ko") == ["서", "울", "한", "국"]
    assert normalize_tokens("Hello,  World.") == ["hello", "world"]
    with pytest.raises(DataError):
        token_f1("x", [])


def f1_oracle(p, g):
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    common = 0
    remaining = list(g)
    for t in p:
        if t in remaining:
            remaining.remove(t)
            common += 1
    if common == 0:
        return 0.0
    pr, rc = common / len(p), common / len(g)
    return 2 * pr * rc / (pr + rc)


def test_randomized_multisets_against_count_oracle():
    rng = np.random.default_rng(7)
    vocab = ["a", "b", "c", "d", "e", "f"]
    for _ in range(200):
        p = list(rng.choice(vocab, int(rng.integers(0, 7))))
        g = list(rng.choice(vocab, int(rng.integers(0, 7))))
        assert token_f1(" ".join(p), [" ".join(g)]) == f1_oracle(p, g)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.sampled_from("abcxyz"), max_size=8), st.lists(st.sampled_from("abcxyz"), max_size=8))
def test_symmetry_and_range(p, g):
    a, b = " ".join(p), " ".join(g)
    f = token_f1(a, [b])
    assert f == token_f1(b, [a])
    assert 0.0 <= f <= 1.0
    assert (f == 1.0) == (Counter(p) == Counter(g))


def test_prompt_and_extraction():
    assert build_prompt("Who?", "ja") == "Who?\n答え:"
    assert build_prompt("Who?", "xx") == "Who?\nAnswer:"
    assert build_prompt("Who?", "en", {"en": "A:"}) == "Who?\nA:"
    assert extract_answer("\n  Rome \nsecond line") == "Rome"
    assert extract_answer("") == ""


def test_protocol_empty_masks_no_change(fixture0):
    ds = fixture_qa(fixture0, ["ja"])
    out = run_qa_protocol(ds, fixture0.model, {"type1": DeactivationMask(), "baseline": DeactivationMask()})
    for row in out.report.rows:
        assert all(d == 0.0 for d in row.delta.values())
    assert {r.condition for r in out.results} == {"none", "type1", "baseline"}


def test_protocol_type1_hurts_more_than_baseline(fixture0, tmp_path):
    fx = fixture0
    ds = fixture_qa(fx, ["ja", "ko"])
    t1 = {l: DeactivationMask(fx.ground_truth("type1", l), "detected_type1") for l in ("ja", "ko")}
    bm = {l: baseline_mask(t1[l], 3, fx.model.mlp_dim) for l in t1}
    out = run_qa_protocol(ds, fx.model, {"type1": t1, "baseline": bm})
    for lang in ("ja", "ko"):
        for thr in (None, 0.5, 0.8):
            row = out.report.get(lang, thr)
            assert row.delta["type1"] < row.delta["baseline"]
    paths = out.write(tmp_path, ["config_sha256: z"])
    scatter = paths["scatter_type1"].read_text().splitlines()
    assert scatter[0] == "# config_sha256: z" and scatter[1] == "question_id,language,x_none_f1,y_condition_f1"
    assert len(scatter) == 2 + len(ds)


def test_filter_is_strict_and_shared():
    res = [QaResult("q1", "en", "none", "", 0.5), QaResult("q2", "en", "none", "", 0.9),
           QaResult("q1", "en", "type1", "", 0.0), QaResult("q2", "en", "type1", "", 0.3)]
    rep = delta_report(res, ("none", "type1"), (0.5, 0.8))
    row = rep.get("en", 0.5)
    assert row.n_questions == 1 and row.mean_none == 0.9 and row.delta["type1"] == pytest.approx(-0.6)
    flipped = delta_report(list(reversed(res)), ("none", "type1"), (0.5, 0.8))
    assert flipped.to_dict() == rep.to_dict()


class _Flaky:
    num_layers, mlp_dim = 2, 4

    def check_mask(self, mask):
        pass

    def generate(self, prompt, mask, n):
        if "bad" in prompt:
            raise ModelError("context overflow")
        return "yes\nmore"


def test_generation_failure_recorded():
    ds = QaDataset([QaItem("q1", "en", "good", ["yes"]), QaItem("q2", "en", "bad", ["yes"])])
    out = run_qa_protocol(ds, _Flaky(), {})
    by = {r.question_id: r for r in out.results}
    assert by["q1"].f1 == 1.0 and by["q1"].generated == "yes"
    assert by["q2"].f1 == 0.0 and by["q2"].error == "ModelError"
    with pytest.raises(DataError):
        run_qa_protocol(QaDataset([]), _Flaky(), {})
    with pytest.raises(DataError):
        run_qa_protocol(ds, _Flaky(), {"type2": DeactivationMask()})
