import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from setcomplement.metrics import evaluate, evaluate_logit_file, itp, itr, score, tvd
from setcomplement.model import logits_fn
from setcomplement.rng import stream
from setcomplement.task import DegenerateInputError, perfect_distribution, sample_sequences
from setcomplement.theory import build_hardcoded


def test_examples():
    assert tvd(perfect_distribution([1, 3], 5), [1, 3]) == 0
    assert tvd(np.full(4, 0.25), [0]) == pytest.approx(0.25, abs=1e-15)
    assert itp(np.full(4, 0.25), [0]) == pytest.approx(0.25, abs=1e-15)
    assert tvd(np.eye(4)[0], [0]) == pytest.approx(1.0, abs=1e-15)
    assert itp(np.eye(4)[0], [0]) == 1.0
    assert itr(np.eye(4)[2], [2]) == 1


def test_itr_tie_breaks_to_lowest_index():
    assert itr(np.array([1.0, 1.0, 0.0]), [0]) == 1
    assert itr(np.array([1.0, 1.0, 0.0]), [1]) == 0


def test_rejects_full_sequence():
    with pytest.raises(DegenerateInputError):
        tvd(np.full(3, 1 / 3), [0, 1, 2])


@st.composite
def prob_and_seq(draw):
    v = draw(st.integers(2, 12))
    s = draw(st.integers(1, v - 1))
    t = draw(st.permutations(range(v)))[:s]
    w = np.array(draw(st.lists(st.floats(0, 1), min_size=v, max_size=v))) + 1e-9
    return w / w.sum(), list(t), v


@given(prob_and_seq())
def test_tvd_decomposition(case):
    p, t, v = case
    legal = np.setdiff1d(np.arange(v), t)
    expected = 0.5 * (itp(p, t) + np.abs(p[legal] - 1 / (v - len(t))).sum())
    assert tvd(p, t) == pytest.approx(expected, abs=1e-12)
    assert itp(p, t) <= tvd(p, t) + 1e-12


def test_uniform_predictor_gives_s_over_v():
    v, s = 8, 3
    batch = sample_sequences(v, s, 50, stream(0, "uniform"))
    legal = np.ones((50, v), dtype=bool)
    legal[np.arange(50)[:, None], batch] = False
    out = score(np.zeros((50, v)), legal)
    assert out["tvd"] == pytest.approx(s / v, abs=1e-15)
    assert out["itp"] == pytest.approx(s / v, abs=1e-15)


def test_evaluate_uniform_length_one_rows():
    batch = sample_sequences(4, 1, 20, stream(1, "ev"))
    out = evaluate(lambda b: np.zeros(b.shape + (4,)), batch, 4)
    assert out["tvd"] == pytest.approx(0.25) and out["itp"] == pytest.approx(0.25)


def test_hardcoded_model_is_nearly_perfect():
    v = 6
    params = build_hardcoded(v, 10.0)
    batch = sample_sequences(v, v - 1, 200, stream(2, "hc"))
    out = evaluate(logits_fn(params), batch, v)
    assert out["itr"] == 0
    assert out["itp"] < v * np.exp(-10.0)


def test_evaluate_logit_file(tmp_path):
    path = tmp_path / "logits.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"tokens": [0, 2], "logits": [0, 0, 0, 0]}) + "\n")
        fh.write(json.dumps({"tokens": [1], "logits": [-9, -9, 5, 5]}) + "\n")
    out = evaluate_logit_file(path, 4)
    assert out["itp"] == pytest.approx((0.5 + 0.0) / 2, abs=1e-6)
    assert out["itr"] == 0.5  # all-zero logits tie at token 0, which is occupied
    (tmp_path / "bad.jsonl").write_text(json.dumps({"tokens": [0], "logits": [0, 0]}) + "\n")
    with pytest.raises(ValueError):
        evaluate_logit_file(tmp_path / "bad.jsonl", 4)
