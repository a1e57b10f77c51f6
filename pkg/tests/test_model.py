import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from oracles import gradient_errors, naive_logits, random_params
from setcomplement.model import (
    DECAYED_PARAMS, NO_DROPOUT, DropoutMasks, DropoutSpec, ModelDims, ModelParams, decay_mask,
    derived_matrices, forward, forward_batch, forward_constant_attention, init_params,
    load_checkpoint, next_token_distribution, rmsnorm, sample_masks, save_checkpoint, with_norm,
)
from setcomplement.rng import stream
from setcomplement.task import sample_sequences


@st.composite
def model_setups(draw, norms=("rmsnorm", "identity")):
    v = draw(st.integers(3, 7))
    dims = ModelDims(v, draw(st.integers(1, 6)), draw(st.integers(1, 4)), draw(st.integers(1, 5)),
                     draw(st.sampled_from(norms)))
    seed = draw(st.integers(0, 10**6))
    s = draw(st.integers(1, v - 1))
    return dims, seed, s


@given(model_setups())
def test_forward_matches_naive_loops(setup):
    dims, seed, s = setup
    rng = stream(seed, "model-test")
    params = random_params(dims, rng)
    t = sample_sequences(dims.v, s, 1, rng)[0]
    logits, _ = forward_batch(params, t[None])
    for k in range(s):
        np.testing.assert_allclose(logits[0, k], naive_logits(params, t[:k + 1]), rtol=1e-10, atol=1e-12)


@given(model_setups())
def test_forward_with_dropout_masks_matches_naive(setup):
    dims, seed, s = setup
    rng = stream(seed, "model-dropout")
    params = random_params(dims, rng)
    t = sample_sequences(dims.v, s, 1, rng)[0]
    masks = sample_masks((1, s, dims.d), DropoutSpec(0.3, 0.4), rng)
    logits, _ = forward_batch(params, t[None], masks=masks)
    expected = naive_logits(params, t, masks.embed[0], masks.resid[0])
    np.testing.assert_allclose(logits[0, -1], expected, rtol=1e-10, atol=1e-12)


def test_causal_prefixes_independent_of_suffix():
    dims = ModelDims(9, 6, 3, 5)
    params = random_params(dims, stream(0, "causal"))
    a = np.array([[0, 3, 5, 1, 2]])
    b = np.array([[0, 3, 5, 8, 7]])
    la, lb = forward_batch(params, a)[0], forward_batch(params, b)[0]
    np.testing.assert_allclose(la[0, :3], lb[0, :3], rtol=0, atol=1e-14)


@given(model_setups(norms=("identity", "rmsnorm")))
def test_constant_attention_form(setup):
    dims, seed, s = setup
    rng = stream(seed, "constant")
    params = random_params(dims, rng)
    params.W_Q[:] = 0
    params.W_K[:] = 0
    mats = derived_matrices(params)
    t = sample_sequences(dims.v, s, 1, rng)[0]
    logits, _ = forward(params, t)
    np.testing.assert_allclose(logits, forward_constant_attention(mats.B, mats.D, t), rtol=1e-10, atol=1e-12)


def test_forward_rejects_full_length():
    params = init_params(ModelDims(4, 3, 2, 3), stream(0, "init"))
    with pytest.raises(ValueError):
        forward(params, [0, 1, 2, 3])
    with pytest.raises(ValueError):
        forward(params, [])


def test_dims_validation():
    with pytest.raises(ValueError):
        ModelDims(4, 0, 1, 1)
    with pytest.raises(ValueError):
        ModelDims(4, 3, 1, 1, norm="layernorm")


def test_init_truncated_normal_statistics():
    dims = ModelDims(33, 128, 128, 128)
    params = init_params(dims, stream(0, "init-stats"))
    w = np.concatenate([a.ravel() for n, a in zip(("E", "W_Q", "W_K", "W_V", "W_O", "U"),
                                                   [params.E, params.W_Q, params.W_K, params.W_V, params.W_O, params.U])])
    assert np.abs(w).max() <= 0.04
    expected_std = stats.truncnorm.std(-2, 2, scale=0.02)
    assert w.std() == pytest.approx(expected_std, rel=0.01)
    assert abs(w.mean()) < 1e-3
    assert np.all(params.gains == 1.0)
    assert stats.kstest(w, stats.truncnorm(-2, 2, scale=0.02).cdf).pvalue > 1e-3


def test_decay_mask_excludes_embedding_and_gains():
    dims = ModelDims(5, 4, 2, 3)
    mask = ModelParams.from_flat(dims, decay_mask(dims))
    for name, arr in zip(("E", "gains", "W_Q", "W_K", "W_V", "W_O", "U"), mask.arrays()):
        assert np.all(arr == (1.0 if name in DECAYED_PARAMS else 0.0))


def test_flat_views_share_memory():
    dims = ModelDims(5, 4, 2, 3)
    vec = np.zeros(dims.size)
    params = ModelParams.from_flat(dims, vec)
    params.U[0, 0] = 7.0
    assert 7.0 in vec


def test_softmax_stable_on_large_logits():
    p = next_token_distribution(np.array([1e300, 0.0, -1e300]))
    assert np.array_equal(p, [1.0, 0.0, 0.0])


def test_rmsnorm_unit_rms():
    x = stream(0, "rms").normal(size=(10, 6)) * 5
    y = rmsnorm(x, np.ones(6), 1e-12)
    np.testing.assert_allclose(np.sqrt(np.mean(y * y, axis=-1)), 1.0, rtol=1e-9)


def test_attention_saturation_counted():
    dims = ModelDims(4, 2, 1, 2, norm="identity")
    params = ModelParams.zeros(dims)
    params.E[:] = 1e3
    params.W_Q[:] = 1e3
    params.W_K[:] = 1e3
    logits, trace = forward_batch(params, np.array([[0, 1]]))
    assert trace.saturated > 0
    assert np.all(np.isfinite(logits))


def test_dropout_masks_inverted_scaling():
    m = sample_masks((200, 30, 16), DropoutSpec(0.25, 0.0), stream(0, "drop"))
    assert m.resid is None
    vals = np.unique(m.embed)
    np.testing.assert_allclose(vals, [0.0, 1 / 0.75])
    assert m.embed.mean() == pytest.approx(1.0, abs=0.01)
    assert sample_masks((2, 2, 2), NO_DROPOUT, stream(0, "x")) == DropoutMasks()


def test_dropout_requires_rng():
    params = init_params(ModelDims(4, 3, 2, 3), stream(0, "init"))
    with pytest.raises(ValueError):
        forward_batch(params, np.array([[0, 1]]), DropoutSpec(0.5, 0.0), rng=None)


@pytest.mark.parametrize("norm", ["rmsnorm", "identity"])
@pytest.mark.parametrize("frozen_dropout", [False, True])
def test_gradients_match_finite_differences(norm, frozen_dropout):
    rng = stream(3, f"grad-{norm}-{frozen_dropout}")
    dims = ModelDims(5, 4, 3, 3, norm)
    params = random_params(dims, rng)
    inputs = sample_sequences(5, 4, 3, rng)
    targets = sample_sequences(5, 4, 3, rng)
    targets[0, 1] = -1
    masks = sample_masks(inputs.shape + (4,), DropoutSpec(0.3, 0.3), rng) if frozen_dropout else DropoutMasks()
    errors = gradient_errors(params, inputs, targets, masks)
    assert max(errors.values()) < 1e-6, errors


def test_gradients_match_torch_autograd():
    torch = pytest.importorskip("torch")
    from setcomplement.model import backward

    rng = stream(8, "torch-grad")
    dims = ModelDims(6, 5, 2, 4)
    params = random_params(dims, rng)
    inputs = sample_sequences(6, 4, 7, rng)
    targets = sample_sequences(6, 4, 7, rng)
    _, trace = forward_batch(params, inputs)
    loss, grads = backward(trace, targets)

    T = {n: torch.tensor(a, dtype=torch.float64, requires_grad=True)
         for n, a in zip(("E", "gains", "W_Q", "W_K", "W_V", "W_O", "U"), params.arrays())}
    tok = torch.tensor(inputs)
    x = T["E"][tok]
    xn = T["gains"] * x / torch.sqrt((x * x).mean(-1, keepdim=True) + dims.norm_eps)
    scores = (xn @ T["W_Q"]) @ (xn @ T["W_K"]).transpose(1, 2) / dims.d_k ** 0.5
    causal = torch.tril(torch.ones(4, 4, dtype=torch.bool))
    attn = torch.softmax(scores.masked_fill(~causal, float("-inf")), -1)
    logits = (x + attn @ (xn @ T["W_V"] @ T["W_O"])) @ T["U"]
    ref = torch.nn.functional.cross_entropy(logits.reshape(-1, 6), torch.tensor(targets).reshape(-1))
    ref.backward()
    assert loss == pytest.approx(ref.item(), rel=1e-12)
    for name, g in zip(T, grads.arrays()):
        np.testing.assert_allclose(g, T[name].grad.numpy(), rtol=1e-9, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(ModelDims(7, 5, 2, 6, "rmsnorm", 1e-7), stream(4, "ckpt"))
    save_checkpoint(tmp_path / "m.ckpt", params, seed=4, step=10)
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    assert back.dims == params.dims
    assert header["seed"] == 4 and header["step"] == 10
    for a, b in zip(params.arrays(), back.arrays()):
        assert np.array_equal(a, b)
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


def test_with_norm_switches_mode():
    params = init_params(ModelDims(4, 3, 2, 3), stream(0, "init"))
    assert with_norm(params, "identity").dims.norm == "identity"
