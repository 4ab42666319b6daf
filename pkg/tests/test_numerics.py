import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trierec import numerics as nx


def T(x, name=None):
    return nx.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------- forward

def test_softmax_of_equal_logits_is_uniform():
    out = nx.masked_softmax(T([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.25] * 4)


def test_identity_matmul():
    m = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(nx.matmul(T(np.eye(3)), T(m)).data, m)


def test_layer_norm_of_constant_vector_is_zero():
    out = nx.layer_norm(T(np.full((2, 5), 3.7)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_masked_keys_get_exactly_zero_weight():
    x = T(np.random.default_rng(1).normal(size=(2, 4)))
    mask = np.array([[True, False, True, False], [False, False, False, False]])
    out = nx.masked_softmax(x, mask).data
    assert np.all(out[0, [1, 3]] == 0.0)
    np.testing.assert_allclose(out[0].sum(), 1.0, atol=1e-12)
    assert np.all(out[1] == 0.0)    # fully masked row -> zeros, never NaN


# ---------------------------------------------------------------- backward

def test_square_derivative():
    x = T(3.0)
    g = nx.backward(x * x, {"x": x})
    assert g["x"] == pytest.approx(6.0)


def test_unused_parameter_gets_zero_gradient():
    x, unused = T([1.0, 2.0]), T(np.ones((2, 3)))
    g = nx.backward(nx.tsum(x * x), {"x": x, "unused": unused})
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 3)))


def test_backward_rejects_non_scalar():
    x = T([1.0, 2.0])
    with pytest.raises(nx.GraphError):
        nx.backward(x * x, {"x": x})


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = nx.Tensor(rng.normal(size=(5, 4)))
    p = {"w1": T(rng.normal(size=(4, 4))), "b1": T(rng.normal(size=4)),
         "w2": T(rng.normal(size=(4, 3))), "b2": T(rng.normal(size=3))}
    y = rng.integers(0, 3, 5)

    def loss():
        h = nx.gelu(nx.matmul(x, p["w1"]) + p["b1"])
        return nx.cross_entropy(nx.matmul(h, p["w2"]) + p["b2"], y)

    assert nx.finite_difference_check(loss, p) < 1e-4


def test_linear_map_fd_error_is_tiny():
    rng = np.random.default_rng(3)
    x = nx.Tensor(rng.normal(size=6))
    w = T(rng.normal(size=6))
    # central differences are exact on a linear map; a wider step keeps roundoff out
    assert nx.finite_difference_check(lambda: nx.tsum(w * x), {"w": w}, step=1e-3) < 1e-10


def test_softmax_cross_entropy_fd():
    rng = np.random.default_rng(4)
    z = T(rng.normal(size=(4, 7)))
    y = rng.integers(0, 7, 4)
    assert nx.finite_difference_check(lambda: nx.cross_entropy(z, y), {"z": z}) < 1e-6


OPS = {
    "layer_norm": lambda a, b: nx.layer_norm(a, b[0], b[1]),
    "softmax_masked": lambda a, b: nx.masked_softmax(
        a, np.array([[True, True, False, True, True]] * 3)),
    "matmul_batched": lambda a, b: nx.matmul(a.reshape(3, 1, 5), nx.reshape(b, (1, 5, 2))),
    "concat_split": lambda a, b: nx.concat(
        [nx.concat(nx.split(a, [2, 3], axis=1)[::-1], axis=1), b], axis=0),
    "getitem_transpose": lambda a, b: nx.transpose(a[:, 1:4], (1, 0)),
    "embedding": lambda a, b: nx.embedding(a, np.array([[0, 2], [2, 1]])),
    "gather_bias": lambda a, b: nx.gather_bias(a, np.array([[[0, 4], [3, 3]]])),
    "mean_sub_div": lambda a, b: (nx.tmean(a, axis=0) - b[0]) / 3.0,
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(len(op))
    a = T(rng.normal(size=(3, 5)))
    b = T(rng.normal(size=(2, 5)))
    w = nx.Tensor(rng.normal(size=OPS[op](a, b).shape))
    params = {"a": a, "b": b}
    err = nx.finite_difference_check(lambda: nx.tsum(OPS[op](a, b) * w), params)
    assert err < 1e-6


def test_dropout_backward_uses_same_mask():
    rng = np.random.default_rng(0)
    x = T(np.ones((50, 4)))
    y = nx.dropout(x, 0.5, rng, training=True)
    g = nx.backward(nx.tsum(y), {"x": x})["x"]
    np.testing.assert_array_equal(g, y.data)   # inverted dropout: mask / keep
    assert nx.dropout(x, 0.5, rng, training=False) is x


def test_non_finite_forward_raises():
    with pytest.raises(nx.NonFiniteError):
        T([1.0]) * np.inf


def test_shape_mismatch_raises():
    with pytest.raises(nx.ShapeError):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_no_grad_builds_no_graph():
    x = T([1.0, 2.0])
    with nx.no_grad():
        y = x * x
    assert not y.requires_grad


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": T([1.0, -2.0])}
    opt = nx.AdamW(lr=1e-3, weight_decay=0.0)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_first_step_hand_computed():
    p = {"w": T(0.5)}
    opt = nx.AdamW(lr=1e-3, weight_decay=0.0)
    opt.step(p, {"w": np.array(1.0)})
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert p["w"].data == pytest.approx(0.5 - 1e-3 / (1.0 + 1e-8), abs=1e-15)


def test_adamw_decoupled_decay():
    p = {"w": T([2.0, -4.0])}
    opt = nx.AdamW(lr=1e-2, weight_decay=0.1)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_allclose(p["w"].data, np.array([2.0, -4.0]) * (1 - 1e-2 * 0.1),
                               rtol=0, atol=1e-15)


# ---------------------------------------------------------------- properties

@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_softmax_rows_normalised(rows, cols, seed, scale):
    rng = np.random.default_rng(seed)
    x = nx.Tensor(rng.normal(0, scale, (rows, cols)))
    mask = rng.random((rows, cols)) < 0.7
    mask[:, 0] = True
    out = nx.masked_softmax(x, mask).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    assert np.all(out[~mask] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    r1 = nx.layer_norm(nx.gelu(nx.matmul(nx.Tensor(a), nx.Tensor(b)))).data
    r2 = nx.layer_norm(nx.gelu(nx.matmul(nx.Tensor(a), nx.Tensor(b)))).data
    assert r1.tobytes() == r2.tobytes()


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32),
               "scalar": np.float32(2.5).reshape(()), "b": np.arange(5, dtype=np.float32)}
    cfg = {"model": {"d": 8}, "seed": 3}
    path = tmp_path / "m.ckpt"
    nx.save_checkpoint(path, cfg, tensors)
    cfg2, t2 = nx.load_checkpoint(path)
    assert cfg2 == cfg
    assert set(t2) == set(tensors)
    for k in tensors:
        assert t2[k].shape == np.shape(tensors[k])
        np.testing.assert_array_equal(t2[k], tensors[k])


def test_checkpoint_is_little_endian_float32(tmp_path):
    path = tmp_path / "m.ckpt"
    nx.save_checkpoint(path, {}, {"x": np.array([1.0], dtype=np.float32)})
    assert open(path, "rb").read().endswith(np.array([1.0], dtype="<f4").tobytes())


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        nx.load_checkpoint(path)


def test_log_softmax_stable():
    lp = nx.log_softmax_np(np.array([[1000.0, 0.0]]))
    assert lp[0, 0] == pytest.approx(0.0)
    assert lp[0, 1] == pytest.approx(-1000.0)
    assert math.isfinite(lp.sum())
