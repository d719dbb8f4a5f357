import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kirchnet import nn
from kirchnet.verify import gradient_errors


def projected(fn, R):
    return lambda: float(np.sum(fn() * R))


def test_linear_example():
    y, _ = nn.linear(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]),
                     np.array([0.5, 0.0, 0.0]))
    np.testing.assert_array_equal(y, [[1.5, 2.0, 0.0]])
    with pytest.raises(ValueError):
        nn.linear(np.zeros((1, 3)), np.zeros((2, 2)))


def test_dsconv_identity_kernel(rng):
    x = rng.normal(size=(2, 7, 4))
    dk = np.zeros((4, 3))
    dk[:, 1] = 1
    y, _ = nn.dsconv1d(x, dk, np.eye(4))
    np.testing.assert_array_equal(y, x)


def test_dsconv_same_padding(rng):
    x = np.zeros((1, 5, 1))
    x[0, 0, 0] = 1
    y, _ = nn.dsconv1d(x, np.array([[1.0, 2.0, 3.0]]), np.eye(1))
    # tap j multiplies x[t + j - 1]
    np.testing.assert_array_equal(y[0, :, 0], [2, 1, 0, 0, 0])
    with pytest.raises(ValueError):
        nn.dsconv1d(x, np.ones((1, 2)), np.eye(1))


def test_layer_norm_statistics(rng):
    x = rng.normal(3, 5, size=(4, 16))
    y, _ = nn.layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_silu_values():
    y, _ = nn.silu(np.array([0.0, 50.0, -50.0]))
    np.testing.assert_allclose(y, [0.0, 50.0, -50.0 / (1 + np.exp(50.0))], rtol=1e-12, atol=1e-300)


def test_all_op_gradients_pass_fd():
    errs = gradient_errors(seed=3)
    assert max(errs.values()) < 1e-5, errs


@pytest.mark.parametrize("op", ["linear", "dsconv1d", "layer_norm"])
def test_mutated_backward_is_detected(rng, op):
    x = rng.normal(size=(2, 6, 4))
    R = rng.normal(size=x.shape)
    if op == "linear":
        W = rng.normal(size=(4, 4))
        _, c = nn.linear(x, W)
        gx, gW, _ = nn.linear_backward(c, R)
        params, grads, fn = {"x": x, "W": W}, {"x": gx, "W": gW * 1.01}, lambda: nn.linear(x, W)[0]
    elif op == "dsconv1d":
        dk, pw = rng.normal(size=(4, 3)), rng.normal(size=(4, 4))
        _, c = nn.dsconv1d(x, dk, pw)
        gx, gdk, gpw = nn.dsconv1d_backward(c, R)
        params = {"x": x, "dk": dk, "pw": pw}
        grads = {"x": gx, "dk": gdk * 1.01, "pw": gpw}
        fn = lambda: nn.dsconv1d(x, dk, pw)[0]  # noqa: E731
    else:
        g, b = rng.normal(size=4), rng.normal(size=4)
        _, c = nn.layer_norm(x, g, b)
        gx, gg, gb = nn.layer_norm_backward(c, R)
        params, grads = {"x": x, "g": g, "b": b}, {"x": gx * 1.01, "g": gg, "b": gb}
        fn = lambda: nn.layer_norm(x, g, b)[0]  # noqa: E731
    err = nn.fd_gradient_check(projected(fn, R), params, grads)
    assert 5e-3 < err < 2e-2


def test_fd_check_restores_params(rng):
    W = rng.normal(size=(3, 3))
    before = W.copy()
    x = rng.normal(size=(2, 3))
    _, c = nn.linear(x, W)
    _, gW, _ = nn.linear_backward(c, np.ones((2, 3)))
    nn.fd_gradient_check(lambda: float(nn.linear(x, W)[0].sum()), {"W": W}, {"W": gW})
    np.testing.assert_array_equal(W, before)


def test_fd_requires_float64():
    W = np.ones((2, 2), np.float32)
    with pytest.raises(TypeError):
        nn.fd_gradient_check(lambda: 0.0, {"W": W}, {"W": W})


def test_param_tree_roundtrip(tmp_path, rng):
    t = nn.ParamTree()
    t.add("a", {"W": rng.normal(size=(3, 2)), "b": np.arange(2, dtype=np.float32)})
    t.add("", {"scalar": np.array(1.5)})
    t.save(tmp_path / "p.kinn", meta={"seed": 7})
    back, meta = nn.ParamTree.load(tmp_path / "p.kinn")
    assert meta == {"seed": 7}
    assert list(back) == ["a.W", "a.b", "scalar"]
    for k in t:
        assert back[k].dtype == t[k].dtype
        np.testing.assert_array_equal(back[k], t[k])
    assert t.subtree("a").keys() == {"W", "b"}
    assert t.count() == 9
    with pytest.raises(KeyError):
        t.add("a", {"W": np.zeros(1)})
    with pytest.raises(ValueError):
        nn.ParamTree.from_bytes(b"garbage")


def test_param_tree_bytes_deterministic(rng):
    t = nn.ParamTree({"x": rng.normal(size=5)})
    assert t.to_bytes({"k": 1}) == t.copy().to_bytes({"k": 1})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_catches_nonfinite():
    nn.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            nn.linear(np.array([[np.inf]]), np.array([[0.0]]))
    finally:
        nn.set_debug(False)


@given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 6))
def test_linear_backward_shapes(B, L, D):
    rng = np.random.default_rng(B * 100 + L * 10 + D)
    x = rng.normal(size=(B, L, D))
    W = rng.normal(size=(D, 3))
    _, c = nn.linear(x, W, np.zeros(3))
    gx, gW, gb = nn.linear_backward(c, np.ones((B, L, 3)))
    assert gx.shape == x.shape and gW.shape == W.shape and gb.shape == (3,)
    np.testing.assert_allclose(gb, B * L)
