import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmlab import diffcore as dc


def test_affine_identity_case():
    p = dc.ParamStore()
    p.add("M", np.eye(2))
    p.add("b", np.zeros(2))
    g = dc.Graph(lambda ctx: dc.add(dc.matmul(ctx.param("M"), ctx.input("x")), ctx.param("b")))
    out = dc.evaluate(g, p, {"x": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_logsumexp_uniform_case():
    p = dc.ParamStore()
    g = dc.Graph(lambda ctx: dc.logsumexp(ctx.input("v")))
    out = dc.evaluate(g, p, {"v": np.zeros(3)})
    assert abs(float(out) - np.log(3.0)) < 1e-12


def test_two_layer_tanh_mlp_matches_straightline_forward():
    # independent straight-line reimplementation of the same arithmetic
    rng = np.random.default_rng(7)
    W1, b1 = rng.normal(size=(2, 3)), rng.normal(size=3)
    W2, b2 = rng.normal(size=(3, 1)), rng.normal(size=1)
    x = rng.normal(size=2)

    h = np.tanh(x @ W1 + b1)
    expected = float(np.tanh(h @ W2 + b2)[0])

    p = dc.ParamStore()
    for name, v in [("W1", W1), ("b1", b1), ("W2", W2), ("b2", b2)]:
        p.add(name, v)

    def build(ctx):
        h = dc.tanh(dc.add(dc.matmul(ctx.input("x"), ctx.param("W1")), ctx.param("b1")))
        return dc.take(dc.tanh(dc.add(dc.matmul(h, ctx.param("W2")), ctx.param("b2"))), 0)

    out = dc.evaluate(dc.Graph(build), p, {"x": x})
    assert float(out) == pytest.approx(expected, abs=1e-15)


def test_gradient_of_half_square_norm():
    p = dc.ParamStore()
    p.add("x", np.array([3.0, -4.0]))
    g = dc.Graph(lambda ctx: dc.mul(0.5, dc.sum(dc.mul(ctx.param("x"), ctx.param("x")))))
    dc.gradient(g, p)
    np.testing.assert_allclose(p.grad("x"), [3.0, -4.0], rtol=0, atol=0)


def test_gradient_of_logsumexp_is_softmax():
    v = np.array([0.3, -1.2, 2.5, 0.0])
    p = dc.ParamStore()
    p.add("v", v)
    g = dc.Graph(lambda ctx: dc.logsumexp(ctx.param("v")))
    dc.gradient(g, p)
    soft = np.exp(v - v.max())
    soft /= soft.sum()
    np.testing.assert_allclose(p.grad("v"), soft, atol=1e-15)


def test_gradient_accumulates_without_zeroing():
    p = dc.ParamStore()
    p.add("x", np.array([1.0, 2.0]))
    g = dc.Graph(lambda ctx: dc.sum(ctx.param("x")))
    dc.gradient(g, p)
    dc.gradient(g, p)
    np.testing.assert_array_equal(p.grad("x"), [2.0, 2.0])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad("x"), [0.0, 0.0])


def test_gradient_rejects_nonscalar_output():
    p = dc.ParamStore()
    p.add("x", np.array([1.0, 2.0]))
    g = dc.Graph(lambda ctx: dc.mul(ctx.param("x"), 2.0))
    with pytest.raises(ValueError, match="scalar"):
        dc.gradient(g, p)


def test_unbound_names_raise():
    p = dc.ParamStore()
    g = dc.Graph(lambda ctx: dc.sum(ctx.param("missing")))
    with pytest.raises(KeyError, match="missing"):
        dc.evaluate(g, p)
    g2 = dc.Graph(lambda ctx: dc.sum(ctx.input("nope")))
    with pytest.raises(KeyError, match="nope"):
        dc.evaluate(g2, p)


def test_nonfinite_intermediate_rejected():
    p = dc.ParamStore()
    p.add("x", np.array([1000.0]))
    g = dc.Graph(lambda ctx: dc.sum(dc.exp(ctx.param("x"))))
    with pytest.raises(ValueError, match="non-finite"):
        dc.evaluate(g, p)


def test_shape_mismatch_raises():
    p = dc.ParamStore()
    p.add("M", np.zeros((2, 3)))
    g = dc.Graph(lambda ctx: dc.sum(dc.matmul(ctx.param("M"), ctx.input("x"))))
    with pytest.raises(ValueError):
        dc.evaluate(g, p, {"x": np.zeros(5)})


def test_finite_diff_check_quadratic():
    p = dc.ParamStore()
    p.add("x", np.array([0.5, -1.5, 2.0]))
    g = dc.Graph(lambda ctx: dc.mul(0.5, dc.sum(dc.mul(ctx.param("x"), ctx.param("x")))))
    assert dc.finite_diff_check(g, p) < 1e-9


def test_finite_diff_check_validates_step():
    p = dc.ParamStore()
    p.add("x", np.ones(2))
    g = dc.Graph(lambda ctx: dc.sum(ctx.param("x")))
    with pytest.raises(ValueError, match="step"):
        dc.finite_diff_check(g, p, step=0.5)
    with pytest.raises(ValueError, match="step"):
        dc.finite_diff_check(g, p, step=0.0)


def test_forward_evaluation_is_pure_and_deterministic():
    rng = np.random.default_rng(3)
    p = dc.ParamStore()
    p.add("W", rng.normal(size=(4, 4)))
    x = rng.normal(size=4)
    g = dc.Graph(lambda ctx: dc.logsumexp(dc.matmul(ctx.param("W"), ctx.input("x"))))
    before = p.value("W").copy()
    a = dc.evaluate(g, p, {"x": x})
    b = dc.evaluate(g, p, {"x": x})
    assert float(a) == float(b)
    np.testing.assert_array_equal(p.value("W"), before)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
    st.floats(min_value=-100, max_value=100),
)
def test_logsumexp_shift_identity(values, c):
    v = np.array(values)
    base = float(dc.logsumexp(v))
    shifted = float(dc.logsumexp(v + c))
    assert abs(shifted - (base + c)) < 1e-12


def test_broadcast_gradients_match_fd():
    rng = np.random.default_rng(11)
    p = dc.ParamStore()
    p.add("a", rng.normal(size=(3, 1)))
    p.add("B", rng.normal(size=(3, 4)))

    def build(ctx):
        z = dc.add(ctx.param("a"), ctx.param("B"))
        return dc.sum(dc.sigmoid(dc.mul(z, z)))

    assert dc.finite_diff_check(dc.Graph(build), p) < 1e-6


def test_gather_gradient_handles_duplicate_rows():
    p = dc.ParamStore()
    p.add("t", np.arange(8.0).reshape(4, 2))
    ids = np.array([1, 1, 3])
    g = dc.Graph(lambda ctx: dc.sum(dc.take(ctx.param("t"), ids)))
    dc.gradient(g, p)
    expected = np.zeros((4, 2))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(p.grad("t"), expected)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    p = dc.ParamStore()
    p.add("layer/W", rng.normal(size=(3, 2)) * 1e-7)
    p.add("layer/b", rng.normal(size=3) * 1e3)
    p.add("scalar", np.float64(np.pi))
    path = tmp_path / "model.ckpt"
    dc.save_checkpoint(path, p)
    q = dc.load_checkpoint(path)
    assert sorted(q.names()) == sorted(p.names())
    for name in p.names():
        np.testing.assert_array_equal(q.value(name), p.value(name))
        assert q.value(name).shape == p.value(name).shape


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n1 2 3\n")
    with pytest.raises(ValueError, match="magic"):
        dc.load_checkpoint(path)
    path.write_text(dc.CHECKPOINT_MAGIC + "\nw 1 4\n1.0 2.0\n")
    with pytest.raises(ValueError, match="mismatch"):
        dc.load_checkpoint(path)


def test_duplicate_param_name_rejected():
    p = dc.ParamStore()
    p.add("w", np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        p.add("w", np.zeros(2))
