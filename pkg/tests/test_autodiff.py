import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from viewgen import autodiff as ad
from oracles import max_rel_error

EPS = 1e-4
TOL = 1e-3


def _leaf(rng, *shape, lo=-1.0, hi=1.0, away_from=None):
    x = rng.uniform(lo, hi, size=shape)
    if away_from is not None:
        # keep probes clear of kinks so central differences stay smooth
        x = np.where(np.abs(x - away_from) < 0.1, x + 0.2 * np.sign(x - away_from + 1e-12), x)
    return ad.Tensor(x, requires_grad=True)


def _weighted(out, rng):
    w = ad.Tensor(rng.standard_normal(out.shape))
    return (out * w).sum()


def _cases(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    row = _leaf(rng, 1, 4)
    pos = _leaf(rng, 3, 4, lo=0.5, hi=2.0)
    kink = _leaf(rng, 3, 4, away_from=0.0)
    img = _leaf(rng, 2, 3, 6, 6)
    w5, b5 = _leaf(rng, 4, 3, 5, 5), _leaf(rng, 4)
    w3, b3 = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 2)
    gamma, beta = _leaf(rng, 3), _leaf(rng, 3)
    field = _leaf(rng, 3, 5, 7)
    coords = ad.Tensor(rng.uniform(0.02, 0.98, size=(9, 2)), requires_grad=True)
    lin_x, lin_w, lin_b = _leaf(rng, 5, 4), _leaf(rng, 3, 4), _leaf(rng, 3)
    mat = sp.random(6, 3, density=0.5, random_state=0, format="csr")
    v3 = _leaf(rng, 3, 2)
    return {
        "add_broadcast": (lambda: ad.add(a, row), [a, row]),
        "sub": (lambda: ad.sub(a, b), [a, b]),
        "mul_broadcast": (lambda: ad.mul(a, row), [a, row]),
        "div": (lambda: ad.div(a, pos), [a, pos]),
        "power": (lambda: ad.power(pos, 2.5), [pos]),
        "exp": (lambda: ad.exp(a), [a]),
        "log": (lambda: ad.log(pos), [pos]),
        "sqrt": (lambda: ad.sqrt(pos), [pos]),
        "absolute": (lambda: ad.absolute(kink), [kink]),
        "sin": (lambda: ad.sin(a), [a]),
        "cos": (lambda: ad.cos(a), [a]),
        "tanh": (lambda: ad.tanh(a), [a]),
        "sigmoid": (lambda: ad.sigmoid(a), [a]),
        "softplus": (lambda: ad.softplus(a), [a]),
        "leaky_relu": (lambda: ad.leaky_relu(kink, 0.2), [kink]),
        "clip": (lambda: ad.clip(kink, -0.5, 0.5), [kink]),
        "where": (lambda: ad.where(a.data > 0, a, b), [a, b]),
        "sum_axis": (lambda: ad.tsum(a, axis=1, keepdims=True), [a]),
        "mean": (lambda: ad.mean(a, axis=0), [a]),
        "norm": (lambda: ad.norm(pos, axis=1), [pos]),
        "softmax": (lambda: ad.softmax(a, axis=-1), [a]),
        "reshape": (lambda: ad.reshape(a, (4, 3)), [a]),
        "transpose": (lambda: ad.transpose(img, (0, 2, 3, 1)), [img]),
        "getitem": (lambda: ad.getitem(a, (slice(None), slice(1, 3))), [a]),
        "take": (lambda: ad.take(a, np.array([2, 0, 2])), [a]),
        "concat": (lambda: ad.concat([a, b], axis=1), [a, b]),
        "stack": (lambda: ad.stack([a, b], axis=0), [a, b]),
        "matmul": (lambda: ad.matmul(a, ad.transpose(b)), [a, b]),
        "sparse_matmul": (lambda: ad.sparse_matmul(mat, v3), [v3]),
        "linear": (lambda: ad.linear(lin_x, lin_w, lin_b), [lin_x, lin_w, lin_b]),
        "conv2d_k5_s2_p2": (lambda: ad.conv2d(img, w5, b5, 2, 2), [img, w5, b5]),
        "conv2d_k3_s1_p1": (lambda: ad.conv2d(img, w3, b3, 1, 1), [img, w3, b3]),
        "norm_layer": (lambda: ad.norm_layer(img, gamma, beta), [img, gamma, beta]),
        "avg_pool": (lambda: ad.avg_pool(img, 2), [img]),
        "grid_sample": (lambda: ad.bilinear_grid_sample(field, coords), [field, coords]),
        "grid_sample_wrap": (lambda: ad.bilinear_grid_sample(field, ad.Tensor(coords.data + [1.0, 0.0])), [field]),
        "resize_up": (lambda: ad.bilinear_resize(field, 9, 11), [field]),
        "resize_down": (lambda: ad.bilinear_resize(img, 3, 4), [img]),
    }


CASE_NAMES = sorted(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_matches_central_differences(name):
    rng = np.random.default_rng(CASE_NAMES.index(name))
    fn, leaves = _cases(rng)[name]
    wrng = np.random.default_rng(99)
    out0 = fn()
    weights = ad.Tensor(wrng.standard_normal(out0.shape))
    err = max_rel_error(lambda: (fn() * weights).sum(), leaves, eps=EPS, n_probes=20)
    assert err < TOL, f"{name}: {err:.3g}"


# ------------------------------------------------------------------ examples
def test_conv2d_single_pixel():
    out = ad.conv2d(ad.Tensor(np.full((1, 1, 1, 1), 2.0)), ad.Tensor(np.full((1, 1, 1, 1), 3.0)), ad.Tensor([1.0]), 1, 0)
    assert out.data.item() == 7.0


def test_conv2d_overlap_counts():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor([0.0]), 1, 1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_conv2d_zero_weight(rng):
    out = ad.conv2d(ad.Tensor(rng.standard_normal((2, 3, 8, 8))), ad.Tensor(np.zeros((4, 3, 5, 5))), ad.Tensor(np.zeros(4)))
    assert out.shape == (2, 4, 4, 4)
    assert np.all(out.data == 0.0)


def test_conv2d_channel_mismatch():
    with pytest.raises(ad.ContractError):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))), ad.Tensor([0.0]), 1, 1)


def test_conv2d_matches_direct_loops(rng):
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(3)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), 2, 2).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ref = np.zeros_like(out)
    for n in range(2):
        for f in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 5, 2 * j : 2 * j + 5] * w[f]) + b[f]
    assert out.shape == (2, 3, 4, 3)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_linear_examples(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(ad.linear(ad.Tensor(x), ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3))).data, x)
    assert ad.linear(ad.Tensor([[1.0, 2.0, 3.0]]), ad.Tensor(np.ones((1, 3))), ad.Tensor([0.0])).data.item() == 6.0
    bias = np.array([0.5, -1.0])
    out = ad.linear(ad.Tensor(np.zeros((3, 4))), ad.Tensor(rng.standard_normal((2, 4))), ad.Tensor(bias)).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (3, 2)))
    with pytest.raises(ad.ContractError):
        ad.linear(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 4))), ad.Tensor(np.zeros(2)))


def test_leaky_relu_examples():
    assert ad.leaky_relu(ad.Tensor(1.0), 0.01).item() == 1.0
    assert ad.leaky_relu(ad.Tensor(-2.0), 0.1).item() == pytest.approx(-0.2, abs=1e-15)
    assert ad.leaky_relu(ad.Tensor(0.0), 0.3).item() == 0.0


def test_leaky_relu_subgradient_at_zero_is_one():
    x = ad.Tensor(np.zeros(3), requires_grad=True)
    ad.leaky_relu(x, 0.2).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_norm_layer_examples(rng):
    const = np.broadcast_to(np.array([2.0, -3.0])[None, :, None, None], (2, 2, 3, 3)).copy()
    beta = np.array([0.25, 0.75])
    out = ad.norm_layer(ad.Tensor(const), ad.Tensor(np.ones(2)), ad.Tensor(beta)).data
    np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None, None], out.shape), atol=1e-12)

    balanced = np.array([-1.0, 1.0] * 8).reshape(2, 1, 2, 4)
    out = ad.norm_layer(ad.Tensor(balanced), ad.Tensor([1.0]), ad.Tensor([0.0])).data
    np.testing.assert_allclose(out, balanced / np.sqrt(1.0 + 1e-5), rtol=1e-12)

    out = ad.norm_layer(ad.Tensor(rng.standard_normal((2, 2, 3, 3))), ad.Tensor(np.zeros(2)), ad.Tensor(beta)).data
    np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None, None], out.shape), atol=1e-15)


def test_grid_sample_examples(rng):
    m = rng.standard_normal((2, 4, 5))
    nodes = np.array([[0.0, 0.0], [0.25, 0.0], [0.5, 1.0 / 3.0], [1.0, 1.0]])
    out = ad.bilinear_grid_sample(ad.Tensor(m), ad.Tensor(nodes)).data
    np.testing.assert_array_equal(out[:, 0], m[:, 0, 0])
    np.testing.assert_array_equal(out[:, 1], m[:, 0, 1])
    np.testing.assert_allclose(out[:, 2], m[:, 1, 2], rtol=1e-12)
    np.testing.assert_array_equal(out[:, 3], m[:, 3, 4])

    square = ad.Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    assert ad.bilinear_grid_sample(square, ad.Tensor([[0.5, 0.5]])).data.item() == 1.5

    c = ad.bilinear_grid_sample(ad.Tensor(np.full((3, 6, 6), 0.7)), ad.Tensor(rng.uniform(-2, 3, size=(50, 2)))).data
    np.testing.assert_allclose(c, 0.7, rtol=1e-14)

    empty = ad.bilinear_grid_sample(ad.Tensor(m), ad.Tensor(np.zeros((0, 2))))
    assert empty.shape == (2, 0)


def test_grid_sample_wrap_u_clamp_v(rng):
    m = ad.Tensor(rng.standard_normal((1, 4, 5)))
    base = ad.bilinear_grid_sample(m, ad.Tensor([[0.3, 0.4]])).data
    wrapped = ad.bilinear_grid_sample(m, ad.Tensor([[1.3, 0.4]])).data
    np.testing.assert_allclose(wrapped, base, rtol=1e-12)
    below = ad.bilinear_grid_sample(m, ad.Tensor([[0.3, -0.5]])).data
    np.testing.assert_allclose(below, ad.bilinear_grid_sample(m, ad.Tensor([[0.3, 0.0]])).data, rtol=1e-12)


def test_resize_examples(rng):
    np.testing.assert_allclose(ad.bilinear_resize(ad.Tensor(np.full((2, 3, 4), -1.5)), 7, 9).data, -1.5, rtol=1e-14)
    x = rng.standard_normal((2, 5, 6))
    np.testing.assert_allclose(ad.bilinear_resize(ad.Tensor(x), 5, 6).data, x, rtol=1e-14)
    np.testing.assert_allclose(ad.bilinear_resize(ad.Tensor([[[0.0, 1.0]]]), 1, 3).data, [[[0.0, 0.5, 1.0]]])


def test_backward_examples():
    x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = ad.Tensor(3.0, requires_grad=True)
    (y * y).sum().backward()
    assert y.grad.item() == 6.0


def test_backward_accumulates_until_cleared():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    x.zero_grad()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_sums_path_contributions():
    x = ad.Tensor(np.array([0.3, -0.7]), requires_grad=True)
    (x * x + ad.sin(x) * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + np.cos(x.data) * x.data + np.sin(x.data), rtol=1e-14)


def test_backward_rejects_non_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ContractError):
        (x * 2.0).backward()


def test_tensor_shape_invariants(rng):
    t = ad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    assert int(np.prod(t.shape)) == t.size
    (t * t).sum().backward()
    assert t.grad.shape == t.shape


def test_parameter_set_order_and_uniqueness():
    def build():
        ps = ad.ParameterSet()
        for name in ("w2", "a", "b1"):
            ps.add(name, np.zeros(2))
        return ps

    assert build().names() == build().names() == ["w2", "a", "b1"]
    with pytest.raises(KeyError):
        build().add("a", np.zeros(1))


def test_forward_ops_are_pure(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 5, 5))
    a = ad.norm_layer(ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(4))), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    b = ad.norm_layer(ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(np.zeros(4))), ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    assert a.data.tobytes() == b.data.tobytes()


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 2**16))
def test_linearity_of_conv_linear_resize(scale, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, 6, 6))
    w = r.standard_normal((3, 2, 3, 3))
    zero3 = ad.Tensor(np.zeros(3))
    conv = lambda v: ad.conv2d(ad.Tensor(v), ad.Tensor(w), zero3, 1, 1).data
    np.testing.assert_allclose(conv(scale * x), scale * conv(x), rtol=1e-10, atol=1e-10)
    lin_w = r.standard_normal((3, 4))
    v = r.standard_normal((2, 4))
    lin = lambda z: ad.linear(ad.Tensor(z), ad.Tensor(lin_w), zero3).data
    np.testing.assert_allclose(lin(scale * v), scale * lin(v), rtol=1e-10, atol=1e-10)
    res = lambda z: ad.bilinear_resize(ad.Tensor(z), 9, 4).data
    np.testing.assert_allclose(res(scale * x[0]), scale * res(x[0]), rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(2, 9), w=st.integers(2, 9), seed=st.integers(0, 2**16))
def test_grid_sample_exact_at_lattice_nodes(h, w, seed):
    m = np.random.default_rng(seed).standard_normal((2, h, w))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([jj.ravel() / (w - 1), ii.ravel() / (h - 1)], axis=1)
    out = ad.bilinear_grid_sample(ad.Tensor(m), ad.Tensor(coords)).data
    np.testing.assert_allclose(out, m.reshape(2, -1), rtol=1e-13, atol=1e-15)
