import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mlctl import autodiff as ad


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


def check_grad(build, *inputs, seed=0, tol=1e-5):
    """Compare autodiff gradients of sum(w * build(*inputs)) with central differences."""
    rng = np.random.default_rng(seed)
    out_shape = build(*[ad.Tensor(x) for x in inputs]).shape
    w = rng.normal(size=out_shape)

    def scalar(*xs):
        return float((build(*[ad.Tensor(x) for x in xs]).data * w).sum())

    params = [ad.parameter(x.copy()) for x in inputs]
    (build(*params) * ad.Tensor(w)).sum().backward()
    for i, (p, x) in enumerate(zip(params, inputs)):
        def f(xi, i=i):
            xs = list(inputs)
            xs[i] = xi
            return scalar(*xs)
        fd = central_diff(f, x)
        rel = np.abs(p.grad - fd) / (np.abs(p.grad) + 1e-8)
        assert rel.max() < tol, f"input {i}: max relative error {rel.max():.3g}"


rng = np.random.default_rng(42)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(3, 4))


@pytest.mark.parametrize("name,build,inputs", [
    ("add", lambda a, b: a + b, (A, B)),
    ("sub", lambda a, b: a - b, (A, B)),
    ("mul", lambda a, b: a * b, (A, B)),
    ("div", lambda a, b: a / b, (A, POS)),
    ("add_leading", lambda a, b: a + b, (A, rng.normal(size=(4,)))),
    ("mul_keepdims", lambda a, b: a * b, (A, rng.normal(size=(3, 1)))),
    ("matmul", lambda a, b: a @ b, (A, rng.normal(size=(4, 5)))),
    ("matmul_batched", lambda a, b: a @ b, (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))),
    ("matmul_shared", lambda a, b: a @ b, (rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))),
    ("exp", ad.exp, (A,)),
    ("log", ad.log, (POS,)),
    ("sqrt", ad.sqrt, (POS,)),
    ("tanh", ad.tanh, (A,)),
    ("gelu", ad.gelu, (A,)),
    ("sum_axis", lambda a: a.sum(axis=1), (A,)),
    ("sum_keepdims", lambda a: a.sum(axis=0, keepdims=True), (A,)),
    ("mean", lambda a: a.mean(axis=1), (A,)),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), (A, B)),
    ("slice", lambda a: a[1:, ::2], (A,)),
    ("fancy_index", lambda a: a[np.array([0, 2, 2]), np.array([1, 1, 3])], (A,)),
    ("reshape", lambda a: a.reshape(4, 3), (A,)),
    ("transpose", lambda a: a.transpose(), (A,)),
    ("softmax", lambda a: ad.softmax(a, axis=-1), (A,)),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=1), (A,)),
    ("layer_norm", lambda a, g, b: ad.layer_norm(a, g, b), (A, rng.normal(size=4), rng.normal(size=4))),
    ("softmax_xent", lambda a: ad.softmax_cross_entropy(a, np.array([0, 3, 1])), (A,)),
])
def test_op_gradients_match_central_differences(name, build, inputs):
    check_grad(build, *inputs)


def test_embedding_gradient_scatters_rows():
    table = ad.parameter(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2], [2, 4]])
    ad.embedding(table, ids).sum().backward()
    assert np.allclose(table.grad, np.array([1, 0, 2, 0, 1])[:, None] * np.ones((5, 3)))


def test_exp_log_inverse():
    x = rng.uniform(0.1, 5, size=10)
    assert np.allclose(ad.exp(ad.log(ad.Tensor(x))).data, x, rtol=1e-14)


def test_matmul_shape_rule():
    assert (ad.Tensor(np.ones((2, 3))) @ ad.Tensor(np.ones((3, 4)))).shape == (2, 4)
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 3\)"):
        ad.Tensor(np.ones((2, 3))) @ ad.Tensor(np.ones((4, 3)))


def test_sum_of_squares_gradient():
    x = ad.parameter([1.0, 2.0])
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_rejects_outer_product_broadcast():
    with pytest.raises(ValueError, match="incompatible shapes"):
        ad.Tensor(np.ones((3, 1))) + ad.Tensor(np.ones((1, 4)))
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((3, 4))) + ad.Tensor(np.ones((3,)))


# -- stop gradient ----------------------------------------------------------------------

def test_stop_gradient_is_identity_forward():
    x = rng.normal(size=(4, 4))
    assert np.array_equal(ad.stop_gradient(ad.parameter(x)).data, x)


def test_stop_gradient_has_zero_partials():
    x = ad.parameter(rng.normal(size=5))
    loss = ad.stop_gradient(x).sum() + (x * 0.0).sum()
    loss.backward()
    assert np.all(x.grad == 0)


def test_ratio_with_stopped_denominator():
    x0 = rng.uniform(0.5, 3, size=6)
    x = ad.parameter(x0)
    (x / ad.stop_gradient(x)).sum().backward()
    assert np.allclose(x.grad, 1 / x0, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(0.1, 10)))
def test_stop_gradient_cuts_only_its_path(x0):
    # f = x * sg(x) + x: forward equals x^2 + x, gradient is sg(x) + 1 = x + 1
    x = ad.parameter(x0)
    f = x * ad.stop_gradient(x) + x
    assert np.allclose(f.data, x0 * x0 + x0)
    f.sum().backward()
    assert np.allclose(x.grad, x0 + 1)


# -- backward contract --------------------------------------------------------------------

def test_backward_twice_is_an_error():
    x = ad.parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="freed"):
        loss.backward()


def test_backward_needs_scalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_constant_loss_gives_zero_grads_with_warning():
    x = ad.parameter([1.0, 2.0])
    loss = ad.Tensor(3.0) * 2.0
    with pytest.warns(UserWarning, match="gradients are zero"):
        grads = ad.backward(loss, {"x": x})
    assert np.all(grads["x"] == 0)


def test_no_grad_builds_no_graph():
    x = ad.parameter([1.0, 2.0])
    with ad.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


# -- emulated single precision ------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-50, 50)), arrays(np.float64, 8, elements=st.floats(0.5, 50)))
def test_emulated_single_results_are_float32_representable(a, b):
    with ad.emulated_single():
        ta, tb = ad.parameter(a), ad.parameter(b)
        outs = [ta + tb, ta * tb, ta / tb, ad.exp(ta * 0.1), ad.log(tb), ad.sqrt(tb), (ta * tb).sum()]
    for o in outs:
        assert np.array_equal(o.data, o.data.astype(np.float32).astype(np.float64))


def test_emulated_single_rounds_gradients():
    with ad.emulated_single():
        x = ad.parameter([1.0 / 3.0, 2.0])
        y = (ad.exp(x) / 3.0).sum()
    y.backward()
    assert np.array_equal(x.grad, x.grad.astype(np.float32).astype(np.float64))


def test_emulated_single_loses_small_addends():
    with ad.emulated_single():
        s = ad.Tensor(1.6e6) + ad.Tensor(1e-3)
    assert s.item() == np.float32(1.6e6)
    assert (ad.Tensor(1.6e6) + ad.Tensor(1e-3)).item() != 1.6e6


# -- Adam ---------------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": ad.parameter(rng.normal(size=3))}
    before = p["w"].data.copy()
    opt = ad.Adam(lr=0.1)
    for _ in range(3):
        opt.step(p, {"w": np.zeros(3)})
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_scalar():
    # t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    p = {"w": ad.parameter([0.0])}
    opt = ad.Adam(lr=0.1)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_defaults_and_nan_abort():
    opt = ad.Adam()
    assert (opt.beta1, opt.beta2) == (0.9, 0.999)
    p = {"w": ad.parameter([0.0])}
    with pytest.raises(FloatingPointError, match="'w'"):
        opt.step(p, {"w": np.array([np.nan])})
    assert opt.step_count == 0


def test_adam_moment_decay():
    p = {"w": ad.parameter([0.0])}
    opt = ad.Adam(lr=0.01)
    opt.step(p, {"w": np.array([2.0])})
    opt.step(p, {"w": np.array([0.0])})
    assert opt.m["w"][0] == pytest.approx(0.9 * 0.1 * 2.0)
    assert opt.v["w"][0] == pytest.approx(0.999 * 0.001 * 4.0)


# -- checkpoint format ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": rng.normal(size=(2, 3)), "b": np.array(1.5), "c": rng.normal(size=7)}
    path = tmp_path / "x.ckpt"
    ad.save_arrays(path, arrays, {"step": 12})
    back, meta = ad.load_arrays(path)
    assert meta == {"step": 12}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == np.shape(arrays[k])
        assert np.array_equal(back[k], arrays[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        ad.load_arrays(p)


def test_warning_free_standard_use():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        x = ad.parameter([1.0])
        (x * 2.0).sum().backward()
