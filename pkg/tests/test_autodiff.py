import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ept import autodiff as ad
from ept.errors import ContractError, ProbeError, ShapeError
from ept.tensor_core import softmax
from oracles import softmax_list


def grads_of(f, params):
    return ad.tape_gradients(f, params)


def test_sum_gradient_is_ones():
    g = grads_of(lambda p: p["t"].sum(), {"t": np.arange(6.0).reshape(2, 3)})
    assert np.array_equal(g["t"], np.ones((2, 3)))


def test_half_square_norm_gradient_is_theta():
    theta = np.random.default_rng(0).normal(size=(3, 2))
    g = grads_of(lambda p: (p["t"] * p["t"]).sum() * 0.5, {"t": theta})
    assert np.allclose(g["t"], theta, atol=0, rtol=1e-15)


def test_cross_entropy_gradient():
    logits = np.array([[0.2, -1.0, 1.5]])
    g = grads_of(lambda p: ad.cross_entropy(p["z"], [1]), {"z": logits})["z"]
    expected = np.array(softmax_list(logits[0].tolist())) - np.eye(3)[1]
    assert np.allclose(g[0], expected, atol=1e-15)
    report = ad.grad_check(lambda p: ad.cross_entropy(p["z"], [1]), {"z": logits})
    assert report.passed and report.max_rel < 1e-7


def test_cross_entropy_value_is_mean_nll():
    z = np.random.default_rng(1).normal(size=(4, 3))
    labels = np.array([0, 2, 1, 1])
    out = ad.cross_entropy(ad.lift(z), labels)
    p = softmax(z, "cols")
    assert out.shape == (1, 1)
    assert np.isclose(out.value[0, 0], -np.mean(np.log(p[np.arange(4), labels])), atol=1e-14)


def test_uniform_logits_loss_is_log_c():
    for c in (2, 3, 5):
        loss = ad.cross_entropy(ad.lift(np.zeros((3, c))), [0, 1, 0])
        assert abs(loss.value[0, 0] - np.log(c)) < 1e-12


def test_backward_rejects_non_scalar():
    tape = ad.Tape()
    w = tape.param("w", np.ones((2, 2)))
    with pytest.raises(ContractError):
        tape.backward(w * 2.0)


def test_unreached_parameter_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.param("a", np.ones((2, 2)))
    tape.param("b", np.full((3,), 5.0))
    g = tape.backward(a.sum())
    assert np.array_equal(g["b"], np.zeros(3))


def test_duplicate_parameter_name():
    tape = ad.Tape()
    tape.param("a", np.ones(1))
    with pytest.raises(ContractError):
        tape.param("a", np.ones(1))


def test_constants_are_not_recorded():
    tape = ad.Tape()
    w = tape.param("w", np.ones((2, 2)))
    frozen = np.full((2, 2), 3.0)
    ad.matmul(ad.lift(frozen), ad.lift(frozen))
    assert len(tape) == 1
    loss = (w @ frozen).sum()
    assert len(tape) == 3  # param, matmul, sum
    assert set(tape.backward(loss)) == {"w"}


def test_differentiable_unwraps_plain_inputs():
    @ad.differentiable
    def f(x):
        return ad.mul(x, 2.0)

    assert isinstance(f(np.ones(2)), np.ndarray)
    tape = ad.Tape()
    assert isinstance(f(tape.param("x", np.ones(2))), ad.Var)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(ad.lift(np.ones((2, 3))), ad.lift(np.ones((2, 3))))


def test_mixed_tapes_rejected():
    a = ad.Tape().param("a", np.ones(2))
    b = ad.Tape().param("b", np.ones(2))
    with pytest.raises(ContractError):
        a + b


def test_grad_check_quadratic():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 4))
    q = q @ q.T
    x = rng.normal(size=(4, 1))
    f = lambda p: (p["x"].T @ (q @ p["x"])).sum() * 0.5
    report = ad.grad_check(f, {"x": x})
    assert report.passed and report.max_rel < 1e-7


def test_grad_check_flags_corrupted_entry():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4)) + 2.0
    f = lambda p: (p["x"] * p["x"] * p["x"]).sum()
    grads = grads_of(f, {"x": x})
    grads["x"][1, 2] *= 2.0
    report = ad.grad_check(f, {"x": x}, grads=grads)
    assert not report.passed
    assert report.params["x"].worst_index == (1, 2)
    assert "FAIL" in report.to_text()


def test_grad_check_probe_error_names_entry():
    def g(p):
        v = p["x"].value if isinstance(p["x"], ad.Var) else p["x"]
        return np.inf if v[0, 1] > 1.0 else float(v.sum())

    with pytest.raises(ProbeError) as info:
        ad.grad_check(g, {"x": np.array([[0.0, 1.0]])}, grads={"x": np.ones((1, 2))})
    assert info.value.param == "x" and tuple(info.value.index) == (0, 1)


def test_grad_check_skips_relu_kink():
    x = np.array([[0.0, 1.0, -2.0]])
    f = lambda p: ad.relu(p["x"]).sum()
    report = ad.grad_check(f, {"x": x})
    assert report.passed
    assert report.params["x"].skipped == [(0, 0)]
    assert "kink" in report.to_text()


def test_report_pass_flag_tracks_tolerance():
    report = ad.GradReport(tol=1e-4, h=1e-5)
    report.params["a"] = ad.ParamCheck("a", 0.0, 9.9e-5, (0,), 1)
    assert report.passed
    report.params["b"] = ad.ParamCheck("b", 0.0, 1e-4, (0,), 1)
    assert not report.passed


def test_repeat_gives_identical_gradients():
    rng = np.random.default_rng(4)
    w, x = rng.normal(size=(5, 3)), rng.normal(size=(7, 5))
    f = lambda p: ad.cross_entropy(ad.matmul(x, p["w"]), np.arange(7) % 3)
    g1, g2 = grads_of(f, {"w": w}), grads_of(f, {"w": w})
    assert g1["w"].tobytes() == g2["w"].tobytes()


# -- every primitive against central differences on random shapes --------------

def _ops(rng, n, k):
    c = rng.normal(size=(k, n))
    wts = rng.normal(size=(n, k))
    ids = rng.integers(0, n, size=(2, 3))
    return {
        "add_broadcast": lambda p: (p["x"] + p["y"][:1]).sum(),
        "sub": lambda p: ((p["x"] - p["y"]) * wts).sum(),
        "neg_rsub": lambda p: ((1.0 - p["x"]) * wts).sum(),
        "mul": lambda p: (p["x"] * p["y"] * wts).sum(),
        "div": lambda p: (p["x"] / 3.0 * wts).sum(),
        "matmul": lambda p: ((p["x"] @ c) * (p["y"] @ c)).sum(),
        "rmatmul": lambda p: ((c @ p["x"]) * 0.5).sum(),
        "batched_matmul": lambda p: ad.matmul(ad.broadcast_to(p["x"], (2, n, k)),
                                              ad.transpose(p["y"])).mean(),
        "exp": lambda p: (ad.exp(p["x"] * 0.3) * wts).sum(),
        "softmax_rows": lambda p: (ad.softmax(p["x"], axis=1) * wts).sum(),
        "softmax_cols": lambda p: (ad.softmax(p["x"], axis=0) * wts).sum(),
        "log_softmax": lambda p: (ad.log_softmax(p["x"], axis=1) * wts).sum(),
        "mean_axis": lambda p: (ad.mean(p["x"] * wts, axis=0, keepdims=True) * 3.0).sum(),
        "sum_axis": lambda p: (ad.sum_(p["x"], axis=1) * ad.sum_(p["y"], axis=1)).sum(),
        "reshape": lambda p: (p["x"].reshape(k, n) * c).sum(),
        "transpose": lambda p: (p["x"].T * c).sum(),
        "getitem": lambda p: (p["x"][1:] * p["x"][:-1]).sum(),
        "concat": lambda p: (ad.concat([p["x"], p["y"]], axis=0)
                             * np.concatenate([wts, -wts])).sum(),
        "embedding": lambda p: (ad.embedding(p["x"], ids) * 1.5).sum() + p["x"][0, 0] * 0.0,
        "layer_norm": lambda p: (ad.layer_norm(p["x"], p["y"][0], p["y"][1]) * wts).sum(),
        "cross_entropy": lambda p: ad.cross_entropy(p["x"], np.arange(n) % k),
    }


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_primitives_pass_grad_check(n, k, seed):
    rng = np.random.default_rng(seed)
    params = {"x": rng.normal(size=(n, k)), "y": rng.normal(size=(n, k)) + 0.5}
    for name, f in _ops(rng, n, k).items():
        report = ad.grad_check(f, params)
        assert report.passed, (name, report.to_text())


def test_relu_subgradient_at_zero_is_zero():
    g = grads_of(lambda p: ad.relu(p["x"]).sum(), {"x": np.array([[-1.0, 0.0, 1.0]])})
    assert g["x"].tolist() == [[0.0, 0.0, 1.0]]
