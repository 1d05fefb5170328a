import numpy as np
import pytest

from safe_fbsde import diff_engine as de


def numeric_grad(fn, x, eps=1e-6):
    """Central differences of a scalar fn at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        h = eps * max(1.0, abs(old))
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, x):
    """Gradient of scalar-valued `build(Var)` via backprop."""
    v = de.Var(np.array(x, dtype=np.float64), name="x")
    with de.Tape() as tape:
        loss = build(v)
    de.backprop(tape, loss)
    return v.grad


UNARY_CASES = [
    ("sin", lambda v: de.vsum(de.sin(v) * np.array([1.0, 2.0, -0.5]))),
    ("cos", lambda v: de.vsum(de.cos(v) * np.array([1.0, 2.0, -0.5]))),
    ("tanh", lambda v: de.vsum(de.square(de.tanh(v)))),
    ("sigmoid", lambda v: de.vsum(de.sigmoid(v) * 3.0)),
    ("exp", lambda v: de.vsum(de.exp(v * 0.3))),
    ("sqrt", lambda v: de.vsum(de.sqrt(v * v + 1.0))),
    ("square", lambda v: de.vsum(de.square(v) * 0.7)),
    ("pow", lambda v: de.vsum(v**3)),
    ("div", lambda v: de.vsum(1.0 / (v + 5.0))),
    ("neg", lambda v: de.vsum(-v * 2.0)),
    ("wrap", lambda v: de.vsum(de.square(de.wrap_angle(v * 1.7)))),
]


@pytest.mark.parametrize("name,build", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_op_gradients(name, build):
    x = np.array([0.3, -1.2, 2.4])
    analytic = tape_grad(build, x)
    fd = numeric_grad(lambda a: float(de.value_of(build(a))), x)
    assert np.allclose(analytic, fd, rtol=1e-6, atol=1e-8)


def test_binary_and_shape_op_gradients(rng):
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)

    def build(v):
        y = v @ w + b
        y1, y2 = y[:, 0], y[:, 1:]
        z = de.concat([de.stack([y1, y1 * 2.0], axis=1), y2], axis=1)
        return de.vmean(de.square(z)) + de.vsum(v * v, axis=None) * 0.1

    x = rng.normal(size=(2, 4))
    analytic = tape_grad(build, x)
    fd = numeric_grad(lambda a: float(de.value_of(build(a))), x)
    assert np.allclose(analytic, fd, rtol=1e-6, atol=1e-8)


def test_broadcast_rows_gradient(rng):
    def build(v):
        tiled = de.broadcast_rows(v, 5)
        return de.vsum(de.square(tiled + np.arange(5)[:, None]))

    x = rng.normal(size=3)
    analytic = tape_grad(build, x)
    fd = numeric_grad(lambda a: float(de.value_of(build(a))), x)
    assert np.allclose(analytic, fd, rtol=1e-6)


def test_bias_broadcast_unbroadcasts_to_shape(rng):
    b = de.Var(rng.normal(size=4), name="b")
    x = rng.normal(size=(6, 4))
    with de.Tape() as tape:
        loss = de.vsum(de.square(x + b))
    de.backprop(tape, loss)
    assert b.grad.shape == (4,)
    assert np.allclose(b.grad, (2 * (x + b.value)).sum(axis=0))


def test_repeated_operand_accumulates():
    v = de.Var(np.array(3.0), name="v")
    with de.Tape() as tape:
        loss = v * v + v
    de.backprop(tape, loss)
    assert np.isclose(v.grad, 2 * 3.0 + 1.0)


def test_ops_without_tape_return_plain_arrays():
    x = np.array([1.0, 2.0])
    assert isinstance(de.sin(x), np.ndarray)
    v = de.Var(x)
    # no active tape: result is a detached ndarray
    assert isinstance(de.sin(v), np.ndarray)


def test_backprop_rejects_nonscalar_and_untracked():
    v = de.Var(np.ones(3))
    with de.Tape() as tape:
        y = v * 2.0
    with pytest.raises(ValueError):
        de.backprop(tape, y)
    with pytest.raises(TypeError):
        de.backprop(tape, np.ones(()))


def test_nonfinite_gradient_diagnostic_names_node():
    v = de.Var(np.array(0.0), name="v")
    with de.Tape() as tape:
        loss = de.sqrt(v)  # derivative at 0 is infinite
    with pytest.raises(FloatingPointError, match="node"):
        de.backprop(tape, loss)


def test_matmul_requires_2d():
    with pytest.raises(ValueError):
        de.matmul(de.Var(np.ones(3)), np.ones((3, 2)))


def test_finite_difference_check_quadratic_is_exact():
    def computation(params):
        p = params["p"]
        return de.vsum(de.square(p) * np.array([1.0, 2.0, 3.0]))

    report = de.finite_difference_check(computation, {"p": np.array([1.0, -2.0, 0.5])})
    assert report.max_rel_err <= 1e-9


def test_finite_difference_check_deterministic():
    def computation(params):
        noise = np.random.default_rng(7).normal(size=3)
        return de.vsum(de.square(params["p"] - noise))

    p = {"p": np.array([0.1, 0.2, 0.3])}
    r1 = de.finite_difference_check(computation, p, coords_per_param=2, rng=np.random.default_rng(1))
    r2 = de.finite_difference_check(computation, p, coords_per_param=2, rng=np.random.default_rng(1))
    assert r1.per_param == r2.per_param


def test_gradient_ignores_constant_noise_inputs():
    dw = np.random.default_rng(3).normal(size=(4,))

    def build(v):
        return de.vsum(de.square(v + dw))

    x = np.zeros(4)
    analytic = tape_grad(build, x)
    assert np.allclose(analytic, 2 * dw)
