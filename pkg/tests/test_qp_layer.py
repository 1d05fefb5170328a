import numpy as np
import pytest

from safe_fbsde import _pdipm_py, diff_engine as de
from safe_fbsde.exceptions import InfeasibleProblem, SingularKKT
from safe_fbsde.qp_layer import (
    COMPILED_KERNEL,
    QpProblem,
    assemble_hamiltonian_qp,
    brute_force_qp_oracle,
    qp_backward,
    qp_backward_batch,
    qp_solve_op,
    solve_qp_batch,
    solve_qp_pdipm,
)

if COMPILED_KERNEL:
    from safe_fbsde import _pdipm

    KERNELS = [("compiled", _pdipm), ("pure", _pdipm_py)]
else:
    KERNELS = [("pure", _pdipm_py)]


def random_feasible(rng, n_u=None, n_q=None, margin=0.01):
    n_u = n_u or int(rng.integers(1, 9))
    n_q = n_q if n_q is not None else int(rng.integers(0, 7))
    a = rng.normal(size=(n_u, n_u))
    q_mat = a @ a.T + n_u * np.eye(n_u)
    q = rng.normal(size=n_u)
    c = rng.normal(size=(n_q, n_u))
    interior = rng.normal(size=n_u)
    d = c @ interior + np.abs(rng.normal(size=n_q)) + margin
    return QpProblem(q_mat, q, c, d)


def test_unconstrained_closed_form():
    p = QpProblem(np.eye(3), [1.0, -2.0, 0.5], np.zeros((0, 3)), np.zeros(0))
    sol = solve_qp_pdipm(p)
    assert np.allclose(sol.u, [-1.0, 2.0, -0.5])
    assert sol.iterations == 0


def test_active_one_dimensional_case():
    p = QpProblem([[1.0]], [0.0], [[-1.0]], [-1.0])
    sol = solve_qp_pdipm(p)
    assert abs(sol.u[0] - 1.0) < 1e-8
    assert abs(sol.lam[0] - 1.0) < 1e-8
    assert abs(sol.s[0]) < 1e-8


def test_inactive_constraint_case():
    p = QpProblem([[1.0]], [1.0], [[1.0]], [10.0])
    sol = solve_qp_pdipm(p)
    assert abs(sol.u[0] + 1.0) < 1e-8
    assert abs(sol.lam[0]) < 1e-8


def test_output_feasibility_invariant(rng):
    for _ in range(300):
        p = random_feasible(rng)
        sol = solve_qp_pdipm(p)
        if p.n_q:
            assert (p.C @ sol.u - p.d).max() <= 1e-7
            assert sol.lam.min() >= -1e-9
            assert np.abs(sol.lam * sol.s).max() <= 1e-6


@pytest.mark.parametrize("name,kernel", KERNELS)
def test_oracle_equivalence_per_kernel(name, kernel, rng):
    worst = 0.0
    for _ in range(150):
        p = random_feasible(rng)
        u, s, lam, it, res, st = kernel.solve_batch(
            p.Q[None], p.q[None], p.C[None], p.d[None], 1e-8, 20, 1e-9
        )
        assert st[0] == 0, (name, res)
        ref = brute_force_qp_oracle(p)
        worst = max(worst, np.abs(u[0] - ref.u).max(initial=0.0))
    assert worst <= 1e-6


@pytest.mark.skipif(not COMPILED_KERNEL, reason="compiled kernel unavailable")
def test_backends_agree(rng):
    for _ in range(100):
        p = random_feasible(rng)
        r1 = _pdipm.solve_batch(p.Q[None], p.q[None], p.C[None], p.d[None], 1e-8, 20, 1e-9)
        r2 = _pdipm_py.solve_batch(p.Q[None], p.q[None], p.C[None], p.d[None], 1e-8, 20, 1e-9)
        assert np.abs(r1[0] - r2[0]).max() < 1e-9
        assert r1[5][0] == r2[5][0]
        g = np.random.default_rng(1).normal(size=(1, p.n_u))
        b1 = _pdipm.backward_batch(p.Q[None], p.C[None], r1[0], r1[1], r1[2], g, 1e-9)
        b2 = _pdipm_py.backward_batch(p.Q[None], p.C[None], r2[0], r2[1], r2[2], g, 1e-9)
        for x, y in zip(b1[:3], b2[:3]):
            assert np.abs(x - y).max(initial=0.0) < 1e-8


def test_zero_row_with_nonnegative_bound_never_alters_solution(rng):
    for _ in range(50):
        p = random_feasible(rng, n_u=3, n_q=2)
        with_zero = QpProblem(
            p.Q, p.q, np.vstack([p.C, np.zeros(3)]), np.concatenate([p.d, [abs(rng.normal())]])
        )
        s1 = solve_qp_pdipm(p)
        s2 = solve_qp_pdipm(with_zero)
        assert np.allclose(s1.u, s2.u, atol=1e-9)


def test_zero_row_with_negative_bound_is_infeasible():
    p = QpProblem(np.eye(2), [0.0, 0.0], [[0.0, 0.0]], [-0.5])
    with pytest.raises(InfeasibleProblem, match="zero constraint rows"):
        solve_qp_pdipm(p)


def test_truly_empty_feasible_set_raises():
    # u <= -1 and u >= 1 simultaneously
    p = QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [-1.0, -1.0])
    with pytest.raises(InfeasibleProblem):
        solve_qp_pdipm(p)


def test_assemble_hamiltonian_qp_pendulum_shape():
    r_mat = np.array([[0.5]])
    g_at_x = np.array([[0.0], [2.0]])  # 1/I = 2
    v_x = np.array([0.3, -1.2])
    prob = assemble_hamiltonian_qp(r_mat, g_at_x, v_x, [(np.array([0.2]), 0.7)])
    assert np.allclose(prob.q, [2.0 * -1.2])
    assert prob.n_q == 1 and prob.n_u == 1
    empty = assemble_hamiltonian_qp(r_mat, g_at_x, v_x, [])
    assert empty.n_q == 0


def test_assemble_rejects_non_spd():
    with pytest.raises(ValueError, match="positive definite"):
        assemble_hamiltonian_qp(np.array([[-1.0]]), np.ones((2, 1)), np.ones(2), [])
    with pytest.raises(ValueError, match="symmetric"):
        QpProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), np.zeros((0, 2)), np.zeros(0))


def test_backward_active_case_matches_hand_values():
    p = QpProblem([[1.0]], [0.0], [[-1.0]], [-1.0])
    sol = solve_qp_pdipm(p)
    bw = qp_backward(p, sol, np.array([1.0]))
    assert np.allclose(bw.grad_d, [-1.0], atol=1e-9)
    assert np.allclose(bw.grad_q, [0.0], atol=1e-9)
    assert np.allclose(bw.grad_C, [[1.0]], atol=1e-8)
    assert np.allclose(bw.grad_Q, 0.0)


def test_backward_inactive_case_unconstrained_sensitivity(rng):
    q_mat = np.array([[2.0, 0.3], [0.3, 1.5]])
    p = QpProblem(q_mat, [0.5, -0.2], [[1.0, 1.0]], [100.0])
    sol = solve_qp_pdipm(p)
    g = rng.normal(size=2)
    bw = qp_backward(p, sol, g)
    assert np.allclose(bw.grad_d, 0.0, atol=1e-9)
    assert np.allclose(bw.grad_q, -np.linalg.solve(q_mat, g), atol=1e-8)


def test_backward_matches_finite_differences(rng):
    checked = 0
    for _ in range(60):
        p = random_feasible(rng, n_u=int(rng.integers(1, 5)), n_q=int(rng.integers(1, 4)), margin=0.05)
        sol = solve_qp_pdipm(p, tol=1e-12, max_iters=30)
        if np.any(np.maximum(sol.lam, sol.s) < 1e-3):
            continue
        checked += 1
        g = rng.normal(size=p.n_u)
        bw = qp_backward(p, sol, g)
        h = 1e-6

        def loss(problem):
            return float(g @ solve_qp_pdipm(problem, tol=1e-12, max_iters=30).u)

        for i in range(p.n_q):
            dp, dm = p.d.copy(), p.d.copy()
            dp[i] += h
            dm[i] -= h
            fd = (loss(QpProblem(p.Q, p.q, p.C, dp)) - loss(QpProblem(p.Q, p.q, p.C, dm))) / (2 * h)
            denom = max(abs(bw.grad_d[i]), abs(fd), 1e-3)
            assert abs(bw.grad_d[i] - fd) / denom <= 1e-5
    assert checked >= 30


def test_backward_zero_upstream_short_circuits():
    p = QpProblem([[1.0]], [0.3], [[1.0]], [5.0])
    sol = solve_qp_pdipm(p)
    bw = qp_backward(p, sol, np.zeros(1))
    assert np.allclose(bw.grad_q, 0.0) and np.allclose(bw.grad_d, 0.0)


def test_degenerate_backward_warns_singular_kkt():
    # weakly active: boundary exactly at the unconstrained optimum
    p = QpProblem([[1.0]], [0.0], [[1.0]], [0.0])
    sol = solve_qp_pdipm(p)
    with pytest.warns(SingularKKT):
        qp_backward(p, sol, np.array([1.0]))


def test_brute_force_tie_breaks_to_smallest_active_set():
    p = QpProblem([[1.0]], [0.0], [[-1.0], [-1.0]], [-1.0, -1.0])
    sol = brute_force_qp_oracle(p)
    assert abs(sol.u[0] - 1.0) < 1e-12
    assert (sol.lam > 1e-9).sum() == 1


def test_brute_force_infeasible_and_limits():
    with pytest.raises(InfeasibleProblem):
        brute_force_qp_oracle(QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [-1.0, -1.0]))
    with pytest.raises(ValueError, match="n_q"):
        brute_force_qp_oracle(
            QpProblem(np.eye(1), np.zeros(1), np.zeros((13, 1)), np.ones(13))
        )


def test_qp_solve_op_gradients_chain_through_tape(rng):
    q_mat = np.array([[1.0]])
    q0 = np.array([[0.5]])
    c0 = np.array([[[-1.0]]])
    d0 = np.array([[-1.0]])

    def build(leaves):
        u, stats = qp_solve_op(q_mat, leaves["q"], leaves["C"], leaves["d"])
        return de.vsum(de.square(u))

    report = de.finite_difference_check(build, {"q": q0, "C": c0, "d": d0}, floor=1e-3)
    assert report.max_rel_err <= 1e-6


def test_solve_qp_batch_shares_stats(rng):
    p = random_feasible(rng, n_u=2, n_q=2)
    u, stats = qp_solve_op(p.Q, p.q[None], p.C[None], p.d[None])
    assert u.shape == (1, 2)
    assert stats.max_iterations >= 1
    assert stats.max_residual <= 1e-7
