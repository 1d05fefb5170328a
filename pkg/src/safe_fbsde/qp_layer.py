"""Per-timestep Hamiltonian QP: interior-point solve and KKT differentiation.

The control at every (batch element, timestep) is

    argmin_u  0.5 u'Qu + q'u   s.t.  C u <= d

with Q the control cost matrix, q the actuation-pulled-back value gradient,
and (C, d) the stacked barrier constraint rows. Solves run through a batch
kernel: a compiled extension when available, else the numpy reference
implementation (set SAFE_FBSDE_PURE_PY=1 to force the fallback). Gradients
of the solution with respect to (q, C, d) come from the linearized KKT
system at the optimum, not from differentiating solver iterations.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import diff_engine as de
from .exceptions import InfeasibleProblem, NumericalFailure, SingularKKT

_FORCE_PY = os.environ.get("SAFE_FBSDE_PURE_PY", "").strip() not in ("", "0")
if _FORCE_PY:
    from . import _pdipm_py as _kernel
else:
    try:
        from . import _pdipm as _kernel  # type: ignore[attr-defined]
    except ImportError:
        from . import _pdipm_py as _kernel

COMPILED_KERNEL: bool = bool(getattr(_kernel, "IS_COMPILED", False))

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 20
EPS_REG = 1e-9
FEAS_TOL = 1e-7


@dataclass
class QpProblem:
    """One inequality-constrained convex QP instance."""

    Q: np.ndarray  # (n_u, n_u), symmetric positive definite
    q: np.ndarray  # (n_u,)
    C: np.ndarray  # (n_q, n_u)
    d: np.ndarray  # (n_q,)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1, self.q.shape[0])
        self.d = np.atleast_1d(np.asarray(self.d, dtype=np.float64)).reshape(self.C.shape[0])
        _require_spd(self.Q)

    @property
    def n_u(self) -> int:
        return self.q.shape[0]

    @property
    def n_q(self) -> int:
        return self.d.shape[0]


@dataclass
class QpSolution:
    u: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    iterations: int
    residual: float

    def objective(self, problem: QpProblem) -> float:
        return float(0.5 * self.u @ problem.Q @ self.u + problem.q @ self.u)


@dataclass
class QpBackward:
    grad_q: np.ndarray
    grad_C: np.ndarray
    grad_d: np.ndarray
    grad_Q: np.ndarray  # kept zero: the control cost is not trainable


@dataclass
class QpBatchStats:
    """Aggregated solver statistics for one batched solve."""

    max_iterations: int
    mean_iterations: float
    max_residual: float
    min_strictness: float  # min over rows of max(lam_i, s_i); small => degenerate

    @staticmethod
    def from_arrays(iters, resid, s, lam) -> "QpBatchStats":
        if s.size:
            strict = float(np.minimum.reduce(np.maximum(s, lam), axis=1).min())
        else:
            strict = np.inf
        return QpBatchStats(
            max_iterations=int(iters.max(initial=0)),
            mean_iterations=float(iters.mean()) if iters.size else 0.0,
            max_residual=float(resid.max(initial=0.0)),
            min_strictness=strict,
        )


def _require_spd(q_mat: np.ndarray) -> None:
    if q_mat.ndim != 2 or q_mat.shape[0] != q_mat.shape[1]:
        raise ValueError(f"Q must be square, got shape {q_mat.shape}")
    if not np.allclose(q_mat, q_mat.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    try:
        np.linalg.cholesky(q_mat)
    except np.linalg.LinAlgError:
        raise ValueError("Q must be positive definite") from None


def assemble_hamiltonian_qp(R, G_at_x, V_x, constraint_rows) -> QpProblem:
    """Build the QP whose minimizer is the constrained Hamiltonian optimum.

    `constraint_rows` is an iterable of (c_row, d) pairs or ConstraintRow
    objects; an empty iterable yields the unconstrained problem.
    """
    R = np.asarray(R, dtype=np.float64)
    G_at_x = np.asarray(G_at_x, dtype=np.float64)
    V_x = np.asarray(V_x, dtype=np.float64)
    q = G_at_x.T @ V_x
    rows = []
    ds = []
    for row in constraint_rows:
        if hasattr(row, "c_row"):
            rows.append(np.asarray(row.c_row, dtype=np.float64))
            ds.append(float(row.d))
        else:
            c_row, d = row
            rows.append(np.asarray(c_row, dtype=np.float64))
            ds.append(float(d))
    n_u = q.shape[0]
    C = np.stack(rows) if rows else np.zeros((0, n_u))
    d = np.array(ds) if ds else np.zeros(0)
    return QpProblem(Q=R, q=q, C=C, d=d)


def _c_array(a) -> np.ndarray:
    """Contiguous, writable float64 view or copy (kernels take typed buffers)."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return arr


def _check_zero_rows(c_mats: np.ndarray, d_vecs: np.ndarray) -> None:
    """Reject rows 0'u <= d with d < 0: the feasible set is empty."""
    if c_mats.shape[1] == 0:
        return
    zero_rows = np.abs(c_mats).max(axis=2) == 0.0
    bad = zero_rows & (d_vecs < 0.0)
    if bad.any():
        elems, rows = np.nonzero(bad)
        listing = ", ".join(
            f"(elem {e}, row {r}, d={d_vecs[e, r]:.3e})" for e, r in zip(elems[:8], rows[:8])
        )
        raise InfeasibleProblem(
            f"zero constraint rows with negative bound make the QP infeasible: {listing}"
        )


def solve_qp_batch(
    q_mats: np.ndarray,
    q_vecs: np.ndarray,
    c_mats: np.ndarray,
    d_vecs: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
):
    """Solve a batch of QPs; returns (u, s, lam, iters, resid).

    Raises InfeasibleProblem / NumericalFailure listing offending batch
    elements. Every returned solution satisfies C u <= d + FEAS_TOL.
    """
    q_mats = _c_array(q_mats)
    q_vecs = _c_array(q_vecs)
    c_mats = _c_array(c_mats)
    d_vecs = _c_array(d_vecs)
    _check_zero_rows(c_mats, d_vecs)
    u, s, lam, iters, resid, status = _kernel.solve_batch(
        q_mats, q_vecs, c_mats, d_vecs, tol, max_iters, EPS_REG
    )
    bad = status == 2
    if c_mats.shape[1]:
        viol = (c_mats @ u[:, :, None])[:, :, 0] - d_vecs
        bad = bad | (viol.max(axis=1) > FEAS_TOL)
    bad = np.nonzero(bad)[0]
    if bad.size:
        # Borderline instances (near-empty interior, singular Newton systems)
        # occasionally need a bigger budget; escalate those elements, then
        # classify with exact active-set enumeration before giving up.
        u2, s2, lam2, it2, re2, st2 = _kernel.solve_batch(
            q_mats[bad], q_vecs[bad], c_mats[bad], d_vecs[bad],
            tol, max(100, 5 * max_iters), EPS_REG,
        )
        for pos, b in enumerate(bad):
            feas2 = (
                c_mats[b].shape[0] == 0
                or (c_mats[b] @ u2[pos] - d_vecs[b]).max() <= FEAS_TOL
            )
            if st2[pos] != 2 and feas2:
                u[b], s[b], lam[b] = u2[pos], s2[pos], lam2[pos]
                iters[b], resid[b] = it2[pos], re2[pos]
                continue
            if c_mats.shape[1] > 12:
                raise NumericalFailure(
                    f"QP Newton system singular beyond regularization for batch "
                    f"element {b} and too many rows for exact enumeration"
                )
            problem = QpProblem(q_mats[b], q_vecs[b], c_mats[b], d_vecs[b])
            try:
                exact = brute_force_qp_oracle(problem)
            except InfeasibleProblem:
                raise InfeasibleProblem(
                    f"QP for batch element {b} has an empty feasible set "
                    f"(rows C={c_mats[b]!r}, d={d_vecs[b]!r})"
                ) from None
            warnings.warn(
                f"interior-point solve fell back to active-set enumeration "
                f"for batch element {b}",
                RuntimeWarning,
                stacklevel=2,
            )
            u[b], s[b], lam[b] = exact.u, exact.s, exact.lam
            iters[b], resid[b] = exact.iterations, exact.residual
    return u, s, lam, iters, resid


def solve_qp_pdipm(
    problem: QpProblem, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS
) -> QpSolution:
    """Solve one QP with the primal-dual interior-point kernel."""
    u, s, lam, iters, resid = solve_qp_batch(
        problem.Q[None], problem.q[None], problem.C[None], problem.d[None], tol, max_iters
    )
    return QpSolution(u=u[0], s=s[0], lam=lam[0], iterations=int(iters[0]), residual=float(resid[0]))


def qp_backward_batch(q_mats, c_mats, u, s, lam, grad_u):
    """Batched KKT vector-Jacobian products; warns when regularization fired."""
    grad_q, grad_c, grad_d, regged = _kernel.backward_batch(
        _c_array(q_mats),
        _c_array(c_mats),
        _c_array(u),
        _c_array(s),
        _c_array(lam),
        _c_array(grad_u),
        EPS_REG,
    )
    n_reg = int(np.asarray(regged).sum())
    if n_reg:
        warnings.warn(
            f"KKT backward system rank-deficient for {n_reg} batch element(s); "
            f"applied diagonal regularization {EPS_REG:g}",
            SingularKKT,
            stacklevel=2,
        )
    return grad_q, grad_c, grad_d


def qp_backward(problem: QpProblem, solution: QpSolution, upstream_grad_u) -> QpBackward:
    """Gradients of a scalar loss w.r.t. (q, C, d) given d(loss)/d(u*)."""
    grad_q, grad_c, grad_d = qp_backward_batch(
        problem.Q[None],
        problem.C[None],
        solution.u[None],
        solution.s[None],
        solution.lam[None],
        np.asarray(upstream_grad_u, dtype=np.float64)[None],
    )
    return QpBackward(
        grad_q=grad_q[0],
        grad_C=grad_c[0],
        grad_d=grad_d[0],
        grad_Q=np.zeros_like(problem.Q),
    )


def qp_solve_op(
    q_mat_const: np.ndarray,
    q_vecs,
    c_mats,
    d_vecs,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
):
    """Differentiable batched QP node for rollout tapes.

    `q_vecs` (M, n_u), `c_mats` (M, n_q, n_u) and `d_vecs` (M, n_q) may be
    Vars; `q_mat_const` is the shared, non-trainable control cost matrix.
    Returns (u, QpBatchStats) where u is a Var when any input is tracked.
    """
    qv = de.value_of(q_vecs)
    cv = de.value_of(c_mats)
    dv = de.value_of(d_vecs)
    batch = qv.shape[0]
    q_b = np.broadcast_to(q_mat_const, (batch,) + q_mat_const.shape)
    u, s, lam, iters, resid = solve_qp_batch(q_b, qv, cv, dv, tol, max_iters)
    stats = QpBatchStats.from_arrays(iters, resid, s, lam)

    def backward(g):
        grad_q, grad_c, grad_d = qp_backward_batch(q_b, cv, u, s, lam, g)
        return (grad_q, grad_c, grad_d)

    out = de.record_custom(u, (q_vecs, c_mats, d_vecs), backward, "qp_solve")
    return out, stats


def brute_force_qp_oracle(problem: QpProblem) -> QpSolution:
    """Enumerate active sets; reference oracle for interior-point results.

    Solves the equality-constrained system for every subset of constraints,
    keeps feasible candidates with nonnegative multipliers, and returns the
    lowest objective (smallest active set on ties). Exponential in n_q.
    """
    if problem.n_q > 12:
        raise ValueError("brute-force oracle limited to n_q <= 12")
    n_u, n_q = problem.n_u, problem.n_q
    tol = 1e-9
    best = None  # (objective, active_size, u, lam_full)
    tried = 0
    for size in range(n_q + 1):
        for active in combinations(range(n_q), size):
            tried += 1
            idx = list(active)
            c_a = problem.C[idx]
            k_mat = np.zeros((n_u + size, n_u + size))
            k_mat[:n_u, :n_u] = problem.Q
            if size:
                k_mat[:n_u, n_u:] = c_a.T
                k_mat[n_u:, :n_u] = c_a
            rhs = np.concatenate([-problem.q, problem.d[idx]])
            try:
                sol = np.linalg.solve(k_mat, rhs)
            except np.linalg.LinAlgError:
                continue
            u = sol[:n_u]
            lam_a = sol[n_u:]
            if np.any(problem.C @ u - problem.d > tol):
                continue
            if size and np.any(lam_a < -tol):
                continue
            obj = 0.5 * u @ problem.Q @ u + problem.q @ u
            if best is None or obj < best[0] - 1e-12:
                lam_full = np.zeros(n_q)
                lam_full[idx] = lam_a
                best = (obj, size, u, lam_full)
    if best is None:
        raise InfeasibleProblem("no active set yields a feasible KKT point")
    _, _, u, lam = best
    s = problem.d - problem.C @ u
    r_d = problem.Q @ u + problem.q + problem.C.T @ lam
    resid = float(np.abs(r_d).max(initial=0.0))
    return QpSolution(u=u, s=s, lam=lam, iterations=tried, residual=resid)
