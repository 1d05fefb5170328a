"""Pure-numpy batch kernels for the safety QP: reference backend.

Same call contract as the compiled extension `_pdipm`; selected at import
time by `qp_layer` when the extension is unavailable or disabled. Each
batch element is an independent inequality-constrained convex QP

    min_u  0.5 u'Qu + q'u   s.t.  C u <= d

solved by a Mehrotra predictor-corrector primal-dual interior-point
iteration on (u, s, lam): affine scaling step, centering-corrector step, a
single fraction-to-boundary step size (factor 0.995) safeguarded by a
centrality neighborhood, and a pure-centering fallback when the combined
step collapses. A final active-set polish removes the O(tol/s_i)
multiplier bias of interior iterates so results match an exact active-set
solve to machine precision on strictly complementary problems.

Convergence is declared when the KKT residual (max of stationarity,
primal feasibility and complementarity infinity norms) drops below
tol * max(1, |q|_inf, |d|_inf).

Status codes: 0 converged to tolerance, 1 iteration limit reached (best
iterate returned), 2 numerical failure (Newton matrix singular beyond
regularization). Feasibility/infeasibility classification is left to the
caller.
"""

from __future__ import annotations

import numpy as np

IS_COMPILED = False

_STEP_FRACTION = 0.995
_S_MIN = 1e-2
_NBHD_GAMMA = 1e-3


def _solve_spd(m_mat, rhs, eps_reg):
    """Solve with escalating diagonal regularization; None when hopeless."""
    reg = 0.0
    scale = 1.0 + abs(np.trace(m_mat)) / m_mat.shape[0]
    for _ in range(5):
        try:
            sol = np.linalg.solve(m_mat + reg * np.eye(m_mat.shape[0]), rhs)
            if np.all(np.isfinite(sol)):
                return sol
        except np.linalg.LinAlgError:
            pass
        reg = eps_reg * scale if reg == 0.0 else reg * 1e4
    return None


def _residual(q_mat, q_vec, c_mat, d_vec, u, s, lam):
    r_d = q_mat @ u + q_vec + c_mat.T @ lam
    r_p = c_mat @ u + s - d_vec
    comp = s * lam
    return max(
        np.abs(r_d).max(initial=0.0),
        np.abs(r_p).max(initial=0.0),
        np.abs(comp).max(initial=0.0),
    )


def _polish(q_mat, q_vec, c_mat, d_vec, u, s, lam, resid):
    """Crossover: re-solve on the identified active set (lam_i > s_i).

    Kept only when the polished point is feasible, has nonnegative
    multipliers, and does not worsen the KKT residual.
    """
    n_u = u.shape[0]
    active = np.nonzero(lam > s)[0]
    k = active.size
    if k > n_u:
        return u, s, lam, resid
    k_mat = np.zeros((n_u + k, n_u + k))
    k_mat[:n_u, :n_u] = q_mat
    if k:
        c_a = c_mat[active]
        k_mat[:n_u, n_u:] = c_a.T
        k_mat[n_u:, :n_u] = c_a
    rhs = np.concatenate([-q_vec, d_vec[active]])
    try:
        sol = np.linalg.solve(k_mat, rhs)
    except np.linalg.LinAlgError:
        return u, s, lam, resid
    if not np.all(np.isfinite(sol)):
        return u, s, lam, resid
    u_p = sol[:n_u]
    lam_p = np.zeros_like(lam)
    lam_p[active] = sol[n_u:]
    s_p = d_vec - c_mat @ u_p
    if k and sol[n_u:].min(initial=0.0) < -1e-9:
        return u, s, lam, resid
    if s_p.min(initial=0.0) < -1e-9:
        return u, s, lam, resid
    s_p[active] = 0.0
    s_p = np.maximum(s_p, 0.0)
    resid_p = _residual(q_mat, q_vec, c_mat, d_vec, u_p, s_p, lam_p)
    if resid_p <= resid:
        return u_p, s_p, lam_p, resid_p
    return u, s, lam, resid


def _max_step(v, dv):
    neg = dv < 0
    if neg.any():
        return (-v[neg] / dv[neg]).min()
    return np.inf


def _solve_one(q_mat, q_vec, c_mat, d_vec, tol, max_iters, eps_reg):
    n_q = c_mat.shape[0]
    u = _solve_spd(q_mat, -q_vec, eps_reg)
    if u is None:
        return None
    if n_q == 0:
        resid = np.abs(q_mat @ u + q_vec).max(initial=0.0)
        return u, np.zeros(0), np.zeros(0), 0, resid, 0

    stop = tol * max(1.0, np.abs(q_vec).max(initial=0.0), np.abs(d_vec).max(initial=0.0))
    # Mehrotra-style start: shift slacks to the violation scale so the
    # initial complementarity is commensurate with primal infeasibility
    # (a hard floor alone stalls the corrector on deeply infeasible starts).
    raw = d_vec - c_mat @ u
    shift = max(0.0, -1.5 * raw.min())
    s = raw + shift + _S_MIN
    lam = np.ones(n_q)

    best = (_residual(q_mat, q_vec, c_mat, d_vec, u, s, lam), u.copy(), s.copy(), lam.copy())
    status = 1
    iters_used = max_iters
    for it in range(1, max_iters + 1):
        r_d = q_mat @ u + q_vec + c_mat.T @ lam
        r_p = c_mat @ u + s - d_vec
        comp = s * lam
        mu = comp.sum() / n_q

        m_mat = q_mat + c_mat.T @ ((lam / s)[:, None] * c_mat)

        def direction(comp_target):
            rhs = -r_d + c_mat.T @ ((comp_target - lam * r_p) / s)
            du = _solve_spd(m_mat, rhs, eps_reg)
            if du is None:
                return None
            ds = -r_p - c_mat @ du
            dlam = (-comp_target - lam * ds) / s
            return du, ds, dlam

        def step_size(ds, dlam):
            alpha = min(1.0, _STEP_FRACTION * min(_max_step(s, ds), _max_step(lam, dlam)))
            # Stay inside a centrality neighborhood no tighter than the
            # current iterate's, so backtracking cannot stall at alpha -> 0.
            gamma = _NBHD_GAMMA
            if mu > 0:
                gamma = min(gamma, 0.5 * comp.min() / mu)
            for _ in range(40):
                prod = (s + alpha * ds) * (lam + alpha * dlam)
                if prod.min() >= gamma * prod.mean() - 1e-300:
                    break
                alpha *= 0.8
            return alpha

        # Affine scaling step (predictor).
        aff = direction(comp)
        if aff is None:
            resid = _residual(q_mat, q_vec, c_mat, d_vec, u, s, lam)
            return u, s, lam, it, resid, 2
        du_aff, ds_aff, dlam_aff = aff
        alpha_aff = min(1.0, _max_step(s, ds_aff), _max_step(lam, dlam_aff))
        mu_aff = ((s + alpha_aff * ds_aff) * (lam + alpha_aff * dlam_aff)).sum() / n_q
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # Centering-corrector step, reusing the same Newton matrix.
        cc = direction(comp + ds_aff * dlam_aff - sigma * mu)
        if cc is None:
            resid = _residual(q_mat, q_vec, c_mat, d_vec, u, s, lam)
            return u, s, lam, it, resid, 2
        du, ds, dlam = cc
        alpha = step_size(ds, dlam)

        if alpha < 0.2:
            # Combined step collapsed: take a plain centering step instead.
            cen = direction(comp - max(sigma, 0.8) * mu)
            if cen is not None:
                du_c, ds_c, dlam_c = cen
                alpha_c = step_size(ds_c, dlam_c)
                if alpha_c > alpha:
                    du, ds, dlam, alpha = du_c, ds_c, dlam_c, alpha_c

        u = u + alpha * du
        s = s + alpha * ds
        lam = lam + alpha * dlam

        resid = _residual(q_mat, q_vec, c_mat, d_vec, u, s, lam)
        if resid < best[0]:
            best = (resid, u.copy(), s.copy(), lam.copy())
        if resid <= stop:
            status = 0
            iters_used = it
            break

    resid, u, s, lam = best
    u, s, lam, resid = _polish(q_mat, q_vec, c_mat, d_vec, u, s, lam, resid)
    if status == 1 and resid <= stop:
        status = 0
    return u, s, lam, iters_used, resid, status


def solve_batch(q_mats, q_vecs, c_mats, d_vecs, tol, max_iters, eps_reg):
    """Solve a batch of QPs; returns (u, s, lam, iters, resid, status)."""
    q_mats = np.asarray(q_mats, dtype=np.float64)
    q_vecs = np.asarray(q_vecs, dtype=np.float64)
    c_mats = np.asarray(c_mats, dtype=np.float64)
    d_vecs = np.asarray(d_vecs, dtype=np.float64)
    batch, n_u = q_vecs.shape
    n_q = c_mats.shape[1]

    u_out = np.empty((batch, n_u))
    s_out = np.empty((batch, n_q))
    lam_out = np.empty((batch, n_q))
    iters = np.zeros(batch, dtype=np.int32)
    resid = np.zeros(batch)
    status = np.zeros(batch, dtype=np.int32)

    for b in range(batch):
        res = _solve_one(q_mats[b], q_vecs[b], c_mats[b], d_vecs[b], tol, max_iters, eps_reg)
        if res is None:
            u_out[b] = 0.0
            s_out[b] = 0.0
            lam_out[b] = 0.0
            status[b] = 2
            continue
        u_out[b], s_out[b], lam_out[b], iters[b], resid[b], status[b] = res
    return u_out, s_out, lam_out, iters, resid, status


def backward_batch(q_mats, c_mats, u, s, lam, grad_u, eps_reg):
    """Vector-Jacobian products of the QP solution map at a KKT point.

    Solves, per element, the adjoint of the linearized KKT system

        [ Q  -C' diag(lam) ] [p]   [g]
        [ C   diag(s)      ] [r] = [0]

    and returns (grad_q, grad_C, grad_d, regularized) where

        grad_q = -p,   grad_d = -lam * r,
        grad_C[i, j] = lam_i * (r_i u_j - p_j),

    with `regularized` flagging elements whose system needed the diagonal
    fallback (degenerate active set).
    """
    q_mats = np.asarray(q_mats, dtype=np.float64)
    c_mats = np.asarray(c_mats, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    grad_u = np.asarray(grad_u, dtype=np.float64)
    batch, n_u = u.shape
    n_q = s.shape[1]

    grad_q = np.zeros((batch, n_u))
    grad_c = np.zeros((batch, n_q, n_u))
    grad_d = np.zeros((batch, n_q))
    regularized = np.zeros(batch, dtype=np.int32)

    dim = n_u + n_q
    for b in range(batch):
        if not np.any(grad_u[b]):
            continue
        k_mat = np.zeros((dim, dim))
        k_mat[:n_u, :n_u] = q_mats[b]
        if n_q:
            k_mat[:n_u, n_u:] = -c_mats[b].T * lam[b][None, :]
            k_mat[n_u:, :n_u] = c_mats[b]
            k_mat[n_u:, n_u:] = np.diag(s[b])
        rhs = np.concatenate([grad_u[b], np.zeros(n_q)])
        try:
            sol = np.linalg.solve(k_mat, rhs)
            ok = np.all(np.isfinite(sol)) and np.abs(k_mat @ sol - rhs).max() <= 1e-6 * (
                1.0 + np.abs(rhs).max()
            )
        except np.linalg.LinAlgError:
            sol, ok = None, False
        if not ok:
            regularized[b] = 1
            reg = eps_reg
            sol = np.zeros(dim)
            for _ in range(5):
                try:
                    cand = np.linalg.solve(k_mat + reg * np.eye(dim), rhs)
                except np.linalg.LinAlgError:
                    cand = None
                if cand is not None and np.all(np.isfinite(cand)):
                    sol = cand
                    break
                reg *= 1e4
        p = sol[:n_u]
        r = sol[n_u:]
        grad_q[b] = -p
        if n_q:
            grad_d[b] = -lam[b] * r
            grad_c[b] = lam[b][:, None] * (r[:, None] * u[b][None, :] - p[None, :])
    return grad_q, grad_c, grad_d, regularized
