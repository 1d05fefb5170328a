# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled batch kernels for the safety QP.

C twin of `_pdipm_py`: identical algorithm (Mehrotra predictor-corrector
with neighborhood safeguard, centering fallback and active-set polish)
with all per-element linear algebra done on stack-free malloc'd scratch.
See `_pdipm_py` for the algorithm documentation; the two backends must
stay semantically in lockstep and are cross-checked by the test suite.
"""

from libc.math cimport fabs, sqrt, INFINITY
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

import numpy as np

IS_COMPILED = True

cdef double STEP_FRACTION = 0.995
cdef double S_MIN = 1e-2
cdef double NBHD_GAMMA = 1e-3


# ---------------------------------------------------------------- dense LA

cdef int _chol_factor(double* a, int n) noexcept nogil:
    """In-place lower-Cholesky; returns 0 on success."""
    cdef int i, j, k
    cdef double acc
    for j in range(n):
        acc = a[j * n + j]
        for k in range(j):
            acc -= a[j * n + k] * a[j * n + k]
        if acc <= 0.0 or acc != acc:
            return 1
        a[j * n + j] = sqrt(acc)
        for i in range(j + 1, n):
            acc = a[i * n + j]
            for k in range(j):
                acc -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = acc / a[j * n + j]
    return 0


cdef void _chol_solve(double* l, double* b, double* x, int n) noexcept nogil:
    cdef int i, k
    cdef double acc
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= l[i * n + k] * x[k]
        x[i] = acc / l[i * n + i]
    for i in range(n - 1, -1, -1):
        acc = x[i]
        for k in range(i + 1, n):
            acc -= l[k * n + i] * x[k]
        x[i] = acc / l[i * n + i]


cdef int _solve_spd(double* a, double* rhs, double* out, int n,
                    double eps_reg, double* fac) noexcept nogil:
    """Solve a*out = rhs with escalating diagonal regularization."""
    cdef double reg = 0.0
    cdef double scale = 0.0
    cdef int i, attempt
    for i in range(n):
        scale += fabs(a[i * n + i])
    scale = 1.0 + scale / n
    for attempt in range(5):
        memcpy(fac, a, n * n * sizeof(double))
        if reg > 0.0:
            for i in range(n):
                fac[i * n + i] += reg
        if _chol_factor(fac, n) == 0:
            _chol_solve(fac, rhs, out, n)
            for i in range(n):
                if out[i] != out[i] or out[i] == INFINITY or out[i] == -INFINITY:
                    break
            else:
                return 0
        reg = eps_reg * scale if reg == 0.0 else reg * 1e4
    return 1


cdef int _lu_solve(double* a, double* b, int n, int* piv) noexcept nogil:
    """In-place partial-pivot LU solve; returns 0 on success."""
    cdef int i, j, k, p, tmp
    cdef double mx, v
    for i in range(n):
        piv[i] = i
    for k in range(n):
        p = k
        mx = fabs(a[piv[k] * n + k])
        for i in range(k + 1, n):
            v = fabs(a[piv[i] * n + k])
            if v > mx:
                mx = v
                p = i
        if mx == 0.0 or mx != mx:
            return 1
        if p != k:
            tmp = piv[k]
            piv[k] = piv[p]
            piv[p] = tmp
        for i in range(k + 1, n):
            v = a[piv[i] * n + k] / a[piv[k] * n + k]
            a[piv[i] * n + k] = v
            for j in range(k + 1, n):
                a[piv[i] * n + j] -= v * a[piv[k] * n + j]
    return _lu_substitute(a, b, n, piv)


cdef int _lu_substitute(double* a, double* b, int n, int* piv) noexcept nogil:
    cdef int i, k
    cdef double acc
    cdef double* y = <double*>malloc(n * sizeof(double))
    if y == NULL:
        return 1
    for i in range(n):
        acc = b[piv[i]]
        for k in range(i):
            acc -= a[piv[i] * n + k] * y[k]
        y[i] = acc
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= a[piv[i] * n + k] * y[k]
        y[i] = acc / a[piv[i] * n + i]
    for i in range(n):
        b[i] = y[i]
    free(y)
    return 0


# ---------------------------------------------------------------- helpers

cdef double _kkt_residual(double* qm, double* qv, double* cm, double* dv,
                          double* u, double* s, double* lam,
                          int n_u, int n_q) noexcept nogil:
    cdef double res = 0.0
    cdef double acc
    cdef int i, j
    for i in range(n_u):
        acc = qv[i]
        for j in range(n_u):
            acc += qm[i * n_u + j] * u[j]
        for j in range(n_q):
            acc += cm[j * n_u + i] * lam[j]
        if fabs(acc) > res:
            res = fabs(acc)
    for i in range(n_q):
        acc = s[i] - dv[i]
        for j in range(n_u):
            acc += cm[i * n_u + j] * u[j]
        if fabs(acc) > res:
            res = fabs(acc)
        if fabs(s[i] * lam[i]) > res:
            res = fabs(s[i] * lam[i])
    return res


cdef double _max_step_c(double* v, double* dv, int n) noexcept nogil:
    cdef double a = INFINITY
    cdef int i
    for i in range(n):
        if dv[i] < 0.0 and -v[i] / dv[i] < a:
            a = -v[i] / dv[i]
    return a


cdef int _polish_c(double* qm, double* qv, double* cm, double* dv,
                   double* u, double* s, double* lam, double* resid,
                   int n_u, int n_q, double* kmat, double* kb, int* piv,
                   int* active) noexcept nogil:
    """Active-set crossover; overwrites (u, s, lam, resid) when accepted."""
    cdef int k = 0
    cdef int i, j, dim
    for i in range(n_q):
        if lam[i] > s[i]:
            active[k] = i
            k += 1
    if k > n_u:
        return 0
    dim = n_u + k
    memset(kmat, 0, dim * dim * sizeof(double))
    for i in range(n_u):
        for j in range(n_u):
            kmat[i * dim + j] = qm[i * n_u + j]
        kb[i] = -qv[i]
    for i in range(k):
        for j in range(n_u):
            kmat[(n_u + i) * dim + j] = cm[active[i] * n_u + j]
            kmat[j * dim + n_u + i] = cm[active[i] * n_u + j]
        kb[n_u + i] = dv[active[i]]
    if _lu_solve(kmat, kb, dim, piv) != 0:
        return 0
    for i in range(dim):
        if kb[i] != kb[i] or fabs(kb[i]) == INFINITY:
            return 0
    for i in range(k):
        if kb[n_u + i] < -1e-9:
            return 0
    # candidate slacks
    cdef double sp, res_p
    cdef double* up = kb  # first n_u entries
    for i in range(n_q):
        sp = dv[i]
        for j in range(n_u):
            sp -= cm[i * n_u + j] * up[j]
        if sp < -1e-9:
            return 0
    # accepted structurally; now build and compare residual
    cdef double* s_new = <double*>malloc(n_q * sizeof(double))
    cdef double* l_new = <double*>malloc(n_q * sizeof(double))
    if s_new == NULL or l_new == NULL:
        if s_new != NULL:
            free(s_new)
        if l_new != NULL:
            free(l_new)
        return 0
    for i in range(n_q):
        sp = dv[i]
        for j in range(n_u):
            sp -= cm[i * n_u + j] * up[j]
        s_new[i] = sp if sp > 0.0 else 0.0
        l_new[i] = 0.0
    for i in range(k):
        s_new[active[i]] = 0.0
        l_new[active[i]] = kb[n_u + i]
    res_p = _kkt_residual(qm, qv, cm, dv, up, s_new, l_new, n_u, n_q)
    if res_p <= resid[0]:
        for i in range(n_u):
            u[i] = up[i]
        for i in range(n_q):
            s[i] = s_new[i]
            lam[i] = l_new[i]
        resid[0] = res_p
    free(s_new)
    free(l_new)
    return 0


# ---------------------------------------------------------------- solver

def solve_batch(double[:, :, ::1] q_mats, double[:, ::1] q_vecs,
                double[:, :, ::1] c_mats, double[:, ::1] d_vecs,
                double tol, int max_iters, double eps_reg):
    """Solve a batch of QPs; returns (u, s, lam, iters, resid, status)."""
    cdef int batch = q_vecs.shape[0]
    cdef int n_u = q_vecs.shape[1]
    cdef int n_q = c_mats.shape[1]
    cdef int dim = n_u + n_q

    u_np = np.zeros((batch, n_u))
    s_np = np.zeros((batch, n_q))
    lam_np = np.zeros((batch, n_q))
    it_np = np.zeros(batch, dtype=np.int32)
    res_np = np.zeros(batch)
    st_np = np.zeros(batch, dtype=np.int32)
    cdef double[:, ::1] u_out = u_np
    cdef double[:, ::1] s_out = s_np
    cdef double[:, ::1] lam_out = lam_np
    cdef int[::1] it_out = it_np
    cdef double[::1] res_out = res_np
    cdef int[::1] st_out = st_np

    # scratch: counts of doubles
    cdef int nd = (
        3 * n_u * n_u          # M, fac, (spare)
        + dim * dim            # polish/KKT matrix
        + dim                  # polish rhs
        + 6 * n_u              # u, bu, r_d, du_a, du, du_c
        + 12 * n_q             # s, lam, bs, blam, r_p, comp, ds_a, dl_a, ds, dl, ds_c, dl_c
        + n_q                  # ct
        + n_u                  # rhs
    )
    cdef double* ws = <double*>malloc(nd * sizeof(double))
    cdef int* iws = <int*>malloc((dim + n_q + dim) * sizeof(int))
    if ws == NULL or iws == NULL:
        if ws != NULL:
            free(ws)
        if iws != NULL:
            free(iws)
        raise MemoryError()

    cdef double* m_mat = ws
    cdef double* fac = m_mat + n_u * n_u
    cdef double* spare = fac + n_u * n_u
    cdef double* kmat = spare + n_u * n_u
    cdef double* kb = kmat + dim * dim
    cdef double* u = kb + dim
    cdef double* bu = u + n_u
    cdef double* r_d = bu + n_u
    cdef double* du_a = r_d + n_u
    cdef double* du = du_a + n_u
    cdef double* du_c = du + n_u
    cdef double* s = du_c + n_u
    cdef double* lam = s + n_q
    cdef double* bs = lam + n_q
    cdef double* blam = bs + n_q
    cdef double* r_p = blam + n_q
    cdef double* comp = r_p + n_q
    cdef double* ds_a = comp + n_q
    cdef double* dl_a = ds_a + n_q
    cdef double* ds = dl_a + n_q
    cdef double* dl = ds + n_q
    cdef double* ds_c = dl + n_q
    cdef double* dl_c = ds_c + n_q
    cdef double* ct = dl_c + n_q
    cdef double* rhs = ct + n_q

    cdef int* piv = iws
    cdef int* active = piv + dim

    cdef int b, i, j, k, it, status, iters_used
    cdef double* qm
    cdef double* qv
    cdef double* cm
    cdef double* dv
    cdef double stop, best_res, resid, mu, mu_aff, sigma, alpha, alpha_aff
    cdef double alpha_c, acc, gamma, pmin, pmean, scale_q, scale_d

    try:
        for b in range(batch):
            qm = &q_mats[b, 0, 0]
            qv = &q_vecs[b, 0]
            cm = &c_mats[b, 0, 0] if n_q > 0 else NULL
            dv = &d_vecs[b, 0] if n_q > 0 else NULL

            # unconstrained start
            for i in range(n_u):
                rhs[i] = -qv[i]
            if _solve_spd(qm, rhs, u, n_u, eps_reg, fac) != 0:
                st_out[b] = 2
                continue
            if n_q == 0:
                resid = 0.0
                for i in range(n_u):
                    acc = qv[i]
                    for j in range(n_u):
                        acc += qm[i * n_u + j] * u[j]
                    if fabs(acc) > resid:
                        resid = fabs(acc)
                for i in range(n_u):
                    u_out[b, i] = u[i]
                res_out[b] = resid
                st_out[b] = 0
                continue

            scale_q = 0.0
            for i in range(n_u):
                if fabs(qv[i]) > scale_q:
                    scale_q = fabs(qv[i])
            scale_d = 0.0
            for i in range(n_q):
                if fabs(dv[i]) > scale_d:
                    scale_d = fabs(dv[i])
            stop = tol * max(1.0, max(scale_q, scale_d))

            # Mehrotra-style start: shift slacks to the violation scale so
            # the initial complementarity is commensurate with primal
            # infeasibility (a hard floor alone stalls the corrector).
            acc = INFINITY
            for i in range(n_q):
                sigma = dv[i]
                for j in range(n_u):
                    sigma -= cm[i * n_u + j] * u[j]
                s[i] = sigma
                if sigma < acc:
                    acc = sigma
            acc = -1.5 * acc if acc < 0.0 else 0.0
            for i in range(n_q):
                s[i] += acc + S_MIN
                lam[i] = 1.0

            best_res = _kkt_residual(qm, qv, cm, dv, u, s, lam, n_u, n_q)
            for i in range(n_u):
                bu[i] = u[i]
            for i in range(n_q):
                bs[i] = s[i]
                blam[i] = lam[i]
            status = 1
            iters_used = max_iters
            for it in range(1, max_iters + 1):
                # residuals
                for i in range(n_u):
                    acc = qv[i]
                    for j in range(n_u):
                        acc += qm[i * n_u + j] * u[j]
                    for j in range(n_q):
                        acc += cm[j * n_u + i] * lam[j]
                    r_d[i] = acc
                mu = 0.0
                for i in range(n_q):
                    acc = s[i] - dv[i]
                    for j in range(n_u):
                        acc += cm[i * n_u + j] * u[j]
                    r_p[i] = acc
                    comp[i] = s[i] * lam[i]
                    mu += comp[i]
                mu /= n_q

                # Newton matrix M = Q + C' diag(lam/s) C
                for i in range(n_u):
                    for j in range(n_u):
                        acc = qm[i * n_u + j]
                        for k in range(n_q):
                            acc += cm[k * n_u + i] * (lam[k] / s[k]) * cm[k * n_u + j]
                        m_mat[i * n_u + j] = acc

                # affine direction (target = comp)
                if _direction(m_mat, fac, cm, r_d, r_p, comp, s, lam, comp,
                              rhs, du_a, ds_a, dl_a, n_u, n_q, eps_reg) != 0:
                    status = 2
                    iters_used = it
                    break
                alpha_aff = _max_step_c(s, ds_a, n_q)
                acc = _max_step_c(lam, dl_a, n_q)
                if acc < alpha_aff:
                    alpha_aff = acc
                if alpha_aff > 1.0:
                    alpha_aff = 1.0
                mu_aff = 0.0
                for i in range(n_q):
                    mu_aff += (s[i] + alpha_aff * ds_a[i]) * (lam[i] + alpha_aff * dl_a[i])
                mu_aff /= n_q
                sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0

                # centering-corrector direction
                for i in range(n_q):
                    ct[i] = comp[i] + ds_a[i] * dl_a[i] - sigma * mu
                if _direction(m_mat, fac, cm, r_d, r_p, comp, s, lam, ct,
                              rhs, du, ds, dl, n_u, n_q, eps_reg) != 0:
                    status = 2
                    iters_used = it
                    break
                alpha = _step_size(s, lam, ds, dl, comp, mu, n_q)

                if alpha < 0.2:
                    acc = sigma if sigma > 0.8 else 0.8
                    for i in range(n_q):
                        ct[i] = comp[i] - acc * mu
                    if _direction(m_mat, fac, cm, r_d, r_p, comp, s, lam, ct,
                                  rhs, du_c, ds_c, dl_c, n_u, n_q, eps_reg) == 0:
                        alpha_c = _step_size(s, lam, ds_c, dl_c, comp, mu, n_q)
                        if alpha_c > alpha:
                            alpha = alpha_c
                            for i in range(n_u):
                                du[i] = du_c[i]
                            for i in range(n_q):
                                ds[i] = ds_c[i]
                                dl[i] = dl_c[i]

                for i in range(n_u):
                    u[i] += alpha * du[i]
                for i in range(n_q):
                    s[i] += alpha * ds[i]
                    lam[i] += alpha * dl[i]

                resid = _kkt_residual(qm, qv, cm, dv, u, s, lam, n_u, n_q)
                if resid < best_res:
                    best_res = resid
                    for i in range(n_u):
                        bu[i] = u[i]
                    for i in range(n_q):
                        bs[i] = s[i]
                        blam[i] = lam[i]
                if resid <= stop:
                    status = 0
                    iters_used = it
                    break

            if status != 2:
                resid = best_res
                for i in range(n_u):
                    u[i] = bu[i]
                for i in range(n_q):
                    s[i] = bs[i]
                    lam[i] = blam[i]
                _polish_c(qm, qv, cm, dv, u, s, lam, &resid, n_u, n_q,
                          kmat, kb, piv, active)
                if status == 1 and resid <= stop:
                    status = 0
            for i in range(n_u):
                u_out[b, i] = u[i]
            for i in range(n_q):
                s_out[b, i] = s[i]
                lam_out[b, i] = lam[i]
            it_out[b] = iters_used
            res_out[b] = resid
            st_out[b] = status
    finally:
        free(ws)
        free(iws)
    return u_np, s_np, lam_np, it_np, res_np, st_np


cdef int _direction(double* m_mat, double* fac, double* cm,
                    double* r_d, double* r_p, double* comp,
                    double* s, double* lam, double* comp_target,
                    double* rhs, double* du, double* ds, double* dl,
                    int n_u, int n_q, double eps_reg) noexcept nogil:
    cdef int i, j
    cdef double acc
    for i in range(n_u):
        acc = -r_d[i]
        for j in range(n_q):
            acc += cm[j * n_u + i] * ((comp_target[j] - lam[j] * r_p[j]) / s[j])
        rhs[i] = acc
    if _solve_spd(m_mat, rhs, du, n_u, eps_reg, fac) != 0:
        return 1
    for i in range(n_q):
        acc = -r_p[i]
        for j in range(n_u):
            acc -= cm[i * n_u + j] * du[j]
        ds[i] = acc
        dl[i] = (-comp_target[i] - lam[i] * ds[i]) / s[i]
    return 0


cdef double _step_size(double* s, double* lam, double* ds, double* dl,
                       double* comp, double mu, int n_q) noexcept nogil:
    cdef double alpha, gamma, pmin, pmean, cmin
    cdef int i, bt
    alpha = _max_step_c(s, ds, n_q)
    cdef double a2 = _max_step_c(lam, dl, n_q)
    if a2 < alpha:
        alpha = a2
    alpha *= STEP_FRACTION
    if alpha > 1.0:
        alpha = 1.0
    gamma = NBHD_GAMMA
    if mu > 0.0:
        cmin = INFINITY
        for i in range(n_q):
            if comp[i] < cmin:
                cmin = comp[i]
        if 0.5 * cmin / mu < gamma:
            gamma = 0.5 * cmin / mu
    for bt in range(40):
        pmin = INFINITY
        pmean = 0.0
        for i in range(n_q):
            cmin = (s[i] + alpha * ds[i]) * (lam[i] + alpha * dl[i])
            pmean += cmin
            if cmin < pmin:
                pmin = cmin
        pmean /= n_q
        if pmin >= gamma * pmean - 1e-300:
            break
        alpha *= 0.8
    return alpha


# ---------------------------------------------------------------- backward

def backward_batch(double[:, :, ::1] q_mats, double[:, :, ::1] c_mats,
                   double[:, ::1] u, double[:, ::1] s, double[:, ::1] lam,
                   double[:, ::1] grad_u, double eps_reg):
    """Batched KKT adjoint solve; see `_pdipm_py.backward_batch`."""
    cdef int batch = u.shape[0]
    cdef int n_u = u.shape[1]
    cdef int n_q = s.shape[1]
    cdef int dim = n_u + n_q

    gq_np = np.zeros((batch, n_u))
    gc_np = np.zeros((batch, n_q, n_u))
    gd_np = np.zeros((batch, n_q))
    reg_np = np.zeros(batch, dtype=np.int32)
    cdef double[:, ::1] gq = gq_np
    cdef double[:, :, ::1] gc = gc_np
    cdef double[:, ::1] gd = gd_np
    cdef int[::1] regged = reg_np

    cdef double* kmat = <double*>malloc(dim * dim * sizeof(double))
    cdef double* ksav = <double*>malloc(dim * dim * sizeof(double))
    cdef double* kb = <double*>malloc(dim * sizeof(double))
    cdef double* sol = <double*>malloc(dim * sizeof(double))
    cdef int* piv = <int*>malloc(dim * sizeof(int))
    if kmat == NULL or ksav == NULL or kb == NULL or sol == NULL or piv == NULL:
        if kmat != NULL:
            free(kmat)
        if ksav != NULL:
            free(ksav)
        if kb != NULL:
            free(kb)
        if sol != NULL:
            free(sol)
        if piv != NULL:
            free(piv)
        raise MemoryError()

    cdef int b, i, j, ok, attempt
    cdef double acc, reg, rres, rmax

    try:
        for b in range(batch):
            rmax = 0.0
            for i in range(n_u):
                if fabs(grad_u[b, i]) > rmax:
                    rmax = fabs(grad_u[b, i])
            if rmax == 0.0:
                continue
            memset(ksav, 0, dim * dim * sizeof(double))
            for i in range(n_u):
                for j in range(n_u):
                    ksav[i * dim + j] = q_mats[b, i, j]
                for j in range(n_q):
                    ksav[i * dim + n_u + j] = -c_mats[b, j, i] * lam[b, j]
            for i in range(n_q):
                for j in range(n_u):
                    ksav[(n_u + i) * dim + j] = c_mats[b, i, j]
                ksav[(n_u + i) * dim + n_u + i] = s[b, i]

            ok = 0
            memcpy(kmat, ksav, dim * dim * sizeof(double))
            for i in range(n_u):
                kb[i] = grad_u[b, i]
            for i in range(n_q):
                kb[n_u + i] = 0.0
            if _lu_solve(kmat, kb, dim, piv) == 0:
                # verify against the unfactored matrix
                rres = 0.0
                for i in range(dim):
                    acc = 0.0
                    for j in range(dim):
                        acc += ksav[i * dim + j] * kb[j]
                    if i < n_u:
                        acc -= grad_u[b, i]
                    if fabs(acc) > rres:
                        rres = fabs(acc)
                    if kb[i] != kb[i] or fabs(kb[i]) == INFINITY:
                        rres = INFINITY
                        break
                if rres <= 1e-6 * (1.0 + rmax):
                    ok = 1
            if ok == 0:
                regged[b] = 1
                reg = eps_reg
                for attempt in range(5):
                    memcpy(kmat, ksav, dim * dim * sizeof(double))
                    for i in range(dim):
                        kmat[i * dim + i] += reg
                    for i in range(n_u):
                        kb[i] = grad_u[b, i]
                    for i in range(n_q):
                        kb[n_u + i] = 0.0
                    if _lu_solve(kmat, kb, dim, piv) == 0:
                        ok = 1
                        for i in range(dim):
                            if kb[i] != kb[i] or fabs(kb[i]) == INFINITY:
                                ok = 0
                                break
                        if ok:
                            break
                    reg *= 1e4
                if ok == 0:
                    for i in range(dim):
                        kb[i] = 0.0

            for i in range(n_u):
                gq[b, i] = -kb[i]
            for i in range(n_q):
                gd[b, i] = -lam[b, i] * kb[n_u + i]
                for j in range(n_u):
                    gc[b, i, j] = lam[b, i] * (kb[n_u + i] * u[b, j] - kb[j])
    finally:
        free(kmat)
        free(ksav)
        free(kb)
        free(sol)
        free(piv)
    return gq_np, gc_np, gd_np, reg_np
