# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled step kernel.  Mirrors ``_kernel_py.run_chunk`` line for line."""

from libc.math cimport pow, fabs
from libc.stdlib cimport malloc, free

cdef int DO_Q = 1
cdef int DO_BELIEF = 2
cdef int DO_DECOMP = 4
cdef int REC_TRAJ = 8
cdef int REC_BELIEF = 16
cdef int REC_TERMS = 32


cdef inline Py_ssize_t _draw(const double[:] cdf, double v) noexcept nogil:
    cdef Py_ssize_t i, n = cdf.shape[0]
    for i in range(n - 1):
        if v < cdf[i]:
            return i
    return n - 1


def run_chunk(const double[:, :, :] cumT, const double[:, :, :] T,
              const double[:, :] E, const double[:, :] cumE,
              const double[:, :, :] R, const long long[:, :, :] upd,
              const long long[:] readout, const double[:, :] phi,
              const double[:, :] cumPhi,
              const double[:, :] rbar, const double[:, :, :] qk,
              const double[:, :] W, const double[:, :] PW,
              double[:, :] Q, double[:] Delta, double[:] b,
              long long[:] state, const double[:, :] uniforms,
              double a0, double n0, double d2, double gamma, int flags,
              long long[:, :] rec_int, double[:] rec_reward,
              double[:, :] rec_belief, double[:, :, :] rec_terms,
              double[:] diag):
    cdef Py_ssize_t nh = T.shape[0], na = T.shape[1], no = E.shape[1]
    cdef Py_ssize_t ns = Q.shape[0], nc = ns * na
    cdef Py_ssize_t nsteps = uniforms.shape[0]
    cdef Py_ssize_t k, i, j, o, c, v, cs, cu, sn
    cdef Py_ssize_t x = state[0], g = state[1], s, u, x2, o2, g2, s2, z
    cdef long long n = state[2]
    cdef long long fail = -1
    cdef double r, a, er, hm, qm, F, zeta, M, acc, f_c, eh, inner, mx, inc, err, zsum
    cdef double id_err = diag[0], q_lo = diag[1], q_hi = diag[2]
    cdef bint do_q = flags & DO_Q
    cdef bint do_belief = flags & DO_BELIEF
    cdef bint do_decomp = flags & DO_DECOMP
    cdef bint rec_traj = flags & REC_TRAJ
    cdef bint rec_bel = flags & REC_BELIEF
    cdef bint rec_terms_on = flags & REC_TERMS

    cdef double* m = <double*> malloc(ns * sizeof(double))
    cdef double* pred = <double*> malloc(nh * sizeof(double))
    cdef double* po = <double*> malloc(no * sizeof(double))
    cdef double* nb = <double*> malloc(nh * sizeof(double))
    cdef double* omega = <double*> malloc(nc * sizeof(double))
    if m == NULL or pred == NULL or po == NULL or nb == NULL or omega == NULL:
        free(m); free(pred); free(po); free(nb); free(omega)
        raise MemoryError()

    with nogil:
        for k in range(nsteps):
            s = readout[g]
            u = _draw(cumPhi[s], uniforms[k, 0])
            x2 = _draw(cumT[x, u], uniforms[k, 1])
            o2 = _draw(cumE[x2], uniforms[k, 2])
            g2 = upd[g, u, o2]
            s2 = readout[g2]
            r = R[s, u, o2]
            a = a0 * pow(<double>n + n0, -d2)
            z = s * na + u

            if rec_traj:
                rec_int[k, 0] = x
                rec_int[k, 1] = g
                rec_int[k, 2] = s
                rec_int[k, 3] = u
                rec_int[k, 4] = o2
                rec_reward[k] = r
            if rec_bel:
                for i in range(nh):
                    rec_belief[k, i] = b[i]

            if do_decomp:
                for i in range(ns):
                    mx = Q[i, 0]
                    for j in range(1, na):
                        if Q[i, j] > mx:
                            mx = Q[i, j]
                    m[i] = mx
                for i in range(nh):
                    acc = 0.0
                    for j in range(nh):
                        acc = acc + b[j] * T[j, u, i]
                    pred[i] = acc
                for o in range(no):
                    acc = 0.0
                    for i in range(nh):
                        acc = acc + pred[i] * E[i, o]
                    po[o] = acc
                er = 0.0
                hm = 0.0
                for o in range(no):
                    er = er + po[o] * R[s, u, o]
                    hm = hm + po[o] * m[readout[upd[g, u, o]]]
                qm = 0.0
                for j in range(ns):
                    qm = qm + qk[s, u, j] * m[j]
                F = rbar[s, u] + gamma * qm - Q[s, u]
                zeta = er - rbar[s, u] + gamma * (hm - qm)
                M = (r - er) + gamma * (m[s2] - hm)
                for c in range(nc):
                    cs = c // na
                    cu = c % na
                    acc = 0.0
                    for j in range(ns):
                        acc = acc + qk[cs, cu, j] * m[j]
                    f_c = rbar[cs, cu] + gamma * acc - Q[cs, cu]
                    eh = 0.0
                    for o in range(no):
                        sn = readout[upd[g, u, o]]
                        inner = 0.0
                        for v in range(na):
                            inner = inner + phi[sn, v] * W[sn * na + v, c]
                        eh = eh + po[o] * inner
                    omega[c] = f_c * (eh - PW[z, c])
                if rec_terms_on:
                    for c in range(nc):
                        rec_terms[k, 0, c] = 0.0
                        rec_terms[k, 1, c] = 0.0
                        rec_terms[k, 2, c] = 0.0
                        rec_terms[k, 3, c] = omega[c]
                        rec_terms[k, 4, c] = Delta[c]
                    rec_terms[k, 0, z] = F
                    rec_terms[k, 1, z] = zeta
                    rec_terms[k, 2, z] = M
                if n >= 1:
                    for c in range(nc):
                        Delta[c] = (1.0 - a) * Delta[c] + a * omega[c]
                    Delta[z] = Delta[z] + a * zeta
                if do_q:
                    inc = a * (r + gamma * m[s2] - Q[s, u])
                    err = fabs(inc - a * (F + zeta + M))
                    if err > id_err:
                        id_err = err

            if do_q:
                mx = Q[s2, 0]
                for j in range(1, na):
                    if Q[s2, j] > mx:
                        mx = Q[s2, j]
                Q[s, u] = Q[s, u] + a * (r + gamma * mx - Q[s, u])
                if Q[s, u] < q_lo:
                    q_lo = Q[s, u]
                if Q[s, u] > q_hi:
                    q_hi = Q[s, u]

            if do_belief:
                zsum = 0.0
                for i in range(nh):
                    acc = 0.0
                    for j in range(nh):
                        acc = acc + b[j] * T[j, u, i]
                    nb[i] = acc * E[i, o2]
                    zsum = zsum + nb[i]
                if not zsum > 0.0:
                    fail = n
                    break
                for i in range(nh):
                    b[i] = nb[i] / zsum

            x = x2
            g = g2
            n += 1

    free(m); free(pred); free(po); free(nb); free(omega)
    state[0] = x
    state[1] = g
    state[2] = n
    diag[0] = id_err
    diag[1] = q_lo
    diag[2] = q_hi
    return fail
