"""Pure-Python reference for the compiled step kernel in ``_kernel.pyx``.

Both implementations share one signature and one sampling rule, so the
discrete trajectory they produce from a given block of uniforms is
identical; floating-point results agree to rounding.

Flags (bitmask)
---------------
1   update Q
2   maintain the hidden-state belief
4   compute F, zeta, M, omega and accumulate Delta (needs 2)
8   record x, gamma, s, u, o' and the reward per step
16  record beliefs per step
32  record F, zeta, M, omega and Delta(n) per step
"""

import math

DO_Q = 1
DO_BELIEF = 2
DO_DECOMP = 4
REC_TRAJ = 8
REC_BELIEF = 16
REC_TERMS = 32


def _draw(cdf_row, v):
    n = len(cdf_row)
    for i in range(n - 1):
        if v < cdf_row[i]:
            return i
    return n - 1


def run_chunk(cumT, T, E, cumE, R, upd, readout, phi, cumPhi,
              rbar, qk, W, PW,
              Q, Delta, b, state, uniforms,
              a0, n0, d2, gamma, flags,
              rec_int, rec_reward, rec_belief, rec_terms, diag):
    """Advance the loop over ``len(uniforms)`` steps in place.

    Returns -1 on success, or the global step index at which the belief
    filter met an impossible observation.
    """
    nh = T.shape[0]
    na = T.shape[1]
    no = E.shape[1]
    ns = Q.shape[0]
    nc = ns * na
    do_q = flags & DO_Q
    do_belief = flags & DO_BELIEF
    do_decomp = flags & DO_DECOMP
    x, g, n = int(state[0]), int(state[1]), int(state[2])

    Qf = [[float(Q[i, j]) for j in range(na)] for i in range(ns)]
    bl = [float(v) for v in b]
    Dl = [float(v) for v in Delta]
    id_err, q_lo, q_hi = float(diag[0]), float(diag[1]), float(diag[2])

    for k in range(len(uniforms)):
        s = int(readout[g])
        u = _draw(cumPhi[s], uniforms[k, 0])
        x2 = _draw(cumT[x, u], uniforms[k, 1])
        o2 = _draw(cumE[x2], uniforms[k, 2])
        g2 = int(upd[g, u, o2])
        s2 = int(readout[g2])
        r = float(R[s, u, o2])
        a = a0 * math.pow(n + n0, -d2)
        z = s * na + u

        if flags & REC_TRAJ:
            rec_int[k, 0] = x
            rec_int[k, 1] = g
            rec_int[k, 2] = s
            rec_int[k, 3] = u
            rec_int[k, 4] = o2
            rec_reward[k] = r
        if flags & REC_BELIEF:
            for i in range(nh):
                rec_belief[k, i] = bl[i]

        if do_decomp:
            m = [max(Qf[i]) for i in range(ns)]
            pred = [0.0] * nh
            for i in range(nh):
                acc = 0.0
                for j in range(nh):
                    acc += bl[j] * T[j, u, i]
                pred[i] = acc
            po = [0.0] * no
            for o in range(no):
                acc = 0.0
                for i in range(nh):
                    acc += pred[i] * E[i, o]
                po[o] = acc
            er = 0.0
            hm = 0.0
            for o in range(no):
                er += po[o] * R[s, u, o]
                hm += po[o] * m[readout[upd[g, u, o]]]
            qm = 0.0
            for j in range(ns):
                qm += qk[s, u, j] * m[j]
            F = rbar[s, u] + gamma * qm - Qf[s][u]
            zeta = er - rbar[s, u] + gamma * (hm - qm)
            M = (r - er) + gamma * (m[s2] - hm)
            omega = [0.0] * nc
            for c in range(nc):
                cs, cu = divmod(c, na)
                acc = 0.0
                for j in range(ns):
                    acc += qk[cs, cu, j] * m[j]
                f_c = rbar[cs, cu] + gamma * acc - Qf[cs][cu]
                eh = 0.0
                for o in range(no):
                    sn = readout[upd[g, u, o]]
                    inner = 0.0
                    for v in range(na):
                        inner += phi[sn, v] * W[sn * na + v, c]
                    eh += po[o] * inner
                omega[c] = f_c * (eh - PW[z, c])
            if flags & REC_TERMS:
                for c in range(nc):
                    rec_terms[k, 0, c] = 0.0
                    rec_terms[k, 1, c] = 0.0
                    rec_terms[k, 2, c] = 0.0
                    rec_terms[k, 3, c] = omega[c]
                    rec_terms[k, 4, c] = Dl[c]
                rec_terms[k, 0, z] = F
                rec_terms[k, 1, z] = zeta
                rec_terms[k, 2, z] = M
            if n >= 1:
                for c in range(nc):
                    Dl[c] = (1.0 - a) * Dl[c] + a * omega[c]
                Dl[z] += a * zeta
            if do_q:
                inc = a * (r + gamma * m[s2] - Qf[s][u])
                err = abs(inc - a * (F + zeta + M))
                if err > id_err:
                    id_err = err

        if do_q:
            mx = max(Qf[s2])
            Qf[s][u] += a * (r + gamma * mx - Qf[s][u])
            if Qf[s][u] < q_lo:
                q_lo = Qf[s][u]
            if Qf[s][u] > q_hi:
                q_hi = Qf[s][u]

        if do_belief:
            zsum = 0.0
            nb = [0.0] * nh
            for i in range(nh):
                acc = 0.0
                for j in range(nh):
                    acc += bl[j] * T[j, u, i]
                nb[i] = acc * E[i, o2]
                zsum += nb[i]
            if not zsum > 0.0:
                state[0], state[1], state[2] = x, g, n
                _flush(Q, Qf, b, bl, Delta, Dl, diag, id_err, q_lo, q_hi)
                return n
            bl = [v / zsum for v in nb]

        x, g = x2, g2
        n += 1

    state[0], state[1], state[2] = x, g, n
    _flush(Q, Qf, b, bl, Delta, Dl, diag, id_err, q_lo, q_hi)
    return -1


def _flush(Q, Qf, b, bl, Delta, Dl, diag, id_err, q_lo, q_hi):
    for i in range(Q.shape[0]):
        for j in range(Q.shape[1]):
            Q[i, j] = Qf[i][j]
    for i in range(len(bl)):
        b[i] = bl[i]
    for i in range(len(Dl)):
        Delta[i] = Dl[i]
    diag[0], diag[1], diag[2] = id_err, q_lo, q_hi
