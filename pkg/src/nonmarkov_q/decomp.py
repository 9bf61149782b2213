"""Error decomposition of the Q-learning increment and its accumulated offset.

Per step the bracket of the Q update at the visited cell ``z = (s, u)`` is
split into

* ``F``     the Markov-model drift computed from ``rbar`` and ``q``,
* ``zeta``  the offset between history-conditioned and agent-state
            conditioned expectations,
* ``M``     the martingale-difference remainder,

and ``omega`` carries the same offset for the Poisson solution ``V``.  The
reference implementations here are plain numpy and serve as oracles for
the fused kernel, which uses the factorisation in
:func:`nonmarkov_q.oracle.poisson_basis`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .env import observation_law
from .errors import AnalysisRejection
from .oracle import conditional_agent_laws


def decomp_step(oracle, belief, gamma_state, u, o_next, Q, reward, discount):
    """``(F, zeta, M)`` vectors over cells for one transition.

    ``Q`` is the iterate before the update; ``belief`` is the hidden-state
    posterior at the current step.
    """
    rcass = oracle.rcass
    ns, na = oracle.rbar.shape
    s = int(rcass.readout[gamma_state])
    s_next = int(rcass.readout[rcass.update[gamma_state, u, o_next]])
    m = Q.max(axis=1)
    dist, er = conditional_agent_laws(oracle.env, rcass, belief, gamma_state, u)
    qm = oracle.q_kernel[s, u] @ m
    hm = dist @ m
    z = s * na + u
    F = np.zeros(ns * na)
    zeta = np.zeros(ns * na)
    M = np.zeros(ns * na)
    F[z] = oracle.rbar[s, u] + discount * qm - Q[s, u]
    zeta[z] = er - oracle.rbar[s, u] + discount * (hm - qm)
    M[z] = (reward - er) + discount * (m[s_next] - hm)
    return F, zeta, M


def omega_step(oracle, V, belief, gamma_state, u):
    """``E[V(Z_{n+1}) | history] - E[V(Z_{n+1}) | Z_n]`` by enumeration of (o', u').

    ``V`` is the ``(cells, cells)`` Poisson solution for the current Q.
    """
    rcass, phi = oracle.rcass, oracle.policy.table
    na = phi.shape[1]
    s = int(rcass.readout[gamma_state])
    po = observation_law(oracle.env, belief, u)
    given_history = np.zeros(V.shape[1])
    for o, p in enumerate(po):
        if p == 0:
            continue
        s2 = int(rcass.readout[rcass.update[gamma_state, u, o]])
        for u2 in range(na):
            given_history += p * phi[s2, u2] * V[s2 * na + u2]
    given_cell = oracle.psi[s * na + u] @ V
    return given_history - given_cell


def _pointmass_zeta(oracle, Q, discount, x, g, u):
    b = np.zeros(oracle.env.spaces.n_hidden)
    b[x] = 1.0
    s = int(oracle.rcass.readout[g])
    m = Q.max(axis=1)
    dist, er = conditional_agent_laws(oracle.env, oracle.rcass, b, g, u)
    return s, er - oracle.rbar[s, u] + discount * (dist - oracle.q_kernel[s, u]) @ m


def stationary_mean_zeta(oracle, Q, discount):
    """Exact stationary expectation of ``zeta(Q, .)`` by enumeration.

    ``zeta`` is affine in the belief and the belief is the conditional law
    of the hidden state given the history, so averaging over the
    stationary law of ``(x, gamma, u)`` with point-mass beliefs gives the
    same expectation (tower property).
    """
    ns, na = oracle.rbar.shape
    total = np.zeros(ns * na)
    joint = oracle.joint_array()
    for x, g, u in zip(*np.nonzero(joint)):
        s, val = _pointmass_zeta(oracle, Q, discount, x, g, u)
        total[s * na + u] += joint[x, g, u] * val
    return total


def stationary_mean_omega(oracle, V):
    """Exact stationary expectation of ``omega`` (same argument as for zeta)."""
    joint = oracle.joint_array()
    total = np.zeros(V.shape[1])
    nh = joint.shape[0]
    for x, g, u in zip(*np.nonzero(joint)):
        b = np.zeros(nh)
        b[x] = 1.0
        total += joint[x, g, u] * omega_step(oracle, V, b, g, u)
    return total


# ---------------------------------------------------- schedule quantities


def chi(n, m, sched):
    """``prod_{k=m}^{n} (1 - a(k))``, or 1 when ``n < m``."""
    if n < m:
        return 1.0
    out = 1.0
    for k in range(m, n + 1):
        out *= 1.0 - sched(k)
    return out


def b_sum(k, n, sched):
    """``sum_{m=k}^{n} a(m)``."""
    return math.fsum(sched(m) for m in range(k, n + 1))


def beta(k, n, d1, d2):
    if d1 <= d2:
        return 1.0 / (k ** (d2 - d1) * n**d1)
    return 1.0 / n**d2


def delta_direct(sched, offsets, n):
    """``Delta(n) = sum_{m=1}^{n-1} chi(n-1, m+1) a(m) offsets[m]`` term by term.

    ``offsets[m]`` is the ``zeta + omega`` vector at step ``m``.  Quadratic
    in ``n``; used to check the incremental recursion.
    """
    offsets = np.asarray(offsets, dtype=float)
    total = np.zeros(offsets.shape[1])
    one_minus = np.array([1.0 - sched(k) for k in range(n)])
    for m in range(1, n):
        weight = np.prod(one_minus[m + 1:n]) * sched(m)
        total += weight * offsets[m]
    return total


class DeltaAccumulator:
    """Incremental ``Delta(n+1) = (1 - a(n)) Delta(n) + a(n) offset_n`` for n >= 1.

    ``Delta(1) = 0``; the step-0 offset never enters because the defining
    sum starts at ``m = 1``.
    """

    def __init__(self, n_cells, sched):
        self.sched = sched
        self.n = 0
        self.value = np.zeros(n_cells)

    def push(self, offset):
        if self.n >= 1:
            a = self.sched(self.n)
            self.value = (1.0 - a) * self.value + a * np.asarray(offset)
        self.n += 1
        return self.value


def delta_accumulate(sched, offsets, n):
    """``Delta(n)`` from recorded offsets via the incremental recursion."""
    acc = DeltaAccumulator(np.shape(offsets)[1], sched)
    for m in range(n):
        acc.push(offsets[m])
    return acc.value


# ------------------------------------------------------ concentration bound


@dataclass
class BoundConstants:
    """Constants entering the finite-time bound.

    ``c1``, ``c2``, ``D`` and ``c4``..``c7`` are existence constants with no
    closed form; they are inputs (default 1.0) and flagged in
    ``unidentified``.
    """

    gamma: float
    pi_min: float
    n_cells: int
    d1: float
    d2: float
    d3: float
    q_N_norm: float = 0.0
    v_max: float = float("nan")
    d4: float = float("nan")
    c1: float = 1.0
    c2: float = 1.0
    D: float = 1.0
    c4: float = 1.0
    c5: float = 1.0
    c6: float = 1.0
    c7: float = 1.0
    unidentified: tuple = field(default=("c1", "c2", "D", "c4", "c5", "c6", "c7"))

    @property
    def alpha(self):
        return 1.0 - (1.0 - self.gamma) * self.pi_min


def theorem2_rhs(delta1, n0, n, consts, sched, q_n0_err, delta_n_norm):
    """Evaluate the high-probability bound on ``||Q_n - Q*||``.

    Returns a dict with the bound itself, the two probability expressions
    (small and large ``delta1`` branches), which branch applies, and a
    ``vacuous`` flag when the applicable probability is not positive.
    """
    alpha = consts.alpha
    if not alpha < 1:
        raise AnalysisRejection(f"alpha = {alpha} >= 1 (pi_min must be positive)")
    b = b_sum(n0, n, sched)
    bound = (math.exp(-(1 - alpha) * b) * q_n0_err
             + (delta1 + sched(n0) * consts.c1) / (1 - alpha) + delta_n_norm)
    C = math.exp(2 * (1 + consts.q_N_norm + 1 / (1 - alpha)) + consts.c2)
    su = consts.n_cells
    betas = [beta(n0, m, consts.d1, consts.d2) for m in range(n0 + 1, n + 1)]
    p_small = 1 - 2 * su * math.fsum(math.exp(-consts.D * delta1**2 / bt) for bt in betas)
    p_large = 1 - 2 * su * math.fsum(math.exp(-consts.D * delta1 / bt) for bt in betas)
    branch = "small" if delta1 <= C else "large"
    prob = p_small if branch == "small" else p_large
    return {
        "bound": bound,
        "alpha": alpha,
        "C": C,
        "b_n0_n": b,
        "prob_small_delta": p_small,
        "prob_large_delta": p_large,
        "branch": branch,
        "probability": prob,
        "vacuous": not prob > 0,
    }


def lemma_tail_bound(delta, n, consts):
    """``2 su exp(-c7 delta^2 / n^(1 - 2 d2))``."""
    return 2 * consts.n_cells * math.exp(-consts.c7 * delta**2 / n ** (1 - 2 * consts.d2))


# ---------------------------------------------------- dependence matrices


@dataclass
class DependenceMatrices:
    Phi: np.ndarray
    Psi: np.ndarray

    @property
    def phi_norm(self):
        return float(np.linalg.norm(self.Phi, 2))

    @property
    def psi_norm(self):
        return float(np.linalg.norm(self.Psi, 2))


def _tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def _initial_law(env, rcass, policy, initial_law):
    if initial_law is not None:
        law = np.asarray(initial_law, dtype=float)
        if law.shape != (env.spaces.n_hidden, rcass.n_gamma):
            raise AnalysisRejection(
                f"initial law must have shape {(env.spaces.n_hidden, rcass.n_gamma)}"
            )
        return law / law.sum()
    from .oracle import build_joint_chain

    return build_joint_chain(env, rcass, policy).hidden_gamma_law()


class _Model:
    def __init__(self, env, rcass, policy):
        self.T, self.E = env.hidden_transition, env.emission
        self.upd, self.ro, self.phi = rcass.update, rcass.readout, policy.table
        self.nh, self.na, self.no = env.spaces.n_hidden, env.spaces.n_act, env.spaces.n_obs
        self.ns = rcass.spaces.n_agent
        self.ng = rcass.n_gamma
        self.next_obs = np.einsum("xuy,yo->xuo", self.T, self.E)


def _laws_from(model, dist, j_max):
    """Laws of ``(Z_j, O_{j+1})`` and ``(Z_j, Z_{j+1})`` for j = i..j_max.

    ``dist`` is the law of ``(x, gamma, u)`` at time ``i`` as a dense
    ``(nh, ng, na)`` array.
    """
    mo = model
    zo, zz = [], []
    for _ in range(j_max + 1):
        # mass of (x, g, u, o')
        mass = dist[:, :, :, None] * mo.next_obs[:, None, :, :]
        law_zo = np.zeros((mo.ns, mo.na, mo.no))
        law_zz = np.zeros((mo.ns, mo.na, mo.ns, mo.na))
        nxt = np.zeros_like(dist)
        m_xgou = mass.sum(axis=0)
        for g in range(mo.ng):
            s = mo.ro[g]
            for u in range(mo.na):
                row = m_xgou[g, u]
                if not row.any():
                    continue
                law_zo[s, u] += row
                for o in range(mo.no):
                    if row[o] == 0:
                        continue
                    g2 = mo.upd[g, u, o]
                    s2 = mo.ro[g2]
                    law_zz[s, u, s2] += row[o] * mo.phi[s2]
        # propagate (x, g, u) one step
        for x in range(mo.nh):
            for g in range(mo.ng):
                for u in range(mo.na):
                    p = dist[x, g, u]
                    if p == 0:
                        continue
                    for y in range(mo.nh):
                        t = p * mo.T[x, u, y]
                        if t == 0:
                            continue
                        for o in range(mo.no):
                            e = t * mo.E[y, o]
                            if e == 0:
                                continue
                            g2 = mo.upd[g, u, o]
                            nxt[y, g2] += e * mo.phi[mo.ro[g2]]
        zo.append(law_zo.ravel())
        zz.append(law_zz.ravel())
        dist = nxt
    return zo, zz


def dependence_matrices(env, rcass, policy, n, initial_law=None, cap=10**6):
    """Dependence matrices by exhaustive enumeration with recursive filtering.

    Coordinates are ``W_1 = (gamma_1, u_1)`` (the agent's summary of the
    infinite past at time 1, plus the action) and ``W_m = (o_m, u_m)`` for
    ``m >= 2``.  Suprema run over prefixes and perturbations of positive
    probability.
    """
    sp = env.spaces
    if (sp.n_obs * sp.n_act) ** n > cap:
        raise AnalysisRejection(
            f"horizon {n} needs {(sp.n_obs * sp.n_act) ** n} histories (cap {cap})"
        )
    mo = _Model(env, rcass, policy)
    init = _initial_law(env, rcass, policy, initial_law)
    Phi = np.eye(n)
    Psi = np.zeros((n, n))

    # each node: (prob, belief over x, gamma, u) at time i
    first = []
    for g in range(mo.ng):
        col = init[:, g]
        if col.sum() <= 0:
            continue
        for u in range(mo.na):
            p = col.sum() * mo.phi[mo.ro[g], u]
            if p > 0:
                first.append((p, col / col.sum(), g, u))

    def children(node):
        p, b, g, u = node
        pred = b @ mo.T[:, u, :]
        out = []
        for o in range(mo.no):
            joint = pred * mo.E[:, o]
            po = joint.sum()
            if po <= 0:
                continue
            g2 = mo.upd[g, u, o]
            for u2 in range(mo.na):
                pu = mo.phi[mo.ro[g2], u2]
                if pu > 0:
                    out.append((p * po * pu, joint / po, g2, u2))
        return out

    def point_dist(node):
        _, b, g, u = node
        d = np.zeros((mo.nh, mo.ng, mo.na))
        d[:, g, u] = b
        return d

    def update(i, siblings):
        # siblings: the positive-probability choices of W_i after a fixed prefix
        laws = [_laws_from(mo, point_dist(nd), n - i) for nd in siblings]
        for a_idx in range(len(siblings)):
            for b_idx in range(a_idx + 1, len(siblings)):
                for j in range(i, n + 1):
                    k = j - i
                    tv_zo = _tv(laws[a_idx][0][k], laws[b_idx][0][k])
                    tv_zz = _tv(laws[a_idx][1][k], laws[b_idx][1][k])
                    if j > i:
                        Phi[i - 1, j - 1] = max(Phi[i - 1, j - 1], tv_zo)
                    Psi[i - 1, j - 1] = max(Psi[i - 1, j - 1], tv_zz)

    def walk(i, siblings):
        update(i, siblings)
        if i == n:
            return
        for nd in siblings:
            walk(i + 1, children(nd))

    walk(1, first)
    return DependenceMatrices(Phi, Psi)


def dependence_matrices_tables(env, rcass, policy, n, initial_law=None):
    """Second enumeration path: joint-probability tables over whole paths.

    Every path ``(w_1, ..., w_{n+1})`` gets its probability by summing the
    explicit product over all hidden-state sequences; conditional laws are
    ratios of sums over paths sharing a prefix.  No filtering recursion.
    """
    mo = _Model(env, rcass, policy)
    init = _initial_law(env, rcass, policy, initial_law)
    hidden_paths = np.array(list(itertools.product(range(mo.nh), repeat=n + 1)))
    paths, probs, zs, os_ = [], [], [], []
    for g1 in range(mo.ng):
        for u1 in range(mo.na):
            for tail in itertools.product(range(mo.no * mo.na), repeat=n):
                obs = [None] + [t // mo.na for t in tail]
                acts = [u1] + [t % mo.na for t in tail]
                gs = [g1]
                for m in range(1, n + 1):
                    gs.append(mo.upd[gs[-1], acts[m - 1], obs[m]])
                # product over hidden sequences x_1..x_{n+1}
                w = init[hidden_paths[:, 0], g1].copy()
                for m in range(n + 1):
                    w = w * mo.phi[mo.ro[gs[m]], acts[m]]
                for m in range(1, n + 1):
                    w = w * mo.T[hidden_paths[:, m - 1], acts[m - 1], hidden_paths[:, m]]
                    w = w * mo.E[hidden_paths[:, m], obs[m]]
                p = float(w.sum())
                if p <= 0:
                    continue
                zs.append([mo.ro[gv] * mo.na + a for gv, a in zip(gs, acts)])
                os_.append(obs[1:])
                paths.append((g1 * mo.na + u1,) + tail)
                probs.append(p)
    paths = np.array(paths)
    probs = np.array(probs)
    zs = np.array(zs)  # z_1..z_{n+1}
    os_ = np.array(os_)  # o_2..o_{n+1}
    nc = mo.ns * mo.na
    Phi = np.eye(n)
    Psi = np.zeros((n, n))
    for i in range(1, n + 1):
        groups = {}
        for idx in range(len(paths)):
            groups.setdefault(tuple(paths[idx, :i - 1]), {}).setdefault(paths[idx, i - 1], []).append(idx)
        for by_wi in groups.values():
            keys = sorted(by_wi)
            for j in range(i, n + 1):
                laws_zo, laws_zz = [], []
                for key in keys:
                    idx = np.array(by_wi[key])
                    pw = probs[idx]
                    tot = pw.sum()
                    zo = np.zeros(nc * mo.no)
                    np.add.at(zo, zs[idx, j - 1] * mo.no + os_[idx, j - 1], pw)
                    zz = np.zeros(nc * nc)
                    np.add.at(zz, zs[idx, j - 1] * nc + zs[idx, j], pw)
                    laws_zo.append(zo / tot)
                    laws_zz.append(zz / tot)
                for a in range(len(keys)):
                    for b in range(a + 1, len(keys)):
                        if j > i:
                            Phi[i - 1, j - 1] = max(Phi[i - 1, j - 1], _tv(laws_zo[a], laws_zo[b]))
                        Psi[i - 1, j - 1] = max(Psi[i - 1, j - 1], _tv(laws_zz[a], laws_zz[b]))
    return DependenceMatrices(Phi, Psi)


# -------------------------------------------------------------- tail check


def appendix_tail_check(delta_norms, ns, d2, n_cells=None, n_grid=12, min_seeds=200):
    """Fit the empirical tail of ``||Delta(n)||`` against ``delta^2 n^(2 d2 - 1)``.

    ``delta_norms[k, i]`` is the sup-norm of Delta at ``ns[i]`` in seed ``k``.
    Returns a JSON-ready report with per-n slopes of ``log P(||Delta|| >= delta)``
    against ``delta^2``, a pooled estimate of ``c7`` and the fit R^2 values.
    """
    delta_norms = np.asarray(delta_norms, dtype=float)
    ns = list(ns)
    n_seeds = delta_norms.shape[0]
    if n_seeds < min_seeds:
        raise AnalysisRejection(f"tail check needs >= {min_seeds} seeds, got {n_seeds}")
    if len(ns) < 3 or max(ns) < 10 * min(ns):
        raise AnalysisRejection("tail check needs >= 3 horizons spanning a decade")
    per_n = []
    xs, ys = [], []
    for i, n in enumerate(ns):
        col = delta_norms[:, i]
        if not np.any(col > 0):
            grid = np.linspace(0.0, 1.0, n_grid + 1)[1:]
            per_n.append({"n": n, "deltas": grid.tolist(), "tail": [0.0] * n_grid,
                          "slope": None, "r2": None, "monotone": True})
            continue
        lo, hi = np.quantile(col, [0.05, 0.95])
        grid = np.linspace(lo, hi, n_grid)
        tail = np.array([(col >= d).mean() for d in grid])
        monotone = bool(np.all(np.diff(tail) <= 0))
        keep = tail > 0
        slope, intercept, r2 = _linfit(grid[keep] ** 2, np.log(tail[keep]))
        scale = n ** (2 * d2 - 1)
        xs.extend(grid[keep] ** 2 * scale)
        ys.extend(np.log(tail[keep]))
        per_n.append({"n": n, "deltas": grid.tolist(), "tail": tail.tolist(),
                      "slope": slope, "intercept": intercept, "r2": r2, "monotone": monotone})
    pooled = {}
    if xs:
        slope, intercept, r2 = _linfit(np.array(xs), np.array(ys))
        pooled = {"c7_hat": -slope, "intercept": intercept, "r2": r2}
        if n_cells is not None:
            pooled["log_prefactor"] = math.log(2 * n_cells)
    return {"d2": d2, "n_seeds": n_seeds, "ns": ns, "per_n": per_n, "pooled": pooled}


def _linfit(x, y):
    if len(x) < 2 or np.ptp(x) == 0:
        return float("nan"), float("nan"), float("nan")
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2
