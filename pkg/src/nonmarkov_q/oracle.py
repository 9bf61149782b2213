"""Exact finite-chain computations for an (environment, agent, policy) triple.

The joint process ``(x_n, gamma_n, u_n)`` of hidden state, agent memory and
action is a finite Markov chain.  Everything the learning analysis needs
(the stationary law of ``(S_n, U_n)``, the induced agent kernel ``q``, the
mean reward ``rbar``, the Bellman fixed point ``Q*`` and the Poisson
solution ``V``) is computed from it exactly.

Joint states are indexed ``(x * n_gamma + gamma) * n_act + u`` and agent
cells ``z = s * n_act + u``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .agent import check_compatible
from .env import observation_law
from .errors import AnalysisRejection, NumericalError

DIRECT_SOLVE_MAX = 2000
EPS_STAT = 1e-6


def stationary_distribution(P, method="direct", tol=1e-13, max_iter=1_000_000):
    """Stationary law of an irreducible aperiodic stochastic matrix.

    ``method="direct"`` solves ``(I - P^T) pi = 0`` with the last equation
    replaced by ``sum(pi) = 1``; ``method="power"`` iterates ``pi P``
    until the L1 change drops below ``tol``.
    """
    n = P.shape[0]
    if method == "direct":
        Pd = P.toarray() if sparse.issparse(P) else np.asarray(P)
        A = np.eye(n) - Pd.T
        A[-1, :] = 1.0
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        pi = np.linalg.solve(A, rhs)
    elif method == "power":
        Pt = P.T.tocsr() if sparse.issparse(P) else np.asarray(P).T
        pi = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            nxt = Pt @ pi
            nxt /= nxt.sum()
            if np.abs(nxt - pi).sum() < tol:
                pi = nxt
                break
            pi = nxt
        else:
            raise NumericalError(f"power iteration did not reach {tol} in {max_iter} steps")
    else:
        raise ValueError(f"unknown method {method!r}")
    pi = np.where(pi < 0, 0.0, pi)
    return pi / pi.sum()


def recurrent_class(P):
    """Return the unique closed communicating class of ``P`` and its period.

    Raises :class:`AnalysisRejection` if there is more than one closed class.
    """
    A = sparse.csr_matrix(P)
    A.eliminate_zeros()
    n_comp, labels = csgraph.connected_components(A, directed=True, connection="strong")
    coo = A.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    cross = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[cross]]] = True
    closed = np.flatnonzero(~leaving)
    if len(closed) != 1:
        raise AnalysisRejection(
            f"joint chain is reducible: {len(closed)} closed classes "
            f"(sizes {[int(np.sum(labels == c)) for c in closed]})"
        )
    members = np.flatnonzero(labels == closed[0])
    sub = A[members][:, members].tocsr()
    # period = gcd of level differences along edges of a BFS tree
    level = np.full(len(members), -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for i in frontier:
            for j in sub.indices[sub.indptr[i]:sub.indptr[i + 1]]:
                if level[j] < 0:
                    level[j] = level[i] + 1
                    nxt.append(j)
        frontier = nxt
    sc = sub.tocoo()
    period = 0
    for i, j in zip(sc.row, sc.col):
        period = math.gcd(period, int(level[i] + 1 - level[j]))
    return members, abs(period)


@dataclass(eq=False)
class JointChainOracle:
    """Exact stationary quantities of the joint (hidden, gamma, action) chain.

    Attributes
    ----------
    kernel : sparse matrix
        Transition matrix over joint states.
    stationary : ndarray
        Stationary law over joint states (zero on transient states).
    pi_tilde : (n_agent, n_act) ndarray
        Stationary law of ``(S_n, U_n)``.
    q_kernel : (n_agent, n_act, n_agent) ndarray
        ``q(s' | s, u)``.
    rbar : (n_agent, n_act) ndarray
    psi : (n_cells, n_cells) ndarray
        ``psi((s', u') | (s, u)) = q(s' | s, u) * phi(u' | s')``.
    """

    env: object
    rcass: object
    policy: object
    kernel: object
    stationary: np.ndarray
    recurrent: np.ndarray
    pi_tilde: np.ndarray
    q_kernel: np.ndarray
    rbar: np.ndarray
    psi: np.ndarray
    next_obs: np.ndarray

    @property
    def n_cells(self):
        return self.pi_tilde.size

    @property
    def pi_min(self):
        return float(self.pi_tilde.min())

    @property
    def shape(self):
        sp = self.env.spaces
        return sp.n_hidden, self.rcass.n_gamma, sp.n_act

    def joint_array(self):
        """Stationary law reshaped to ``(n_hidden, n_gamma, n_act)``."""
        return self.stationary.reshape(self.shape)

    def hidden_gamma_law(self):
        return self.joint_array().sum(axis=2)

    def stationary_residual(self):
        pi = self.stationary
        return float(np.abs(self.kernel.T @ pi - pi).sum())

    def psi_residual(self):
        p = self.pi_tilde.ravel()
        return float(np.abs(p @ self.psi - p).sum())


def joint_kernel(env, rcass, policy):
    """Sparse transition matrix over joint states ``(x, gamma, u)``."""
    nh, na, no = env.spaces.n_hidden, env.spaces.n_act, env.spaces.n_obs
    ng = rcass.n_gamma
    phi = policy.table
    T, E = env.hidden_transition, env.emission
    rows, cols, vals = [], [], []
    X, G, U, X2, O = np.meshgrid(
        np.arange(nh), np.arange(ng), np.arange(na), np.arange(nh), np.arange(no),
        indexing="ij",
    )
    X, G, U, X2, O = (a.ravel() for a in (X, G, U, X2, O))
    w = T[X, U, X2] * E[X2, O]
    G2 = rcass.update[G, U, O]
    S2 = rcass.readout[G2]
    src = (X * ng + G) * na + U
    for u2 in range(na):
        p = w * phi[S2, u2]
        keep = p > 0
        rows.append(src[keep])
        cols.append(((X2 * ng + G2) * na + u2)[keep])
        vals.append(p[keep])
    N = nh * ng * na
    P = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    ).tocsr()
    P.sum_duplicates()
    return P


def build_joint_chain(env, rcass, policy, eps_stat=EPS_STAT, method=None):
    """Build the joint chain and every stationary table derived from it.

    Transient joint states (for instance windows inconsistent with the
    emission law) are allowed and receive zero stationary mass; the chain
    is rejected if it has several closed classes, if its recurrent class is
    periodic, or if some ``(s, u)`` cell has stationary mass below
    ``eps_stat``.
    """
    check_compatible(env, rcass, policy)
    sp = env.spaces
    nh, na, no, ns = sp.n_hidden, sp.n_act, sp.n_obs, sp.n_agent
    ng = rcass.n_gamma
    P = joint_kernel(env, rcass, policy)
    members, period = recurrent_class(P)
    if period != 1:
        raise AnalysisRejection(f"joint chain recurrent class is periodic (period {period})")
    sub = P[members][:, members]
    if method is None:
        method = "direct" if len(members) <= DIRECT_SOLVE_MAX else "power"
    pi_sub = stationary_distribution(sub, method=method)
    pi = np.zeros(P.shape[0])
    pi[members] = pi_sub

    joint = pi.reshape(nh, ng, na)
    # next-observation law from each (x, u)
    next_obs = np.einsum("xuy,yo->xuo", env.hidden_transition, env.emission)
    s_of_g = rcass.readout
    pi_tilde = np.zeros((ns, na))
    np.add.at(pi_tilde, s_of_g, joint.sum(axis=0))
    if pi_tilde.min() < eps_stat:
        s, u = np.unravel_index(np.argmin(pi_tilde), pi_tilde.shape)
        raise AnalysisRejection(
            f"stationary mass of cell (s={s}, u={u}) is {pi_tilde[s, u]:.3g} < {eps_stat}; "
            "the (S, U) law must be bounded away from zero"
        )
    # mass[x, g, u, o'] = pi(x, g, u) * P(o' | x, u)
    mass = joint[:, :, :, None] * next_obs[:, None, :, :]
    q_num = np.zeros((ns, na, ns))
    r_num = np.zeros((ns, na))
    g_next_s = s_of_g[rcass.update]  # (ng, na, no) -> next agent state
    m_gu_o = mass.sum(axis=0)  # (ng, na, no)
    for g in range(ng):
        s = s_of_g[g]
        for u in range(na):
            row = m_gu_o[g, u]
            np.add.at(q_num[s, u], g_next_s[g, u], row)
            r_num[s, u] += row @ env.reward[s, u]
    q_kernel = q_num / pi_tilde[:, :, None]
    rbar = r_num / pi_tilde
    psi = (q_kernel[:, :, :, None] * policy.table[None, None, :, :]).reshape(ns * na, ns * na)
    return JointChainOracle(
        env=env, rcass=rcass, policy=policy, kernel=P, stationary=pi, recurrent=members,
        pi_tilde=pi_tilde, q_kernel=q_kernel, rbar=rbar, psi=psi, next_obs=next_obs,
    )


# ------------------------------------------------------------------ Q*


def bellman(oracle, Q, gamma):
    return oracle.rbar + gamma * oracle.q_kernel @ Q.max(axis=1)


def fixed_point_qstar(oracle, gamma, tol=1e-12, max_iter=100_000):
    """Fixed point of ``Q = rbar + gamma * sum_s' q(s'|s,u) max_a Q(s', a)``."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    Q = np.zeros_like(oracle.rbar)
    for _ in range(max_iter):
        nxt = bellman(oracle, Q, gamma)
        if np.abs(nxt - Q).max() <= tol * 1e-1:
            Q = nxt
            break
        Q = nxt
    else:
        raise NumericalError("value iteration did not converge")
    res = np.abs(bellman(oracle, Q, gamma) - Q).max()
    if res > tol:
        raise NumericalError(f"Bellman residual {res:.3g} exceeds {tol}")
    return Q


def qstar_by_enumeration(oracle, gamma, max_patterns=200_000):
    """``Q*`` as the elementwise maximum of ``Q^sigma`` over greedy patterns.

    For each deterministic selector ``sigma: s -> a`` solve the linear
    system ``Q = rbar + gamma * q Q(., sigma(.))``.  Optimality of ``Q*``
    makes it dominate every ``Q^sigma`` and equal the one whose selector is
    its own argmax.
    """
    ns, na = oracle.rbar.shape
    if na**ns > max_patterns:
        raise AnalysisRejection(f"{na ** ns} argmax patterns exceed {max_patterns}")
    nc = ns * na
    qk = oracle.q_kernel.reshape(nc, ns)
    best = np.full(nc, -np.inf)
    for sigma in itertools.product(range(na), repeat=ns):
        sel = np.zeros((ns, nc))
        sel[np.arange(ns), np.arange(ns) * na + np.array(sigma)] = 1.0
        A = np.eye(nc) - gamma * qk @ sel
        Qs = np.linalg.solve(A, oracle.rbar.ravel())
        best = np.maximum(best, Qs)
    return best.reshape(ns, na)


# ------------------------------------------------------------- Poisson


@dataclass
class PoissonSolution:
    """``V[z, c]``: component ``c`` of ``V(q, z)`` for one point ``q``."""

    V: np.ndarray
    z0: int
    residual: float


def f_vector(oracle, Q, gamma):
    """Per-cell scalar ``F`` value at each cell: ``rbar + gamma q max Q - Q``."""
    return (bellman(oracle, Q, gamma) - Q).ravel()


def poisson_rhs(oracle, Q, gamma):
    """``F(q, z) - sum_z' pi(z') F(q, z')`` as an (n_cells, n_cells) array."""
    f = f_vector(oracle, Q, gamma)
    pt = oracle.pi_tilde.ravel()
    return np.diag(f) - (pt * f)[None, :]


def poisson_residual(oracle, Q, gamma, V):
    return float(np.abs(V - poisson_rhs(oracle, Q, gamma) - oracle.psi @ V).max())


def solve_poisson_system(psi, pi, F, z0=0, method="pinned"):
    """Solve ``V(z) = F(z) - sum_z' pi(z') F(z') + sum_z' psi(z'|z) V(z')``.

    ``F`` has one row per cell (any number of columns); the solution is
    pinned by ``V(z0) = 0``.  ``method="pinned"`` drops the ``z0`` row and
    column and solves the remaining nonsingular system; ``method="group"``
    uses the fundamental matrix ``(I - psi + 1 pi^T)^{-1}`` and then shifts
    so the ``z0`` row vanishes.
    """
    psi = np.asarray(psi, dtype=float)
    pi = np.asarray(pi, dtype=float).ravel()
    F = np.asarray(F, dtype=float)
    vec = F.ndim == 1
    F = F[:, None] if vec else F
    nc = psi.shape[0]
    rhs = F - (pi @ F)[None, :]
    I = np.eye(nc)
    if method == "pinned":
        keep = np.delete(np.arange(nc), z0)
        A = (I - psi)[np.ix_(keep, keep)]
        if np.linalg.cond(A) > 1e12:
            raise NumericalError("pinned Poisson system is numerically singular")
        V = np.zeros_like(rhs)
        V[keep] = np.linalg.solve(A, rhs[keep])
    elif method == "group":
        Z = I - psi + np.outer(np.ones(nc), pi)
        V = np.linalg.solve(Z, rhs)
        V = V - V[z0][None, :]
    else:
        raise ValueError(f"unknown method {method!r}")
    return V[:, 0] if vec else V


def poisson_solve(oracle, Q, gamma, z0=0, method="pinned", tol=1e-9):
    """Poisson solution ``V(q, .)`` at the point ``q = Q`` with ``V(q, z0) = 0``.

    Component ``c`` of ``F(q, z)`` is ``f_c(q) 1{z = c}``, so the right-hand
    side is the matrix ``diag(f)``.
    """
    Q = np.asarray(Q, dtype=float)
    F = np.diag(f_vector(oracle, Q, gamma))
    V = solve_poisson_system(oracle.psi, oracle.pi_tilde, F, z0=z0, method=method)
    res = poisson_residual(oracle, Q, gamma, V)
    if res > tol:
        raise NumericalError(f"Poisson residual {res:.3g} exceeds {tol}")
    return PoissonSolution(V=V, z0=z0, residual=res)


def poisson_basis(oracle, z0=0):
    """``W`` with ``V(q, z)[c] = f_c(q) * W[z, c]`` for every ``q``.

    The right-hand side of component ``c`` is ``f_c(q) * (1{z=c} - pi(c))``,
    so the solution is that scalar times a fixed vector.
    """
    nc = oracle.n_cells
    keep = np.delete(np.arange(nc), z0)
    A = (np.eye(nc) - oracle.psi)[np.ix_(keep, keep)]
    rhs = np.eye(nc) - oracle.pi_tilde.ravel()[None, :]
    W = np.zeros((nc, nc))
    W[keep] = np.linalg.solve(A, rhs[keep])
    return W


def estimate_v_max(oracle, gamma, z0=0, seed=0, safety=2.0, max_corners=4096):
    """Safety-scaled max of ``|V(q, .)|`` over a grid of Q points.

    The grid holds the centre of ``[0, 1/(1-gamma)]^cells``, its corners
    (all of them up to ``max_corners``, else a seeded sample) and a
    17-point line through the centre along each cell axis.
    """
    W = np.abs(poisson_basis(oracle, z0)).max(axis=0)
    nc = oracle.n_cells
    hi = 1.0 / (1.0 - gamma)
    pts = [np.full(nc, hi / 2)]
    if 2**nc <= max_corners:
        corners = np.array(list(itertools.product((0.0, hi), repeat=nc)))
    else:
        rng = np.random.default_rng(seed)
        corners = rng.integers(0, 2, size=(max_corners, nc)) * hi
    pts.extend(corners)
    for c in range(nc):
        for t in np.linspace(0.0, hi, 17):
            p = np.full(nc, hi / 2)
            p[c] = t
            pts.append(p)
    best = 0.0
    shape = oracle.rbar.shape
    for p in pts:
        f = f_vector(oracle, p.reshape(shape), gamma)
        best = max(best, float(np.max(np.abs(f) * W)))
    return safety * best


def mean_hitting_times(oracle, target=0):
    """Expected steps for the psi-chain to reach ``target`` from each cell."""
    nc = oracle.n_cells
    keep = np.delete(np.arange(nc), target)
    A = np.eye(nc - 1) - oracle.psi[np.ix_(keep, keep)]
    h = np.zeros(nc)
    h[keep] = np.linalg.solve(A, np.ones(nc - 1))
    return h


# ------------------------------------------------ history-conditioned laws


def conditional_agent_laws(env, rcass, b, gamma_state, u):
    """Law of ``S_{n+1}`` and mean reward given the belief, memory and action.

    Returns ``(dist over next agent states, expected reward)``.
    """
    po = observation_law(env, b, u)
    s = rcass.readout[gamma_state]
    nxt = rcass.readout[rcass.update[gamma_state, u]]
    dist = np.bincount(nxt, weights=po, minlength=rcass.spaces.n_agent)
    return dist, float(po @ env.reward[s, u])


def singh_limit(oracle, gamma, tol=1e-13, max_iter=100_000):
    """Fixed point written with history-conditioned laws.

    ``Q(s,u) = sum_h P(h | s,u) sum_{o'} P(o' | h) (r(s,u,o') + gamma max_a Q(s'(h,o'), a))``
    with the finite joint states ``(x, gamma, u)`` standing in for
    histories.  This path never touches ``q_kernel`` or ``rbar``.
    """
    env, rcass = oracle.env, oracle.rcass
    nh, ng, na = oracle.shape
    ns = env.spaces.n_agent
    joint = oracle.joint_array()
    weights = {}
    for x in range(nh):
        for g in range(ng):
            for u in range(na):
                p = joint[x, g, u]
                if p <= 0:
                    continue
                s = int(rcass.readout[g])
                for o in range(env.spaces.n_obs):
                    po = 0.0
                    for x2 in range(nh):
                        po += env.hidden_transition[x, u, x2] * env.emission[x2, o]
                    if po <= 0:
                        continue
                    s2 = int(rcass.readout[rcass.update[g, u, o]])
                    key = (s, u, o, s2)
                    weights[key] = weights.get(key, 0.0) + p * po
    cell_mass = np.zeros((ns, na))
    for (s, u, _, _), w in weights.items():
        cell_mass[s, u] += w
    items = [(s, u, o, s2, w / cell_mass[s, u]) for (s, u, o, s2), w in weights.items()]
    Q = np.zeros((ns, na))
    for _ in range(max_iter):
        m = Q.max(axis=1)
        nxt = np.zeros((ns, na))
        for s, u, o, s2, w in items:
            nxt[s, u] += w * (env.reward[s, u, o] + gamma * m[s2])
        if np.abs(nxt - Q).max() <= tol:
            return nxt
        Q = nxt
    raise NumericalError("limit iteration for the surrogate MDP did not converge")


def oracle_dump(oracle, gamma, qstar=None, v_max=None):
    if qstar is None:
        qstar = fixed_point_qstar(oracle, gamma)
    if v_max is None:
        v_max = estimate_v_max(oracle, gamma)
    return {
        "gamma": gamma,
        "pi_tilde": oracle.pi_tilde.tolist(),
        "q_kernel": oracle.q_kernel.tolist(),
        "rbar": oracle.rbar.tolist(),
        "qstar": qstar.tolist(),
        "pi_min": oracle.pi_min,
        "v_max": v_max,
    }


def write_oracle_dump(path, oracle, gamma, **kw):
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(oracle_dump(oracle, gamma, **kw), indent=1))
