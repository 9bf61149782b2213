import math

import numpy as np
import pytest

from nonmarkov_q import decomp as D
from nonmarkov_q.agent import Policy, make_window_rcass
from nonmarkov_q.engine import Engine
from nonmarkov_q.env import FiniteSpaces, HmmEnvironment
from nonmarkov_q.errors import AnalysisRejection
from nonmarkov_q.oracle import build_joint_chain, fixed_point_qstar, poisson_solve
from nonmarkov_q.qlearn import QTable, StepSchedule


class Const:
    def __init__(self, a):
        self.a = a

    def __call__(self, n):
        return self.a


def _terms_run(p, o, n, seed, backend=None):
    e = Engine(p.env, p.rcass, p.policy, oracle=o, backend=backend)
    rng = np.random.default_rng(seed)
    e.initialize(rng)
    q0 = np.zeros(o.rbar.shape)
    return e.run(n, rng, Q=q0, schedule=p.schedule, gamma=p.gamma, decompose=True,
                 record_trajectory=True, record_beliefs=True, record_terms=True)


def test_offsets_vanish_when_markov(oracles, presets):
    o = oracles("markov-consistent")
    p = presets("markov-consistent")
    rng = np.random.default_rng(0)
    Q = rng.uniform(0, 10, size=o.rbar.shape)
    V = poisson_solve(o, Q, p.gamma).V
    for x in range(2):
        b = np.eye(2)[x]
        g = x  # window 0 memory is the last observation = hidden state
        for u in range(2):
            for o2 in range(2):
                F, z, M = D.decomp_step(o, b, g, u, o2, Q, 0.5, p.gamma)
                assert np.abs(z).max() <= 1e-15
            assert np.abs(D.omega_step(o, V, b, g, u)).max() <= 1e-14


def test_martingale_term_zero_when_deterministic():
    T = np.zeros((2, 1, 2))
    T[0, 0, 1] = T[1, 0, 0] = 0.999
    T[0, 0, 0] = T[1, 0, 1] = 0.001
    env = HmmEnvironment(T, np.eye(2), np.array([[[0.2, 0.7]], [[0.4, 0.9]]]),
                         FiniteSpaces(2, 1, 2, 2))
    o = build_joint_chain(env, make_window_rcass(env.spaces, 0), Policy.uniform(2, 1))
    Q = np.array([[1.0], [2.0]])
    # from x=0 (belief point mass) a deterministic-looking path: compute M by hand
    b = np.array([1.0, 0.0])
    F, z, M = D.decomp_step(o, b, 0, 0, 1, Q, 0.7, 0.5)
    er = 0.999 * 0.7 + 0.001 * 0.2
    hm = 0.999 * 2.0 + 0.001 * 1.0
    assert M[0] == pytest.approx((0.7 - er) + 0.5 * (2.0 - hm), abs=1e-15)
    # exactly deterministic: M = 0
    T2 = np.zeros((2, 1, 2))
    T2[0, 0, 1] = T2[1, 0, 0] = 1.0
    T2 = 0.5 * T2 + 0.5 * np.full((2, 1, 2), 0.5)  # keep aperiodic for the oracle
    env2 = HmmEnvironment(T2, np.eye(2), env.reward, FiniteSpaces(2, 1, 2, 2))
    o2 = build_joint_chain(env2, make_window_rcass(env2.spaces, 0), Policy.uniform(2, 1))
    # outcome 1 has probability 0.75 from x=0; a point-mass reward and equal next values
    Qf = np.array([[3.0], [3.0]])
    env3 = HmmEnvironment(T2, np.eye(2), np.full((2, 1, 2), 0.4), FiniteSpaces(2, 1, 2, 2))
    o3 = build_joint_chain(env3, make_window_rcass(env3.spaces, 0), Policy.uniform(2, 1))
    for obs in range(2):
        _, _, M3 = D.decomp_step(o3, b, 0, 0, obs, Qf, 0.4, 0.5)
        assert np.abs(M3).max() == 0.0
    assert o2.n_cells == 2


@pytest.mark.parametrize("name", ["hmm2-window1", "hmm3-window2"])
def test_decomposition_identity_and_kernel_terms(oracles, presets, name):
    o = oracles(name)
    p = presets(name)
    n = 200
    rec = _terms_run(p, o, n, seed=3)
    tr = rec.trajectory
    Q = np.zeros(o.rbar.shape)
    na = o.rbar.shape[1]
    offs = []
    for k in range(n):
        b, g, u, o2 = tr.beliefs[k], tr.gamma[k], tr.u[k], tr.o_next[k]
        F, z, M = D.decomp_step(o, b, g, u, o2, Q, tr.reward[k], p.gamma)
        s = tr.s[k]
        s2 = p.rcass.readout[p.rcass.update[g, u, o2]]
        bracket = tr.reward[k] + p.gamma * Q[s2].max() - Q[s, u]
        assert abs(F[s * na + u] + z[s * na + u] + M[s * na + u] - bracket) <= 1e-13
        V = poisson_solve(o, Q, p.gamma).V
        w = D.omega_step(o, V, b, g, u)
        ref = np.stack([F, z, M, w])
        assert np.abs(ref - rec.terms[k, :4]).max() <= 1e-12
        # rec.terms[k, 4] is Delta(k) over the offsets seen so far
        assert np.abs(D.delta_direct(p.schedule, offs + [z + w], k) - rec.terms[k, 4]).max() <= 1e-13
        offs.append(z + w)
        a = p.schedule(k)
        Q[s, u] = Q[s, u] + a * bracket
    assert np.abs(D.delta_direct(p.schedule, offs, n) - rec.delta_final).max() <= 1e-13
    assert rec.identity_error <= 1e-12


@pytest.mark.parametrize("name", ["markov-consistent", "hmm2-window1", "hmm3-window2"])
def test_stationary_means_vanish(oracles, presets, name):
    o = oracles(name)
    p = presets(name)
    qs = fixed_point_qstar(o, p.gamma)
    assert np.abs(D.stationary_mean_zeta(o, qs, p.gamma)).max() <= 1e-12
    rng = np.random.default_rng(2)
    Q = rng.uniform(0, 1 / (1 - p.gamma), size=o.rbar.shape)
    V = poisson_solve(o, Q, p.gamma).V
    total = D.stationary_mean_zeta(o, Q, p.gamma) + D.stationary_mean_omega(o, V)
    assert np.abs(total).max() <= 1e-12


def test_chi_examples():
    assert D.chi(3, 2, Const(0.5)) == 0.25
    harm = StepSchedule(kind="harmonic")  # a(k) = 1/(k+1)
    assert D.chi(3, 1, harm) == pytest.approx(1 / 4, abs=1e-15)
    assert D.chi(1, 2, harm) == 1.0
    assert D.b_sum(0, 3, harm) == pytest.approx(1 + 1 / 2 + 1 / 3 + 1 / 4, abs=1e-15)
    assert D.beta(4, 16, 0.5, 0.75) == pytest.approx(1 / (4**0.25 * 16**0.5))
    assert D.beta(4, 16, 0.9, 0.75) == pytest.approx(16**-0.75)


def test_delta_recursion_matches_direct_sum():
    rng = np.random.default_rng(0)
    offsets = rng.normal(size=(1000, 6))
    sched = StepSchedule()
    for n in (0, 1, 2, 3, 17, 1000):
        assert np.abs(D.delta_direct(sched, offsets, n)
                      - D.delta_accumulate(sched, offsets, n)).max() <= 1e-13


def test_delta_single_term():
    offsets = np.zeros((5, 2))
    offsets[1] = [1.0, -2.0]
    sched = Const(0.5)
    # Delta(4) = (1 - a)^2 a offsets[1]
    assert np.allclose(D.delta_direct(sched, offsets, 4), [0.125, -0.25], atol=0)
    assert np.allclose(D.delta_accumulate(sched, offsets, 4), [0.125, -0.25], atol=0)
    # the step-0 offset never enters
    offsets[0] = 99.0
    assert np.allclose(D.delta_accumulate(sched, offsets, 4), [0.125, -0.25], atol=0)


def _consts(**kw):
    base = dict(gamma=0.9, pi_min=0.1, n_cells=8, d1=0.5, d2=0.75, d3=10.0)
    base.update(kw)
    return D.BoundConstants(**base)


def test_theorem_rhs_alpha_and_rejection():
    c = _consts()
    assert c.alpha == pytest.approx(0.99, abs=1e-15)
    with pytest.raises(AnalysisRejection):
        D.theorem2_rhs(0.1, 10, 20, _consts(pi_min=0.0), StepSchedule(), 1.0, 0.0)


def test_theorem_rhs_independent_evaluation():
    c = _consts(q_N_norm=2.0, c1=0.3, c2=0.1, D=0.05)
    sched = StepSchedule(a0=10.0, n0=30.0, d2=0.75, d1=0.5, d3=10.0)
    n0, n, d1 = 100, 400, 0.2
    out = D.theorem2_rhs(d1, n0, n, c, sched, q_n0_err=3.0, delta_n_norm=0.01)
    # hand evaluation, written out separately
    a = [10.0 / (k + 30.0) ** 0.75 for k in range(n + 1)]
    b = sum(a[n0:n + 1])
    alpha = 1 - 0.1 * 0.1
    bound = math.exp(-(1 - alpha) * b) * 3.0 + (d1 + a[n0] * 0.3) / (1 - alpha) + 0.01
    C = math.exp(2 * (1 + 2.0 + 1 / (1 - alpha)) + 0.1)
    betas = [1 / (n0 ** 0.25 * m ** 0.5) for m in range(n0 + 1, n + 1)]
    ps = 1 - 16 * sum(math.exp(-0.05 * d1 * d1 / x) for x in betas)
    pl = 1 - 16 * sum(math.exp(-0.05 * d1 / x) for x in betas)
    assert out["bound"] == pytest.approx(bound, rel=1e-12)
    assert out["C"] == pytest.approx(C, rel=1e-12)
    assert out["b_n0_n"] == pytest.approx(b, rel=1e-12)
    assert out["prob_small_delta"] == pytest.approx(ps, rel=1e-12)
    assert out["prob_large_delta"] == pytest.approx(pl, rel=1e-12)
    assert out["branch"] == "small" and out["vacuous"] == (ps <= 0)


def test_theorem_rhs_limits():
    c = _consts(c1=0.0, D=1e6)
    sched = StepSchedule()
    short = D.theorem2_rhs(0.01, 10, 100, c, sched, 5.0, 0.0)
    long = D.theorem2_rhs(0.01, 10, 100_000, c, sched, 5.0, 0.0)
    # the contraction term decays as n grows; the floor is delta1 / (1 - alpha)
    assert long["bound"] < short["bound"]
    assert long["bound"] >= 0.01 / (1 - c.alpha)
    assert long["probability"] == pytest.approx(1.0, abs=1e-12)
    weak = D.theorem2_rhs(0.01, 10, 100, _consts(D=1e-6), sched, 5.0, 0.0)
    assert weak["vacuous"]


def test_lemma_tail_bound():
    c = _consts(c7=2.0)
    assert D.lemma_tail_bound(0.0, 100, c) == 16
    assert D.lemma_tail_bound(0.1, 100, c) == pytest.approx(16 * math.exp(-2 * 0.01 / 100**-0.5))


def test_dependence_copy_process(presets):
    p = presets("copy-process")
    dm = D.dependence_matrices(p.env, p.rcass, p.policy, 5, initial_law=p.initial_law)
    tb = D.dependence_matrices_tables(p.env, p.rcass, p.policy, 5, initial_law=p.initial_law)
    assert np.array_equal(dm.Phi, tb.Phi) and np.array_equal(dm.Psi, tb.Psi)
    assert np.allclose(dm.Phi[0], 1.0)
    off = dm.Phi[1:, :] - np.eye(5)[1:, :]
    assert np.abs(off).max() == 0
    # spectral norm of I + (row of ones): eigenvalues of A A^T by hand
    ref = np.eye(5)
    ref[0] = 1.0
    assert dm.phi_norm == pytest.approx(math.sqrt(np.linalg.eigvalsh(ref @ ref.T).max()), rel=1e-12)


def test_dependence_iid_window_short_range(presets):
    p = presets("iid-window1")
    dm = D.dependence_matrices(p.env, p.rcass, p.policy, 4)
    tb = D.dependence_matrices_tables(p.env, p.rcass, p.policy, 4)
    assert np.abs(dm.Phi - tb.Phi).max() <= 1e-12
    assert np.abs(dm.Psi - tb.Psi).max() <= 1e-12
    for i in range(4):
        for j in range(i + 2, 4):
            assert dm.Phi[i, j] <= 1e-12
    assert np.all(np.diag(dm.Phi) == 1.0)


def test_dependence_two_paths_hmm(presets):
    p = presets("hmm2-window1")
    dm = D.dependence_matrices(p.env, p.rcass, p.policy, 3)
    tb = D.dependence_matrices_tables(p.env, p.rcass, p.policy, 3)
    assert np.abs(dm.Phi - tb.Phi).max() <= 1e-12
    assert np.abs(dm.Psi - tb.Psi).max() <= 1e-12
    assert np.all(dm.Phi >= 0) and np.all(dm.Phi <= 1 + 1e-12)


def test_dependence_cap(presets):
    p = presets("hmm2-window1")
    with pytest.raises(AnalysisRejection, match="cap"):
        D.dependence_matrices(p.env, p.rcass, p.policy, 12, cap=1000)


def test_tail_check_guards_and_zero_tail():
    ns = [100, 1000, 10000]
    with pytest.raises(AnalysisRejection, match="200"):
        D.appendix_tail_check(np.zeros((10, 3)), ns, 0.75)
    with pytest.raises(AnalysisRejection, match="decade"):
        D.appendix_tail_check(np.zeros((200, 3)), [100, 200, 300], 0.75)
    rep = D.appendix_tail_check(np.zeros((200, 3)), ns, 0.75)
    assert all(r["tail"] == [0.0] * 12 for r in rep["per_n"])
    assert rep["pooled"] == {}


def test_tail_check_recovers_planted_constant():
    # delta = sqrt(E / (c7 n^(2 d2 - 1))) with E ~ Exp(1) has tail exactly
    # exp(-c7 delta^2 n^(2 d2 - 1))
    rng = np.random.default_rng(0)
    d2, c7 = 0.75, 3.0
    ns = [100, 1000, 10000]
    scale = np.array([n ** (2 * d2 - 1) for n in ns])
    data = np.sqrt(rng.exponential(size=(20000, 3)) / (c7 * scale))
    rep = D.appendix_tail_check(data, ns, d2)
    for r, sc in zip(rep["per_n"], scale):
        assert r["monotone"] and r["r2"] > 0.99
        assert -r["slope"] / sc == pytest.approx(c7, rel=0.05)
    assert rep["pooled"]["r2"] > 0.99
    assert rep["pooled"]["c7_hat"] == pytest.approx(c7, rel=0.05)
