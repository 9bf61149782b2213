import itertools

import numpy as np
import pytest

from nonmarkov_q.agent import (
    Policy,
    Rcass,
    decode_window,
    encode_window,
    make_window_rcass,
    policy_from_dict,
    rcass_from_dict,
    rcass_step,
    replay_agent_states,
    simulate,
)
from nonmarkov_q.env import FiniteSpaces, HmmEnvironment
from nonmarkov_q.errors import ConfigError
from nonmarkov_q.io import read_csv


def test_single_gamma_rcass_is_constant():
    sp = FiniteSpaces(3, 2, 1, 2)
    a = Rcass(1, np.zeros((1, 2, 3), dtype=int), [0], sp)
    assert all(rcass_step(a, 0, u, o) == 0 for u in range(2) for o in range(3))


def test_window_zero_keeps_last_observation():
    a = make_window_rcass(FiniteSpaces(3, 2, 1, 2), 0)
    assert a.n_gamma == 3
    for g, u, o in itertools.product(range(3), range(2), range(3)):
        assert rcass_step(a, g, u, o) == o


def test_window_sizes():
    assert make_window_rcass(FiniteSpaces(2, 2, 1, 2), 1).n_gamma == 8
    assert make_window_rcass(FiniteSpaces(2, 2, 1, 2), 2).n_gamma == 32


def test_window_one_hand_shift():
    a = make_window_rcass(FiniteSpaces(2, 2, 1, 2), 1)
    g = encode_window([1, 0], [0], 2, 2)
    g2 = rcass_step(a, g, 1, 1)
    assert g2 == encode_window([0, 1], [1], 2, 2)
    # mixed-radix layout: o_n + 2 * (u_{n-1} + 2 * o_{n-1})
    assert g == 0 + 2 * (0 + 2 * 1)
    assert g2 == 1 + 2 * (1 + 2 * 0)


def _shift_oracle(g, u, o, no, na, K):
    obs, acts = decode_window(g, no, na, K)
    obs = obs[1:] + [o]
    acts = (acts + [u])[1:]
    return encode_window(obs, acts, no, na)


@pytest.mark.parametrize("no,na,K", [(2, 2, 2), (3, 2, 1), (2, 3, 3)])
def test_window_update_matches_decode_encode(no, na, K):
    a = make_window_rcass(FiniteSpaces(no, na, 1, 2), K)
    rng = np.random.default_rng(K)
    for _ in range(5):
        g, u, o = int(rng.integers(a.n_gamma)), int(rng.integers(na)), int(rng.integers(no))
        assert rcass_step(a, g, u, o) == _shift_oracle(g, u, o, no, na, K)
    # exhaustively as well; the window is small
    for g, u, o in itertools.product(range(a.n_gamma), range(na), range(no)):
        assert a.update[g, u, o] == _shift_oracle(g, u, o, no, na, K)


def test_decode_inverts_encode():
    for g in range(72):
        obs, acts = decode_window(g, 3, 2, 2)
        assert encode_window(obs, acts, 3, 2) == g


def test_window_cap():
    with pytest.raises(ConfigError, match="100000|cap"):
        make_window_rcass(FiniteSpaces(4, 4, 1, 2), 4)
    with pytest.raises(ConfigError):
        make_window_rcass(FiniteSpaces(2, 2, 1, 2), 3, cap=10)


def test_rcass_validation():
    sp = FiniteSpaces(2, 1, 2, 2)
    upd = np.zeros((2, 1, 2), dtype=int)
    with pytest.raises(ConfigError, match="surjective"):
        Rcass(2, upd, [0, 0], sp)
    with pytest.raises(ConfigError, match="update"):
        Rcass(2, upd + 5, [0, 1], sp)
    with pytest.raises(ConfigError):
        rcass_step(Rcass(2, upd, [0, 1], sp), 2, 0, 0)


def test_rcass_from_dict_forms():
    sp = FiniteSpaces(2, 2, 1, 2)
    a = rcass_from_dict({"type": "window", "K": 1}, sp)
    assert a.n_gamma == 8 and a.window == 1
    b = rcass_from_dict({"type": "window", "K": 1, "readout": [0, 1, 0, 1, 0, 1, 0, 1]}, sp)
    assert b.spaces.n_agent == 2
    c = rcass_from_dict({"n_gamma": 2, "update": np.zeros((2, 2, 2), int).tolist(),
                         "readout": [0, 1]}, sp)
    assert c.n_gamma == 2
    with pytest.raises(ConfigError, match=r"rcass: unknown keys"):
        rcass_from_dict({"type": "window", "K": 1, "k": 2}, sp)


def test_policy_validation_and_forms():
    with pytest.raises(ConfigError):
        Policy([[0.5, 0.6]])
    p = Policy.greedy([1, 0], 2, eps=0.1)
    assert np.allclose(p.table, [[0.05, 0.95], [0.95, 0.05]])
    assert p.table.min() >= 0.05 - 1e-15
    with pytest.raises(ConfigError, match="floor"):
        Policy([[1.0, 0.0]], eps_min=0.01)
    q = policy_from_dict({"type": "mixed", "table": [[1, 0], [0, 1]], "eps": 0.2}, 2, 2)
    assert np.allclose(q.table, [[0.9, 0.1], [0.1, 0.9]])
    with pytest.raises(ConfigError, match="policy.type"):
        policy_from_dict({"type": "nope"}, 2, 2)


def _orbit_env():
    # x' = 1 - x under u = 0, x' = x under u = 1; E = identity
    T = np.zeros((2, 2, 2))
    T[0, 0, 1] = T[1, 0, 0] = 1.0
    T[0, 1, 0] = T[1, 1, 1] = 1.0
    R = np.zeros((2, 2, 2))
    for s, u, o in itertools.product(range(2), range(2), range(2)):
        R[s, u, o] = (s + 2 * u + o) / 4
    env = HmmEnvironment(T, np.eye(2), R, FiniteSpaces(2, 2, 2, 2))
    a = make_window_rcass(env.spaces, 0)
    pol = Policy([[1.0, 0.0], [0.0, 1.0]])  # u = s
    return env, a, pol


def test_simulate_zero_steps():
    p_env, a, pol = _orbit_env()
    tr = simulate(p_env, a, pol, 0, np.random.default_rng(0), init="burn-in", burn_in=0)
    assert len(tr) == 0
    x0, b0, g0 = tr.init
    assert g0 == 0 and np.allclose(b0, 0.5)


@pytest.mark.parametrize("seed", range(4))
def test_simulate_hand_orbit(seed):
    env, a, pol = _orbit_env()
    tr = simulate(env, a, pol, 10, np.random.default_rng(seed), init="burn-in", burn_in=0)
    x0 = tr.init[0]
    if x0 == 0:
        xs, gs, us, os_ = [0] + [1] * 9, [0] + [1] * 9, [0] + [1] * 9, [1] * 10
    else:
        xs, gs, us, os_ = [1, 0] + [1] * 8, [0, 0] + [1] * 8, [0, 0] + [1] * 8, [0] + [1] * 9
    assert tr.x.tolist() == xs
    assert tr.gamma.tolist() == gs
    assert tr.s.tolist() == gs
    assert tr.u.tolist() == us
    assert tr.o_next.tolist() == os_
    assert np.allclose(tr.reward, [(s + 2 * u + o) / 4 for s, u, o in zip(gs, us, os_)])


def test_trajectory_invariants_and_replay(presets):
    p = presets("hmm3-window2")
    tr = simulate(p.env, p.rcass, p.policy, 5000, np.random.default_rng(3))
    a = p.rcass
    assert np.array_equal(tr.s, a.readout[tr.gamma])
    assert np.array_equal(tr.gamma[1:], a.update[tr.gamma[:-1], tr.u[:-1], tr.o_next[:-1]])
    assert np.array_equal(tr.reward, p.env.reward[tr.s, tr.u, tr.o_next])
    # s_n depends only on gamma_0, u_0..u_{n-1}, o_1..o_n
    s = replay_agent_states(a, tr.gamma[0], tr.u[:-1], tr.o_next[:-1])
    assert np.array_equal(s, tr.s)
    assert tr.beliefs.shape == (5000, 3)
    assert np.allclose(tr.beliefs.sum(axis=1), 1.0, atol=1e-12)


def test_simulate_bit_identical(presets):
    p = presets("hmm2-window1")
    a = simulate(p.env, p.rcass, p.policy, 20_000, np.random.default_rng(42))
    b = simulate(p.env, p.rcass, p.policy, 20_000, np.random.default_rng(42))
    for field in ("x", "gamma", "s", "u", "o_next", "reward", "beliefs"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_cell_frequencies_match_stationary_law(presets, oracles):
    p = presets("hmm2-window1")
    o = oracles("hmm2-window1")
    n = 10**6
    tr = simulate(p.env, p.rcass, p.policy, n, np.random.default_rng(5), oracle=o,
                  record_beliefs=False)
    na = p.env.spaces.n_act
    freq = np.bincount(tr.s * na + tr.u, minlength=o.n_cells) / n
    assert np.all(np.abs(freq - o.pi_tilde.ravel()) <= 5 / np.sqrt(n))


def test_trajectory_csv(tmp_path, presets):
    p = presets("hmm2-window1")
    tr = simulate(p.env, p.rcass, p.policy, 25, np.random.default_rng(1), record_beliefs=False)
    tr.to_csv(tmp_path / "t.csv")
    header, arr = read_csv(tmp_path / "t.csv")
    assert header == ["n", "x", "gamma", "s", "u", "o_next", "reward"]
    assert np.array_equal(arr[:, 2], tr.gamma) and np.array_equal(arr[:, 6], tr.reward)


def test_incompatible_spaces_rejected(presets):
    p = presets("hmm2-window1")
    with pytest.raises(ConfigError):
        simulate(p.env, p.rcass, Policy.uniform(3, 2), 10, np.random.default_rng(0))
