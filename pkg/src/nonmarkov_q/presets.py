"""Benchmark instances used by the CLI and the acceptance suite.

=================  ==========================================================
markov-consistent  hidden state equals the observation; window K=0 is exact
hmm2-window1       2 hidden states, noisy emissions, K=1 window read out as
                   the last two observations (4 agent states)
hmm3-window2       3 hidden states, binary observations, K=2 window read out
                   as the count of ones in the last three observations
copy-process       O_{n+1} = O_n deterministically (reducible; dependence
                   matrices only)
iid-window1        i.i.d. observations seen through a K=1 window
hmm3-cme           uncontrolled 3-state HMM for the embedding filter
=================  ==========================================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import Policy, Rcass, make_window_rcass
from .env import FiniteSpaces, HmmEnvironment
from .errors import ConfigError
from .qlearn import StepSchedule

GAMMA = 0.9
# d2 = 0.75 with a larger gain: the plain 1/(n+1)^0.75 transient is still
# far from Q* after 2e6 steps at gamma = 0.9
SCHEDULE = StepSchedule(a0=10.0, n0=30.0, d2=0.75, d1=0.5, d3=10.0, N=1)


@dataclass(eq=False)
class Preset:
    name: str
    env: HmmEnvironment
    rcass: Rcass
    policy: Policy
    gamma: float = GAMMA
    schedule: StepSchedule = SCHEDULE
    initial_law: np.ndarray | None = None  # over (x, gamma) when no stationary law exists


def _env(T, E, reward_uo, n_agent, name):
    T = np.asarray(T, dtype=float)
    E = np.asarray(E, dtype=float)
    nh, na = T.shape[0], T.shape[1]
    reward = np.broadcast_to(np.asarray(reward_uo, dtype=float), (n_agent,) + np.shape(reward_uo))
    return HmmEnvironment(T, E, reward, FiniteSpaces(E.shape[1], na, n_agent, nh), name=name)


def _window(nh, no, na, K, readout=None):
    a = make_window_rcass(FiniteSpaces(no, na, 2, nh), K)
    if readout is not None:
        ro = np.array([readout(g) for g in range(a.n_gamma)])
        a = a.with_readout(ro, int(ro.max()) + 1)
    return a


def markov_consistent():
    T = [[[0.7, 0.3], [0.2, 0.8]],
         [[0.4, 0.6], [0.5, 0.5]]]
    E = np.eye(2)
    a = _window(2, 2, 2, 0)
    env = _env(T, E, [[0.0, 1.0], [0.3, 0.6]], a.spaces.n_agent, "markov-consistent")
    pol = Policy.greedy([0, 1], 2, eps=0.5)
    return Preset("markov-consistent", env, a, pol)


def hmm2_window1():
    T = [[[0.9, 0.1], [0.5, 0.5]],
         [[0.2, 0.8], [0.6, 0.4]]]
    E = [[0.8, 0.2], [0.25, 0.75]]
    # gamma = o_n + 2 * (u_{n-1} + 2 * o_{n-1}); keep (o_{n-1}, o_n)
    a = _window(2, 2, 2, 1, readout=lambda g: g % 2 + 2 * ((g // 2) // 2))
    env = _env(T, E, [[0.1, 0.9], [0.45, 0.55]], a.spaces.n_agent, "hmm2-window1")
    pol = Policy.greedy([0, 1, 1, 0], 2, eps=0.5)
    return Preset("hmm2-window1", env, a, pol)


def _ones_in_window(g):
    # binary observations, binary actions, K=2: obs digits at weights 1, 2*2, 2*4*2
    o_n = g % 2
    rest = g // 2
    o_1 = (rest % 4) // 2
    o_2 = ((rest // 4) % 4) // 2
    return o_n + o_1 + o_2


def hmm3_window2():
    T = [[[0.8, 0.15, 0.05], [0.3, 0.4, 0.3]],
         [[0.1, 0.8, 0.1], [0.3, 0.4, 0.3]],
         [[0.05, 0.15, 0.8], [0.3, 0.4, 0.3]]]
    E = [[0.9, 0.1], [0.5, 0.5], [0.1, 0.9]]
    a = _window(3, 2, 2, 2, readout=_ones_in_window)
    env = _env(T, E, [[0.2, 0.8], [0.5, 0.4]], a.spaces.n_agent, "hmm3-window2")
    pol = Policy.greedy([0, 0, 1, 1], 2, eps=0.5)
    return Preset("hmm3-window2", env, a, pol)


def copy_process():
    T = [[[1.0, 0.0], [1.0, 0.0]],
         [[0.0, 1.0], [0.0, 1.0]]]
    E = np.eye(2)
    a = _window(2, 2, 2, 0)
    env = _env(T, E, [[0.0, 1.0], [0.5, 0.5]], a.spaces.n_agent, "copy-process")
    init = np.array([[0.5, 0.0], [0.0, 0.5]])  # x uniform, gamma = current obs = x
    return Preset("copy-process", env, a, Policy.uniform(2, 2), initial_law=init)


def iid_window1():
    T = np.full((2, 2, 2), 0.5)
    T[:, :, 0] = 0.3
    T[:, :, 1] = 0.7
    E = np.eye(2)
    a = _window(2, 2, 2, 1)
    env = _env(T, E, [[0.0, 1.0], [0.5, 0.5]], a.spaces.n_agent, "iid-window1")
    return Preset("iid-window1", env, a, Policy.uniform(a.spaces.n_agent, 2))


def hmm3_cme():
    T = np.array([[0.85, 0.1, 0.05], [0.05, 0.85, 0.1], [0.1, 0.05, 0.85]])[:, None, :]
    E = np.array([[0.95, 0.025, 0.025], [0.025, 0.95, 0.025], [0.025, 0.025, 0.95]])
    a = _window(3, 3, 1, 0)
    env = _env(T, E, np.zeros((1, 3)), a.spaces.n_agent, "hmm3-cme")
    return Preset("hmm3-cme", env, a, Policy.uniform(3, 1))


PRESETS = {
    "markov-consistent": markov_consistent,
    "hmm2-window1": hmm2_window1,
    "hmm3-window2": hmm3_window2,
    "copy-process": copy_process,
    "iid-window1": iid_window1,
    "hmm3-cme": hmm3_cme,
}


def get_preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
