import numpy as np

from nonmarkov_q.agent import Policy, make_window_rcass
from nonmarkov_q.env import FiniteSpaces, HmmEnvironment


def random_env(rng, nh, no, na, n_agent=2, sparse_emission=False):
    T = rng.dirichlet(np.ones(nh), size=(nh, na))
    E = rng.dirichlet(np.ones(no), size=nh)
    if sparse_emission:
        E[E < 0.15] = 0.0
        E /= E.sum(axis=1, keepdims=True)
    R = rng.random((n_agent, na, no))
    return HmmEnvironment(T, E, R, FiniteSpaces(no, na, n_agent, nh))


def window_triple(env, K, policy=None):
    a = make_window_rcass(env.spaces, K)
    e = env.with_n_agent(a.spaces.n_agent, reward=np.broadcast_to(
        env.reward[0], (a.spaces.n_agent,) + env.reward.shape[1:]))
    pol = policy or Policy.uniform(a.spaces.n_agent, env.spaces.n_act)
    return e, a, pol
