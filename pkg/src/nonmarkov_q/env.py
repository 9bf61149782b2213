"""Finite controlled hidden-Markov observation environments.

The observation process is generated by a hidden chain ``x`` on
``n_hidden`` states.  Under action ``u`` the hidden state moves
``x -> x'`` with probability ``T[x, u, x']`` and then emits observation
``o'`` with probability ``E[x', o']``.  The conditional law of the next
observation given the whole observed history is therefore a function of
the hidden-state posterior (the belief), which is what makes every
quantity in the error decomposition exactly computable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FilteringDegeneracyError

ROW_TOL = 1e-12


@dataclass(frozen=True)
class FiniteSpaces:
    """Cardinalities of the observation, action, agent and hidden spaces."""

    n_obs: int
    n_act: int
    n_agent: int
    n_hidden: int

    def __post_init__(self):
        for name in ("n_obs", "n_act", "n_agent", "n_hidden"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_agent * self.n_act < 2:
            raise ConfigError("need at least two (s, u) cells: n_agent * n_act >= 2")

    @property
    def n_cells(self):
        return self.n_agent * self.n_act


def _stochastic(name, arr, shape):
    arr = np.array(arr, dtype=float)
    if arr.shape != shape:
        raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ConfigError(f"{name}: entries must be finite and nonnegative")
    sums = arr.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ConfigError(f"{name}{list(idx)}: row sums to {sums[idx]!r}, not 1")
    # renormalize exactly once so text round trips stay stochastic
    arr = arr / sums[..., None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HmmEnvironment:
    """Controlled hidden-Markov observation process plus reward table.

    Attributes
    ----------
    hidden_transition : (n_hidden, n_act, n_hidden) ndarray
        ``T[x, u, x']``.
    emission : (n_hidden, n_obs) ndarray
        ``E[x', o']``.
    reward : (n_agent, n_act, n_obs) ndarray
        ``r[s, u, o']`` with values in [0, 1].
    spaces : FiniteSpaces
    """

    hidden_transition: np.ndarray
    emission: np.ndarray
    reward: np.ndarray
    spaces: FiniteSpaces
    name: str = field(default="env")

    def __post_init__(self):
        sp = self.spaces
        T = _stochastic("T", self.hidden_transition, (sp.n_hidden, sp.n_act, sp.n_hidden))
        E = _stochastic("E", self.emission, (sp.n_hidden, sp.n_obs))
        r = np.array(self.reward, dtype=float)
        if r.shape != (sp.n_agent, sp.n_act, sp.n_obs):
            raise ConfigError(
                f"reward: expected shape {(sp.n_agent, sp.n_act, sp.n_obs)}, got {r.shape}"
            )
        if not np.all(np.isfinite(r)) or r.min() < 0 or r.max() > 1:
            raise ConfigError("reward: entries must lie in [0, 1]")
        r.setflags(write=False)
        object.__setattr__(self, "hidden_transition", T)
        object.__setattr__(self, "emission", E)
        object.__setattr__(self, "reward", r)

    @property
    def T(self):
        return self.hidden_transition

    @property
    def E(self):
        return self.emission

    def with_n_agent(self, n_agent, reward=None):
        """Copy of this environment re-labelled for a different agent-state space.

        ``reward`` defaults to broadcasting ``reward[0]`` when the existing
        table does not depend on the agent state.
        """
        if reward is None:
            if not np.all(self.reward == self.reward[0]):
                raise ConfigError("reward depends on the agent state; pass an explicit table")
            reward = np.broadcast_to(self.reward[0], (n_agent,) + self.reward.shape[1:])
        sp = self.spaces
        return HmmEnvironment(
            self.hidden_transition,
            self.emission,
            reward,
            FiniteSpaces(sp.n_obs, sp.n_act, n_agent, sp.n_hidden),
            name=self.name,
        )

    def hidden_stationary(self, action_probs=None):
        """Stationary law of the hidden chain when actions are drawn i.i.d.

        Only used to seed filters and burn-in; the exact joint law lives in
        :mod:`nonmarkov_q.oracle`.
        """
        n_act = self.spaces.n_act
        w = np.full(n_act, 1.0 / n_act) if action_probs is None else np.asarray(action_probs)
        P = np.einsum("u,xuy->xy", w, self.hidden_transition)
        n = P.shape[0]
        A = np.vstack([P.T - np.eye(n), np.ones(n)])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def as_belief(b, n_hidden):
    """Validate and return a belief vector (copy)."""
    b = np.array(b, dtype=float)
    if b.shape != (n_hidden,):
        raise ConfigError(f"belief: expected shape ({n_hidden},), got {b.shape}")
    if np.any(b < 0) or abs(b.sum() - 1.0) > ROW_TOL:
        raise ConfigError("belief must be a probability vector")
    return b


def _check_index(name, value, bound):
    if not 0 <= value < bound:
        raise ConfigError(f"{name}={value} out of range [0, {bound})")


def env_step(env, x, u, rng):
    """Sample ``(x', o')`` from ``T[x, u]`` then ``E[x']``.

    Uses exactly two uniforms from ``rng`` per call so that a trajectory is
    a deterministic function of the generator state.
    """
    sp = env.spaces
    _check_index("x", x, sp.n_hidden)
    _check_index("u", u, sp.n_act)
    v1, v2 = rng.random(2)
    x_next = sample_index(np.cumsum(env.hidden_transition[x, u]), v1)
    o_next = sample_index(np.cumsum(env.emission[x_next]), v2)
    return x_next, o_next


def sample_index(cdf, v):
    """Inverse-CDF draw: first index with ``v < cdf[i]`` (last index as guard)."""
    n = len(cdf)
    for i in range(n - 1):
        if v < cdf[i]:
            return i
    return n - 1


def predictive_joint(env, b, u):
    """Joint law ``P(x', o' | belief b, action u)`` as an (n_hidden, n_obs) array."""
    pred = b @ env.hidden_transition[:, u, :]
    return pred[:, None] * env.emission


def observation_law(env, b, u):
    """``P(O_{n+1} = o | belief b, action u)``."""
    _check_index("u", u, env.spaces.n_act)
    return predictive_joint(env, b, u).sum(axis=0)


def belief_update(env, b, u, o_next, step=None):
    """One-step Bayes posterior of the hidden state after observing ``o_next``.

    Raises
    ------
    FilteringDegeneracyError
        If ``o_next`` has zero probability under ``b`` and ``u``.
    """
    _check_index("o_next", o_next, env.spaces.n_obs)
    joint = predictive_joint(env, b, u)[:, o_next]
    z = joint.sum()
    if not z > 0:
        raise FilteringDegeneracyError(
            f"observation {o_next} impossible under current belief and action {u}", step
        )
    return joint / z


# ---------------------------------------------------------------- JSON I/O


def env_to_dict(env):
    sp = env.spaces
    return {
        "n_hidden": sp.n_hidden,
        "n_obs": sp.n_obs,
        "n_act": sp.n_act,
        "n_agent": sp.n_agent,
        "T": env.hidden_transition.tolist(),
        "E": env.emission.tolist(),
        "reward": env.reward.tolist(),
    }


def env_from_dict(d, path="env"):
    """Build an environment from its JSON form, with path-qualified errors.

    ``n_agent`` is optional: it defaults to the first axis of ``reward``.
    A 2-d ``reward`` indexed ``[u, o']`` is accepted when ``n_agent`` is
    given and broadcast over agent states.
    """
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    required = ("n_hidden", "n_obs", "n_act", "T", "E", "reward")
    for key in required:
        if key not in d:
            raise ConfigError(f"{path}.{key}: missing")
    unknown = set(d) - set(required) - {"n_agent", "name"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        reward = np.array(d["reward"], dtype=float)
        T = np.array(d["T"], dtype=float)
        E = np.array(d["E"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: ragged or non-numeric array ({exc})") from None
    n_agent = d.get("n_agent", reward.shape[0] if reward.ndim == 3 else None)
    if n_agent is None:
        raise ConfigError(f"{path}.n_agent: required when reward is not 3-d")
    if reward.ndim == 2:
        reward = np.broadcast_to(reward, (n_agent,) + reward.shape)
    try:
        spaces = FiniteSpaces(d["n_obs"], d["n_act"], n_agent, d["n_hidden"])
        return HmmEnvironment(T, E, reward, spaces, name=d.get("name", "env"))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_env(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return env_from_dict(data, str(path))


def save_env(env, path):
    Path(path).write_text(json.dumps(env_to_dict(env), indent=1))
