"""Recursively computable agent states, policies and the simulation loop.

A :class:`Rcass` is a finite automaton ``gamma' = update[gamma, u, o']``
with a readout ``s = readout[gamma]``.  The window construction keeps the
current observation and the previous ``K`` observation/action pairs,
encoded as a mixed-radix integer::

    gamma = o_n + n_obs * (p_1 + R * (p_2 + R * (... + R * p_K)))
    p_k   = u_{n-k} + n_act * o_{n-k},        R = n_act * n_obs

so the current observation is the least-significant digit and the oldest
pair the most significant one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import FiniteSpaces, HmmEnvironment
from .errors import ConfigError

WINDOW_CAP = 100_000


@dataclass(frozen=True, eq=False)
class Rcass:
    """Finite agent-state recursion ``(update, readout)`` over a Gamma-space."""

    n_gamma: int
    update: np.ndarray
    readout: np.ndarray
    spaces: FiniteSpaces
    window: int | None = None

    def __post_init__(self):
        sp = self.spaces
        upd = np.array(self.update, dtype=np.int64)
        ro = np.array(self.readout, dtype=np.int64)
        if upd.shape != (self.n_gamma, sp.n_act, sp.n_obs):
            raise ConfigError(
                f"update: expected shape {(self.n_gamma, sp.n_act, sp.n_obs)}, got {upd.shape}"
            )
        if ro.shape != (self.n_gamma,):
            raise ConfigError(f"readout: expected shape ({self.n_gamma},), got {ro.shape}")
        if upd.min() < 0 or upd.max() >= self.n_gamma:
            raise ConfigError("update: entries must lie in [0, n_gamma)")
        if ro.min() < 0 or ro.max() >= sp.n_agent:
            raise ConfigError("readout: entries must lie in [0, n_agent)")
        missing = np.setdiff1d(np.arange(sp.n_agent), ro)
        if missing.size:
            raise ConfigError(f"readout is not surjective: agent states {missing.tolist()} unused")
        upd.setflags(write=False)
        ro.setflags(write=False)
        object.__setattr__(self, "update", upd)
        object.__setattr__(self, "readout", ro)

    def with_readout(self, readout, n_agent):
        """Same recursion with a coarser readout onto ``n_agent`` labels."""
        sp = self.spaces
        return Rcass(
            self.n_gamma,
            self.update,
            readout,
            FiniteSpaces(sp.n_obs, sp.n_act, n_agent, sp.n_hidden),
            window=self.window,
        )


def rcass_step(a, gamma, u, o_next):
    sp = a.spaces
    if not (0 <= gamma < a.n_gamma and 0 <= u < sp.n_act and 0 <= o_next < sp.n_obs):
        raise ConfigError(f"rcass_step: index out of range (gamma={gamma}, u={u}, o'={o_next})")
    return int(a.update[gamma, u, o_next])


def window_size(n_obs, n_act, K):
    return n_obs * (n_act * n_obs) ** K


def make_window_rcass(spaces, K, cap=WINDOW_CAP):
    """Window agent state over the last ``K`` (o, u) pairs plus the current o.

    The readout is the identity, so ``spaces.n_agent`` is replaced by the
    window size.
    """
    if K < 0 or int(K) != K:
        raise ConfigError(f"window length must be a nonnegative integer, got {K!r}")
    no, na = spaces.n_obs, spaces.n_act
    n_gamma = window_size(no, na, K)
    if n_gamma > cap:
        raise ConfigError(f"window K={K} needs {n_gamma} agent states (cap {cap})")
    radix = na * no
    pairs_mod = radix**K
    g = np.arange(n_gamma)[:, None, None]
    u = np.arange(na)[None, :, None]
    o = np.arange(no)[None, None, :]
    o_cur = g % no
    older = g // no
    new_pair = u + na * o_cur
    shifted = (new_pair + radix * older) % pairs_mod if K > 0 else np.zeros_like(new_pair)
    update = o + no * shifted
    sp = FiniteSpaces(no, na, n_gamma, spaces.n_hidden)
    return Rcass(n_gamma, update, np.arange(n_gamma), sp, window=K)


def encode_window(obs, acts, n_obs, n_act):
    """Encode ``[o_{n-K}, u_{n-K}, ..., o_{n-1}, u_{n-1}, o_n]``.

    ``obs`` lists ``K + 1`` observations oldest first; ``acts`` lists the
    ``K`` actions in between.
    """
    K = len(acts)
    if len(obs) != K + 1:
        raise ConfigError("need exactly one more observation than actions")
    value = 0
    for k in range(K):
        value = value * (n_act * n_obs) + (acts[k] + n_act * obs[k])
    return obs[-1] + n_obs * value


def decode_window(gamma, n_obs, n_act, K):
    """Inverse of :func:`encode_window`; returns ``(obs, acts)`` oldest first."""
    o_cur = gamma % n_obs
    rest = gamma // n_obs
    obs, acts = [], []
    for _ in range(K):
        pair = rest % (n_act * n_obs)
        rest //= n_act * n_obs
        acts.append(pair % n_act)
        obs.append(pair // n_act)
    obs.reverse()
    acts.reverse()
    return obs + [o_cur], acts


def rcass_to_dict(a):
    if a.window is not None and np.array_equal(a.readout, np.arange(a.n_gamma)):
        return {"type": "window", "K": a.window}
    return {
        "n_gamma": a.n_gamma,
        "update": a.update.tolist(),
        "readout": a.readout.tolist(),
    }


def rcass_from_dict(d, spaces, path="rcass"):
    """Build an Rcass from ``{"type": "window", "K": k}`` or explicit tables.

    A window spec may carry an optional ``readout`` list to coarsen the
    window onto fewer agent states.
    """
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    try:
        if d.get("type") == "window":
            unknown = set(d) - {"type", "K", "readout"}
            if unknown:
                raise ConfigError(f"unknown keys {sorted(unknown)}")
            if "K" not in d:
                raise ConfigError("K: missing")
            a = make_window_rcass(spaces, d["K"])
            if "readout" in d:
                ro = np.asarray(d["readout"], dtype=np.int64)
                a = a.with_readout(ro, int(ro.max()) + 1)
            return a
        unknown = set(d) - {"n_gamma", "update", "readout", "type"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        for key in ("n_gamma", "update", "readout"):
            if key not in d:
                raise ConfigError(f"{key}: missing")
        ro = np.asarray(d["readout"], dtype=np.int64)
        sp = FiniteSpaces(spaces.n_obs, spaces.n_act, int(ro.max()) + 1, spaces.n_hidden)
        return Rcass(int(d["n_gamma"]), d["update"], ro, sp)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary randomized policy ``table[s, u] = P(U_n = u | S_n = s)``."""

    table: np.ndarray
    eps_min: float | None = None

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2:
            raise ConfigError("policy table must be 2-d")
        if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigError("policy rows must be probability vectors")
        if self.eps_min is not None and t.min() < self.eps_min:
            raise ConfigError(f"policy entry {t.min()} below positivity floor {self.eps_min}")
        t = t / t.sum(axis=1, keepdims=True)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def n_agent(self):
        return self.table.shape[0]

    @property
    def n_act(self):
        return self.table.shape[1]

    @classmethod
    def uniform(cls, n_agent, n_act):
        return cls(np.full((n_agent, n_act), 1.0 / n_act))

    @classmethod
    def epsilon_mixed(cls, base, eps=0.05):
        """``(1 - eps) * base + eps * uniform``; every entry is at least ``eps / n_act``."""
        base = np.asarray(base, dtype=float)
        n_act = base.shape[1]
        return cls((1 - eps) * base + eps / n_act, eps_min=eps / n_act * (1 - 1e-12))

    @classmethod
    def greedy(cls, actions, n_act, eps=0.05):
        """Epsilon-mixed deterministic policy choosing ``actions[s]``."""
        actions = np.asarray(actions)
        base = np.zeros((len(actions), n_act))
        base[np.arange(len(actions)), actions] = 1.0
        return cls.epsilon_mixed(base, eps)


def policy_from_dict(d, n_agent, n_act, path="policy"):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = d.get("type", "uniform")
    try:
        if kind == "uniform":
            return Policy.uniform(n_agent, n_act)
        if kind == "table":
            return Policy(d["table"], d.get("eps_min"))
        if kind == "greedy":
            return Policy.greedy(d["actions"], n_act, d.get("eps", 0.05))
        if kind == "mixed":
            return Policy.epsilon_mixed(d["table"], d.get("eps", 0.05))
    except KeyError as exc:
        raise ConfigError(f"{path}.{exc.args[0]}: missing") from None
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raise ConfigError(f"{path}.type: unknown policy type {kind!r}")


def check_compatible(env, rcass, policy):
    se, sa = env.spaces, rcass.spaces
    if (se.n_obs, se.n_act, se.n_hidden) != (sa.n_obs, sa.n_act, sa.n_hidden):
        raise ConfigError("environment and agent disagree on observation/action/hidden sizes")
    if se.n_agent != sa.n_agent:
        raise ConfigError(
            f"environment reward has {se.n_agent} agent states, agent has {sa.n_agent}"
        )
    if policy.table.shape != (sa.n_agent, sa.n_act):
        raise ConfigError(
            f"policy shape {policy.table.shape} does not match {(sa.n_agent, sa.n_act)}"
        )


@dataclass
class Trajectory:
    """Per-step record: hidden state, belief, gamma, agent state, action,
    next observation and reward.  Row ``n`` holds ``x_n, b_n, gamma_n, s_n,
    u_n, o_{n+1}, r_n``."""

    x: np.ndarray
    gamma: np.ndarray
    s: np.ndarray
    u: np.ndarray
    o_next: np.ndarray
    reward: np.ndarray
    beliefs: np.ndarray | None = None
    init: tuple | None = None

    def __len__(self):
        return len(self.x)

    def to_csv(self, path):
        from .io import atomic_write_text, format_float

        lines = ["n,x,gamma,s,u,o_next,reward"]
        for n in range(len(self)):
            lines.append(
                f"{n},{self.x[n]},{self.gamma[n]},{self.s[n]},{self.u[n]},"
                f"{self.o_next[n]},{format_float(self.reward[n])}"
            )
        atomic_write_text(path, "\n".join(lines) + "\n")


def simulate(env, rcass, policy, n_steps, rng, init="stationary", burn_in=10_000,
             oracle=None, record_beliefs=True):
    """Run the environment/agent/policy loop for ``n_steps`` steps.

    ``init`` is ``"stationary"`` (draw the initial joint state from the
    exact stationary law, building the oracle if not supplied) or
    ``"burn-in"`` (start from a uniform hidden state and discard
    ``burn_in`` steps).
    """
    from .engine import Engine

    eng = Engine(env, rcass, policy, oracle=oracle)
    eng.initialize(rng, init=init, burn_in=burn_in)
    return eng.simulate(n_steps, rng, record_beliefs=record_beliefs)


def replay_agent_states(rcass, gamma0, actions, observations):
    """Recompute ``s_0..s_n`` from ``gamma_0``, ``u_0..u_{n-1}``, ``o_1..o_n``."""
    g = int(gamma0)
    out = [int(rcass.readout[g])]
    for u, o in zip(actions, observations):
        g = int(rcass.update[g, u, o])
        out.append(int(rcass.readout[g]))
    return np.array(out, dtype=np.int64)


__all__ = [
    "HmmEnvironment",
    "Policy",
    "Rcass",
    "Trajectory",
    "check_compatible",
    "decode_window",
    "encode_window",
    "make_window_rcass",
    "rcass_step",
    "replay_agent_states",
    "simulate",
]
