"""Tabular Q-learning on the agent state, with certified step-size schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class StepSchedule:
    """``a(n) = a0 / (n + n0) ** d2`` (``kind="power"``) or ``a0 / (n + 1)``.

    ``d1``, ``d3`` and ``N`` certify ``d1 / n <= a(n) <= d3 * n ** -d2``
    together with ``a(n+1) <= a(n) < 1`` for every ``n >= N``; see
    :meth:`verify`.
    """

    kind: str = "power"
    a0: float = 1.0
    n0: float = 1.0
    d2: float = 0.75
    d1: float = 0.5
    d3: float = 1.0
    N: int = 1

    def __post_init__(self):
        if self.kind == "harmonic":
            object.__setattr__(self, "n0", 1.0)
            object.__setattr__(self, "d2", 1.0)
        elif self.kind != "power":
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0.5 < self.d2 <= 1.0:
            # sum a(n) = inf needs d2 <= 1, sum a(n)^2 < inf needs d2 > 1/2
            raise ConfigError(f"d2={self.d2} outside (0.5, 1]")
        if self.a0 <= 0 or self.n0 <= 0 or self.d1 <= 0 or self.d3 <= 0 or self.N < 1:
            raise ConfigError("a0, n0, d1, d3 must be positive and N >= 1")

    def __call__(self, n):
        return self.a0 * math.pow(n + self.n0, -self.d2)

    def values(self, n):
        n = np.asarray(n, dtype=float)
        return self.a0 * np.power(n + self.n0, -self.d2)

    def kernel_params(self):
        return (self.a0, self.n0, self.d2)

    def verify(self, upto=10**7, chunk=10**6):
        """Check the certified bounds by direct evaluation on ``[N, upto]``.

        Returns a dict of failures (empty when the certificate holds).
        """
        problems = {}
        start = self.N
        while start <= upto:
            stop = min(start + chunk, upto + 1)
            n = np.arange(start, stop + 1, dtype=float)
            a = self.values(n)
            cur, nxt, nn = a[:-1], a[1:], n[:-1]
            if np.any(nxt > cur):
                problems.setdefault("monotone", int(nn[np.argmax(nxt > cur)]))
            if np.any(cur >= 1):
                problems.setdefault("below_one", int(nn[np.argmax(cur >= 1)]))
            if np.any(self.d1 / nn > cur):
                problems.setdefault("lower", int(nn[np.argmax(self.d1 / nn > cur)]))
            if np.any(cur > self.d3 * nn ** -self.d2):
                problems.setdefault("upper", int(nn[np.argmax(cur > self.d3 * nn ** -self.d2)]))
            start = stop
        return problems

    def to_dict(self):
        return {"kind": self.kind, "a0": self.a0, "n0": self.n0, "d2": self.d2,
                "d1": self.d1, "d3": self.d3, "N": self.N}

    @classmethod
    def from_dict(cls, d, path="schedule"):
        allowed = {"kind", "a0", "n0", "d2", "d1", "d3", "N"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ConfigError) as exc:
            raise ConfigError(f"{path}: {exc}") from None


@dataclass
class QTable:
    values: np.ndarray
    gamma: float

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if not 0 < self.gamma < 1:
            raise ConfigError(f"discount {self.gamma} outside (0, 1)")
        if self.values.ndim != 2:
            raise ConfigError("Q values must be a 2-d (s, u) array")

    @property
    def upper(self):
        return 1.0 / (1.0 - self.gamma)

    def in_range(self, slack=1e-12):
        v = self.values
        return bool(v.min() >= -slack and v.max() <= self.upper + slack)

    @classmethod
    def zeros(cls, n_agent, n_act, gamma):
        return cls(np.zeros((n_agent, n_act)), gamma)


def q_update(q, s, u, o_next, s_next, reward, a_n, gamma=None):
    """Return a copy of ``q`` with cell ``(s, u)`` moved toward its target.

    ``o_next`` is accepted for interface symmetry; the target only needs
    the next agent state.  Ties in ``max_a`` do not matter for the value.
    ``gamma`` overrides ``q.gamma`` (``0`` is allowed here, giving the
    one-step reward regression).
    """
    g = q.gamma if gamma is None else gamma
    if not 0 <= g < 1:
        raise ConfigError(f"discount {g} outside [0, 1)")
    values = q.values.copy()
    target = reward + g * values[s_next].max()
    # convex form: exact at a_n = 1 and never leaves [0, 1/(1-gamma)]
    values[s, u] = (1.0 - a_n) * values[s, u] + a_n * target
    return QTable(values, q.gamma)


def log_checkpoints(n_steps):
    """``1, 2, ..., 9, 10, 20, ..., 90, 100, 200, ...`` up to ``n_steps``.

    The spacing at ``n`` is ``10 ** floor(log10 n)``; ``n_steps`` itself is
    always included.
    """
    out = []
    step = 1
    n = 1
    while n <= n_steps:
        out.append(n)
        if n >= 10 * step:
            step *= 10
        n += step
    if n_steps >= 1 and out[-1] != n_steps:
        out.append(n_steps)
    return out


@dataclass
class QLearningResult:
    checkpoints: list
    q_trace: list
    trajectory: object
    record: object

    @property
    def q_final(self):
        return self.record.q_final


def run_qlearning(env, rcass, policy, schedule, q0, n_steps, rng, *, decompose=False,
                  checkpoints=None, oracle=None, init="stationary", burn_in=10_000,
                  record_trajectory=True, record_terms=False, backend=None):
    """Run the environment, agent recursion and Q update in lockstep.

    ``q0`` is a :class:`QTable`; its entries must lie in ``[0, 1/(1-gamma)]``.
    With ``decompose=True`` the per-step F, zeta, M, omega terms are
    computed and Delta is accumulated (needs the oracle).
    """
    from .engine import Engine

    if not q0.in_range(0.0):
        raise ConfigError("Q0 entries must lie in [0, 1/(1-gamma)]")
    if checkpoints is None:
        checkpoints = log_checkpoints(n_steps)
    cps = sorted(set([0] + list(checkpoints)))
    eng = Engine(env, rcass, policy, oracle=oracle, backend=backend)
    eng.initialize(rng, init=init, burn_in=burn_in)
    rec = eng.run(n_steps, rng, Q=q0.values, schedule=schedule, gamma=q0.gamma,
                  decompose=decompose, checkpoints=cps, record_trajectory=record_trajectory,
                  record_terms=record_terms)
    if rec.q_min < -1e-12 or rec.q_max > q0.upper + 1e-12:
        raise AssertionError(
            f"Q left [0, {q0.upper}]: observed range [{rec.q_min}, {rec.q_max}]"
        )
    return QLearningResult(rec.checkpoints, rec.q_trace, rec.trajectory, rec)


def replay_qlearning(trajectory, rcass, schedule, q0, checkpoints=()):
    """Recompute the Q trace from a logged trajectory with plain Python.

    Uses the same arithmetic as the kernels, so the result is bit-identical.
    """
    values = q0.values.copy()
    g = q0.gamma
    trace = {}
    cps = set(checkpoints)
    if 0 in cps:
        trace[0] = values.copy()
    for n in range(len(trajectory)):
        s, u = int(trajectory.s[n]), int(trajectory.u[n])
        g_next = rcass.update[trajectory.gamma[n], u, trajectory.o_next[n]]
        s2 = int(rcass.readout[g_next])
        a = schedule(n)
        r = float(trajectory.reward[n])
        mx = values[s2].max()
        values[s, u] = values[s, u] + a * (r + g * mx - values[s, u])
        if n + 1 in cps:
            trace[n + 1] = values.copy()
    return values, trace
