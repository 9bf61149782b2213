"""Chunked driver around the step kernel.

The engine owns the mutable run state (hidden state, memory, step index,
belief, Q table, Delta accumulator) and feeds the kernel blocks of
uniforms drawn from the run's generator, three per step: action, hidden
transition, emission.  Blocks end on checkpoint boundaries so checkpoints
are read between kernel calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernel_py as K
from ._backend import get_kernel
from .agent import Trajectory, check_compatible
from .env import sample_index
from .errors import ConfigError, FilteringDegeneracyError

MAX_CHUNK = 1 << 16


@dataclass
class RunRecord:
    """Everything produced by :meth:`Engine.run`."""

    checkpoints: list = field(default_factory=list)
    q_trace: list = field(default_factory=list)
    delta_trace: list = field(default_factory=list)
    trajectory: Trajectory | None = None
    terms: np.ndarray | None = None
    q_final: np.ndarray | None = None
    delta_final: np.ndarray | None = None
    identity_error: float = 0.0
    q_min: float = np.inf
    q_max: float = -np.inf
    n_steps: int = 0


class Engine:
    def __init__(self, env, rcass, policy, oracle=None, backend=None):
        check_compatible(env, rcass, policy)
        self.env, self.rcass, self.policy, self.oracle = env, rcass, policy, oracle
        self.kernel = get_kernel(backend)
        c = np.ascontiguousarray
        self.T = c(env.hidden_transition)
        self.cumT = c(np.cumsum(self.T, axis=2))
        self.E = c(env.emission)
        self.cumE = c(np.cumsum(self.E, axis=1))
        self.R = c(env.reward)
        self.upd = c(rcass.update, dtype=np.int64)
        self.readout = c(rcass.readout, dtype=np.int64)
        self.phi = c(policy.table)
        self.cumPhi = c(np.cumsum(self.phi, axis=1))
        sp = rcass.spaces
        self.ns, self.na, self.nh = sp.n_agent, sp.n_act, sp.n_hidden
        self.nc = self.ns * self.na
        self.state = np.zeros(3, dtype=np.int64)
        self.b = np.full(self.nh, 1.0 / self.nh)
        self.init_info = None

    # ----------------------------------------------------------- init
    def initialize(self, rng, init="stationary", burn_in=10_000):
        if init == "stationary":
            if self.oracle is None:
                from .oracle import build_joint_chain

                self.oracle = build_joint_chain(self.env, self.rcass, self.policy)
            hg = self.oracle.hidden_gamma_law()
            idx = sample_index(np.cumsum(hg.ravel()), rng.random())
            x, g = divmod(idx, self.rcass.n_gamma)
            col = hg[:, g]
            self.b = col / col.sum()
        elif init == "burn-in":
            x = sample_index(np.cumsum(np.full(self.nh, 1.0 / self.nh)), rng.random())
            g = 0
            self.b = np.full(self.nh, 1.0 / self.nh)
            self.state[:] = (x, g, 0)
            if burn_in > 0:
                self._call(rng.random((burn_in, 3)), K.DO_BELIEF)
            x, g = int(self.state[0]), int(self.state[1])
        else:
            raise ConfigError(f"unknown init {init!r}; use 'stationary' or 'burn-in'")
        self.state[:] = (x, g, 0)
        self.init_info = (int(x), self.b.copy(), int(g))
        return self

    # --------------------------------------------------------- kernel
    def _call(self, uniforms, flags, Q=None, delta=None, sched=(1.0, 1.0, 1.0), gamma=0.0,
              tables=None, rec=None):
        ns, na, nc, nh = self.ns, self.na, self.nc, self.nh
        k = len(uniforms)
        if Q is None:
            Q = np.zeros((ns, na))
        if delta is None:
            delta = np.zeros(nc)
        if tables is None:
            tables = (np.zeros((ns, na)), np.zeros((ns, na, ns)), np.zeros((nc, nc)),
                      np.zeros((nc, nc)))
        if rec is None:
            rec = {}
        rec_int = rec.get("int", np.zeros((0, 5), dtype=np.int64))
        rec_reward = rec.get("reward", np.zeros(0))
        rec_belief = rec.get("belief", np.zeros((0, nh)))
        rec_terms = rec.get("terms", np.zeros((0, 5, nc)))
        diag = rec.get("diag", np.array([0.0, np.inf, -np.inf]))
        rbar, qk, W, PW = tables
        a0, n0, d2 = sched
        fail = self.kernel(
            self.cumT, self.T, self.E, self.cumE, self.R, self.upd, self.readout,
            self.phi, self.cumPhi, rbar, qk, W, PW, Q, delta, self.b, self.state,
            np.ascontiguousarray(uniforms), float(a0), float(n0), float(d2), float(gamma),
            int(flags), rec_int, rec_reward, rec_belief, rec_terms, diag,
        )
        if fail >= 0:
            raise FilteringDegeneracyError("belief filter met an impossible observation", fail)
        return diag

    def decomp_tables(self, gamma):
        from .oracle import build_joint_chain, poisson_basis

        if self.oracle is None:
            self.oracle = build_joint_chain(self.env, self.rcass, self.policy)
        o = self.oracle
        W = poisson_basis(o)
        return (np.ascontiguousarray(o.rbar), np.ascontiguousarray(o.q_kernel),
                np.ascontiguousarray(W), np.ascontiguousarray(o.psi @ W))

    # ------------------------------------------------------------ run
    def run(self, n_steps, rng, *, Q=None, schedule=None, gamma=0.9, learn=True,
            decompose=False, checkpoints=(), record_trajectory=False,
            record_beliefs=False, record_terms=False):
        """Advance ``n_steps`` steps from the current state.

        ``checkpoints`` lists step counts ``n`` (number of completed steps)
        at which ``Q_n`` and ``Delta(n)`` are copied out.
        """
        flags = K.DO_BELIEF
        if learn:
            flags |= K.DO_Q
        if decompose:
            flags |= K.DO_DECOMP
        if record_trajectory:
            flags |= K.REC_TRAJ
        if record_beliefs:
            flags |= K.REC_BELIEF
        if record_terms:
            if not decompose:
                raise ConfigError("record_terms requires decompose")
            flags |= K.REC_TERMS
        Q = np.zeros((self.ns, self.na)) if Q is None else np.array(Q, dtype=float)
        if Q.shape != (self.ns, self.na):
            raise ConfigError(f"Q0 shape {Q.shape} != {(self.ns, self.na)}")
        sched = (1.0, 1.0, 0.75) if schedule is None else schedule.kernel_params()
        tables = self.decomp_tables(gamma) if decompose else None
        delta = np.zeros(self.nc)
        out = RunRecord()
        diag = np.array([0.0, np.inf, -np.inf])
        ints, rewards, beliefs, terms = [], [], [], []
        cps = sorted({int(c) for c in checkpoints if 0 <= c <= n_steps})
        cp_iter = iter(cps)
        next_cp = next(cp_iter, None)
        done = 0
        while True:
            while next_cp is not None and next_cp == done:
                out.checkpoints.append(done)
                out.q_trace.append(Q.copy())
                out.delta_trace.append(delta.copy())
                next_cp = next(cp_iter, None)
            if done >= n_steps:
                break
            stop = n_steps if next_cp is None else next_cp
            k = min(stop - done, MAX_CHUNK)
            rec = {"diag": diag}
            if record_trajectory:
                rec["int"] = np.zeros((k, 5), dtype=np.int64)
                rec["reward"] = np.zeros(k)
                ints.append(rec["int"])
                rewards.append(rec["reward"])
            if record_beliefs:
                rec["belief"] = np.zeros((k, self.nh))
                beliefs.append(rec["belief"])
            if record_terms:
                rec["terms"] = np.zeros((k, 5, self.nc))
                terms.append(rec["terms"])
            self._call(rng.random((k, 3)), flags, Q=Q, delta=delta, sched=sched,
                       gamma=gamma, tables=tables, rec=rec)
            done += k
        out.q_final, out.delta_final = Q, delta
        out.identity_error, out.q_min, out.q_max = float(diag[0]), float(diag[1]), float(diag[2])
        out.n_steps = n_steps
        if record_trajectory:
            cat = np.concatenate(ints) if ints else np.zeros((0, 5), dtype=np.int64)
            out.trajectory = Trajectory(
                x=cat[:, 0], gamma=cat[:, 1], s=cat[:, 2], u=cat[:, 3], o_next=cat[:, 4],
                reward=np.concatenate(rewards) if rewards else np.zeros(0),
                beliefs=(np.concatenate(beliefs) if beliefs else np.zeros((0, self.nh)))
                if record_beliefs else None,
                init=self.init_info,
            )
        if record_terms:
            out.terms = np.concatenate(terms) if terms else np.zeros((0, 5, self.nc))
        return out

    def simulate(self, n_steps, rng, record_beliefs=True):
        rec = self.run(n_steps, rng, learn=False, record_trajectory=True,
                       record_beliefs=record_beliefs)
        return rec.trajectory
