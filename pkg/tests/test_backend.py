import os
import subprocess
import sys

import numpy as np
import pytest

from nonmarkov_q import _backend
from nonmarkov_q.engine import Engine

compiled = pytest.mark.skipif("cython" not in _backend.KERNELS, reason="extension not built")


def _run(p, o, backend, n=3000, seed=11):
    e = Engine(p.env, p.rcass, p.policy, oracle=o, backend=backend)
    rng = np.random.default_rng(seed)
    e.initialize(rng)
    return e.run(n, rng, Q=np.zeros(o.rbar.shape), schedule=p.schedule, gamma=p.gamma,
                 decompose=True, checkpoints=[0, 10, 100, n], record_trajectory=True,
                 record_beliefs=True, record_terms=True)


@compiled
@pytest.mark.parametrize("name", ["markov-consistent", "hmm2-window1", "hmm3-window2"])
def test_kernels_agree(presets, oracles, name):
    p, o = presets(name), oracles(name)
    a = _run(p, o, "cython")
    b = _run(p, o, "python")
    for f in ("x", "gamma", "s", "u", "o_next", "reward"):
        assert np.array_equal(getattr(a.trajectory, f), getattr(b.trajectory, f))
    assert np.abs(a.trajectory.beliefs - b.trajectory.beliefs).max() <= 1e-14
    assert np.abs(a.terms - b.terms).max() <= 1e-13
    for qa, qb in zip(a.q_trace, b.q_trace):
        assert np.abs(qa - qb).max() <= 1e-13
    assert np.abs(a.delta_final - b.delta_final).max() <= 1e-14


def test_env_var_forces_fallback():
    code = "from nonmarkov_q import _backend; print(_backend.BACKEND)"
    env = dict(os.environ, NONMARKOV_Q_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
    env["NONMARKOV_Q_BACKEND"] = "fortran"
    bad = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert bad.returncode != 0 and "unavailable" in bad.stderr
