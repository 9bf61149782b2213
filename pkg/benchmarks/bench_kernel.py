"""Throughput of the compiled step kernel against the pure-Python fallback.

    python benchmarks/bench_kernel.py [--steps N] [--preset NAME]

Both kernels run the same seeded trajectory, with and without the
decomposition terms, and the script checks that their final Q tables agree.
"""

import argparse
import time

import numpy as np

from nonmarkov_q import _backend
from nonmarkov_q.engine import Engine
from nonmarkov_q.oracle import build_joint_chain
from nonmarkov_q.presets import get_preset


def timed(preset, oracle, backend, steps, decompose):
    eng = Engine(preset.env, preset.rcass, preset.policy, oracle=oracle, backend=backend)
    rng = np.random.default_rng(0)
    eng.initialize(rng)
    t0 = time.perf_counter()
    rec = eng.run(steps, rng, Q=np.zeros(oracle.rbar.shape), schedule=preset.schedule,
                  gamma=preset.gamma, decompose=decompose, checkpoints=[0, steps],
                  record_trajectory=False)
    return time.perf_counter() - t0, rec.q_final


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--preset", default="hmm3-window2")
    args = ap.parse_args()
    p = get_preset(args.preset)
    o = build_joint_chain(p.env, p.rcass, p.policy)
    backends = sorted(_backend.KERNELS)
    print(f"preset {p.name}, {args.steps} steps, backends {backends}")
    print(f"{'backend':<8} {'decompose':<10} {'seconds':>9} {'steps/s':>12}")
    for decompose in (False, True):
        finals = {}
        for be in backends:
            sec, q = timed(p, o, be, args.steps, decompose)
            finals[be] = q
            print(f"{be:<8} {str(decompose):<10} {sec:9.3f} {args.steps / sec:12.0f}")
        if len(finals) == 2:
            gap = np.abs(finals["cython"] - finals["python"]).max()
            print(f"{'':<8} {'':<10} max |Q_cython - Q_python| = {gap:.2e}")


if __name__ == "__main__":
    main()
