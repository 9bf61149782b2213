"""Command-line experiment runner.

    nonmarkov-q run <config.json> [--seeds N] [--out DIR] [--threads K]
    nonmarkov-q report <run-dir>

Exit codes: 0 success, 2 configuration error, 3 analysis rejection,
4 I/O error.  ``NONMARKOV_Q_OUT`` overrides the output directory unless
``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import decomp
from .agent import policy_from_dict, rcass_from_dict
from .embed import cme_benchmark
from .env import env_from_dict, load_env
from .errors import AnalysisRejection, ConfigError, NonMarkovQError
from .io import cell_names, read_csv, sha256_file, write_csv, write_json
from .oracle import build_joint_chain, fixed_point_qstar, oracle_dump
from .presets import GAMMA, SCHEDULE, get_preset
from .qlearn import QTable, StepSchedule, log_checkpoints, run_qlearning

log = logging.getLogger("nonmarkov_q")

CONFIG_VERSION = 1
ANALYSES = ("convergence", "decomposition", "delta_tail", "dependence_matrices", "cme_filter")
OUT_ENV = "NONMARKOV_Q_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_REJECT, EXIT_IO = 0, 2, 3, 4

_TOP_KEYS = {
    "version", "preset", "env", "rcass", "policy", "schedule", "gamma", "n_steps", "seeds",
    "analyses", "init", "burn_in", "q0", "output", "initial_law",
    "decomposition", "delta_tail", "dependence_matrices", "cme_filter",
}
_SECTION_KEYS = {
    "decomposition": {"n_steps"},
    "delta_tail": {"ns", "d2"},
    "dependence_matrices": {"horizon", "dual_path"},
    "cme_filter": {"m", "test_steps", "lam"},
}


@dataclass
class ExperimentConfig:
    name: str
    env: object
    rcass: object
    policy: object
    schedule: StepSchedule
    gamma: float
    n_steps: int
    seeds: list
    analyses: list
    init: str = "stationary"
    burn_in: int = 10_000
    q0: np.ndarray | None = None
    output: str | None = None
    initial_law: np.ndarray | None = None
    options: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)


def _int(d, key, path, minimum=0):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{path}.{key}: expected an integer >= {minimum}, got {v!r}")
    return v


def parse_config(data, base_dir=".", path="config"):
    """Validate a config mapping and resolve presets and file references."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}.version: expected {CONFIG_VERSION}, got {data.get('version')!r}")

    preset = None
    if "preset" in data:
        if "env" in data:
            raise ConfigError(f"{path}: give either preset or env, not both")
        preset = get_preset(data["preset"])
        env, rcass, policy = preset.env, preset.rcass, preset.policy
        name = preset.name
    elif "env" in data:
        e = data["env"]
        if isinstance(e, str):
            p = Path(base_dir) / e
            if not p.exists():
                raise ConfigError(f"{path}.env: file {str(p)!r} does not exist")
            env = load_env(p)
        else:
            env = env_from_dict(e, f"{path}.env")
        if "rcass" not in data:
            raise ConfigError(f"{path}.rcass: required with a custom env")
        rcass = rcass_from_dict(data["rcass"], env.spaces, f"{path}.rcass")
        if env.spaces.n_agent != rcass.spaces.n_agent:
            env = env.with_n_agent(rcass.spaces.n_agent)
        policy = None
        name = env.name
    else:
        raise ConfigError(f"{path}: one of preset or env is required")
    if "rcass" in data and preset is not None:
        rcass = rcass_from_dict(data["rcass"], env.spaces, f"{path}.rcass")
        env = env.with_n_agent(rcass.spaces.n_agent)
        policy = None
    if "policy" in data:
        policy = policy_from_dict(data["policy"], rcass.spaces.n_agent, rcass.spaces.n_act,
                                  f"{path}.policy")
    elif policy is None:
        policy = policy_from_dict({"type": "uniform"}, rcass.spaces.n_agent,
                                  rcass.spaces.n_act, f"{path}.policy")

    if "schedule" in data:
        if not isinstance(data["schedule"], dict):
            raise ConfigError(f"{path}.schedule: expected an object")
        schedule = StepSchedule.from_dict(data["schedule"], f"{path}.schedule")
    else:
        schedule = preset.schedule if preset is not None else SCHEDULE
    gamma = data.get("gamma", preset.gamma if preset is not None else GAMMA)
    if isinstance(gamma, bool) or not isinstance(gamma, (int, float)) or not 0 < gamma < 1:
        raise ConfigError(f"{path}.gamma: must lie in (0, 1), got {gamma!r}")

    n_steps = _int(data, "n_steps", path) if "n_steps" in data else 100_000
    seeds = data.get("seeds", 1)
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        if seeds < 1:
            raise ConfigError(f"{path}.seeds: need at least one seed")
        seeds = list(range(seeds))
    elif isinstance(seeds, list):
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                                for s in seeds):
            raise ConfigError(f"{path}.seeds: expected non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError(f"{path}.seeds: seeds must be distinct, got {seeds}")
    else:
        raise ConfigError(f"{path}.seeds: expected a count or a list")

    analyses = data.get("analyses", ["convergence"])
    if not isinstance(analyses, list) or not analyses:
        raise ConfigError(f"{path}.analyses: expected a non-empty list")
    bad = [a for a in analyses if a not in ANALYSES]
    if bad:
        raise ConfigError(f"{path}.analyses: unknown {bad}; choose from {list(ANALYSES)}")

    options = {}
    for sec, keys in _SECTION_KEYS.items():
        opts = data.get(sec, {})
        if not isinstance(opts, dict):
            raise ConfigError(f"{path}.{sec}: expected an object")
        unk = set(opts) - keys
        if unk:
            raise ConfigError(f"{path}.{sec}: unknown keys {sorted(unk)}")
        options[sec] = opts

    init = data.get("init", "stationary")
    if init not in ("stationary", "burn-in"):
        raise ConfigError(f"{path}.init: expected 'stationary' or 'burn-in'")
    burn_in = _int(data, "burn_in", path) if "burn_in" in data else 10_000

    q0 = None
    if "q0" in data:
        q0 = np.asarray(data["q0"], dtype=float)
        if q0.shape != (rcass.spaces.n_agent, rcass.spaces.n_act):
            raise ConfigError(f"{path}.q0: shape {q0.shape} does not match the agent")
        if not QTable(q0, gamma).in_range(0.0):
            raise ConfigError(f"{path}.q0: entries must lie in [0, 1/(1-gamma)]")

    initial_law = preset.initial_law if preset is not None else None
    if "initial_law" in data:
        initial_law = np.asarray(data["initial_law"], dtype=float)

    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError(f"{path}.output: expected a path string")

    return ExperimentConfig(name, env, rcass, policy, schedule, float(gamma), n_steps, seeds,
                            list(analyses), init, burn_in, q0, output, initial_law, options,
                            dict(data))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data, base_dir=path.parent, path=str(path))


# ------------------------------------------------------------------ runner


class Runner:
    def __init__(self, cfg, out_dir, threads=1):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.threads = max(1, int(threads))
        self.files = []
        self._oracle = None

    def _record(self, path):
        self.files.append(Path(path))
        return path

    def oracle(self):
        if self._oracle is None:
            c = self.cfg
            self._oracle = build_joint_chain(c.env, c.rcass, c.policy)
        return self._oracle

    def _q0(self):
        c = self.cfg
        if c.q0 is not None:
            return QTable(c.q0, c.gamma)
        return QTable.zeros(c.rcass.spaces.n_agent, c.rcass.spaces.n_act, c.gamma)

    def _map(self, fn, items):
        if self.threads == 1 or len(items) == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # -------------------------------------------------------- analyses
    def write_oracle(self):
        o = self.oracle()
        qstar = fixed_point_qstar(o, self.cfg.gamma)
        dump = oracle_dump(o, self.cfg.gamma, qstar=qstar)
        self._record(write_json(self.out / "oracle.json", dump))
        return qstar

    def convergence(self):
        c = self.cfg
        o = self.oracle()
        qstar = self.write_oracle()
        cps = log_checkpoints(c.n_steps)
        names = cell_names(c.rcass.spaces.n_agent, c.rcass.spaces.n_act)

        def one(seed):
            rng = np.random.default_rng(seed)
            res = run_qlearning(c.env, c.rcass, c.policy, c.schedule, self._q0(), c.n_steps, rng,
                                decompose=True, checkpoints=cps, oracle=o, init=c.init,
                                burn_in=c.burn_in, record_trajectory=False)
            return seed, res

        per_seed = []
        for seed, res in self._map(one, c.seeds):
            rows = [(n,) + tuple(q.ravel()) for n, q in zip(res.checkpoints, res.q_trace)]
            self._record(write_csv(self.out / f"qtrace_seed{seed}.csv", ["n"] + names, rows))
            rec = res.record
            per_seed.append({
                "seed": seed,
                "final_error": float(np.abs(res.q_final - qstar).max()),
                "identity_error": rec.identity_error,
                "q_min": rec.q_min, "q_max": rec.q_max,
            })
        errs = [p["final_error"] for p in per_seed]
        summary = {
            "n_steps": c.n_steps, "seeds": c.seeds,
            "median_final_error": float(np.median(errs)),
            "max_identity_error": max(p["identity_error"] for p in per_seed),
            "per_seed": per_seed,
        }
        self._record(write_json(self.out / "convergence.json", summary))
        return summary

    def decomposition(self):
        c = self.cfg
        o = self.oracle()
        n = int(c.options["decomposition"].get("n_steps", min(c.n_steps, 10_000)))
        cells = cell_names(c.rcass.spaces.n_agent, c.rcass.spaces.n_act, prefix="")
        header = ["n"] + [f"{t}{cell}" for t in ("F", "zeta", "M", "omega", "delta") for cell in cells]

        def one(seed):
            rng = np.random.default_rng(seed)
            return seed, run_qlearning(c.env, c.rcass, c.policy, c.schedule, self._q0(), n, rng,
                                       decompose=True, checkpoints=[n], oracle=o, init=c.init,
                                       burn_in=c.burn_in, record_trajectory=False,
                                       record_terms=True)

        per_seed = []
        for seed, res in self._map(one, c.seeds):
            terms = res.record.terms
            rows = [(k,) + tuple(terms[k].ravel()) for k in range(len(terms))]
            self._record(write_csv(self.out / f"decomp_seed{seed}.csv", header, rows))
            per_seed.append({
                "seed": seed,
                "identity_error": res.record.identity_error,
                "max_abs_zeta": float(np.abs(terms[:, 1]).max()) if len(terms) else 0.0,
                "max_abs_omega": float(np.abs(terms[:, 3]).max()) if len(terms) else 0.0,
                "delta_final_norm": float(np.abs(res.record.delta_final).max()),
            })
        self._record(write_json(self.out / "decomposition.json",
                                {"n_steps": n, "per_seed": per_seed}))
        return per_seed

    def delta_tail(self):
        c = self.cfg
        o = self.oracle()
        opts = c.options["delta_tail"]
        ns = sorted(int(v) for v in opts.get("ns", [1000, 10_000, 100_000]))
        d2 = float(opts.get("d2", c.schedule.d2))
        if len(c.seeds) < 200:
            raise AnalysisRejection(f"delta_tail needs >= 200 seeds, got {len(c.seeds)}")

        def one(seed):
            rng = np.random.default_rng(seed)
            res = run_qlearning(c.env, c.rcass, c.policy, c.schedule, self._q0(), ns[-1], rng,
                                decompose=True, checkpoints=ns, oracle=o, init=c.init,
                                burn_in=c.burn_in, record_trajectory=False)
            d = dict(zip(res.record.checkpoints, res.record.delta_trace))
            return seed, [float(np.abs(d[v]).max()) for v in ns]

        results = self._map(one, c.seeds)
        norms = np.array([r for _, r in results])
        rows = [(seed,) + tuple(r) for seed, r in results]
        self._record(write_csv(self.out / "delta_norms.csv",
                               ["seed"] + [f"n{v}" for v in ns], rows))
        rep = decomp.appendix_tail_check(norms, ns, d2, n_cells=c.rcass.spaces.n_cells)
        rep["median_delta"] = np.median(norms, axis=0).tolist()
        self._record(write_json(self.out / "tail_report.json", rep))
        return rep

    def dependence_matrices(self):
        c = self.cfg
        opts = c.options["dependence_matrices"]
        n = int(opts.get("horizon", 5))
        A = decomp.dependence_matrices(c.env, c.rcass, c.policy, n, initial_law=c.initial_law)
        out = {"horizon": n, "Phi": A.Phi.tolist(), "Psi": A.Psi.tolist(),
               "phi_norm": A.phi_norm, "psi_norm": A.psi_norm}
        if opts.get("dual_path", True):
            B = decomp.dependence_matrices_tables(c.env, c.rcass, c.policy, n,
                                                  initial_law=c.initial_law)
            out["dual_path_max_diff"] = float(max(np.abs(A.Phi - B.Phi).max(),
                                                  np.abs(A.Psi - B.Psi).max()))
        self._record(write_json(self.out / "dependence.json", out))
        return out

    def cme_filter(self):
        c = self.cfg
        opts = c.options["cme_filter"]
        m = int(opts.get("m", 10_000))
        steps = int(opts.get("test_steps", 1000))
        lam = opts.get("lam")
        seed = c.seeds[0]
        ops, ev = cme_benchmark(c.env, c.rcass, c.policy, m, np.random.default_rng(seed),
                                test_steps=steps, lam=lam)
        self._record(ops.save(self.out / "cme_operators.json"))
        self._record(ev.to_csv(self.out / "cme_eval.csv"))
        summary = {"m": m, "test_steps": steps, "seed": seed, "lam": ops.lam,
                   "mean_tv": ev.mean_tv, "argmax_agreement": ev.agreement}
        self._record(write_json(self.out / "cme.json", summary))
        return summary

    # -------------------------------------------------------------- run
    def run(self):
        c = self.cfg
        self._record(write_json(self.out / "config.json", c.source))
        status, message = "complete", None
        try:
            for name in ANALYSES:
                if name in c.analyses:
                    log.info("running %s", name)
                    getattr(self, name)()
        except AnalysisRejection as exc:
            status, message = "rejected", str(exc)
            raise
        except NonMarkovQError as exc:
            status, message = "failed", str(exc)
            raise
        finally:
            self.write_manifest(status, message)

    def write_manifest(self, status, message=None):
        files = {}
        for p in self.files:
            if p.exists():
                files[p.relative_to(self.out).as_posix()] = sha256_file(p)
        man = {"version": CONFIG_VERSION, "status": status, "analyses": self.cfg.analyses,
               "files": dict(sorted(files.items()))}
        if message:
            man["message"] = message
        write_json(self.out / "manifest.json", man)


def resolve_out_dir(cfg, cli_out, config_path):
    if cli_out:
        return Path(cli_out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg.output:
        return Path(cfg.output)
    return Path("runs") / Path(config_path).stem


# ------------------------------------------------------------------ report


def _plot(path, header, rows, files):
    files.append(write_csv(path, header, rows))


def report(run_dir):
    """Summarise a run directory from its files; returns the summary text.

    Numbers are recomputed from the CSVs rather than copied from the JSON
    summaries.
    """
    run_dir = Path(run_dir)
    man_path = run_dir / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"{man_path}: manifest missing")
    man = json.loads(man_path.read_text())
    bad = [f for f, h in man["files"].items()
           if not (run_dir / f).exists() or sha256_file(run_dir / f) != h]
    lines = [f"run: {run_dir}", f"status: {man['status']}"]
    if bad:
        lines.append(f"hash mismatch: {bad}")
    plots = []
    pdir = run_dir / "plots"

    traces = sorted(f for f in man["files"] if f.startswith("qtrace_seed"))
    if traces:
        qstar = np.asarray(json.loads((run_dir / "oracle.json").read_text())["qstar"]).ravel()
        finals = []
        for f in traces:
            _, arr = read_csv(run_dir / f)
            err = np.abs(arr[:, 1:] - qstar).max(axis=1) if len(arr) else np.zeros(0)
            seed = f[len("qtrace_seed"):-4]
            _plot(pdir / f"convergence_seed{seed}.csv", ["n", "sup_error"],
                  [(int(n), float(e)) for n, e in zip(arr[:, 0], err)], plots)
            if len(arr):
                finals.append(float(err[-1]))
        if finals:
            lines.append(f"convergence: median final ||Q_n - Q*|| = {float(np.median(finals))!r} "
                         f"over {len(finals)} seeds")

    if "delta_norms.csv" in man["files"]:
        header, arr = read_csv(run_dir / "delta_norms.csv")
        ns = [int(h[1:]) for h in header[1:]]
        med = np.median(arr[:, 1:], axis=0) if len(arr) else np.zeros(len(ns))
        _plot(pdir / "delta_median.csv", ["n", "median_delta_norm"],
              [(n, float(v)) for n, v in zip(ns, med)], plots)
        lines.append("delta: median ||Delta(n)|| " +
                     ", ".join(f"n={n}: {float(v)!r}" for n, v in zip(ns, med)))
        if len(arr):
            rep = decomp.appendix_tail_check(arr[:, 1:], ns, json.loads(
                (run_dir / "tail_report.json").read_text())["d2"], min_seeds=1)
            for entry in rep["per_n"]:
                _plot(pdir / f"tail_n{entry['n']}.csv", ["delta", "tail"],
                      list(zip(entry["deltas"], entry["tail"])), plots)
            if rep["pooled"]:
                lines.append(f"tail fit: c7_hat = {rep['pooled']['c7_hat']!r}, "
                             f"R^2 = {rep['pooled']['r2']!r}")

    if "cme_eval.csv" in man["files"]:
        _, arr = read_csv(run_dir / "cme_eval.csv")
        _plot(pdir / "cme_tv.csv", ["step", "tv_error"],
              [(int(r[0]), float(r[1])) for r in arr], plots)
        if len(arr):
            lines.append(f"cme filter: mean TV = {float(arr[:, 1].mean())!r}, "
                         f"argmax agreement = {float(arr[:, 2].mean())!r}")

    if "dependence.json" in man["files"]:
        dep = json.loads((run_dir / "dependence.json").read_text())
        lines.append(f"dependence: ||Phi||_2 = {dep['phi_norm']!r}, "
                     f"||Psi||_2 = {dep['psi_norm']!r}")

    decs = sorted(f for f in man["files"] if f.startswith("decomp_seed"))
    for f in decs:
        header, arr = read_csv(run_dir / f)
        zcols = [i for i, h in enumerate(header) if h.startswith("zeta")]
        dcols = [i for i, h in enumerate(header) if h.startswith("delta")]
        zmax = float(np.abs(arr[:, zcols]).max()) if len(arr) else 0.0
        lines.append(f"decomposition {f}: max |zeta| = {zmax!r}")
        _plot(pdir / f"delta_{f[len('decomp_'):]}", ["n", "delta_norm"],
              [(int(r[0]), float(np.abs(r[dcols]).max())) for r in arr], plots)

    text = "\n".join(lines) + "\n"
    (run_dir / "summary.txt").write_text(text)
    return text


# -------------------------------------------------------------------- main


def build_parser():
    ap = argparse.ArgumentParser(prog="nonmarkov-q", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the analyses of a config file")
    r.add_argument("config")
    r.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's")
    r.add_argument("--out", help="output directory")
    r.add_argument("--threads", type=int, default=1)
    p = sub.add_parser("report", help="summarise a run directory")
    p.add_argument("run_dir")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seeds is not None:
                if args.seeds < 1:
                    raise ConfigError("--seeds: need at least one seed")
                cfg.seeds = list(range(args.seeds))
                cfg.source["seeds"] = cfg.seeds
            out = resolve_out_dir(cfg, args.out, args.config)
            Runner(cfg, out, args.threads).run()
            print(out)
        else:
            sys.stdout.write(report(args.run_dir))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonMarkovQError as exc:
        print(f"analysis rejected: {exc}", file=sys.stderr)
        return EXIT_REJECT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
