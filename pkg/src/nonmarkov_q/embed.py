"""Conditional mean embeddings with explicit finite feature maps.

Covariances are plain matrices over feature coordinates, so the conditional
operator is a ridge solve rather than a Gram-matrix computation.  The filter
keeps an embedding of the hidden-state law and advances it with two
operators fitted from labelled transitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .env import belief_update
from .errors import AnalysisRejection, ConfigError
from .io import atomic_write_text, write_csv


@dataclass(frozen=True)
class FeatureMap:
    """``kind="onehot"`` over ``dim`` symbols, or Gaussian ``"radial"`` features.

    Radial features evaluate ``exp(-|x - l|^2 / (2 sigma^2))`` at each
    landmark ``l``.
    """

    kind: str
    dim: int
    sigma: float = 1.0
    landmarks: tuple = ()

    def __post_init__(self):
        if self.kind == "onehot":
            if self.dim < 1:
                raise ConfigError("one-hot feature map needs dim >= 1")
        elif self.kind == "radial":
            if not self.sigma > 0:
                raise ConfigError(f"radial bandwidth must be positive, got {self.sigma}")
            if len(self.landmarks) != self.dim:
                raise ConfigError("radial feature map needs one landmark per dimension")
        else:
            raise ConfigError(f"unknown feature map {self.kind!r}")

    @classmethod
    def onehot(cls, n):
        return cls("onehot", int(n))

    @classmethod
    def radial(cls, landmarks, sigma):
        lm = tuple(tuple(np.atleast_1d(np.asarray(p, dtype=float)).tolist()) for p in landmarks)
        return cls("radial", len(lm), float(sigma), lm)

    def __call__(self, x):
        """Feature rows for a sequence of inputs (shape ``(m, dim)``)."""
        if self.kind == "onehot":
            idx = np.asarray(x, dtype=np.int64).ravel()
            if idx.size and (idx.min() < 0 or idx.max() >= self.dim):
                raise ConfigError(f"symbol outside [0, {self.dim})")
            out = np.zeros((idx.size, self.dim))
            out[np.arange(idx.size), idx] = 1.0
            return out
        pts = np.asarray(x, dtype=float)
        lm = np.asarray(self.landmarks)
        if pts.ndim == 1:
            pts = pts[:, None]
        d2 = ((pts[:, None, :] - lm[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2 * self.sigma**2))

    def to_dict(self):
        d = {"kind": self.kind, "dim": self.dim}
        if self.kind == "radial":
            d.update(sigma=self.sigma, landmarks=[list(p) for p in self.landmarks])
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") == "radial":
            return cls.radial(d["landmarks"], d["sigma"])
        return cls.onehot(d["dim"])


@dataclass
class CrossCovariance:
    C_XX: np.ndarray
    C_YX: np.ndarray
    mu_X: np.ndarray
    mu_Y: np.ndarray
    m: int
    centered: bool = True


def fit_cross_covariance(fx, fy, centered=True):
    """Empirical (cross-)covariances of paired feature rows.

    With ``centered=False`` the uncentered second moments are returned.
    """
    fx = np.atleast_2d(np.asarray(fx, dtype=float))
    fy = np.atleast_2d(np.asarray(fy, dtype=float))
    m = fx.shape[0]
    if m == 0:
        raise AnalysisRejection("cannot estimate covariances from an empty sample")
    if fy.shape[0] != m:
        raise ConfigError("feature samples must be paired")
    mu_x, mu_y = fx.mean(0), fy.mean(0)
    if centered:
        cx, cy = fx - mu_x, fy - mu_y
    else:
        cx, cy = fx, fy
    C_XX = cx.T @ cx / m
    C_XX = 0.5 * (C_XX + C_XX.T)
    return CrossCovariance(C_XX, cy.T @ cx / m, mu_x, mu_y, m, centered)


def default_ridge(C_XX):
    dim = C_XX.shape[0]
    return 1e-3 * float(np.trace(C_XX)) / dim


@dataclass
class CmeOperator:
    """``matrix = C_YX (C_XX + lam I)^-1``.

    When fitted from centred statistics the conditional mean of ``Y`` given
    ``x`` is ``mu_out + matrix (phi(x) - mu_in)``; otherwise ``matrix phi(x)``.
    """

    matrix: np.ndarray
    lam: float
    m: int
    mu_in: np.ndarray | None = None
    mu_out: np.ndarray | None = None

    def conditional_mean(self, fx):
        fx = np.asarray(fx, dtype=float)
        if self.mu_in is None:
            return fx @ self.matrix.T
        return self.mu_out + (fx - self.mu_in) @ self.matrix.T

    def to_dict(self):
        d = {"matrix": self.matrix.tolist(), "lam": self.lam, "m": self.m}
        if self.mu_in is not None:
            d.update(mu_in=self.mu_in.tolist(), mu_out=self.mu_out.tolist())
        return d

    @classmethod
    def from_dict(cls, d):
        mu_in = np.asarray(d["mu_in"]) if "mu_in" in d else None
        mu_out = np.asarray(d["mu_out"]) if "mu_out" in d else None
        return cls(np.asarray(d["matrix"], dtype=float), float(d["lam"]), int(d["m"]), mu_in, mu_out)


def _ridge_solve(C_YX, C_XX, lam):
    A = C_XX + lam * np.eye(C_XX.shape[0])
    try:
        cond = np.linalg.cond(A)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e15:
        raise AnalysisRejection(
            f"regularized covariance is singular (cond={cond:.3g}); increase the ridge"
        )
    # X A = C_YX  <=>  A^T X^T = C_YX^T, and A is symmetric
    return np.ascontiguousarray(np.linalg.solve(A, C_YX.T).T)


def conditional_operator(C_YX, C_XX, lam=None, m=0, cov=None):
    """Ridge-regularised conditional operator.

    ``lam=None`` picks ``1e-3 * trace(C_XX) / dim``.  Passing the
    :class:`CrossCovariance` as ``cov`` keeps its means for centred use.
    """
    if lam is None:
        lam = default_ridge(C_XX)
    if lam < 0:
        raise ConfigError("ridge must be nonnegative")
    mat = _ridge_solve(np.asarray(C_YX, float), np.asarray(C_XX, float), lam)
    if cov is not None and cov.centered:
        return CmeOperator(mat, lam, cov.m, cov.mu_X, cov.mu_Y)
    return CmeOperator(mat, lam, m if cov is None else cov.m)


# ------------------------------------------------------------------ filter


@dataclass
class FilterOperators:
    """``mu_{n+1} = T1 mu_n + T2 phi(o_{n+1})`` with one-hot state features."""

    T1: np.ndarray
    T2: np.ndarray
    lam: float
    m: int
    state_map: FeatureMap
    obs_map: FeatureMap

    def to_dict(self):
        return {"T1": self.T1.tolist(), "T2": self.T2.tolist(), "lam": self.lam, "m": self.m,
                "state_map": self.state_map.to_dict(), "obs_map": self.obs_map.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["T1"], float), np.asarray(d["T2"], float), float(d["lam"]),
                   int(d["m"]), FeatureMap.from_dict(d["state_map"]),
                   FeatureMap.from_dict(d["obs_map"]))

    def save(self, path):
        return atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _sparsest_split(T1, T2):
    # Both one-hot blocks sum to one, so (T1 - v 1^T, T2 + v 1^T) predicts
    # identically on the simplex.  Pick v per output row minimising the L1
    # size of the pair: the median of {T1[y, :], -T2[y, :]}.
    v = np.median(np.hstack([T1, -T2]), axis=1)
    return T1 - v[:, None], T2 + v[:, None]


def fit_filter_operators(s_prev, o_next, s_next, n_states, obs_map, lam=None):
    """Fit ``(T1, T2)`` by uncentred ridge regression of ``phi(s_{n+1})``.

    ``s_prev``/``s_next`` are state labels (one-hot encoded), ``o_next`` is
    passed through ``obs_map`` (a :class:`FeatureMap`, or an int for a
    one-hot alphabet of that size).
    """
    if isinstance(obs_map, (int, np.integer)):
        obs_map = FeatureMap.onehot(obs_map)
    smap = FeatureMap.onehot(n_states)
    fs, fo, fy = smap(s_prev), obs_map(o_next), smap(s_next)
    m = fs.shape[0]
    if m == 0 or fo.shape[0] != m or fy.shape[0] != m:
        raise AnalysisRejection("training triples are empty or unpaired")
    Z = np.hstack([fs, fo])
    cov = fit_cross_covariance(Z, fy, centered=False)
    if lam is None:
        lam = default_ridge(cov.C_XX)
    if lam == 0 and np.linalg.matrix_rank(cov.C_XX) < Z.shape[1]:
        raise AnalysisRejection("design matrix is rank deficient; use a positive ridge")
    theta = _ridge_solve(cov.C_YX, cov.C_XX, lam)
    T1, T2 = theta[:, :n_states], theta[:, n_states:]
    if obs_map.kind == "onehot":
        T1, T2 = _sparsest_split(T1, T2)
    return FilterOperators(T1, T2, lam, m, smap, obs_map)


def project_simplex(mu):
    """Clip negatives and renormalise; a zero vector maps to uniform."""
    p = np.clip(np.asarray(mu, dtype=float), 0.0, None)
    tot = p.sum()
    if not tot > 0:
        return np.full(p.shape, 1.0 / p.size)
    return p / tot


def filter_update(T1, T2, mu_prev, fo, project=True):
    mu = T1 @ np.asarray(mu_prev, dtype=float) + T2 @ np.asarray(fo, dtype=float)
    return project_simplex(mu) if project else mu


def infer_state(mu):
    """Argmax after projection; ``np.argmax`` already returns the lowest tied index."""
    return int(np.argmax(project_simplex(mu)))


def run_filter(ops, observations, mu0):
    """Filtered (projected) embeddings after each observation."""
    fo = ops.obs_map(observations)
    out = np.empty((len(fo), ops.T1.shape[0]))
    mu = project_simplex(mu0)
    for k in range(len(fo)):
        mu = filter_update(ops.T1, ops.T2, mu, fo[k])
        out[k] = mu
    return out


def exact_beliefs(env, actions, observations, b0):
    out = np.empty((len(observations), env.spaces.n_hidden))
    b = np.asarray(b0, dtype=float)
    for k, (u, o) in enumerate(zip(actions, observations)):
        b = belief_update(env, b, int(u), int(o), step=k)
        out[k] = b
    return out


@dataclass
class FilterEvaluation:
    tv: np.ndarray
    agree: np.ndarray

    @property
    def mean_tv(self):
        return float(self.tv.mean()) if self.tv.size else 0.0

    @property
    def agreement(self):
        return float(self.agree.mean()) if self.agree.size else 1.0

    def to_csv(self, path):
        rows = [(k, float(t), int(a)) for k, (t, a) in enumerate(zip(self.tv, self.agree))]
        return write_csv(path, ["step", "tv_error", "argmax_agree"], rows)


def evaluate_filter(ops, env, trajectory, mu0=None):
    """Compare the embedding filter to the exact belief along a trajectory.

    Both filters start from the trajectory's initial belief and consume the
    same observations.
    """
    b0 = trajectory.init[1] if mu0 is None else mu0
    est = run_filter(ops, trajectory.o_next, b0)
    exact = exact_beliefs(env, trajectory.u, trajectory.o_next, b0)
    tv = 0.5 * np.abs(est - exact).sum(axis=1)
    agree = np.array([infer_state(e) == int(np.argmax(b)) for e, b in zip(est, exact)], dtype=bool)
    return FilterEvaluation(tv, agree)


def cme_benchmark(env, rcass, policy, m, rng, test_steps=1000, lam=None):
    """Train on ``m`` labelled hidden-state transitions, test on a fresh trajectory."""
    from .agent import simulate

    train = simulate(env, rcass, policy, m + 1, rng, record_beliefs=False)
    x = train.x
    # the state after step n is x[n+1]; the last step supplies no label
    ops = fit_filter_operators(x[:-1], train.o_next[:-1], x[1:], env.spaces.n_hidden,
                               env.spaces.n_obs, lam=lam)
    test = simulate(env, rcass, policy, test_steps, rng, record_beliefs=False)
    return ops, evaluate_filter(ops, env, test)
