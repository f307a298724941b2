"""Local objectives, penalized subproblem solvers and centralized oracles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import optimize
from scipy.special import expit, log_expit


class SolverError(RuntimeError):
    """A local solve failed; ``worker`` and ``residual`` are attached when known."""

    def __init__(self, message, worker=None, residual=None):
        super().__init__(message)
        self.worker = worker
        self.residual = residual

    def __str__(self):
        s = super().__str__()
        if self.worker is not None:
            s = f"worker {self.worker}: {s}"
        if self.residual is not None:
            s = f"{s} (residual norm {self.residual:.3e})"
        return s


class InconsistentOptimumError(SolverError):
    pass


class QuadraticObjective:
    """Least squares ``f(theta) = 0.5 * ||X theta - y||^2``."""

    def __init__(self, design, targets):
        X = np.atleast_2d(np.asarray(design, dtype=np.float64))
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"design has {X.shape[0]} rows but {y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite data")
        self.X = X
        self.y = y
        self.gram = X.T @ X
        self.Xty = X.T @ y
        self._factors = {}

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def value(self, theta) -> float:
        r = self.X @ theta - self.y
        return 0.5 * float(r @ r)

    def grad(self, theta) -> np.ndarray:
        return self.gram @ theta - self.Xty

    def hessian(self) -> np.ndarray:
        return self.gram

    def scaled(self, c: float) -> "QuadraticObjective":
        s = np.sqrt(c)
        return QuadraticObjective(s * self.X, s * self.y)

    def factor(self, n_anchors: int, rho: float):
        """Cholesky factor of ``X^T X + n_anchors * rho * I``, cached."""
        key = (n_anchors, rho)
        if key not in self._factors:
            A = self.gram + n_anchors * rho * np.eye(self.dim)
            try:
                self._factors[key] = (A, sla.cho_factor(A, lower=True, check_finite=False))
            except np.linalg.LinAlgError as e:
                raise SolverError("penalized system is singular") from e
        return self._factors[key]


class LogisticObjective:
    """Mean binary cross-entropy of a linear logistic model.

    ``minibatch_size`` only matters to :meth:`sampler`; :meth:`value` and
    :meth:`grad` always use the whole shard.
    """

    def __init__(self, design, labels, minibatch_size: int | None = None):
        X = np.atleast_2d(np.asarray(design, dtype=np.float64))
        y = np.asarray(labels, dtype=np.float64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("design/labels length mismatch")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite data")
        self.X = X
        self.y = y
        self.minibatch_size = minibatch_size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def value(self, theta) -> float:
        if self.n_samples == 0:
            return 0.0
        z = self.X @ theta
        # -[y log s(z) + (1-y) log s(-z)]
        return float(-np.mean(self.y * log_expit(z) + (1 - self.y) * log_expit(-z)))

    def grad(self, theta) -> np.ndarray:
        if self.n_samples == 0:
            return np.zeros(self.dim)
        z = self.X @ theta
        return self.X.T @ (expit(z) - self.y) / self.n_samples

    def subset(self, idx) -> "LogisticObjective":
        return LogisticObjective(self.X[idx], self.y[idx], self.minibatch_size)

    def sampler(self, rng: np.random.Generator) -> "MinibatchSampler":
        return MinibatchSampler(self, rng)


class MinibatchSampler:
    """Draws mini-batches without replacement, reshuffling at each epoch."""

    def __init__(self, objective: LogisticObjective, rng: np.random.Generator):
        self.objective = objective
        self.rng = rng
        self.size = min(objective.minibatch_size or objective.n_samples, objective.n_samples)
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> LogisticObjective:
        if self._pos + self.size > self._perm.shape[0]:
            self._perm = self.rng.permutation(self.objective.n_samples)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.size]
        self._pos += self.size
        return self.objective.subset(idx)


@dataclass
class PenalizedSubproblem:
    """``f(theta) + <g, theta> + (rho/2) * sum_j ||theta - z_j||^2``.

    ``dual_drift`` is ``g = lambda_right - lambda_left`` with absent duals
    taken as zero; constant terms of the augmented Lagrangian are dropped.
    """

    objective: object
    anchors: list
    dual_drift: np.ndarray
    rho: float
    _anchor_sum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= len(self.anchors) <= 2:
            raise ValueError("a chain subproblem has one or two anchors")
        self.anchors = [np.asarray(z, dtype=np.float64) for z in self.anchors]
        self.dual_drift = np.asarray(self.dual_drift, dtype=np.float64)
        self._anchor_sum = np.sum(self.anchors, axis=0)

    def value(self, theta) -> float:
        pen = sum(float((theta - z) @ (theta - z)) for z in self.anchors)
        return self.objective.value(theta) + float(self.dual_drift @ theta) + 0.5 * self.rho * pen

    def grad(self, theta) -> np.ndarray:
        a = len(self.anchors)
        return self.objective.grad(theta) + self.dual_drift + self.rho * (a * theta - self._anchor_sum)


def solve_quadratic(sub: PenalizedSubproblem) -> np.ndarray:
    """Exact minimizer of a penalized least-squares subproblem.

    Solves ``(X^T X + a rho I) theta = X^T y - g + rho * sum_j z_j`` by a
    cached Cholesky factorization and checks the relative residual.
    """
    obj = sub.objective
    rhs = obj.Xty - sub.dual_drift + sub.rho * sub._anchor_sum
    A, fac = obj.factor(len(sub.anchors), sub.rho)
    theta = sla.cho_solve(fac, rhs, check_finite=False)
    res = A @ theta - rhs
    rnorm, bnorm = np.linalg.norm(res), np.linalg.norm(rhs)
    if rnorm > 1e-10 * bnorm:
        # one step of iterative refinement before giving up
        theta = theta - sla.cho_solve(fac, res, check_finite=False)
        rnorm = np.linalg.norm(A @ theta - rhs)
        if rnorm > 1e-10 * bnorm:
            raise SolverError("penalized normal equations not solved to tolerance", residual=rnorm)
    return theta


def solve_iterative(sub: PenalizedSubproblem, steps: int, lr: float, theta0=None, tol: float = 0.0):
    """Gradient descent with step halving on the penalized objective.

    A trial step that increases the objective is rejected and ``lr`` halved,
    so the returned iterate never has a larger objective than ``theta0``.
    The warm start defaults to the mean of the anchors.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    theta = sub._anchor_sum / len(sub.anchors) if theta0 is None else np.array(theta0, dtype=np.float64)
    fval = sub.value(theta)
    for _ in range(steps):
        g = sub.grad(theta)
        if not np.all(np.isfinite(g)):
            raise SolverError("non-finite gradient")
        if tol and np.linalg.norm(g) <= tol:
            break
        for _ in range(60):
            trial = theta - lr * g
            ftrial = sub.value(trial)
            if ftrial <= fval:
                break
            lr *= 0.5
        else:
            break
        theta, fval = trial, ftrial
    return theta


def solve(sub: PenalizedSubproblem, theta0=None, steps: int = 10, lr: float = 0.01):
    if isinstance(sub.objective, QuadraticObjective):
        return solve_quadratic(sub)
    return solve_iterative(sub, steps, lr, theta0)


def centralized_oracle(objectives, regularize: bool = False):
    """Consensus optimum of ``sum_n f_n`` for quadratic objectives.

    Returns ``(theta_star, f_star, regularized)``. A singular pooled system is
    an error unless ``regularize`` is set, in which case ``1e-12 * I`` is added
    and ``regularized`` is reported True.
    """
    H = sum(o.gram for o in objectives)
    b = sum(o.Xty for o in objectives)
    d = H.shape[0]
    regularized = False
    try:
        fac = sla.cho_factor(H, lower=True)
        theta = sla.cho_solve(fac, b)
        if not np.all(np.isfinite(theta)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        if not regularize:
            raise SolverError("pooled normal equations are singular")
        H = H + 1e-12 * np.eye(d)
        fac = sla.cho_factor(H, lower=True)
        theta = sla.cho_solve(fac, b)
        regularized = True
    theta = theta - sla.cho_solve(fac, H @ theta - b)
    f_star = sum(o.value(theta) for o in objectives)
    return theta, f_star, regularized


def logistic_reference(objectives) -> tuple[np.ndarray, float]:
    """Minimizer and value of the pooled mean cross-entropy (L-BFGS)."""
    X = np.vstack([o.X for o in objectives])
    y = np.concatenate([o.y for o in objectives])
    pooled = LogisticObjective(X, y)
    res = optimize.minimize(
        pooled.value, np.zeros(pooled.dim), jac=pooled.grad, method="L-BFGS-B",
        options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10000},
    )
    return res.x, float(res.fun)


def dual_oracle(objectives, theta_star, atol: float = 1e-8):
    """Optimal multipliers from ``lambda_n = lambda_{n-1} - grad f_n(theta*)``.

    The recursion starts at ``lambda_0 = 0``; the last worker's stationarity
    ``lambda_{N-1} = grad f_N(theta*)`` must then hold to ``atol``.
    """
    lam = np.zeros_like(np.asarray(theta_star, dtype=np.float64))
    out = []
    for obj in objectives[:-1]:
        lam = lam - obj.grad(theta_star)
        out.append(lam.copy())
    gap = float(np.linalg.norm(lam - objectives[-1].grad(theta_star)))
    if gap > atol:
        raise InconsistentOptimumError("terminal dual feasibility violated", residual=gap)
    return out


def shard_indices(n_samples: int, n_workers: int, seed) -> list[np.ndarray]:
    if n_samples == 0:
        raise ValueError("empty dataset")
    if n_samples < n_workers:
        raise ValueError(f"{n_samples} samples cannot fill {n_workers} shards")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(s) for s in np.array_split(perm, n_workers)]


def shard_data(dataset, n_workers: int, seed, kind: str = "quadratic", minibatch_size=None):
    """Uniform random partition of ``(X, y)`` into per-worker objectives."""
    X, y = dataset
    parts = shard_indices(len(y), n_workers, seed)
    if kind == "quadratic":
        return [QuadraticObjective(X[p], y[p]) for p in parts]
    if kind == "logistic":
        return [LogisticObjective(X[p], y[p], minibatch_size) for p in parts]
    raise ValueError(f"unknown objective kind {kind!r}")


def make_regression(n_samples: int, d: int, seed, noise: float = 0.1, condition: float = 1.0):
    """Gaussian regression data with a planted model.

    Feature ``j`` is scaled by ``condition ** (-j / (d - 1))`` so the pooled
    Gram matrix has condition number roughly ``condition ** 2``.
    Returns ``(X, y, theta_true)``.
    """
    rng = np.random.default_rng(seed)
    scales = condition ** (-np.arange(d) / max(d - 1, 1))
    X = rng.standard_normal((n_samples, d)) * scales
    theta = rng.standard_normal(d)
    y = X @ theta + noise * rng.standard_normal(n_samples)
    return X, y, theta


def make_classification(n_samples: int, d: int, seed):
    """Labels drawn from a planted logistic model (non-separable)."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, d))
    w = rng.standard_normal(d)
    y = (rng.random(n_samples) < expit(X @ w)).astype(np.float64)
    return X, y, w


def load_csv(path, n_features: int | None = None):
    """Headerless CSV: feature columns then one target column."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    if width < 2 or (n_features is not None and width != n_features + 1):
        raise ValueError(f"{path}: expected {n_features} features plus a target, got {width} columns")
    data = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    return data[:, :-1], data[:, -1]
