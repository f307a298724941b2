"""Group ADMM over a chain of workers, with optional quantized exchange.

Workers sit at chain positions ``0 .. N-1``. Even positions are *heads*, odd
positions are *tails*. Each iteration updates all heads against the tails'
last reconstructed models, broadcasts the heads, updates all tails against the
fresh head models, broadcasts the tails, and finally updates every link's dual
variable at both of its endpoints.

With ``quantize=False`` every broadcast is full precision and the iteration
is plain GADMM; with ``quantize=True`` it is Q-GADMM. A dual damping
``alpha < 1`` together with ``minibatch_size`` gives the stochastic variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .quantizer import DifferenceEncoder, QuantizedMessage, decode, full_precision_bits, payload_bits
from .solvers import LogisticObjective, PenalizedSubproblem, SolverError, solve

# sub-stream tags for np.random.default_rng([seed, tag, worker])
QUANT_STREAM = 0
BATCH_STREAM = 1


@dataclass
class WorkerState:
    """What one worker knows.

    ``left_hat``/``right_hat`` are this worker's reconstructions of its
    neighbors' models and ``lambda_left``/``lambda_right`` the duals of its two
    links. They are None at the chain ends.
    """

    index: int
    theta: np.ndarray
    self_hat: np.ndarray
    left_hat: Optional[np.ndarray] = None
    right_hat: Optional[np.ndarray] = None
    lambda_left: Optional[np.ndarray] = None
    lambda_right: Optional[np.ndarray] = None

    @property
    def role(self) -> str:
        return "head" if self.index % 2 == 0 else "tail"

    @property
    def neighbor_hats(self) -> list:
        return [h for h in (self.left_hat, self.right_hat) if h is not None]

    def copy(self) -> "WorkerState":
        c = lambda v: None if v is None else v.copy()
        return WorkerState(
            self.index, self.theta.copy(), self.self_hat.copy(), c(self.left_hat),
            c(self.right_hat), c(self.lambda_left), c(self.lambda_right),
        )


@dataclass
class RunConfig:
    rho: float
    alpha: float = 1.0
    max_iters: int = 1000
    bit_policy: object = "fixed:2"
    quantize: bool = True
    seed: int = 0
    accounting: str = "experiment"
    tol: Optional[float] = None
    inner_steps: int = 10
    inner_lr: float = 0.01
    minibatch_size: Optional[int] = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class Residuals:
    primal: list
    dual: dict

    @property
    def max_primal(self) -> float:
        return max((float(np.linalg.norm(r)) for r in self.primal), default=0.0)

    @property
    def max_dual(self) -> float:
        return max((float(np.linalg.norm(s)) for s in self.dual.values()), default=0.0)


@dataclass
class Transmission:
    """One broadcast: ``sender`` reaches every index in ``receivers``."""

    sender: int
    receivers: tuple
    bits: int
    message: Optional[QuantizedMessage] = None
    phase: str = ""


@dataclass
class StepResult:
    iteration: int
    residuals: Residuals
    loss: float
    transmissions: list = field(default_factory=list)


def local_update(worker: WorkerState, objective, rho: float, solver: Callable = solve, **solver_kw):
    """Minimize the worker's penalized local problem against its cached neighbors.

    Absent neighbors contribute neither a penalty nor a dual term.
    """
    drift = np.zeros_like(worker.theta)
    if worker.lambda_right is not None:
        drift = drift + worker.lambda_right
    if worker.lambda_left is not None:
        drift = drift - worker.lambda_left
    sub = PenalizedSubproblem(objective, worker.neighbor_hats, drift, rho)
    try:
        return solver(sub, theta0=worker.theta, **solver_kw)
    except SolverError as e:
        e.worker = worker.index
        raise


def head_update(worker: WorkerState, objective, rho: float, **kw) -> np.ndarray:
    if worker.role != "head":
        raise ValueError(f"worker {worker.index} is a tail")
    return local_update(worker, objective, rho, **kw)


def tail_update(worker: WorkerState, objective, rho: float, **kw) -> np.ndarray:
    if worker.role != "tail":
        raise ValueError(f"worker {worker.index} is a head")
    return local_update(worker, objective, rho, **kw)


def dual_update(lam, self_hat, right_hat, rho: float, alpha: float = 1.0) -> np.ndarray:
    """``lambda + alpha * rho * (self_hat - right_hat)``.

    Both link endpoints call this with the same arguments in the same order,
    so they agree bit for bit.
    """
    return lam + alpha * rho * (self_hat - right_hat)


def primal_residuals(states) -> list:
    return [states[n].theta - states[n + 1].theta for n in range(len(states) - 1)]


def dual_residuals(states, prev_hats, rho: float) -> dict:
    """Per-head change of the neighbors' reconstructions, scaled by ``rho``.

    ``prev_hats[n]`` is worker ``n``'s reconstruction one round earlier.
    """
    N = len(states)
    out = {}
    for n in range(0, N, 2):
        s = np.zeros_like(states[n].theta)
        for m in (n - 1, n + 1):
            if 0 <= m < N:
                s = s + rho * (states[m].self_hat - prev_hats[m])
        out[n] = s
    return out


def lyapunov(states, theta_star, lambda_star, rho: float) -> float:
    """Distance of duals and tail models to a saddle point.

    ``(1/rho) sum_n ||lambda_n - lambda*_n||^2`` plus ``rho ||theta_t - theta*||^2``
    for every (head, adjacent tail) pair, so an interior tail counts twice.
    """
    N = len(states)
    v = 0.0
    for n in range(N - 1):
        diff = states[n].lambda_right - lambda_star[n]
        v += float(diff @ diff) / rho
    for h in range(0, N, 2):
        for t in (h - 1, h + 1):
            if 0 <= t < N:
                diff = states[t].theta - theta_star
                v += rho * float(diff @ diff)
    return v


def total_objective(states, objectives) -> float:
    return float(sum(o.value(s.theta) for s, o in zip(states, objectives)))


def objective_gap(states, objectives, f_star: float) -> float:
    return abs(total_objective(states, objectives) - f_star)


class ChainADMM:
    """Step-wise (Q-)GADMM engine.

    Args:
        objectives: local objective per chain position.
        config: run settings.
        f_star: optimal value; when given, the reported loss is the objective
            gap, otherwise the summed objective.
        schedule: optional ``f(indices) -> indices`` reordering the workers of
            a group before they execute, for testing order independence.
    """

    def __init__(self, objectives, config: RunConfig, f_star: Optional[float] = None, schedule=None):
        if len(objectives) < 2:
            raise ValueError("a chain needs at least two workers")
        self.objectives = list(objectives)
        self.config = config
        self.f_star = f_star
        self.schedule = schedule or (lambda idx: idx)
        self.N = len(objectives)
        self.d = objectives[0].dim
        self.k = 0
        z = np.zeros(self.d)
        self.states = [
            WorkerState(
                n, z.copy(), z.copy(),
                left_hat=z.copy() if n > 0 else None,
                right_hat=z.copy() if n < self.N - 1 else None,
                lambda_left=z.copy() if n > 0 else None,
                lambda_right=z.copy() if n < self.N - 1 else None,
            )
            for n in range(self.N)
        ]
        self.encoders = [
            DifferenceEncoder(np.random.default_rng([config.seed, QUANT_STREAM, n]), config.bit_policy)
            for n in range(self.N)
        ]
        self.samplers = None
        if config.minibatch_size:
            self.samplers = []
            for n, obj in enumerate(self.objectives):
                if not isinstance(obj, LogisticObjective):
                    raise ValueError("mini-batching needs logistic objectives")
                obj = LogisticObjective(obj.X, obj.y, config.minibatch_size)
                self.samplers.append(obj.sampler(np.random.default_rng([config.seed, BATCH_STREAM, n])))
        self.heads = list(range(0, self.N, 2))
        self.tails = list(range(1, self.N, 2))

    def set_state(self, thetas, lambdas):
        """Place every worker at ``thetas`` with link duals ``lambdas``, exchanged exactly."""
        for n, s in enumerate(self.states):
            s.theta = np.array(thetas[n], dtype=np.float64)
            s.self_hat = s.theta.copy()
        for n, s in enumerate(self.states):
            if s.left_hat is not None:
                s.left_hat = self.states[n - 1].theta.copy()
                s.lambda_left = np.array(lambdas[n - 1], dtype=np.float64)
            if s.right_hat is not None:
                s.right_hat = self.states[n + 1].theta.copy()
                s.lambda_right = np.array(lambdas[n], dtype=np.float64)

    def _solve(self, n):
        w = self.states[n]
        obj = self.samplers[n].next() if self.samplers else self.objectives[n]
        return local_update(w, obj, self.config.rho, steps=self.config.inner_steps, lr=self.config.inner_lr)

    def _broadcast(self, n, phase) -> Transmission:
        w = self.states[n]
        receivers = tuple(m for m in (n - 1, n + 1) if 0 <= m < self.N)
        if self.config.quantize:
            msg, w.self_hat, _ = self.encoders[n].encode(w.theta, w.self_hat)
            bits = payload_bits(msg, self.config.accounting)
        else:
            msg = None
            w.self_hat = w.theta.copy()
            bits = full_precision_bits(self.d)
        for m in receivers:
            r = self.states[m]
            if m == n - 1:
                r.right_hat = w.theta.copy() if msg is None else decode(msg, r.right_hat)
            else:
                r.left_hat = w.theta.copy() if msg is None else decode(msg, r.left_hat)
        return Transmission(n, receivers, bits, msg, phase)

    def _group(self, members, phase):
        order = list(self.schedule(list(members)))
        new = {n: self._solve(n) for n in order}
        for n in order:
            self.states[n].theta = new[n]
        return [self._broadcast(n, phase) for n in sorted(order)]

    def run_round(self) -> StepResult:
        cfg = self.config
        prev_hats = [s.self_hat.copy() for s in self.states]
        sent = self._group(self.heads, "head")
        sent += self._group(self.tails, "tail")
        for n in range(self.N - 1):
            left, right = self.states[n], self.states[n + 1]
            left.lambda_right = dual_update(left.lambda_right, left.self_hat, left.right_hat, cfg.rho, cfg.alpha)
            right.lambda_left = dual_update(right.lambda_left, right.left_hat, right.self_hat, cfg.rho, cfg.alpha)
        self.k += 1
        res = Residuals(primal_residuals(self.states), dual_residuals(self.states, prev_hats, cfg.rho))
        if self.f_star is None:
            loss = total_objective(self.states, self.objectives)
        else:
            loss = objective_gap(self.states, self.objectives, self.f_star)
        return StepResult(self.k, res, loss, sent)

    def __iter__(self) -> Iterator[StepResult]:
        while self.k < self.config.max_iters:
            step = self.run_round()
            yield step
            tol = self.config.tol
            if tol is not None and step.residuals.max_primal < tol and step.residuals.max_dual < tol:
                return

    @property
    def thetas(self) -> np.ndarray:
        return np.array([s.theta for s in self.states])

    @property
    def lambdas(self) -> list:
        return [s.lambda_right for s in self.states[:-1]]
