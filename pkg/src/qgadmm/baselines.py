"""Parameter-server baselines: distributed gradient descent and its quantized form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .gadmm import QUANT_STREAM, Residuals, StepResult, Transmission
from .quantizer import DifferenceEncoder, decode, full_precision_bits, payload_bits
from .solvers import LogisticObjective


@dataclass
class PsState:
    """Global model, step size and, for QGD, the PS's copy of each worker's
    last reconstructed gradient."""

    global_theta: np.ndarray
    step_size: float
    grad_hats: Optional[list] = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")


def curvature_bound(objective) -> np.ndarray:
    if isinstance(objective, LogisticObjective):
        m = max(objective.n_samples, 1)
        return 0.25 * objective.X.T @ objective.X / m
    return objective.hessian()


def power_iteration(A, iters: int = 1000, tol: float = 1e-12, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(v @ A @ v)
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return lam


def default_step_size(objectives) -> float:
    """``1/L`` for the averaged objective ``(1/N) sum_n f_n``."""
    H = sum(curvature_bound(o) for o in objectives) / len(objectives)
    return 1.0 / power_iteration(H)


def _descend(theta, grads, eta):
    total = np.zeros_like(theta)
    for g in grads:
        total = total + g
    return theta - (eta / len(grads)) * total


def gd_round(state: PsState, objectives):
    """One PS iteration: N full-precision uplinks, a step, one broadcast."""
    d = state.global_theta.shape[0]
    grads = [o.grad(state.global_theta) for o in objectives]
    new = PsState(_descend(state.global_theta, grads, state.step_size), state.step_size)
    up = [Transmission(n, (None,), full_precision_bits(d), None, "uplink") for n in range(len(objectives))]
    down = Transmission(None, tuple(range(len(objectives))), full_precision_bits(d), None, "downlink")
    return new, up + [down]


def qgd_round(state: PsState, objectives, encoders, accounting: str = "experiment"):
    """GD with each gradient sent as a quantized difference from its last reconstruction."""
    d = state.global_theta.shape[0]
    N = len(objectives)
    hats = state.grad_hats if state.grad_hats is not None else [np.zeros(d) for _ in range(N)]
    new_hats, sent = [], []
    for n, obj in enumerate(objectives):
        g = obj.grad(state.global_theta)
        msg, _, _ = encoders[n].encode(g, hats[n])
        new_hats.append(decode(msg, hats[n]))
        sent.append(Transmission(n, (None,), payload_bits(msg, accounting), msg, "uplink"))
    new = PsState(_descend(state.global_theta, new_hats, state.step_size), state.step_size, new_hats)
    sent.append(Transmission(None, tuple(range(N)), full_precision_bits(d), None, "downlink"))
    return new, sent


class ParameterServer:
    """Step-wise GD/QGD run sharing the iterator contract of the chain engine.

    Worker ``n`` owns ``objectives[n]``; the reported loss is the objective gap
    when ``f_star`` is given and the summed objective otherwise.
    """

    def __init__(self, objectives, max_iters=1000, quantize=False, bit_policy="fixed:2", seed=0,
                 step_size=None, accounting="experiment", f_star=None):
        self.objectives = list(objectives)
        self.max_iters = max_iters
        self.quantize = quantize
        self.accounting = accounting
        self.f_star = f_star
        d = self.objectives[0].dim
        eta = default_step_size(self.objectives) if step_size is None else step_size
        self.state = PsState(np.zeros(d), eta)
        self.encoders = [
            DifferenceEncoder(np.random.default_rng([seed, QUANT_STREAM, n]), bit_policy)
            for n in range(len(self.objectives))
        ]
        self.k = 0

    def run_round(self) -> StepResult:
        if self.quantize:
            self.state, sent = qgd_round(self.state, self.objectives, self.encoders, self.accounting)
        else:
            self.state, sent = gd_round(self.state, self.objectives)
        self.k += 1
        total = float(sum(o.value(self.state.global_theta) for o in self.objectives))
        loss = total if self.f_star is None else abs(total - self.f_star)
        return StepResult(self.k, Residuals([], {}), loss, sent)

    def __iter__(self) -> Iterator[StepResult]:
        while self.k < self.max_iters:
            yield self.run_round()
