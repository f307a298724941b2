"""Experiment runner: one algorithm over many seeded deployments.

Every seed fixes the worker layout, the dataset and its sharding, so all
algorithms run with the same seed see the same world.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import solvers
from .baselines import ParameterServer
from .gadmm import ChainADMM, RunConfig
from .netsim import Deployment, EnergyLedger, LinkBudget, account_round
from .quantizer import QuantizerError, make_policy

log = logging.getLogger(__name__)

ALGORITHMS = ("gadmm", "qgadmm", "sgadmm", "qsgadmm", "gd", "qgd")
CSV_HEADER = "iteration,round,loss,cum_bits,cum_energy_j,max_primal_res,max_dual_res"

# sub-stream tags for np.random.default_rng([seed, tag])
_DEPLOY, _DATA, _SHARD = 10, 11, 12


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "qgadmm"
    n_workers: int = 10
    rho: float = 24.0
    alpha: Optional[float] = None
    bits: Optional[str] = None
    quantize: Optional[bool] = None
    bandwidth: float = 2e6
    noise_density: float = 1e-6
    slot_time: float = 1e-3
    grid_side: float = 250.0
    power_formula: str = "paper"
    accounting: str = "experiment"
    seeds: list = field(default_factory=lambda: [0])
    max_iters: int = 2000
    target_loss: float = 1e-4
    target_rel: Optional[float] = None
    stop_at_target: bool = False
    tol: Optional[float] = None
    dataset: str = "synthetic"
    n_features: int = 6
    samples_per_worker: int = 50
    noise: float = 0.1
    condition: float = 10.0
    minibatch_size: int = 100
    inner_steps: int = 10
    inner_lr: float = 0.05
    step_size: Optional[float] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; pick one of {', '.join(ALGORITHMS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.n_workers < 2:
            raise ConfigError("n_workers must be >= 2")
        for name in ("rho", "bandwidth", "noise_density", "slot_time", "grid_side"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.power_formula not in ("paper", "standard"):
            raise ConfigError(f"power_formula must be paper or standard, got {self.power_formula!r}")
        if self.accounting not in ("experiment", "full"):
            raise ConfigError(f"accounting must be experiment or full, got {self.accounting!r}")
        try:
            make_policy(self.bit_policy())
        except (QuantizerError, ValueError):
            raise ConfigError(f"bad bit policy {self.bits!r}") from None

    @property
    def stochastic(self) -> bool:
        return self.algorithm in ("sgadmm", "qsgadmm")

    @property
    def decentralized(self) -> bool:
        return self.algorithm in ("gadmm", "qgadmm", "sgadmm", "qsgadmm")

    @property
    def quantized(self) -> bool:
        if self.quantize is not None:
            return self.quantize
        return self.algorithm in ("qgadmm", "qsgadmm", "qgd")

    def bit_policy(self) -> str:
        if self.bits is not None:
            return self.bits if ":" in str(self.bits) else f"fixed:{self.bits}"
        return "fixed:8" if self.stochastic else "fixed:2"

    def dual_damping(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.01 if self.stochastic else 1.0

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class MetricsRecord:
    iteration: int
    communication_round: int
    loss: float
    cumulative_bits: int
    cumulative_energy_j: float
    max_primal_residual: float
    max_dual_residual: float

    def csv_row(self) -> str:
        return ",".join([
            str(self.iteration), str(self.communication_round), repr(float(self.loss)),
            str(self.cumulative_bits), repr(float(self.cumulative_energy_j)),
            repr(float(self.max_primal_residual)), repr(float(self.max_dual_residual)),
        ])


@dataclass
class SeedSummary:
    seed: int
    algorithm: str
    iterations: int
    final_loss: float
    target: float
    censored: bool
    iterations_to_target: Optional[int] = None
    rounds_to_target: Optional[int] = None
    bits_to_target: Optional[int] = None
    energy_to_target: Optional[float] = None
    reference: Optional[float] = None


@dataclass
class SeedRun:
    records: list
    summary: SeedSummary

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for r in self.records:
            buf.write(r.csv_row() + "\n")
        return buf.getvalue()


# -- config parsing ----------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    ftype = str(_FIELDS[name].type)
    if raw.lower() in ("none", "") and "Optional" in ftype:
        return None
    try:
        if name == "seeds":
            return _parse_seeds(raw)
        if "bool" in ftype:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in ftype:
            return int(raw)
        if "float" in ftype:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def _parse_seeds(raw: str) -> list:
    """``"0,1,5"`` or a range ``"0-19"``."""
    seeds = []
    for part in raw.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    for key, val in overrides.items():
        if val is not None:
            values[key] = _coerce(key, val) if isinstance(val, str) else val
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text() if path else "", **overrides)


# -- experiment --------------------------------------------------------------

def build_world(config: ExperimentConfig, seed: int):
    """Deployment and per-worker objectives for one seed (independent of algorithm)."""
    N = config.n_workers
    deployment = Deployment.create(N, config.grid_side, seed=[seed, _DEPLOY])
    kind = "logistic" if config.stochastic else "quadratic"
    if config.dataset == "synthetic":
        m = N * config.samples_per_worker
        if kind == "logistic":
            X, y, _ = solvers.make_classification(m, config.n_features, seed=[seed, _DATA])
        else:
            X, y, _ = solvers.make_regression(
                m, config.n_features, seed=[seed, _DATA], noise=config.noise, condition=config.condition
            )
    else:
        X, y = solvers.load_csv(config.dataset)
    objectives = solvers.shard_data((X, y), N, [seed, _SHARD], kind=kind, minibatch_size=config.minibatch_size)
    return deployment, objectives


def _training_loss(objectives, thetas) -> float:
    total = sum(o.n_samples * o.value(t) for o, t in zip(objectives, thetas))
    return total / sum(o.n_samples for o in objectives)


def run_seed(config: ExperimentConfig, seed: int) -> SeedRun:
    deployment, objectives = build_world(config, seed)
    N = config.n_workers
    budget = LinkBudget(config.bandwidth, config.noise_density, config.slot_time, config.power_formula)

    if config.stochastic:
        _, reference = solvers.logistic_reference(objectives)
        f_star = None
    else:
        _, reference, _ = solvers.centralized_oracle(objectives, regularize=True)
        f_star = reference
    target = config.target_loss
    if config.target_rel is not None:
        target = (1.0 + config.target_rel) * reference

    if config.decentralized:
        chain_objs = [objectives[w] for w in deployment.chain_order]
        rc = RunConfig(
            rho=config.rho, alpha=config.dual_damping(), max_iters=config.max_iters,
            bit_policy=config.bit_policy(), quantize=config.quantized, seed=seed,
            accounting=config.accounting, tol=config.tol, inner_steps=config.inner_steps,
            inner_lr=config.inner_lr, minibatch_size=config.minibatch_size if config.stochastic else None,
        )
        algo = ChainADMM(chain_objs, rc, f_star=f_star)
        kind, per_iter = "decentralized", N

        def loss_of(step):
            if config.stochastic:
                return _training_loss(chain_objs, algo.thetas)
            return step.loss
    else:
        algo = ParameterServer(
            objectives, max_iters=config.max_iters, quantize=config.quantized,
            bit_policy=config.bit_policy(), seed=seed, step_size=config.step_size,
            accounting=config.accounting, f_star=f_star,
        )
        kind, per_iter = "ps", N + 1

        def loss_of(step):
            if config.stochastic:
                return _training_loss(objectives, [algo.state.global_theta] * N)
            return step.loss

    ledger = EnergyLedger()
    records = []
    hit = None
    for step in algo:
        ledger.add(account_round(step.transmissions, deployment, budget, kind, N))
        loss = loss_of(step)
        rec = MetricsRecord(
            step.iteration, step.iteration * per_iter, loss, ledger.cumulative_bits,
            ledger.cumulative_energy,
            step.residuals.max_primal if kind == "decentralized" else math.nan,
            step.residuals.max_dual if kind == "decentralized" else math.nan,
        )
        records.append(rec)
        if hit is None and loss <= target:
            hit = rec
            if config.stop_at_target:
                break

    last = records[-1]
    summary = SeedSummary(
        seed=seed, algorithm=config.algorithm, iterations=last.iteration, final_loss=last.loss,
        target=target, censored=hit is None, reference=reference,
    )
    if hit is not None:
        summary.iterations_to_target = hit.iteration
        summary.rounds_to_target = hit.communication_round
        summary.bits_to_target = hit.cumulative_bits
        summary.energy_to_target = hit.cumulative_energy_j
    else:
        log.info("seed %d: %s did not reach %.3g in %d iterations", seed, config.algorithm, target, last.iteration)
    return SeedRun(records, summary)


def run_experiment(config: ExperimentConfig) -> dict:
    """Run every seed; returns ``{seed: SeedRun}`` in seed order."""
    return {seed: run_seed(config, seed) for seed in config.seeds}


def energy_cdf(summaries) -> list:
    """Empirical CDF of energy-to-target as sorted ``(energy, quantile)`` pairs.

    Censored seeds count in the denominator but contribute no point, so the
    curve tops out below 1 when some runs never reached the target.
    """
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ValueError("need at least two seeds for a CDF")
    energies = sorted(s.energy_to_target for s in summaries if not s.censored)
    if not energies:
        raise ValueError("every run is censored")
    n = len(summaries)
    return [(e, (i + 1) / n) for i, e in enumerate(energies)]


def write_outputs(runs: dict, config: ExperimentConfig, out_dir) -> list:
    """One CSV per seed plus a merged JSON summary; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in sorted(runs):
        p = out / f"{config.algorithm}_seed{seed}.csv"
        p.write_text(runs[seed].to_csv())
        paths.append(p)
    p = out / f"{config.algorithm}_summary.json"
    payload = {
        "config": dataclasses.asdict(config),
        "seeds": [dataclasses.asdict(runs[s].summary) for s in sorted(runs)],
    }
    p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths


def read_summaries(path) -> list:
    payload = json.loads(Path(path).read_text())
    return [SeedSummary(**s) for s in payload["seeds"]]
