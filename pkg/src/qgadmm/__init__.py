"""Quantized group ADMM over worker chains, with PS baselines and an energy simulator."""

from .gadmm import ChainADMM, RunConfig, WorkerState
from .baselines import ParameterServer
from .harness import ExperimentConfig, energy_cdf, run_experiment
from .netsim import Deployment, LinkBudget
from .quantizer import AdaptiveBits, DifferenceEncoder, FixedBits, QuantizedMessage, decode, encode

__all__ = [
    "AdaptiveBits", "ChainADMM", "Deployment", "DifferenceEncoder", "ExperimentConfig",
    "FixedBits", "LinkBudget", "ParameterServer", "QuantizedMessage", "RunConfig",
    "WorkerState", "decode", "encode", "energy_cdf", "run_experiment",
]
