"""Worker placement, topology construction and radio energy accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Deployment:
    positions: np.ndarray
    ps_index: Optional[int] = None
    chain_order: Optional[list] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if self.chain_order is not None:
            self.chain_order = [int(i) for i in self.chain_order]
            if sorted(self.chain_order) != list(range(len(self.positions))):
                raise ValueError("chain_order is not a permutation of the workers")

    @classmethod
    def create(cls, n, grid_side=250.0, seed=0):
        pos = place_workers(n, grid_side, seed)
        return cls(pos, choose_ps(pos), build_chain(pos))

    def distance(self, i, j) -> float:
        return float(np.hypot(*(self.positions[i] - self.positions[j])))

    def chain_distance(self, a, b) -> float:
        """Distance between chain positions ``a`` and ``b``."""
        return self.distance(self.chain_order[a], self.chain_order[b])

    def to_json(self) -> str:
        return json.dumps({
            "positions": self.positions.tolist(),
            "ps_index": self.ps_index,
            "chain_order": self.chain_order,
        })

    @classmethod
    def from_json(cls, text: str) -> "Deployment":
        obj = json.loads(text)
        return cls(obj["positions"], obj.get("ps_index"), obj.get("chain_order"))


@dataclass
class LinkBudget:
    """Radio parameters. Defaults are the 2 MHz linear-regression setting."""

    total_bandwidth: float = 2e6
    noise_density: float = 1e-6
    slot_time: float = 1e-3
    power_formula: str = "paper"

    def __post_init__(self):
        for name in ("total_bandwidth", "noise_density", "slot_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.power_formula not in ("paper", "standard"):
            raise ValueError(f"unknown power formula {self.power_formula!r}")

    def bandwidth(self, n_workers: int, kind: str) -> float:
        """Per-transmitter bandwidth; half the chain transmits at a time."""
        if kind == "decentralized":
            return 2 * self.total_bandwidth / n_workers
        if kind == "ps":
            return self.total_bandwidth / n_workers
        raise ValueError(f"unknown algorithm kind {kind!r}")


@dataclass
class EnergyLedger:
    cumulative_bits: int = 0
    cumulative_energy: float = 0.0
    uplink_energy: float = 0.0
    downlink_energy: float = 0.0
    history: list = field(default_factory=list)

    def add(self, delta: "EnergyLedger"):
        self.cumulative_bits += delta.cumulative_bits
        self.cumulative_energy += delta.cumulative_energy
        self.uplink_energy += delta.uplink_energy
        self.downlink_energy += delta.downlink_energy
        self.history.append((delta.cumulative_bits, delta.cumulative_energy))


def place_workers(n: int, grid_side: float = 250.0, seed=0) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two workers")
    return np.random.default_rng(seed).uniform(0.0, grid_side, size=(n, 2))


def choose_ps(positions) -> int:
    """Worker with the minimum summed distance to all others (lowest index on ties)."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < 2:
        raise ValueError("need at least two workers")
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    return int(np.argmin(dist.sum(axis=1)))


def build_chain(positions) -> list:
    """Greedy nearest-neighbor path from the worker closest to the origin corner."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < 2:
        raise ValueError("need at least two workers")
    start = int(np.argmin(np.linalg.norm(pos, axis=1)))
    order = [start]
    left = np.ones(len(pos), dtype=bool)
    left[start] = False
    while left.any():
        dist = np.linalg.norm(pos - pos[order[-1]], axis=1)
        dist[~left] = np.inf
        nxt = int(np.argmin(dist))
        order.append(nxt)
        left[nxt] = False
    return order


def path_length(positions, order) -> float:
    pos = np.asarray(positions, dtype=np.float64)[list(order)]
    return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())


def tx_power(bits, tau, distance, noise_density, bandwidth, formula="paper") -> float:
    """Shannon power needed to push ``bits`` within one slot over free space.

    ``paper``: ``tau * D^2 * N0 * B * (2^(rate/B) - 1)`` with ``rate = bits/tau``.
    ``standard`` drops the leading ``tau``.
    """
    if not (bandwidth > 0 and tau > 0):
        raise ValueError("bandwidth and slot time must be positive")
    rate = bits / tau
    p = distance**2 * noise_density * bandwidth * np.expm1(np.log(2.0) * rate / bandwidth)
    return float(tau * p if formula == "paper" else p)


def tx_energy(bits, tau, distance, noise_density, bandwidth, formula="paper") -> float:
    return tx_power(bits, tau, distance, noise_density, bandwidth, formula) * tau


def account_round(transmissions, deployment: Deployment, budget: LinkBudget, kind: str, n_workers: int):
    """Bits and joules of one iteration's transmissions.

    ``decentralized``: indices are chain positions; each broadcast is sized
    to the farther of the sender's receivers. ``ps``: uplink senders are
    worker ids paying over their distance to the PS; a downlink (sender
    ``None`` or the PS) is sized to the farthest worker.
    """
    B = budget.bandwidth(n_workers, kind)
    out = EnergyLedger()

    def energy(bits, dist):
        return tx_energy(bits, budget.slot_time, dist, budget.noise_density, B, budget.power_formula)

    for t in transmissions:
        out.cumulative_bits += int(t.bits)
        if kind == "decentralized":
            dist = max((deployment.chain_distance(t.sender, r) for r in t.receivers), default=0.0)
            e = energy(t.bits, dist)
            out.uplink_energy += e
        elif t.phase == "downlink":
            ps = deployment.ps_index
            dist = max(deployment.distance(ps, j) for j in range(len(deployment.positions)))
            e = energy(t.bits, dist)
            out.downlink_energy += e
        else:
            e = energy(t.bits, deployment.distance(t.sender, deployment.ps_index))
            out.uplink_energy += e
        out.cumulative_energy += e
    return out
