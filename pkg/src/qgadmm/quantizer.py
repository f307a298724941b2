"""Stochastic quantization of model differences.

A worker never sends its model directly. It sends the difference between the
current model and the last model its neighbors reconstructed, rounded onto a
uniform grid of ``2**bits`` levels spanning ``[-R, R]`` around that previous
reconstruction. Rounding is randomized so that the reconstruction is unbiased.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field

import numpy as np

RANGE_BITS = 32
BITWIDTH_BITS = 8
FLAG_BITS = 1
FLOAT_BITS = 32

# levels must stay exactly representable in float64 and int64
MAX_BITS = 52

_EPS = float(np.finfo(np.float64).eps)
_HEADER = struct.Struct("<BBf")
_ZERO_DIFF = 0x01


class QuantizerError(ValueError):
    """Invalid quantizer parameter or input."""


class CorruptMessageError(QuantizerError):
    """A received message cannot be decoded."""


@dataclass(frozen=True)
class QuantizerParams:
    bits: int
    range: float

    def __post_init__(self):
        if self.bits < 1:
            raise QuantizerError(f"bits must be >= 1, got {self.bits}")
        if not (self.range >= 0 and math.isfinite(self.range)):
            raise QuantizerError(f"range must be finite and >= 0, got {self.range}")

    @property
    def step(self) -> float:
        return step_size(self)

    @property
    def max_level(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True, eq=False)
class QuantizedMessage:
    """One transmission: bit-width, range and integer levels.

    ``zero_diff`` marks a model that did not move since the last
    reconstruction; such a message carries ``range == 0`` and no levels.
    """

    bits: int
    range: float
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    zero_diff: bool = False

    @property
    def dim(self) -> int:
        return int(self.levels.shape[0])

    @property
    def step(self) -> float:
        return step_size(QuantizerParams(self.bits, self.range))

    def __eq__(self, other):
        if not isinstance(other, QuantizedMessage):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.range == other.range
            and self.zero_diff == other.zero_diff
            and np.array_equal(self.levels, other.levels)
        )

    def to_bytes(self) -> bytes:
        """Serialize as ``[u8 bits][u8 flags][f32 range][packed levels]``.

        Levels are packed ``bits`` bits each, least significant bit first,
        coordinate after coordinate, and zero-padded to a byte boundary.
        The range is stored as binary32, so a round trip through bytes is
        only exact for ranges representable in single precision.
        """
        flags = _ZERO_DIFF if self.zero_diff else 0
        head = _HEADER.pack(self.bits, flags, self.range)
        if self.zero_diff or self.dim == 0:
            return head
        shifts = np.arange(self.bits, dtype=np.uint64)
        bitmat = (self.levels.astype(np.uint64)[:, None] >> shifts) & np.uint64(1)
        packed = np.packbits(bitmat.astype(np.uint8).ravel(), bitorder="little")
        return head + packed.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, dim: int) -> "QuantizedMessage":
        """Inverse of :meth:`to_bytes`; ``dim`` is known to both endpoints."""
        if len(data) < _HEADER.size:
            raise CorruptMessageError("truncated header")
        bits, flags, rng = _HEADER.unpack_from(data)
        if flags & _ZERO_DIFF:
            return cls(bits=bits, range=0.0, zero_diff=True)
        nbytes = math.ceil(bits * dim / 8)
        body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
        if body.shape[0] != nbytes:
            raise CorruptMessageError(f"expected {nbytes} level bytes, got {body.shape[0]}")
        bitstream = np.unpackbits(body, bitorder="little")[: bits * dim]
        bitmat = bitstream.reshape(dim, bits).astype(np.int64)
        levels = (bitmat << np.arange(bits, dtype=np.int64)).sum(axis=1)
        return cls(bits=bits, range=float(rng), levels=levels)


@dataclass(frozen=True)
class QuantDiagnostics:
    error: np.ndarray
    step_size: float
    probabilities: np.ndarray


def step_size(params: QuantizerParams) -> float:
    """Grid spacing ``2R / (2**b - 1)``."""
    if params.bits < 1:
        raise QuantizerError(f"bits must be >= 1, got {params.bits}")
    return 2.0 * params.range / ((1 << params.bits) - 1)


def _as_model(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 1:
        raise QuantizerError(f"{name} must be a non-empty 1-D vector")
    return x


def encode(current, prev_hat, bits: int, rng: np.random.Generator):
    """Quantize ``current - prev_hat`` with unbiased stochastic rounding.

    Args:
        current: model to transmit.
        prev_hat: previous reconstruction of this model, held by sender and
            receivers alike.
        bits: bits per coordinate.
        rng: the sending worker's private random stream. Exactly ``d``
            uniforms are drawn per non-zero message, none otherwise.

    Returns:
        ``(message, new_hat, diagnostics)`` where ``new_hat`` is what every
        receiver will reconstruct via :func:`decode`.
    """
    current = _as_model(current, "current")
    prev_hat = _as_model(prev_hat, "prev_hat")
    if current.shape != prev_hat.shape:
        raise QuantizerError(f"dimension mismatch: {current.shape} vs {prev_hat.shape}")
    if bits < 1 or bits > MAX_BITS:
        raise QuantizerError(f"bits must be in [1, {MAX_BITS}], got {bits}")

    diff = current - prev_hat
    R = float(np.abs(diff).max())
    if not math.isfinite(R):
        raise QuantizerError("non-finite model entries")
    d = current.shape[0]
    if R == 0.0:
        msg = QuantizedMessage(bits=bits, range=0.0, zero_diff=True)
        return msg, prev_hat.copy(), QuantDiagnostics(np.zeros(d), 0.0, np.zeros(d))

    top = (1 << bits) - 1
    delta = 2.0 * R / top
    c = np.clip((diff + R) / delta, 0.0, float(top))
    # coordinates at +-R sit exactly on the end levels; don't let roundoff
    # turn them into near-certain random draws
    c[diff == R] = float(top)
    c[diff == -R] = 0.0
    lower = np.floor(c)
    p = c - lower
    # p == 0 exactly at grid points (including c == top), so no level overflows
    levels = lower.astype(np.int64) + (rng.random(d) < p)
    msg = QuantizedMessage(bits=bits, range=R, levels=levels)
    new_hat = _reconstruct(msg, prev_hat)
    return msg, new_hat, QuantDiagnostics(current - new_hat, delta, p)


def decode(msg: QuantizedMessage, prev_hat) -> np.ndarray:
    """Reconstruct ``prev_hat + step * levels - range``."""
    prev_hat = np.asarray(prev_hat, dtype=np.float64)
    if msg.zero_diff:
        return prev_hat.copy()
    if msg.levels.shape != prev_hat.shape:
        raise CorruptMessageError(
            f"message carries {msg.levels.shape} levels for a model of shape {prev_hat.shape}"
        )
    top = (1 << msg.bits) - 1
    if msg.levels.size and (msg.levels.min() < 0 or msg.levels.max() > top):
        raise CorruptMessageError(f"level outside [0, {top}]")
    return _reconstruct(msg, prev_hat)


def _reconstruct(msg: QuantizedMessage, prev_hat) -> np.ndarray:
    # the one expression both endpoints evaluate; keep it in one place
    delta = 2.0 * msg.range / ((1 << msg.bits) - 1)
    return prev_hat + delta * msg.levels - msg.range


def select_bits(b_prev: int, R_prev: float, R_cur: float) -> int:
    """Smallest bit-width keeping the step size from growing.

    ``R_prev`` must be positive; a worker without a previous non-zero range
    falls back to its fixed initial width.
    """
    if R_prev <= 0:
        raise QuantizerError("R_prev must be > 0; use the fixed-bits policy")
    if b_prev < 1 or R_cur < 0:
        raise QuantizerError("need b_prev >= 1 and R_cur >= 0")
    ratio = ((1 << b_prev) - 1) * R_cur / R_prev
    b = max(1, math.ceil(math.log2(1.0 + ratio)))
    # guard the ceil against log2 rounding just below an integer
    while b > 1 and 2.0 * R_cur / ((1 << (b - 1)) - 1) <= 2.0 * R_prev / ((1 << b_prev) - 1):
        b -= 1
    while 2.0 * R_cur / ((1 << b) - 1) > 2.0 * R_prev / ((1 << b_prev) - 1):
        b += 1
    return b


def payload_bits(msg: QuantizedMessage, mode: str = "experiment") -> int:
    """Bits charged for one message.

    ``experiment`` charges ``b*d + 32`` (the bit-width is agreed a priori);
    ``full`` charges ``b*d + 32 + 8``. A zero-difference message costs the
    range word alone, plus one flag bit in ``full`` mode.
    """
    if mode == "experiment":
        return RANGE_BITS if msg.zero_diff else msg.bits * msg.dim + RANGE_BITS
    if mode == "full":
        if msg.zero_diff:
            return FLAG_BITS + RANGE_BITS
        return msg.bits * msg.dim + RANGE_BITS + BITWIDTH_BITS
    raise QuantizerError(f"unknown accounting mode {mode!r}")


def full_precision_bits(d: int) -> int:
    return FLOAT_BITS * d


class FixedBits:
    """Same bit-width for every message."""

    def __init__(self, bits: int = 2):
        if bits < 1:
            raise QuantizerError("bits must be >= 1")
        self.bits = bits

    def next_bits(self, R_cur: float) -> int:
        return self.bits

    def observe(self, bits: int, R: float):
        pass

    def __repr__(self):
        return f"FixedBits({self.bits})"


class AdaptiveBits:
    """Picks bits via :func:`select_bits` so the step never grows.

    Widths above ``max_bits`` are clamped; from then on the step may grow,
    and ``clamped`` counts how often that happened.
    """

    def __init__(self, initial_bits: int = 2, max_bits: int = MAX_BITS):
        if not 1 <= initial_bits <= max_bits <= MAX_BITS:
            raise QuantizerError(f"need 1 <= initial_bits <= max_bits <= {MAX_BITS}")
        self.initial_bits = initial_bits
        self.max_bits = max_bits
        self.last_bits = initial_bits
        self.last_range = 0.0
        self.clamped = 0

    def next_bits(self, R_cur: float) -> int:
        if self.last_range <= 0 or R_cur == 0:
            return self.last_bits
        b = select_bits(self.last_bits, self.last_range, R_cur)
        if b > self.max_bits:
            self.clamped += 1
            return self.max_bits
        return b

    def observe(self, bits: int, R: float):
        if R > 0:
            self.last_bits = bits
            self.last_range = R

    def __repr__(self):
        return f"AdaptiveBits({self.initial_bits})"


def make_policy(spec) -> FixedBits | AdaptiveBits:
    """Build a bit policy from ``"fixed:2"``, ``"adaptive:2"``, an int or a policy."""
    if isinstance(spec, (FixedBits, AdaptiveBits)):
        return copy.deepcopy(spec)
    if isinstance(spec, int):
        return FixedBits(spec)
    kind, _, b = str(spec).partition(":")
    b = int(b) if b else 2
    if kind == "fixed":
        return FixedBits(b)
    if kind == "adaptive":
        return AdaptiveBits(b)
    raise QuantizerError(f"unknown bit policy {spec!r}")


class DifferenceEncoder:
    """Sender-side codec state for one worker: its RNG and bit policy.

    Differences within ``floor_ulps`` units of roundoff of the model's
    magnitude are sent as zero-difference messages; they carry no
    information and would otherwise drive the adaptive width upward
    without bound once a run has converged to machine precision.
    Each call appends ``(bits, range, step)`` to ``history``.
    """

    def __init__(self, rng: np.random.Generator, policy, floor_ulps: float = 1024.0):
        self.rng = rng
        self.policy = make_policy(policy)
        self.floor_ulps = floor_ulps
        self.history: list[tuple[int, float, float]] = []

    def encode(self, current, prev_hat):
        current = np.asarray(current, dtype=np.float64)
        diff = current - prev_hat
        R = float(np.abs(diff).max())
        scale = max(float(np.abs(current).max()), float(np.abs(prev_hat).max()))
        if 0 < R <= self.floor_ulps * _EPS * scale:
            msg = QuantizedMessage(bits=self.policy.next_bits(0.0), range=0.0, zero_diff=True)
            d = current.shape[0]
            self.history.append((msg.bits, 0.0, 0.0))
            return msg, np.array(prev_hat, dtype=np.float64), QuantDiagnostics(diff, 0.0, np.zeros(d))
        bits = self.policy.next_bits(R)
        msg, new_hat, diag = encode(current, prev_hat, bits, self.rng)
        self.policy.observe(msg.bits, msg.range)
        self.history.append((msg.bits, msg.range, diag.step_size))
        return msg, new_hat, diag
