"""7-DOF end-effector actions: normalization statistics and 256-bin quantization.

Actions are relative end-effector commands ordered as
[dx, dy, dz, rx, ry, rz, grip]: translation offsets in meters, Euler-angle
rotation offsets in radians, and a gripper command where 0.0 = open and
1.0 = closed. Normalization maps each dimension into [-1, 1] using robust
per-dimension bounds computed from a dataset; the quantizer discretizes
normalized values into 256 uniform bins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTION_DIM = 7
NUM_BINS = 256
DEFAULT_CHUNK_LEN = 8
GRIP_THRESHOLD = 0.5

NORM_STATS_FORMAT = "norm-stats/1"


@dataclass(frozen=True)
class Action:
    """One 7-DOF relative end-effector command."""

    dx: float
    dy: float
    dz: float
    rx: float
    ry: float
    rz: float
    grip: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.dz, self.rx, self.ry, self.rz, self.grip],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "Action":
        a = np.asarray(arr, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise ValueError(f"expected shape ({ACTION_DIM},), got {a.shape}")
        return cls(*(float(v) for v in a))

    def grip_closed(self) -> bool:
        """Execution-time binarization of the gripper channel."""
        return self.grip > GRIP_THRESHOLD


def as_action_array(a) -> np.ndarray:
    """Coerce an Action or length-7 array-like to a float64 vector."""
    if isinstance(a, Action):
        return a.as_array()
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != (ACTION_DIM,):
        raise ValueError(f"expected shape ({ACTION_DIM},), got {arr.shape}")
    return arr


class ActionChunk:
    """An ordered, immutable sequence of K actions stored as a (K, 7) array."""

    __slots__ = ("_data",)

    def __init__(self, actions):
        if isinstance(actions, ActionChunk):
            data = actions._data.copy()
        else:
            seq = list(actions) if not isinstance(actions, np.ndarray) else actions
            if isinstance(seq, list) and seq and isinstance(seq[0], Action):
                data = np.stack([a.as_array() for a in seq])
            else:
                data = np.array(seq, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != ACTION_DIM or data.shape[0] < 1:
            raise ValueError(f"chunk must be (K>=1, {ACTION_DIM}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("chunk contains non-finite values")
        data.setflags(write=False)
        self._data = data

    @property
    def data(self) -> np.ndarray:
        """Read-only (K, 7) view of the actions."""
        return self._data

    @property
    def k(self) -> int:
        return self._data.shape[0]

    def __len__(self) -> int:
        return self._data.shape[0]

    def __getitem__(self, t: int) -> Action:
        return Action.from_array(self._data[t])

    def __iter__(self):
        for row in self._data:
            yield Action.from_array(row)

    def prefix(self, n: int) -> "ActionChunk":
        """First n actions, bit-identical to the stored values."""
        if not 1 <= n <= self.k:
            raise ValueError(f"prefix length {n} outside [1, {self.k}]")
        return ActionChunk(self._data[:n].copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, ActionChunk) and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"ActionChunk(k={self.k})"


class TokenChunk:
    """A (K, 7) grid of bin indices, each in [0, 256)."""

    __slots__ = ("_tokens",)

    def __init__(self, tokens):
        t = np.asarray(tokens, dtype=np.int64)
        if t.ndim != 2 or t.shape[1] != ACTION_DIM or t.shape[0] < 1:
            raise ValueError(f"tokens must be (K>=1, {ACTION_DIM}), got {t.shape}")
        if t.min() < 0 or t.max() >= NUM_BINS:
            raise ValueError(f"token out of range [0, {NUM_BINS})")
        t.setflags(write=False)
        self._tokens = t

    @property
    def tokens(self) -> np.ndarray:
        return self._tokens

    @property
    def k(self) -> int:
        return self._tokens.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-dimension normalization bounds (robust percentile lo/hi)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("lo must be <= hi in every dimension")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def degenerate(self) -> np.ndarray:
        """Boolean mask of constant dimensions (lo == hi)."""
        return self.hi == self.lo

    def save(self, path) -> None:
        """Write lo/hi to a small JSON file (floats at full precision)."""
        payload = {
            "format": NORM_STATS_FORMAT,
            "lo": [float(v) for v in self.lo],
            "hi": [float(v) for v in self.hi],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != NORM_STATS_FORMAT:
            raise ValueError(f"unsupported norm-stats format: {payload.get('format')!r}")
        return cls(np.array(payload["lo"]), np.array(payload["hi"]))


def compute_norm_stats(actions, lo_pct: float = 1.0, hi_pct: float = 99.0) -> NormStats:
    """Robust per-dimension bounds: 1st/99th percentiles by linear interpolation."""
    if isinstance(actions, np.ndarray):
        arr = np.asarray(actions, dtype=np.float64)
    else:
        rows = [as_action_array(a) for a in actions]
        if not rows:
            raise ValueError("no actions")
        arr = np.stack(rows)
    if arr.size == 0:
        raise ValueError("no actions")
    if arr.ndim != 2:
        raise ValueError(f"expected (N, D) actions, got shape {arr.shape}")
    lo = np.percentile(arr, lo_pct, axis=0)
    hi = np.percentile(arr, hi_pct, axis=0)
    return NormStats(lo=lo, hi=hi)


def normalize(a, stats: NormStats) -> np.ndarray:
    """Map raw actions to [-1, 1]; degenerate dimensions map to 0. Clamps."""
    if isinstance(a, Action):
        a = a.as_array()
    a = np.asarray(a, dtype=np.float64)
    span = stats.hi - stats.lo
    safe = np.where(span > 0.0, span, 1.0)
    x = 2.0 * (a - stats.lo) / safe - 1.0
    x = np.where(span > 0.0, x, 0.0)
    return np.clip(x, -1.0, 1.0)


def denormalize(x, stats: NormStats) -> np.ndarray:
    """Inverse of normalize on [-1, 1]; degenerate dimensions return lo."""
    x = np.asarray(x, dtype=np.float64)
    return stats.lo + (x + 1.0) * 0.5 * (stats.hi - stats.lo)


def quantize(x, num_bins: int = NUM_BINS) -> np.ndarray:
    """Discretize normalized values in [-1, 1] into uniform bins (256 by default)."""
    x = np.asarray(x, dtype=np.float64)
    tok = np.floor((x + 1.0) * 0.5 * num_bins)
    return np.clip(tok, 0, num_bins - 1).astype(np.int64)


def dequantize_normalized(tokens, num_bins: int = NUM_BINS) -> np.ndarray:
    """Bin index -> bin center in normalized units."""
    tok = np.asarray(tokens)
    if tok.size and (tok.min() < 0 or tok.max() >= num_bins):
        raise ValueError(f"token out of range [0, {num_bins})")
    return -1.0 + (tok.astype(np.float64) + 0.5) * (2.0 / num_bins)


def dequantize(tokens, stats: NormStats, num_bins: int = NUM_BINS) -> np.ndarray:
    """Bin indices -> raw action values (bin centers mapped through stats)."""
    return denormalize(dequantize_normalized(tokens, num_bins), stats)
