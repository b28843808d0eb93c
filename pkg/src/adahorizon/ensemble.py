"""Action-chunk ensemblers.

The adaptive-horizon ensembler executes a prefix of the discrete-head chunk,
truncating where the per-step mean absolute difference (MAD) between the
continuous and discrete predictions exceeds a threshold; persistent
disagreement trips a counter-based escape hatch that executes the full chunk.
Also provides the smoothing/fusion baselines (temporal ensembling,
confidence fusion, cosine-similarity weighting, fixed horizons) behind one
runner-facing interface.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .actionspace import Action, ActionChunk, NormStats, normalize


@dataclass(frozen=True)
class DualChunk:
    """Paired continuous/discrete chunk predictions from one inference.

    cont and disc are in raw action units (the discrete chunk already
    dequantized); disc_conf holds the per-step mean max-softmax probability
    of the token head.
    """

    cont: ActionChunk
    disc: ActionChunk
    disc_conf: np.ndarray

    def __post_init__(self):
        if self.cont.k != self.disc.k:
            raise ValueError("cont and disc must have identical chunk length")
        conf = np.asarray(self.disc_conf, dtype=np.float64)
        if conf.shape != (self.cont.k,):
            raise ValueError(f"disc_conf must have shape ({self.cont.k},)")
        if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
            raise ValueError("disc_conf entries must lie in [0, 1]")
        conf.setflags(write=False)
        object.__setattr__(self, "disc_conf", conf)

    @property
    def k(self) -> int:
        return self.cont.k


@dataclass
class AdaHorizonParams:
    """Adaptive-horizon parameters (MAD cutoffs in normalized-action units)."""

    min_actions: int = 4
    threshold: float = 0.06
    replan_threshold: float = 0.12
    max_replan_count: int = 5
    next_task_thresh: int = 3
    # Optional extension: clear the replan counter whenever a full chunk
    # executes. Off by default; the verbatim algorithm never resets.
    reset_on_full_horizon: bool = False

    def validate(self, k: int | None = None) -> None:
        if self.min_actions < 1:
            raise ValueError("min_actions must be >= 1")
        if k is not None and self.min_actions > k:
            raise ValueError("min_actions must be <= chunk length")
        if self.threshold <= 0.0 or self.replan_threshold <= 0.0:
            raise ValueError("thresholds must be positive")


@dataclass
class EnsemblerState:
    """Per-episode mutable state: replan counters plus chunk history.

    The history (emission timestep, chunk) is consumed only by the smoothing
    baselines; entries older than one chunk length are pruned.
    """

    replan_ctr: int = 0
    max_replan_ctr: int = 0
    history: deque = field(default_factory=deque)
    timestep: int = 0

    def reset(self) -> None:
        self.replan_ctr = 0
        self.max_replan_ctr = 0
        self.history.clear()
        self.timestep = 0


def mad_per_step(chunk: DualChunk, stats: NormStats) -> np.ndarray:
    """Per-step mean absolute difference between the heads, in normalized space."""
    cn = normalize(chunk.cont.data, stats)
    dn = normalize(chunk.disc.data, stats)
    return np.abs(cn - dn).mean(axis=1)


def adahorizon_step(
    chunk: DualChunk,
    params: AdaHorizonParams,
    state: EnsemblerState,
    stats: NormStats,
):
    """One adaptive-horizon decision: returns (executed prefix, mad, state).

    Executed actions always come from the discrete head. The horizon starts
    at min_actions and extends through consecutive steps whose MAD stays
    under the threshold; once the replan counters pass their limits the
    escape hatch returns the full discrete chunk regardless of MAD.
    """
    k = chunk.k
    if k < params.min_actions:
        raise ValueError("chunk shorter than min horizon")

    mad = mad_per_step(chunk, stats)

    if params.min_actions > 1 and np.any(mad[: params.min_actions] > params.replan_threshold):
        state.replan_ctr += 1
    state.max_replan_ctr = max(state.max_replan_ctr, state.replan_ctr)

    if state.max_replan_ctr >= params.max_replan_count and state.replan_ctr >= params.next_task_thresh:
        return chunk.disc, mad, state

    mask = mad < params.threshold
    horizon = params.min_actions
    for t in range(params.min_actions, k):
        if not mask[t]:
            break
        horizon = t + 1

    if params.reset_on_full_horizon and horizon == k:
        state.replan_ctr = 0
    return chunk.disc.prefix(horizon), mad, state


def _overlapping_cont_predictions(state: EnsemblerState, t: int):
    """(prediction, age) pairs for timestep t from the stored history."""
    preds, ages = [], []
    for te, ch in state.history:
        idx = t - te
        if 0 <= idx < ch.k:
            preds.append(ch.cont.data[idx])
            ages.append(t - te)
    return preds, ages


def _prune_history(state: EnsemblerState) -> None:
    while state.history and state.timestep - state.history[0][0] >= state.history[0][1].k:
        state.history.popleft()


def temporal_ensemble_step(chunk: DualChunk, state: EnsemblerState, m: float) -> Action:
    """Exponentially age-weighted average of overlapping continuous predictions.

    Weight exp(-m * age) per prediction, normalized to sum 1; emits a single
    action and advances the state's timestep.
    """
    t = state.timestep
    state.history.append((t, chunk))
    preds, ages = _overlapping_cont_predictions(state, t)
    w = np.exp(-m * np.asarray(ages, dtype=np.float64))
    w /= w.sum()
    out = w @ np.stack(preds)
    state.timestep += 1
    _prune_history(state)
    return Action.from_array(out)


def confidence_fusion_step(chunk: DualChunk, theta: float) -> ActionChunk:
    """Pick one full chunk by token confidence: discrete iff mean conf >= theta."""
    if float(np.mean(chunk.disc_conf)) >= theta:
        return chunk.disc
    return chunk.cont


def similarity_ensemble_step(chunk: DualChunk, state: EnsemblerState) -> Action:
    """Cosine-similarity-weighted average of overlapping continuous predictions.

    The current prediction gets weight 1; each historical prediction gets
    max(0, cosine similarity to the current one). Zero-norm vectors
    contribute weight 0.
    """
    t = state.timestep
    cur = chunk.cont.data[0]
    preds, ages = _overlapping_cont_predictions(state, t)
    num = cur.copy()
    den = 1.0
    cur_norm = float(np.linalg.norm(cur))
    for p in preds:
        p_norm = float(np.linalg.norm(p))
        if cur_norm == 0.0 or p_norm == 0.0:
            continue
        w = max(0.0, float(np.dot(p, cur)) / (p_norm * cur_norm))
        num += w * p
        den += w
    state.history.append((t, chunk))
    state.timestep += 1
    _prune_history(state)
    return Action.from_array(num / den)


def fixed_horizon_step(chunk: DualChunk, use_discrete: bool) -> ActionChunk:
    """Single-modality baseline: the full chunk from one head."""
    return chunk.disc if use_discrete else chunk.cont


class Ensembler:
    """Runner-facing interface: plan(chunk) -> actions to execute before re-inferring."""

    name = "base"

    def reset(self) -> None:
        pass

    def plan(self, chunk: DualChunk) -> ActionChunk:
        raise NotImplementedError


class AdaHorizonEnsembler(Ensembler):
    name = "adahorizon"

    def __init__(self, params: AdaHorizonParams, stats: NormStats):
        params.validate()
        self.params = params
        self.stats = stats
        self.state = EnsemblerState()
        self.last_mad: np.ndarray | None = None

    def reset(self) -> None:
        self.state.reset()
        self.last_mad = None

    def plan(self, chunk: DualChunk) -> ActionChunk:
        prefix, mad, _ = adahorizon_step(chunk, self.params, self.state, self.stats)
        self.last_mad = mad
        return prefix


class FixedHorizonEnsembler(Ensembler):
    def __init__(self, use_discrete: bool):
        self.use_discrete = use_discrete
        self.name = "fixed_disc" if use_discrete else "fixed_cont"

    def plan(self, chunk: DualChunk) -> ActionChunk:
        return fixed_horizon_step(chunk, self.use_discrete)


class TemporalEnsembler(Ensembler):
    name = "temporal"

    def __init__(self, m: float = 0.01):
        self.m = m
        self.state = EnsemblerState()

    def reset(self) -> None:
        self.state.reset()

    def plan(self, chunk: DualChunk) -> ActionChunk:
        a = temporal_ensemble_step(chunk, self.state, self.m)
        return ActionChunk([a])


class ConfidenceFusionEnsembler(Ensembler):
    name = "confidence_fusion"

    def __init__(self, theta: float = 0.8):
        self.theta = theta

    def plan(self, chunk: DualChunk) -> ActionChunk:
        return confidence_fusion_step(chunk, self.theta)


class SimilarityEnsembler(Ensembler):
    name = "similarity"

    def __init__(self):
        self.state = EnsemblerState()

    def reset(self) -> None:
        self.state.reset()

    def plan(self, chunk: DualChunk) -> ActionChunk:
        a = similarity_ensemble_step(chunk, self.state)
        return ActionChunk([a])


ENSEMBLER_NAMES = (
    "adahorizon",
    "fixed_disc",
    "fixed_cont",
    "temporal",
    "confidence_fusion",
    "similarity",
)


def make_ensembler(
    name: str,
    stats: NormStats,
    params: AdaHorizonParams | None = None,
    m: float = 0.01,
    theta: float = 0.8,
) -> Ensembler:
    if name == "adahorizon":
        return AdaHorizonEnsembler(params or AdaHorizonParams(), stats)
    if name == "fixed_disc":
        return FixedHorizonEnsembler(use_discrete=True)
    if name == "fixed_cont":
        return FixedHorizonEnsembler(use_discrete=False)
    if name == "temporal":
        return TemporalEnsembler(m=m)
    if name == "confidence_fusion":
        return ConfidenceFusionEnsembler(theta=theta)
    if name == "similarity":
        return SimilarityEnsembler()
    raise ValueError(f"unknown ensembler {name!r}; choose from {ENSEMBLER_NAMES}")
