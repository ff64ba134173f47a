"""Residual-motion extraction and temporal instability classification.

Per frame and per tracked container: the mean horizontal flow inside the
container's mask gives its absolute lateral motion; the median across
containers estimates the common (vessel/stack) component; the difference
is the residual that indicates individual instability. Residual history
is filtered by interquartile-range outlier suppression, and a container
is classified unstable when its residual magnitude exceeds an adaptive,
scene-noise-scaled threshold for a sustained run of frames.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NoContainersError
from .imgcore import InstanceMask
from .optflow import FlowField
from .tracker import TrackState

STABLE = "stable"
SUSPECT = "suspect"
UNSTABLE = "unstable"

MIN_VALID_PIXELS = 25


@dataclass(frozen=True)
class ClassifierConfig:
    window_W: int = 30
    iqr_k: float = 1.5
    min_abs_threshold: float = 0.3
    adaptive_k: float = 3.0
    sustain_M: int = 10
    min_containers_N: int = 4

    def __post_init__(self):
        if not (self.window_W >= self.sustain_M >= 1):
            raise ConfigError(
                f"need window_W >= sustain_M >= 1, got W={self.window_W} M={self.sustain_M}"
            )
        if self.min_abs_threshold <= 0 or self.adaptive_k <= 0 or self.iqr_k <= 0:
            raise ConfigError("classifier thresholds must be positive")

    @property
    def suspect_M(self) -> int:
        return math.ceil(self.sustain_M / 2)


@dataclass(frozen=True)
class ResidualSample:
    """One container's lateral-motion measurements for one frame.

    ``v_rel == v_abs - v_common`` holds exactly; ``degraded`` marks
    samples from compensated-motion failures or starved aggregation,
    which never participate in classification.
    """

    frame_index: int
    v_abs: float
    v_common: float
    v_rel: float
    degraded: bool = False

    def __post_init__(self):
        if self.v_rel != self.v_abs - self.v_common:
            raise ContractError("v_rel must equal v_abs - v_common exactly")

    @classmethod
    def make(
        cls, frame_index: int, v_abs: float, v_common: float, degraded: bool = False
    ) -> "ResidualSample":
        return cls(frame_index, v_abs, v_common, v_abs - v_common, degraded)


@dataclass(frozen=True)
class StabilityVerdict:
    track_id: int
    frame_index: int
    stability: str
    accumulated: float
    threshold_used: float
    sustained_frames: int


def mask_mean_horizontal_flow(
    flow: FlowField,
    mask: InstanceMask,
    min_valid_pixels: int = MIN_VALID_PIXELS,
) -> float | None:
    """Mean of the horizontal flow component over the mask's set pixels
    that carry a valid flow estimate; ``None`` when fewer than
    ``min_valid_pixels`` qualify (the sample is degraded for this
    container this frame)."""
    if mask.width != flow.width or mask.height != flow.height:
        raise ContractError(
            f"mask {mask.width}x{mask.height} not congruent with flow "
            f"{flow.width}x{flow.height}"
        )
    sel = mask.dense() & flow.valid
    count = int(sel.sum())
    if count < min_valid_pixels:
        return None
    return float(flow.u[sel].mean())


def common_motion(values: list[float]) -> float:
    """Median of the per-container motions; even cardinality averages the
    two central order statistics."""
    if not values:
        raise NoContainersError("common motion requires at least one container")
    return float(np.median(values))


def relative_motion(v_abs: float, v_common: float) -> float:
    return v_abs - v_common


def iqr_filter(
    ring: list[ResidualSample] | deque,
    iqr_k: float = 1.5,
) -> tuple[list[ResidualSample], int]:
    """Outlier suppression over a residual-history window.

    Quartiles (linear interpolation) are taken over ``|v_rel|`` of the
    non-degraded samples; samples outside ``[Q1 - k*IQR, Q3 + k*IQR]``
    are suppressed, i.e. excluded from accumulation, without mutating the
    ring. Degraded samples are always suppressed. Windows with fewer than
    4 usable samples pass through unfiltered.
    """
    samples = list(ring)
    usable = [s for s in samples if not s.degraded]
    suppressed = len(samples) - len(usable)
    if len(usable) < 4:
        return usable, suppressed
    mags = np.array([abs(s.v_rel) for s in usable])
    q1, q3 = np.percentile(mags, [25.0, 75.0])
    iqr = q3 - q1
    lo = q1 - iqr_k * iqr
    hi = q3 + iqr_k * iqr
    survivors = [s for s, m in zip(usable, mags) if lo <= m <= hi]
    suppressed += len(usable) - len(survivors)
    return survivors, suppressed


def scene_adaptive_threshold(scene_residuals: list[float], cfg: ClassifierConfig) -> float:
    """Instability threshold for the current frame: proportional to the
    scene-wide residual spread with an absolute floor, so sea-state
    jitter that widens all residuals raises the bar."""
    if len(scene_residuals) >= 2:
        q1, q3 = np.percentile(scene_residuals, [25.0, 75.0])
        scene_iqr = float(q3 - q1)
    else:
        scene_iqr = 0.0
    return max(cfg.min_abs_threshold, cfg.adaptive_k * scene_iqr)


def accumulate_and_classify(
    track: TrackState,
    sample: ResidualSample,
    scene_residuals: list[float],
    cfg: ClassifierConfig | None = None,
) -> StabilityVerdict:
    """Push one residual sample into the track's window and classify.

    The sustained run counts surviving samples (newest backwards) whose
    residual magnitude exceeds the adaptive threshold; suppressed and
    degraded samples neither extend nor break the run. Frames with fewer
    than ``min_containers_N`` tracked containers are recorded as degraded
    so they stay inert in every later window evaluation.
    """
    cfg = cfg or ClassifierConfig()
    ring = track.residual_ring
    if ring and sample.frame_index <= ring[-1].frame_index:
        raise ContractError(
            f"track {track.id}: sample for frame {sample.frame_index} arrived "
            f"after frame {ring[-1].frame_index}"
        )
    if ring.maxlen != cfg.window_W:
        ring = deque(ring, maxlen=cfg.window_W)
        track.residual_ring = ring
    if len(scene_residuals) < cfg.min_containers_N and not sample.degraded:
        sample = ResidualSample(
            sample.frame_index, sample.v_abs, sample.v_common, sample.v_rel, True
        )
    ring.append(sample)

    survivors, _ = iqr_filter(ring, cfg.iqr_k)
    accumulated = float(sum(abs(s.v_rel) for s in survivors))
    theta = scene_adaptive_threshold(scene_residuals, cfg)

    surviving_ids = {id(s) for s in survivors}
    sustained = 0
    for s in reversed(ring):
        if id(s) not in surviving_ids:
            continue  # suppressed or degraded: no growth, no break
        if abs(s.v_rel) > theta:
            sustained += 1
        else:
            break

    if sustained >= cfg.sustain_M:
        stability = UNSTABLE
    elif sustained >= cfg.suspect_M:
        stability = SUSPECT
    else:
        stability = STABLE

    track.accumulator = accumulated
    track.stability = stability
    return StabilityVerdict(
        track.id, sample.frame_index, stability, accumulated, theta, sustained
    )
