"""Online multi-object tracking with persistent container identities.

Constant-velocity Kalman prediction on (center, aspect, height) boxes,
appearance-assisted IoU association solved as a global assignment, and a
tentative/confirmed/deleted lifecycle. Appearance is a 32-bin grayscale
histogram compared by cosine distance; it breaks ties between visually
similar neighbors without any learned embedding.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError
from .imgcore import BoundingBox, GrayFrame, InstanceMask, iou

HIST_BINS = 32

# SORT-convention noise weights: position noise scales with box height.
_STD_POS = 1.0 / 20.0
_STD_VEL = 1.0 / 160.0

_MIN_HEIGHT = 1e-2
_MIN_ASPECT = 1e-3


@dataclass(frozen=True)
class TrackerConfig:
    n_init: int = 3
    max_age: int = 15
    iou_gate: float = 0.2
    iou_weight: float = 0.7  # cost = w*(1-IoU) + (1-w)*cosine distance
    appearance_alpha: float = 0.9  # EMA retention for track appearance


@dataclass(eq=False)
class KalmanBoxState:
    """8-state box filter: (cx, cy, aspect, h) and their velocities."""

    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def initiate(cls, bbox: BoundingBox) -> "KalmanBoxState":
        cx, cy = bbox.center
        aspect = bbox.w / bbox.h
        h = float(bbox.h)
        mean = np.array([cx, cy, aspect, h, 0.0, 0.0, 0.0, 0.0])
        std = np.array(
            [
                2 * _STD_POS * h,
                2 * _STD_POS * h,
                1e-2,
                2 * _STD_POS * h,
                10 * _STD_VEL * h,
                10 * _STD_VEL * h,
                1e-5,
                10 * _STD_VEL * h,
            ]
        )
        return cls(mean, np.diag(std**2))

    def bbox(self) -> BoundingBox:
        cx, cy, aspect, h = self.mean[:4]
        h = max(h, 1.0)
        w = max(aspect * h, 1.0)
        return BoundingBox(
            int(round(max(cx - w / 2, 0))),
            int(round(max(cy - h / 2, 0))),
            max(int(round(w)), 1),
            max(int(round(h)), 1),
        )


def _transition_matrix() -> np.ndarray:
    f = np.eye(8)
    f[:4, 4:] = np.eye(4)
    return f


_F = _transition_matrix()
_H = np.eye(4, 8)


def kalman_predict(state: KalmanBoxState) -> KalmanBoxState:
    """One constant-velocity step; covariance trace grows by the process
    noise, which scales with box height."""
    h = max(state.mean[3], _MIN_HEIGHT)
    std = np.array(
        [
            _STD_POS * h,
            _STD_POS * h,
            1e-2,
            _STD_POS * h,
            _STD_VEL * h,
            _STD_VEL * h,
            1e-5,
            _STD_VEL * h,
        ]
    )
    q = np.diag(std**2)
    mean = _F @ state.mean
    mean[2] = max(mean[2], _MIN_ASPECT)
    mean[3] = max(mean[3], _MIN_HEIGHT)
    cov = _F @ state.covariance @ _F.T + q
    cov = 0.5 * (cov + cov.T)
    return KalmanBoxState(mean, cov)


def kalman_update(state: KalmanBoxState, det: "Detection") -> KalmanBoxState:
    """Correct with a measured box; Joseph-form update keeps the
    covariance symmetric PSD."""
    h = max(state.mean[3], _MIN_HEIGHT)
    std = np.array([_STD_POS * h, _STD_POS * h, 1e-1, _STD_POS * h])
    r = np.diag(std**2)
    cx, cy = det.bbox.center
    z = np.array([cx, cy, det.bbox.w / det.bbox.h, float(det.bbox.h)])
    s = _H @ state.covariance @ _H.T + r
    k = np.linalg.solve(s.T, (_H @ state.covariance.T)).T
    innovation = z - _H @ state.mean
    mean = state.mean + k @ innovation
    mean[2] = max(mean[2], _MIN_ASPECT)
    mean[3] = max(mean[3], _MIN_HEIGHT)
    ikh = np.eye(8) - k @ _H
    cov = ikh @ state.covariance @ ikh.T + k @ r @ k.T
    cov = 0.5 * (cov + cov.T)
    return KalmanBoxState(mean, cov)


@dataclass(eq=False)
class Detection:
    """Per-frame observation: mask-derived box, the mask label it came
    from, and an L1-normalized intensity histogram over the mask."""

    bbox: BoundingBox
    mask_label: int
    appearance: np.ndarray

    @classmethod
    def from_mask(cls, mask: InstanceMask, frame: GrayFrame) -> "Detection":
        bits = mask.dense()
        values = frame.data[bits]
        hist = np.bincount(values >> 3, minlength=HIST_BINS).astype(np.float64)
        total = hist.sum()
        hist = hist / total if total > 0 else np.full(HIST_BINS, 1.0 / HIST_BINS)
        return cls(mask.bbox, mask.label, hist)


TENTATIVE = "tentative"
CONFIRMED = "confirmed"
DELETED = "deleted"


@dataclass(eq=False)
class TrackState:
    """Persistent per-container identity and its online statistics."""

    id: int
    kalman: KalmanBoxState
    status: str = TENTATIVE
    hits: int = 1
    misses: int = 0
    appearance: np.ndarray | None = None
    residual_ring: deque = field(default_factory=deque)
    accumulator: float = 0.0
    stability: str = "stable"
    last_mask_label: int | None = None

    def predicted_bbox(self) -> BoundingBox:
        return self.kalman.bbox()


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def associate(
    tracks: list[TrackState],
    dets: list[Detection],
    cfg: TrackerConfig | None = None,
) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Globally optimal track-to-detection assignment.

    Cost blends box overlap of the *predicted* track box with appearance
    distance; pairs overlapping less than the IoU gate are forbidden.
    Returns (matches as (track_id, det_index), unmatched track ids,
    unmatched det indices). Tracks are processed in ascending id order so
    equal-cost assignments resolve to the lower id.
    """
    cfg = cfg or TrackerConfig()
    if not tracks or not dets:
        return [], [t.id for t in tracks], list(range(len(dets)))
    tracks = sorted(tracks, key=lambda t: t.id)
    n, m = len(tracks), len(dets)
    cost = np.full((n, m), 1e6)
    gated = np.zeros((n, m), dtype=bool)
    for i, trk in enumerate(tracks):
        pbox = trk.predicted_bbox()
        for j, det in enumerate(dets):
            overlap = iou(pbox, det.bbox)
            if overlap < cfg.iou_gate:
                continue
            gated[i, j] = True
            app = (
                cosine_distance(trk.appearance, det.appearance)
                if trk.appearance is not None
                else 0.0
            )
            cost[i, j] = cfg.iou_weight * (1.0 - overlap) + (1.0 - cfg.iou_weight) * app
    rows, cols = linear_sum_assignment(cost)
    matches = []
    matched_rows = set()
    matched_cols = set()
    for i, j in zip(rows, cols):
        if gated[i, j]:
            matches.append((tracks[i].id, int(j)))
            matched_rows.add(i)
            matched_cols.add(int(j))
    unmatched_tracks = [tracks[i].id for i in range(n) if i not in matched_rows]
    unmatched_dets = [j for j in range(m) if j not in matched_cols]
    return matches, unmatched_tracks, unmatched_dets


class Tracker:
    """Single-owner tracking state advanced once per frame in time order."""

    def __init__(self, cfg: TrackerConfig | None = None, ring_capacity: int = 30):
        self.cfg = cfg or TrackerConfig()
        self.ring_capacity = ring_capacity
        self.tracks: list[TrackState] = []
        self._next_id = 1
        self._last_frame: int | None = None

    def _new_track(self, det: Detection) -> TrackState:
        track = TrackState(
            id=self._next_id,
            kalman=KalmanBoxState.initiate(det.bbox),
            appearance=det.appearance.copy(),
            residual_ring=deque(maxlen=self.ring_capacity),
            last_mask_label=det.mask_label,
        )
        self._next_id += 1
        return track

    def step(self, frame_index: int, dets: list[Detection]) -> list[TrackState]:
        """Advance one frame: predict, associate, update lifecycles.

        Returns the live tracks after the update. Frame indices must be
        strictly increasing.
        """
        if self._last_frame is not None and frame_index <= self._last_frame:
            raise ContractError(
                f"step() called out of order: frame {frame_index} after {self._last_frame}"
            )
        self._last_frame = frame_index

        for trk in self.tracks:
            trk.kalman = kalman_predict(trk.kalman)

        matches, unmatched_tracks, unmatched_dets = associate(self.tracks, dets, self.cfg)
        by_id = {t.id: t for t in self.tracks}
        alpha = self.cfg.appearance_alpha
        for track_id, det_idx in matches:
            trk = by_id[track_id]
            det = dets[det_idx]
            trk.kalman = kalman_update(trk.kalman, det)
            trk.hits += 1
            trk.misses = 0
            trk.last_mask_label = det.mask_label
            trk.appearance = alpha * trk.appearance + (1.0 - alpha) * det.appearance
            if trk.status == TENTATIVE and trk.hits >= self.cfg.n_init:
                trk.status = CONFIRMED
        for track_id in unmatched_tracks:
            trk = by_id[track_id]
            trk.misses += 1
            trk.hits = 0
            trk.last_mask_label = None
            if trk.misses > self.cfg.max_age:
                trk.status = DELETED
        for det_idx in unmatched_dets:
            self.tracks.append(self._new_track(dets[det_idx]))

        self.tracks = [t for t in self.tracks if t.status != DELETED]
        return self.tracks

    def confirmed(self) -> list[TrackState]:
        return [t for t in self.tracks if t.status == CONFIRMED]


def assign_masks(
    tracks: list[TrackState],
    masks: list[InstanceMask],
    iou_gate: float = 0.2,
) -> dict[int, int]:
    """Greedy descending-IoU assignment of masks to tracks, one mask per
    track; pairs under the gate stay unassigned. Maps track id to the
    assigned mask label."""
    pairs = []
    for trk in tracks:
        pbox = trk.predicted_bbox()
        for mask in masks:
            if mask.bbox is None:
                continue
            overlap = iou(pbox, mask.bbox)
            if overlap >= iou_gate:
                pairs.append((overlap, trk.id, mask.label))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    out: dict[int, int] = {}
    used_masks: set[int] = set()
    for overlap, track_id, label in pairs:
        if track_id in out or label in used_masks:
            continue
        out[track_id] = label
        used_masks.add(label)
    return out
