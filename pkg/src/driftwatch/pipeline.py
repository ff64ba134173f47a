"""End-to-end orchestration: ingest frames and masks (from disk or the
simulator), run compensation, flow, tracking, and classification per
frame, and emit the diagnostics CSV, alert JSONL, run summary, and
optional annotated frames.

Flow is computed between the previous raw frame and the compensated
current frame (one-sided alignment), so warping errors never accumulate
across the sequence. Masks arrive in current-frame coordinates and are
warped by the estimated camera motion into the flow's reference frame
before aggregation.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, ContractError, DataError
from .gmc import GmcConfig, GmcResult, compensate
from .imgcore import (
    AffineTransform,
    BoundingBox,
    GrayFrame,
    InstanceMask,
    bilinear_sample,
    warp_margin,
)
from .motion import (
    UNSTABLE,
    ClassifierConfig,
    ResidualSample,
    accumulate_and_classify,
    common_motion,
    iqr_filter,
    mask_mean_horizontal_flow,
)
from .optflow import FlowField, FlowParams, farneback_flow
from .simulator import Scenario, load_scenario, render
from .tracker import Detection, Tracker, TrackerConfig, assign_masks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

CSV_COLUMNS = [
    "frame",
    "track_id",
    "status",
    "x",
    "y",
    "w",
    "h",
    "mask_label",
    "v_abs",
    "v_common",
    "v_rel",
    "theta",
    "suppressed",
    "sustained_frames",
    "stability",
    "accumulated",
    "degraded",
    "n_containers",
    "gmc_degraded",
    "gmc_inlier_ratio",
    "gmc_reproj_error",
    "gmc_a00",
    "gmc_a01",
    "gmc_a10",
    "gmc_a11",
    "gmc_bx",
    "gmc_by",
    "flow_mean_abs_u",
]


@dataclass
class RunConfig:
    out_dir: Path
    frames_dir: Path | None = None
    masks_path: Path | None = None
    scenario_path: Path | None = None
    scenario: Scenario | None = None
    raw_size: tuple[int, int] | None = None  # set for raw Y8 frame input
    fps: float = 10.0
    annotate: bool = False
    seed: int = 0
    flow: FlowParams = field(default_factory=FlowParams)
    gmc: GmcConfig = field(default_factory=GmcConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def validate(self) -> None:
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        scenario_mode = self.scenario is not None or self.scenario_path is not None
        frames_mode = self.frames_dir is not None
        if scenario_mode == frames_mode:
            raise ConfigError(
                "exactly one input mode required: frames+masks directory or scenario"
            )
        if frames_mode:
            if self.masks_path is None:
                raise ConfigError("frames input requires a masks file")
            if not Path(self.frames_dir).is_dir():
                raise ConfigError(f"frames directory not found: {self.frames_dir}")
            if not Path(self.masks_path).is_file():
                raise ConfigError(f"masks file not found: {self.masks_path}")
        if self.scenario_path is not None and not Path(self.scenario_path).is_file():
            raise ConfigError(f"scenario file not found: {self.scenario_path}")


@dataclass
class TrackRow:
    """One track's per-frame report entry."""

    track_id: int
    status: str
    bbox: BoundingBox
    mask_label: int | None = None
    v_abs: float | None = None
    v_common: float | None = None
    v_rel: float | None = None
    theta: float | None = None
    suppressed: int | None = None
    sustained_frames: int | None = None
    stability: str | None = None
    accumulated: float | None = None
    degraded: bool | None = None


@dataclass
class FrameReport:
    frame_index: int
    gmc: GmcResult
    n_containers: int
    rows: list[TrackRow]
    transitions: list[dict]
    flow_mean_abs_u: float | None = None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _warped_mask(mask: InstanceMask, m: AffineTransform) -> InstanceMask:
    """Mask bits resampled into the reference frame of the earlier frame:
    bit at p is set when the mask covers ``m(p)`` in the current frame.
    Only the bounding-box neighborhood is sampled."""
    if m.is_near_identity(1e-12):
        return mask
    corners = np.array(
        [
            [mask.bbox.x, mask.bbox.y],
            [mask.bbox.x2, mask.bbox.y],
            [mask.bbox.x, mask.bbox.y2],
            [mask.bbox.x2, mask.bbox.y2],
        ],
        dtype=float,
    )
    back = m.inverse().apply(corners)
    x0 = max(int(math.floor(back[:, 0].min())) - 2, 0)
    x1 = min(int(math.ceil(back[:, 0].max())) + 3, mask.width)
    y0 = max(int(math.floor(back[:, 1].min())) - 2, 0)
    y1 = min(int(math.ceil(back[:, 1].max())) + 3, mask.height)
    bits = np.zeros((mask.height, mask.width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return InstanceMask(mask.label, bits)
    gx, gy = np.meshgrid(
        np.arange(x0, x1, dtype=np.float64), np.arange(y0, y1, dtype=np.float64)
    )
    sx = (m.a00 * gx + m.a01 * gy + m.bx).astype(np.float32)
    sy = (m.a10 * gx + m.a11 * gy + m.by).astype(np.float32)
    dense = mask.dense().astype(np.float32)
    bits[y0:y1, x0:x1] = bilinear_sample(dense, sx, sy) >= 0.5
    return InstanceMask(mask.label, bits)


class _FrameSource:
    """Uniform access to frames and masks regardless of input mode."""

    def __init__(self, cfg: RunConfig):
        self._mode_scenario = cfg.scenario is not None or cfg.scenario_path is not None
        if self._mode_scenario:
            self.scenario = cfg.scenario or load_scenario(cfg.scenario_path)
            self.count = self.scenario.duration
            self.fps = self.scenario.fps
        else:
            pattern = "*.y8" if cfg.raw_size else "*.pgm"
            self._paths = fileio.frame_paths(cfg.frames_dir, pattern)
            if not self._paths:
                raise ConfigError(f"no {pattern} frames in {cfg.frames_dir}")
            self._raw_size = cfg.raw_size
            first = self._read_frame(0)
            self._size = (first.width, first.height)
            self._masks = fileio.read_mask_stream(
                cfg.masks_path, first.width, first.height
            )
            self.count = len(self._paths)
            self.fps = cfg.fps

    def _read_frame(self, t: int) -> GrayFrame:
        path = self._paths[t]
        if self._raw_size:
            return fileio.read_y8(path, *self._raw_size)
        return fileio.read_pgm(path)

    def frame(self, t: int) -> tuple[GrayFrame, list[InstanceMask]]:
        if self._mode_scenario:
            frame, masks, _ = render(self.scenario, t)
            return frame, masks
        frame = self._read_frame(t)
        if (frame.width, frame.height) != self._size:
            raise DataError(
                f"frame {t} size {frame.width}x{frame.height} differs from "
                f"{self._size[0]}x{self._size[1]}"
            )
        # missing mask record: the frame simply has no detections
        return frame, self._masks.get(t, [])


def run(cfg: RunConfig) -> dict:
    """Execute the full pipeline; returns the run summary (also written
    to summary.json). Raises ConfigError/DataError before any output is
    created when the inputs are unusable."""
    started = time.time()
    cfg.validate()
    source = _FrameSource(cfg)
    fps = source.fps

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    annotate_dir = out_dir / "frames_annotated"
    if cfg.annotate:
        annotate_dir.mkdir(exist_ok=True)

    tracker = Tracker(cfg.tracker, ring_capacity=cfg.classifier.window_W)
    confirmed_ever: set[int] = set()
    last_stability: dict[int, str] = {}
    alerts: list[dict] = []
    degraded_frames = 0

    prev_frame: GrayFrame | None = None
    prev_masks: list[InstanceMask] = []

    csv_path = out_dir / "residuals.csv"
    alerts_path = out_dir / "alerts.jsonl"
    with csv_path.open("w", newline="") as csv_fh, alerts_path.open("w") as alerts_fh:
        writer = csv.writer(csv_fh)
        writer.writerow(CSV_COLUMNS)

        for t in range(source.count):
            frame, masks = source.frame(t)
            detections = [Detection.from_mask(m, frame) for m in masks]
            tracker.step(t, detections)
            confirmed = tracker.confirmed()
            confirmed_ever.update(trk.id for trk in confirmed)

            gmc_result = GmcResult(AffineTransform.identity(), 0, 0.0, 0.0, False)
            flow_stat = None
            report_rows: list[TrackRow] = []
            transitions: list[dict] = []
            n_containers = 0

            if prev_frame is not None:
                aligned, gmc_result = compensate(
                    prev_frame, frame, prev_masks, cfg.gmc,
                    seed=cfg.seed * 1_000_003 + t,
                )
                if gmc_result.degraded:
                    degraded_frames += 1
                flow = farneback_flow(prev_frame, aligned, cfg.flow)
                flow = flow.with_margin_invalidated(warp_margin(gmc_result.transform))
                if flow.valid.any():
                    flow_stat = float(np.abs(flow.u[flow.valid]).mean())

                assignment = assign_masks(confirmed, masks, cfg.tracker.iou_gate)
                n_containers = len(assignment)
                masks_by_label = {m.label: m for m in masks}

                v_abs_by_track: dict[int, float | None] = {}
                for track_id, label in assignment.items():
                    warped = _warped_mask(masks_by_label[label], gmc_result.transform)
                    v_abs_by_track[track_id] = mask_mean_horizontal_flow(flow, warped)
                usable = [v for v in v_abs_by_track.values() if v is not None]
                v_common = common_motion(usable) if usable else None
                scene_residuals = [v - v_common for v in usable]

                verdicts = {}
                for trk in confirmed:
                    if trk.id not in assignment:
                        continue
                    v_abs = v_abs_by_track[trk.id]
                    if v_abs is None or v_common is None:
                        sample = ResidualSample.make(
                            t, 0.0, v_common if v_common is not None else 0.0, True
                        )
                    else:
                        sample = ResidualSample.make(
                            t, v_abs, v_common, gmc_result.degraded
                        )
                    verdict = accumulate_and_classify(
                        trk, sample, scene_residuals, cfg.classifier
                    )
                    verdicts[trk.id] = (sample, verdict)
                    prev_state = last_stability.get(trk.id, "stable")
                    if verdict.stability == UNSTABLE and prev_state != UNSTABLE:
                        alert = {
                            "frame_index": t,
                            "time_s": round(t / fps, 6),
                            "track_id": trk.id,
                            "bbox": list(trk.predicted_bbox().as_tuple()),
                            "accumulated_px": verdict.accumulated,
                            "sustained_frames": verdict.sustained_frames,
                            "threshold": verdict.threshold_used,
                        }
                        alerts.append(alert)
                        transitions.append(alert)
                        alerts_fh.write(json.dumps(alert, separators=(",", ":")) + "\n")
                    last_stability[trk.id] = verdict.stability

                for trk in sorted(tracker.tracks, key=lambda tr: tr.id):
                    row = TrackRow(trk.id, trk.status, trk.predicted_bbox())
                    if trk.id in verdicts:
                        sample, verdict = verdicts[trk.id]
                        suppressed = iqr_filter(trk.residual_ring, cfg.classifier.iqr_k)[1]
                        row.mask_label = assignment[trk.id]
                        row.v_abs = sample.v_abs
                        row.v_common = sample.v_common
                        row.v_rel = sample.v_rel
                        row.theta = verdict.threshold_used
                        row.suppressed = suppressed
                        row.sustained_frames = verdict.sustained_frames
                        row.stability = verdict.stability
                        row.accumulated = verdict.accumulated
                        row.degraded = sample.degraded
                    report_rows.append(row)
            else:
                for trk in sorted(tracker.tracks, key=lambda tr: tr.id):
                    report_rows.append(TrackRow(trk.id, trk.status, trk.predicted_bbox()))

            report = FrameReport(
                t, gmc_result, n_containers, report_rows, transitions, flow_stat
            )
            for row in report_rows:
                writer.writerow(
                    [
                        t,
                        row.track_id,
                        row.status,
                        row.bbox.x,
                        row.bbox.y,
                        row.bbox.w,
                        row.bbox.h,
                        _fmt(row.mask_label),
                        _fmt(row.v_abs),
                        _fmt(row.v_common),
                        _fmt(row.v_rel),
                        _fmt(row.theta),
                        _fmt(row.suppressed),
                        _fmt(row.sustained_frames),
                        _fmt(row.stability),
                        _fmt(row.accumulated),
                        _fmt(row.degraded),
                        n_containers,
                        _fmt(gmc_result.degraded),
                        _fmt(gmc_result.inlier_ratio),
                        _fmt(gmc_result.mean_reprojection_error),
                        _fmt(gmc_result.transform.a00),
                        _fmt(gmc_result.transform.a01),
                        _fmt(gmc_result.transform.a10),
                        _fmt(gmc_result.transform.a11),
                        _fmt(gmc_result.transform.bx),
                        _fmt(gmc_result.transform.by),
                        _fmt(report.flow_mean_abs_u),
                    ]
                )

            if cfg.annotate:
                annotate_frame(frame, report, annotate_dir / f"frame_{t:06d}.png")

            prev_frame = frame
            prev_masks = masks

    summary = {
        "frames": source.count,
        "fps": fps,
        "tracks_created": tracker._next_id - 1,
        "confirmed_tracks": len(confirmed_ever),
        "alerts": len(alerts),
        "degraded_frames": degraded_frames,
        "wall_time_s": round(time.time() - started, 3),
        "outputs": {
            "residuals": str(csv_path),
            "alerts": str(alerts_path),
            "annotated": str(annotate_dir) if cfg.annotate else None,
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


_STABILITY_COLORS = {
    "stable": (80, 220, 80),
    "suspect": (250, 170, 40),
    "unstable": (255, 40, 40),
    None: (160, 160, 160),
}


def annotate_frame(frame: GrayFrame, report: FrameReport, path: Path | str) -> None:
    """Render track boxes, ids, and residual values over the frame;
    unstable tracks are drawn in red with a doubled outline."""
    from PIL import Image, ImageDraw

    img = Image.fromarray(frame.data).convert("RGB")
    draw = ImageDraw.Draw(img)
    for row in report.rows:
        color = _STABILITY_COLORS.get(row.stability, _STABILITY_COLORS[None])
        if row.status == "tentative":
            color = _STABILITY_COLORS[None]
        b = row.bbox
        rect = [b.x, b.y, b.x2 - 1, b.y2 - 1]
        width = 2 if row.stability == "unstable" else 1
        draw.rectangle(rect, outline=color, width=width)
        label = f"#{row.track_id}"
        if row.v_rel is not None:
            label += f" {row.v_rel:+.2f}"
        draw.text((b.x + 2, max(b.y - 10, 0)), label, fill=color)
    img.save(path)
