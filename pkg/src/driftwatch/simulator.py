"""Ground-truth synthetic scenes: textured container stacks under
scripted affine camera motion, optional per-container lateral drift, and
segmentation dropouts, rendered deterministically from a seed.

Conventions:

* ``camera_path[t]`` is the forward camera transform of frame t: a scene
  point s appears at pixel ``camera_path[t](s)``. The inter-frame motion
  a compensator should recover is ``camera_path[t] @ camera_path[t-1]^-1``.
* Containers are planar textured rectangles; drift displaces them
  horizontally in scene coordinates before the camera transform is
  applied, and the emitted per-frame ground truth records the resulting
  scene-space velocity.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError, DataError
from .imgcore import (
    AffineTransform,
    BoundingBox,
    GrayFrame,
    InstanceMask,
    bilinear_sample,
)

SCENARIO_SCHEMA_VERSION = 1
GROUND_TRUTH_SCHEMA_VERSION = 1

_BG_SALT = 101
_NOISE_SALT = 202
_TILE_SALT = 303

_DET_BAND = (0.8, 1.25)


@dataclass(frozen=True)
class ContainerSpec:
    """One rendered container: its resting box, texture seed, piecewise
    drift segments (start_frame, horizontal velocity in px/frame; each
    segment lasts until the next one starts), and half-open occlusion
    intervals during which its mask is withheld."""

    nominal_bbox: BoundingBox
    texture_seed: int
    drift: tuple[tuple[int, float], ...] = ()
    occluded: tuple[tuple[int, int], ...] = ()

    def drift_displacement(self, t: int) -> float:
        """Integrated horizontal displacement at frame t (scene px)."""
        if not self.drift:
            return 0.0
        disp = 0.0
        starts = [seg[0] for seg in self.drift]
        for i, (start, vel) in enumerate(self.drift):
            end = starts[i + 1] if i + 1 < len(self.drift) else None
            upper = t if end is None else min(t, end)
            if upper > start:
                disp += vel * (upper - start)
        return disp

    def drift_velocity(self, t: int) -> float:
        """Scene-space horizontal velocity between frames t-1 and t."""
        if t <= 0:
            return 0.0
        return self.drift_displacement(t) - self.drift_displacement(t - 1)

    def occluded_at(self, t: int) -> bool:
        return any(start <= t < end for start, end in self.occluded)


@dataclass(frozen=True)
class Scenario:
    frame_size: tuple[int, int]  # (width, height)
    fps: float
    duration: int
    containers: tuple[ContainerSpec, ...]
    camera_path: tuple[AffineTransform, ...]
    noise_sigma: float = 0.0
    illumination_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        w, h = self.frame_size
        if w < 8 or h < 8:
            raise ConfigError(f"frame_size {self.frame_size} below minimum 8x8")
        if self.duration < 1:
            raise ConfigError("duration must be >= 1 frame")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if len(self.camera_path) != self.duration:
            raise ConfigError(
                f"camera_path has {len(self.camera_path)} transforms for "
                f"{self.duration} frames"
            )
        for i, c in enumerate(self.camera_path):
            if not (_DET_BAND[0] <= c.det <= _DET_BAND[1]):
                raise ConfigError(
                    f"camera_path[{i}] determinant {c.det:.4f} outside plausibility "
                    f"band {_DET_BAND}"
                )
        for idx, spec in enumerate(self.containers):
            b = spec.nominal_bbox
            if b.x2 > w or b.y2 > h:
                raise ConfigError(f"container {idx} box {b} exceeds frame {w}x{h}")
            starts = [seg[0] for seg in spec.drift]
            if starts != sorted(set(starts)):
                raise ConfigError(f"container {idx} drift segments overlap")
            for start, end in spec.occluded:
                if not (0 <= start < end <= self.duration):
                    raise ConfigError(
                        f"container {idx} occlusion [{start},{end}) outside duration"
                    )

    def label_of(self, index: int) -> int:
        """Containers carry implicit labels 1..N by list position."""
        return index + 1


@dataclass(frozen=True)
class FrameTruth:
    camera: AffineTransform
    per_container_u: dict[int, float]

    def interframe(self, prev_camera: AffineTransform) -> AffineTransform:
        """Ground-truth pixel motion from the previous frame to this one."""
        return self.camera @ prev_camera.inverse()


def sway_camera_path(
    duration: int,
    frame_size: tuple[int, int],
    x_amp: float = 0.0,
    y_amp: float = 0.0,
    rot_amp_deg: float = 0.0,
    period_frames: float = 40.0,
    phase: float = 0.0,
) -> tuple[AffineTransform, ...]:
    """Oscillatory roll/sway path about the frame center, the vessel-like
    stand-in for arbitrary scripted camera motion."""
    w, h = frame_size
    cx, cy = w / 2.0, h / 2.0
    path = []
    for t in range(duration):
        arg = 2.0 * math.pi * t / period_frames + phase
        rot = AffineTransform.rotation_about(rot_amp_deg * math.sin(arg), cx, cy)
        trans = AffineTransform.translation(x_amp * math.sin(arg), y_amp * math.cos(arg))
        path.append(trans @ rot)
    return tuple(path)


def _texture_background(shape: tuple[int, int], seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _BG_SALT])
    coarse = gaussian_filter(rng.normal(0.0, 160.0, shape), 6.0)
    fine = gaussian_filter(rng.normal(0.0, 55.0, shape), 1.0)
    return np.clip(115.0 + coarse + fine, 8.0, 247.0).astype(np.float32)


def _texture_tile(w: int, h: int, texture_seed: int) -> np.ndarray:
    """Container face: corrugation ridges plus fine detail so local
    gradients stay strong for flow in both axes."""
    rng = np.random.default_rng([texture_seed, _TILE_SALT])
    tone = rng.uniform(70.0, 200.0)
    xs = np.arange(w, dtype=np.float32)
    ridges = 26.0 * np.sin(2.0 * math.pi * xs / rng.uniform(6.0, 9.0))
    tile = tone + np.tile(ridges, (h, 1))
    tile += gaussian_filter(rng.normal(0.0, 42.0, (h, w)), 0.8)
    tile += 18.0 * np.sin(2.0 * math.pi * np.arange(h, dtype=np.float32) / 11.0)[:, None]
    # darker frame rails at the top and bottom edges
    tile[:2, :] -= 40.0
    tile[-2:, :] -= 40.0
    return np.clip(tile, 8.0, 247.0).astype(np.float32)


class _SceneAssets:
    """Static per-scenario assets: padded background and container tiles."""

    def __init__(self, scenario: Scenario):
        w, h = scenario.frame_size
        pad = 8.0
        corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=float)
        for cam in scenario.camera_path:
            moved = cam.inverse().apply(corners)
            pad = max(pad, float(np.abs(moved - corners).max()))
        drift_extent = max(
            (abs(c.drift_displacement(t)) for c in scenario.containers
             for t in (scenario.duration - 1, scenario.duration)),
            default=0.0,
        )
        self.pad = int(math.ceil(pad + drift_extent)) + 4
        self.canvas_shape = (h + 2 * self.pad, w + 2 * self.pad)
        self.background = _texture_background(self.canvas_shape, scenario.seed)
        self.tiles = [
            _texture_tile(c.nominal_bbox.w, c.nominal_bbox.h, c.texture_seed)
            for c in scenario.containers
        ]


@functools.lru_cache(maxsize=8)
def _scene_assets(scenario: Scenario) -> _SceneAssets:
    return _SceneAssets(scenario)


def _splat_horizontal(canvas: np.ndarray, tile: np.ndarray, x: float, y: int) -> None:
    """Composite a tile at integer row ``y`` and sub-pixel column ``x``."""
    h, w = tile.shape
    c0 = max(int(math.floor(x)), 0)
    c1 = min(int(math.floor(x)) + w + 1, canvas.shape[1])
    if c1 <= c0 or y >= canvas.shape[0]:
        return
    cols = np.arange(c0, c1, dtype=np.float64)
    alpha = np.clip(np.minimum(cols + 1.0, x + w) - np.maximum(cols, x), 0.0, 1.0)
    # sample tile at the column centers relative to the container origin
    u = np.clip(cols - x, 0.0, w - 1.0).astype(np.float32)
    uy, ux = np.meshgrid(np.arange(h, dtype=np.float32), u, indexing="ij")
    values = bilinear_sample(tile, ux, uy)
    region = canvas[y : y + h, c0:c1]
    region[:] = alpha[None, : region.shape[1]] * values[: region.shape[0]] + (
        1.0 - alpha[None, : region.shape[1]]
    ) * region


def render(
    scenario: Scenario, t: int
) -> tuple[GrayFrame, list[InstanceMask], FrameTruth]:
    """Render frame ``t``: the composited scene under the frame's camera
    transform, exact instance masks for non-occluded containers, and the
    ground truth (camera transform, per-container scene velocity)."""
    if not (0 <= t < scenario.duration):
        raise ContractError(f"frame {t} outside scenario duration {scenario.duration}")
    cache = _scene_assets(scenario)
    pad = cache.pad
    w, h = scenario.frame_size

    canvas = cache.background.copy()
    positions = []
    for idx, spec in enumerate(scenario.containers):
        x = spec.nominal_bbox.x + pad + spec.drift_displacement(t)
        y = spec.nominal_bbox.y + pad
        _splat_horizontal(canvas, cache.tiles[idx], x, y)
        positions.append((x, y))

    cam = scenario.camera_path[t]
    inv = cam.inverse()
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sx = inv.a00 * gx + inv.a01 * gy + inv.bx + pad
    sy = inv.a10 * gx + inv.a11 * gy + inv.by + pad
    sx32 = sx.astype(np.float32)
    sy32 = sy.astype(np.float32)
    frame = bilinear_sample(canvas, sx32, sy32)

    frame = frame + scenario.illumination_drift * t
    if scenario.noise_sigma > 0:
        rng = np.random.default_rng([scenario.seed, _NOISE_SALT, t])
        frame = frame + rng.normal(0.0, scenario.noise_sigma, frame.shape)
    gray = GrayFrame.from_array(frame)

    masks: list[InstanceMask] = []
    truth_u: dict[int, float] = {}
    for idx, spec in enumerate(scenario.containers):
        label = scenario.label_of(idx)
        truth_u[label] = spec.drift_velocity(t)
        if spec.occluded_at(t):
            continue
        x, y = positions[idx]
        bits = (
            (sx >= x)
            & (sx < x + spec.nominal_bbox.w)
            & (sy >= y)
            & (sy < y + spec.nominal_bbox.h)
        )
        if bits.any():
            masks.append(InstanceMask(label, bits))
    return gray, masks, FrameTruth(cam, truth_u)


def scenario_hash(scenario: Scenario) -> str:
    return hashlib.sha256(
        json.dumps(scenario_to_json(scenario), sort_keys=True).encode()
    ).hexdigest()


def scenario_to_json(scenario: Scenario) -> dict:
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "frame_size": list(scenario.frame_size),
        "fps": scenario.fps,
        "duration": scenario.duration,
        "seed": scenario.seed,
        "noise_sigma": scenario.noise_sigma,
        "illumination_drift": scenario.illumination_drift,
        "containers": [
            {
                "bbox": list(c.nominal_bbox.as_tuple()),
                "texture_seed": c.texture_seed,
                "drift": [list(seg) for seg in c.drift],
                "occluded": [list(iv) for iv in c.occluded],
            }
            for c in scenario.containers
        ],
        "camera_path": [list(c.as_entries()) for c in scenario.camera_path],
    }


def scenario_from_json(doc: dict) -> Scenario:
    """Parse and validate a scenario document.

    ``camera_path`` may be given explicitly (one 6-entry row per frame)
    or generated from a ``camera_sway`` block.
    """
    try:
        frame_size = tuple(int(v) for v in doc["frame_size"])
        fps = float(doc.get("fps", 10.0))
        duration = int(doc["duration"])
        seed = int(doc.get("seed", 0))
        noise_sigma = float(doc.get("noise_sigma", 0.0))
        illumination = float(doc.get("illumination_drift", 0.0))
        raw_containers = doc["containers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"scenario: missing or malformed field: {exc}") from exc
    if len(frame_size) != 2:
        raise DataError("scenario: frame_size must be [width, height]")

    containers = []
    for i, rc in enumerate(raw_containers):
        try:
            bbox = BoundingBox(*(int(v) for v in rc["bbox"]))
            containers.append(
                ContainerSpec(
                    nominal_bbox=bbox,
                    texture_seed=int(rc.get("texture_seed", i + 1)),
                    drift=tuple(
                        (int(s), float(v)) for s, v in rc.get("drift", [])
                    ),
                    occluded=tuple(
                        (int(a), int(b)) for a, b in rc.get("occluded", [])
                    ),
                )
            )
        except (KeyError, TypeError, ValueError, ContractError) as exc:
            raise DataError(f"scenario: containers[{i}]: {exc}") from exc

    if "camera_path" in doc:
        try:
            path = tuple(AffineTransform(*(float(v) for v in row)) for row in doc["camera_path"])
        except (TypeError, ValueError, ContractError) as exc:
            raise DataError(f"scenario: camera_path: {exc}") from exc
    elif "camera_sway" in doc:
        sway = doc["camera_sway"]
        try:
            path = sway_camera_path(
                duration,
                frame_size,
                x_amp=float(sway.get("x_amp", 0.0)),
                y_amp=float(sway.get("y_amp", 0.0)),
                rot_amp_deg=float(sway.get("rot_amp_deg", 0.0)),
                period_frames=float(sway.get("period_frames", 40.0)),
                phase=float(sway.get("phase", 0.0)),
            )
        except (TypeError, ValueError) as exc:
            raise DataError(f"scenario: camera_sway: {exc}") from exc
    else:
        path = tuple(AffineTransform.identity() for _ in range(duration))

    try:
        return Scenario(
            frame_size=frame_size,
            fps=fps,
            duration=duration,
            containers=tuple(containers),
            camera_path=path,
            noise_sigma=noise_sigma,
            illumination_drift=illumination,
            seed=seed,
        )
    except ConfigError as exc:
        raise DataError(f"scenario: {exc}") from exc


def load_scenario(path: Path | str) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return scenario_from_json(doc)


def emit(scenario: Scenario, out_dir: Path | str) -> dict:
    """Write the scenario to disk: PGM frames, the mask stream, versioned
    ground truth, and a manifest listing everything with the scenario
    hash. Byte-identical for identical (scenario, seed)."""
    from .fileio import mask_record, write_mask_stream, write_pgm

    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {frames_dir}: {exc}") from exc

    mask_records = []
    truth_frames = []
    frame_files = []
    for t in range(scenario.duration):
        frame, masks, truth = render(scenario, t)
        name = f"frame_{t:06d}.pgm"
        try:
            write_pgm(frame, frames_dir / name)
        except OSError as exc:
            raise DataError(f"cannot write {frames_dir / name}: {exc}") from exc
        frame_files.append(f"frames/{name}")
        mask_records.append(mask_record(t, masks))
        truth_frames.append(
            {
                "frame_index": t,
                "camera": list(truth.camera.as_entries()),
                "containers": {
                    str(label): {
                        "u": truth.per_container_u[label],
                        "drifting": truth.per_container_u[label] != 0.0,
                    }
                    for label in sorted(truth.per_container_u)
                },
            }
        )

    write_mask_stream(mask_records, out_dir / "masks.jsonl")
    ground_truth = {
        "schema_version": GROUND_TRUTH_SCHEMA_VERSION,
        "frame_size": list(scenario.frame_size),
        "fps": scenario.fps,
        "frames": truth_frames,
    }
    (out_dir / "ground_truth.json").write_text(
        json.dumps(ground_truth, indent=1, sort_keys=True) + "\n"
    )
    (out_dir / "scenario.json").write_text(
        json.dumps(scenario_to_json(scenario), indent=1, sort_keys=True) + "\n"
    )
    manifest = {
        "scenario_hash": scenario_hash(scenario),
        "frames": frame_files,
        "masks": "masks.jsonl",
        "ground_truth": "ground_truth.json",
        "scenario": "scenario.json",
        "frame_count": scenario.duration,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
