"""On-disk formats: PGM frame sequences, the mask JSON stream, raw Y8
frames, and the optional binary flow dump.

Mask stream: one JSON record per frame,
``{"frame_index": int, "instances": [{"label": int, "bbox": [x, y, w, h],
"rle": [counts...]}]}``, stored one record per line. ``rle`` is the
uncompressed row-major run-length counts of the binary mask, starting
with a run of zeros (COCO-style uncompressed RLE, but row-major to match
the frame layout).
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import DataError
from .imgcore import GrayFrame, InstanceMask
from .optflow import FlowField

FLOW_MAGIC = b"DWFLOW01"

_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(frame: GrayFrame, path: Path | str) -> None:
    path = Path(path)
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    path.write_bytes(header + frame.data.tobytes())


def read_pgm(path: Path | str) -> GrayFrame:
    path = Path(path)
    raw = path.read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise DataError(f"{path}: not a binary P5 PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval={maxval})")
    pixels = raw[m.end():]
    expected = width * height
    if len(pixels) < expected:
        raise DataError(f"{path}: truncated pixel data ({len(pixels)} < {expected})")
    data = np.frombuffer(pixels[:expected], dtype=np.uint8).reshape(height, width)
    return GrayFrame(data.copy())


def read_y8(path: Path | str, width: int, height: int) -> GrayFrame:
    """Raw single-plane 8-bit frame; dimensions come from the run config."""
    raw = Path(path).read_bytes()
    expected = width * height
    if len(raw) != expected:
        raise DataError(f"{path}: raw Y8 size {len(raw)} != {width}x{height}")
    return GrayFrame(np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy())


def rle_encode(bits: np.ndarray) -> list[int]:
    """Row-major run-length counts, first run counting zeros (may be 0)."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def rle_decode(counts: list[int], width: int, height: int) -> np.ndarray:
    total = sum(counts)
    if total != width * height:
        raise DataError(
            f"RLE counts sum to {total}, expected {width * height} for {width}x{height}"
        )
    if any(c < 0 for c in counts):
        raise DataError("RLE counts must be non-negative")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return flat.reshape(height, width)


def write_mask_stream(records: list[dict], path: Path | str) -> None:
    """Write one JSON record per line; records must already be serializable."""
    path = Path(path)
    with path.open("w", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def mask_record(frame_index: int, masks: list[InstanceMask]) -> dict:
    instances = []
    for m in masks:
        if m.pixel_count == 0 or m.bbox is None:
            raise DataError(f"instance {m.label} in frame {frame_index} is empty")
        instances.append(
            {
                "label": m.label,
                "bbox": list(m.bbox.as_tuple()),
                "rle": rle_encode(m.dense()),
            }
        )
    return {"frame_index": frame_index, "instances": instances}


def parse_mask_record(rec: dict, width: int, height: int) -> tuple[int, list[InstanceMask]]:
    try:
        frame_index = int(rec["frame_index"])
        raw_instances = rec["instances"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed mask record: {exc}") from exc
    masks = []
    for inst in raw_instances:
        try:
            label = int(inst["label"])
            counts = inst["rle"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(
                f"malformed instance in frame {frame_index}: {exc}"
            ) from exc
        if label <= 0:
            raise DataError(f"frame {frame_index}: labels must be positive, got {label}")
        bits = rle_decode(counts, width, height)
        mask = InstanceMask(label, bits)
        if mask.pixel_count == 0:
            raise DataError(f"frame {frame_index}: instance {label} decodes empty")
        if "bbox" in inst and list(inst["bbox"]) != list(mask.bbox.as_tuple()):
            raise DataError(
                f"frame {frame_index}: instance {label} bbox {inst['bbox']} "
                f"does not match decoded extent {list(mask.bbox.as_tuple())}"
            )
        masks.append(mask)
    return frame_index, masks


def read_mask_stream(path: Path | str, width: int, height: int) -> dict[int, list[InstanceMask]]:
    """Load the whole stream keyed by frame index."""
    path = Path(path)
    out: dict[int, list[InstanceMask]] = {}
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            frame_index, masks = parse_mask_record(rec, width, height)
            if frame_index in out:
                raise DataError(f"{path}:{lineno}: duplicate frame_index {frame_index}")
            out[frame_index] = masks
    return out


def write_flow_dump(flow: FlowField, path: Path | str) -> None:
    """Binary debug dump: 8-byte magic, then the u plane and v plane as
    little-endian float32 in row-major order."""
    u = flow.u.astype("<f4", copy=False)
    v = flow.v.astype("<f4", copy=False)
    Path(path).write_bytes(FLOW_MAGIC + u.tobytes() + v.tobytes())


def read_flow_dump(path: Path | str, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(FLOW_MAGIC):
        raise DataError(f"{path}: missing {FLOW_MAGIC!r} header")
    body = raw[len(FLOW_MAGIC):]
    plane = width * height * 4
    if len(body) != 2 * plane:
        raise DataError(f"{path}: body size {len(body)} != 2 planes of {plane}")
    u = np.frombuffer(body[:plane], dtype="<f4").reshape(height, width)
    v = np.frombuffer(body[plane:], dtype="<f4").reshape(height, width)
    return u.copy(), v.copy()


def frame_paths(directory: Path | str, pattern: str = "*.pgm") -> list[Path]:
    """Frame files sorted by their zero-padded numeric stem."""
    directory = Path(directory)
    paths = sorted(directory.glob(pattern))
    return paths
