"""Global affine motion compensation.

Camera-induced apparent motion between consecutive frames is estimated
from background features only (container regions are excluded and
dilated), matched by pyramidal Lucas-Kanade tracking with a
forward-backward consistency check, and fitted with a seeded RANSAC
affine estimator refined by least squares over the consensus set.
Degraded estimates are replaced by the identity and flagged rather than
propagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter, uniform_filter

from .imgcore import (
    AffineTransform,
    GrayFrame,
    InstanceMask,
    bilinear_sample,
    warp_affine,
)
from .optflow import _pyramid_float


@dataclass(frozen=True)
class GmcConfig:
    """Tunables for the compensation chain; defaults suit bridge-wing
    footage scale and are exercised end-to-end by the simulator suite."""

    dilation: int = 5
    max_features: int = 250
    quality: float = 0.01
    min_distance: float = 8.0
    lk_window: int = 21
    lk_levels: int = 3
    lk_iterations: int = 15
    lk_min_eig: float = 1e-5
    fb_threshold: float = 1.0
    max_feature_displacement: float = 48.0
    inlier_threshold: float = 1.0
    max_iterations: int = 500
    confidence: float = 0.995
    min_inlier_ratio: float = 0.4
    min_correspondences: int = 12
    det_min: float = 0.8
    det_max: float = 1.25


@dataclass(frozen=True)
class FeaturePoint:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class Correspondence:
    """A feature at ``p`` in the earlier frame matched to ``q`` in the
    later frame; ``match_error`` is the mean residual window intensity."""

    px: float
    py: float
    qx: float
    qy: float
    match_error: float


@dataclass(frozen=True)
class GmcResult:
    transform: AffineTransform
    inlier_count: int
    inlier_ratio: float
    mean_reprojection_error: float
    degraded: bool


def _degraded_result() -> GmcResult:
    return GmcResult(AffineTransform.identity(), 0, 0.0, 0.0, True)


def build_exclusion_mask(masks: list[InstanceMask], dilation: int,
                         width: int | None = None, height: int | None = None) -> InstanceMask:
    """Union of the container masks dilated by ``dilation`` pixels
    (square structuring element); the complement is the background
    region eligible for feature extraction."""
    if not masks:
        if width is None or height is None:
            raise ValueError("empty mask list requires explicit dimensions")
        return InstanceMask(0, np.zeros((height, width), dtype=bool))
    bits = np.zeros((masks[0].height, masks[0].width), dtype=bool)
    for m in masks:
        bits |= m.dense()
    if dilation > 0:
        bits = maximum_filter(bits, size=2 * dilation + 1, mode="constant")
    return InstanceMask(0, bits)


def _min_eig_response(img: np.ndarray, block: int = 3) -> np.ndarray:
    """Shi-Tomasi corner strength: smaller eigenvalue of the local
    gradient covariance, box-summed over ``block``."""
    gx = np.gradient(img, axis=1)
    gy = np.gradient(img, axis=0)
    sxx = uniform_filter(gx * gx, size=block, mode="reflect")
    sxy = uniform_filter(gx * gy, size=block, mode="reflect")
    syy = uniform_filter(gy * gy, size=block, mode="reflect")
    return 0.5 * ((sxx + syy) - np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy))


def detect_features(
    frame: GrayFrame,
    exclusion: InstanceMask,
    max_count: int,
    quality: float,
    min_distance: float,
    border: int = 3,
) -> list[FeaturePoint]:
    """Strongest corners outside the exclusion region.

    Corner responses are thresholded at ``quality`` times the maximum
    response over eligible pixels, non-maximum suppressed, and selected
    greedily in descending score with ``min_distance`` spacing.
    """
    img = frame.to_float()
    h, w = img.shape
    resp = _min_eig_response(img)
    allowed = ~exclusion.dense() if exclusion.pixel_count else np.ones((h, w), bool)
    border = max(border, 1)
    allowed[:border, :] = False
    allowed[-border:, :] = False
    allowed[:, :border] = False
    allowed[:, -border:] = False
    if not allowed.any():
        return []
    max_resp = resp[allowed].max()
    if max_resp <= 0:
        return []
    peaks = (resp >= maximum_filter(resp, size=3, mode="reflect")) & allowed
    peaks &= resp >= quality * max_resp
    ys, xs = np.nonzero(peaks)
    if xs.size == 0:
        return []
    scores = resp[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    xs, ys, scores = xs[order], ys[order], scores[order]

    # greedy min-distance acceptance over a coarse spatial grid
    cell = max(min_distance, 1.0)
    grid: dict[tuple[int, int], list[tuple[float, float]]] = {}
    out: list[FeaturePoint] = []
    min_d2 = min_distance * min_distance
    for x, y, s in zip(xs, ys, scores):
        cx, cy = int(x / cell), int(y / cell)
        ok = True
        for gx in range(cx - 1, cx + 2):
            for gy in range(cy - 1, cy + 2):
                for ax, ay in grid.get((gx, gy), ()):
                    if (ax - x) ** 2 + (ay - y) ** 2 < min_d2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            out.append(FeaturePoint(float(x), float(y), float(s)))
            grid.setdefault((cx, cy), []).append((float(x), float(y)))
            if len(out) >= max_count:
                break
    return out


def _sample_windows(img: np.ndarray, cx: np.ndarray, cy: np.ndarray, offs: np.ndarray):
    """Clamped bilinear windows around (cx, cy); coords shape (n,), offs (k,)."""
    h, w = img.shape
    wx = np.clip(cx[:, None, None] + offs[None, None, :], 0, w - 1)
    wy = np.clip(cy[:, None, None] + offs[None, :, None], 0, h - 1)
    return bilinear_sample(img, wx.astype(np.float32), wy.astype(np.float32))


def _lk_track(
    pyr_a: list[np.ndarray],
    pyr_b: list[np.ndarray],
    pts: np.ndarray,
    window: int,
    iterations: int,
    min_eig: float,
):
    """Pyramidal Lucas-Kanade: track each point of ``pts`` (n, 2) from the
    image stack ``pyr_a`` into ``pyr_b``. Returns (tracked points, lost
    flags, mean residual per point)."""
    n = pts.shape[0]
    levels = len(pyr_a)
    r = window // 2
    offs = np.arange(-r, r + 1, dtype=np.float32)
    d = np.zeros((n, 2), dtype=np.float32)
    lost = np.zeros(n, dtype=bool)
    err = np.zeros(n, dtype=np.float32)
    area = float(window * window)
    for level in range(levels - 1, -1, -1):
        a, b = pyr_a[level], pyr_b[level]
        h, w = a.shape
        scale = a.shape[1] / pyr_a[0].shape[1]
        p = (pts * scale).astype(np.float32)
        if level < levels - 1:
            d *= np.float32(pyr_a[level].shape[1] / pyr_a[level + 1].shape[1])
        ax_img = np.gradient(a, axis=1)
        ay_img = np.gradient(a, axis=0)
        iw = _sample_windows(a, p[:, 0], p[:, 1], offs)
        ixw = _sample_windows(ax_img, p[:, 0], p[:, 1], offs)
        iyw = _sample_windows(ay_img, p[:, 0], p[:, 1], offs)
        gxx = (ixw * ixw).sum(axis=(1, 2))
        gxy = (ixw * iyw).sum(axis=(1, 2))
        gyy = (iyw * iyw).sum(axis=(1, 2))
        mineig = 0.5 * ((gxx + gyy) - np.sqrt((gxx - gyy) ** 2 + 4 * gxy * gxy))
        lost |= mineig / (area * 255.0 * 255.0) < min_eig
        det = gxx * gyy - gxy * gxy
        degenerate = det <= 1e-9
        lost |= degenerate
        det = np.where(degenerate, 1.0, det)
        active = ~lost
        for _ in range(iterations):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            jw = _sample_windows(b, p[idx, 0] + d[idx, 0], p[idx, 1] + d[idx, 1], offs)
            diff = iw[idx] - jw
            bx = (diff * ixw[idx]).sum(axis=(1, 2))
            by = (diff * iyw[idx]).sum(axis=(1, 2))
            ddx = (gyy[idx] * bx - gxy[idx] * by) / det[idx]
            ddy = (gxx[idx] * by - gxy[idx] * bx) / det[idx]
            d[idx, 0] += ddx.astype(np.float32)
            d[idx, 1] += ddy.astype(np.float32)
            err[idx] = np.abs(diff).mean(axis=(1, 2))
            active[idx] = np.hypot(ddx, ddy) >= 0.01
        qx = p[:, 0] + d[:, 0]
        qy = p[:, 1] + d[:, 1]
        lost |= (qx < 0) | (qx > w - 1) | (qy < 0) | (qy > h - 1)
    return pts + d, lost, err


def match_features(
    prev: GrayFrame,
    cur: GrayFrame,
    points: list[FeaturePoint],
    cfg: GmcConfig | None = None,
) -> list[Correspondence]:
    """Sparse tracking of ``points`` from prev into cur with a
    forward-backward consistency check; inconsistent or implausibly far
    matches are dropped."""
    cfg = cfg or GmcConfig()
    if prev.width != cur.width or prev.height != cur.height:
        raise ValueError("frames must be congruent")
    if not points:
        return []
    pyr_a = _pyramid_float(prev.to_float(), cfg.lk_levels, 0.5)
    pyr_b = _pyramid_float(cur.to_float(), cfg.lk_levels, 0.5)
    pts = np.array([[p.x, p.y] for p in points], dtype=np.float32)
    fwd, lost_f, err_f = _lk_track(pyr_a, pyr_b, pts, cfg.lk_window, cfg.lk_iterations, cfg.lk_min_eig)
    back, lost_b, _ = _lk_track(pyr_b, pyr_a, fwd, cfg.lk_window, cfg.lk_iterations, cfg.lk_min_eig)
    fb_err = np.hypot(back[:, 0] - pts[:, 0], back[:, 1] - pts[:, 1])
    disp = np.hypot(fwd[:, 0] - pts[:, 0], fwd[:, 1] - pts[:, 1])
    keep = (
        ~lost_f
        & ~lost_b
        & (fb_err <= cfg.fb_threshold)
        & (disp <= cfg.max_feature_displacement)
    )
    return [
        Correspondence(
            float(pts[i, 0]), float(pts[i, 1]), float(fwd[i, 0]), float(fwd[i, 1]), float(err_f[i])
        )
        for i in np.nonzero(keep)[0]
    ]


def _affine_from_three(p: np.ndarray, q: np.ndarray) -> AffineTransform | None:
    b = np.column_stack([p, np.ones(3)])
    if abs(np.linalg.det(b)) < 1e-6:
        return None
    sol = np.linalg.solve(b, q)  # columns: (a00,a01,bx) resp. (a10,a11,by)
    return AffineTransform(sol[0, 0], sol[1, 0], sol[0, 1], sol[1, 1], sol[2, 0], sol[2, 1])


def _reprojection_errors(m: AffineTransform, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    proj = m.apply(p)
    return np.hypot(proj[:, 0] - q[:, 0], proj[:, 1] - q[:, 1])


def _lsq_affine(p: np.ndarray, q: np.ndarray) -> AffineTransform | None:
    """Normal-equation least squares over all given correspondences."""
    b = np.column_stack([p, np.ones(len(p))])
    g = b.T @ b
    if abs(np.linalg.det(g)) < 1e-9:
        return None
    sol = np.linalg.solve(g, b.T @ q)
    return AffineTransform(sol[0, 0], sol[1, 0], sol[0, 1], sol[1, 1], sol[2, 0], sol[2, 1])


def _ransac_bound(inlier_ratio: float, confidence: float) -> int:
    if inlier_ratio <= 0.0:
        return np.iinfo(np.int32).max
    w3 = inlier_ratio**3
    if w3 >= 1.0:
        return 1
    return int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w3)))


def estimate_affine_ransac(
    corrs: list[Correspondence],
    inlier_threshold: float = 1.0,
    max_iterations: int = 500,
    seed: int = 0,
    *,
    confidence: float = 0.995,
    min_inlier_ratio: float = 0.4,
    min_correspondences: int = 12,
    det_min: float = 0.8,
    det_max: float = 1.25,
) -> GmcResult:
    """Consensus affine fit of the correspondence set.

    Minimal samples of 3 points propose transforms; the hypothesis
    keeping the most correspondences under ``inlier_threshold``
    reprojection error wins, and the final transform is refit by least
    squares over its consensus set. Deterministic given ``seed``. A thin
    consensus, too few correspondences, or an implausible determinant
    yields a degraded identity result instead of a bad transform.
    """
    n = len(corrs)
    if n < 3:
        return _degraded_result()
    p = np.array([[c.px, c.py] for c in corrs], dtype=np.float64)
    q = np.array([[c.qx, c.qy] for c in corrs], dtype=np.float64)

    rng = np.random.default_rng(seed)
    best_mask: np.ndarray | None = None
    best_count = 0
    bound = max_iterations
    i = 0
    while i < bound:
        idx = rng.choice(n, size=3, replace=False)
        cand = _affine_from_three(p[idx], q[idx])
        i += 1
        if cand is None:
            continue
        inl = _reprojection_errors(cand, p, q) < inlier_threshold
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_mask = inl
            bound = min(max_iterations, _ransac_bound(count / n, confidence))

    if best_mask is None or best_count < 3:
        return _degraded_result()

    refit = _lsq_affine(p[best_mask], q[best_mask])
    if refit is None:
        return _degraded_result()
    errors = _reprojection_errors(refit, p[best_mask], q[best_mask])
    ratio = best_count / n
    result = GmcResult(refit, best_count, ratio, float(errors.mean()), False)
    if (
        ratio < min_inlier_ratio
        or n < min_correspondences
        or not (det_min <= refit.det <= det_max)
    ):
        return GmcResult(AffineTransform.identity(), best_count, ratio, float(errors.mean()), True)
    return result


def compensate(
    prev: GrayFrame,
    cur: GrayFrame,
    masks: list[InstanceMask],
    cfg: GmcConfig | None = None,
    seed: int = 0,
) -> tuple[GrayFrame, GmcResult]:
    """Full compensation chain: exclusion mask, feature detection on the
    earlier frame, matching, RANSAC estimation, and alignment of the
    later frame into the earlier frame's reference.

    When the estimate is degraded, ``cur`` is returned unwarped with the
    flag set so downstream stages treat the frame as missing.
    """
    cfg = cfg or GmcConfig()
    if prev.width != cur.width or prev.height != cur.height:
        raise ValueError("frames must be congruent")
    exclusion = build_exclusion_mask(masks, cfg.dilation, prev.width, prev.height)
    pts = detect_features(
        prev,
        exclusion,
        cfg.max_features,
        cfg.quality,
        cfg.min_distance,
        border=cfg.lk_window // 2 + 1,
    )
    corrs = match_features(prev, cur, pts, cfg)
    result = estimate_affine_ransac(
        corrs,
        cfg.inlier_threshold,
        cfg.max_iterations,
        seed,
        confidence=cfg.confidence,
        min_inlier_ratio=cfg.min_inlier_ratio,
        min_correspondences=cfg.min_correspondences,
        det_min=cfg.det_min,
        det_max=cfg.det_max,
    )
    if result.degraded:
        return cur, result
    # Estimated motion maps prev coordinates to cur coordinates, which is
    # exactly the output-to-source map warp_affine expects for aligning
    # cur back onto prev (content motion is undone).
    aligned = warp_affine(cur, result.transform)
    return aligned, result
