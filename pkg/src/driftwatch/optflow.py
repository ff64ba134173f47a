"""Dense two-frame optical flow via polynomial expansion.

Each frame is approximated locally by quadratic polynomials fitted under a
Gaussian applicability window (the Farnebäck scheme); displacement is the
least-squares solution of the polynomial-matching equations aggregated
over a neighborhood, refined coarse-to-fine over an image pyramid.

The flow convention matches the warp convention in :mod:`.imgcore`:
``u > 0`` means scene content moved toward +x between the two frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d, gaussian_filter, uniform_filter

from .errors import ConfigError, ContractError
from .imgcore import MIN_FRAME_SIDE, GrayFrame, bilinear_sample

# Determinant below this makes the local 2x2 system unsolvable.
_DET_EPS = 1e-6


@dataclass(frozen=True)
class FlowParams:
    """Hyperparameters of the dense flow estimator.

    Defaults are conventional settings balancing sub-pixel sensitivity
    against small apparent object sizes; none are data-dependent.
    """

    pyramid_levels: int = 3
    pyr_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    # Artifact plumbing: validity thresholds for downstream aggregation.
    max_displacement: float = 32.0
    min_grad_energy: float = 25.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if not (0.0 < self.pyr_scale < 1.0):
            raise ConfigError(f"pyr_scale must be in (0,1), got {self.pyr_scale}")
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ConfigError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.poly_n not in (5, 7):
            raise ConfigError(f"poly_n must be 5 or 7, got {self.poly_n}")
        if self.poly_sigma <= 0:
            raise ConfigError(f"poly_sigma must be > 0, got {self.poly_sigma}")
        if self.max_displacement <= 0:
            raise ConfigError("max_displacement must be > 0")


@dataclass(eq=False)
class FlowField:
    """Per-pixel displacement field with a reliability bit per pixel."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.valid.shape):
            raise ContractError("u, v, valid must share one shape")
        if not np.isfinite(self.u).all() or not np.isfinite(self.v).all():
            raise ContractError("flow entries must be finite")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    def with_margin_invalidated(self, margin: int) -> "FlowField":
        """Copy with an additional border band marked unreliable."""
        if margin <= 0:
            return self
        valid = self.valid.copy()
        m = min(margin, min(self.height, self.width) // 2)
        valid[:m, :] = False
        valid[-m:, :] = False
        valid[:, :m] = False
        valid[:, -m:] = False
        return FlowField(self.u, self.v, valid)


def _resize_bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape
    xs = (np.arange(new_w, dtype=np.float32) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h, dtype=np.float32) + 0.5) * (h / new_h) - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, w - 1), np.clip(ys, 0, h - 1))
    return bilinear_sample(img, gx.astype(np.float32), gy.astype(np.float32))


def _downsample(img: np.ndarray, scale: float) -> np.ndarray:
    """One pyramid reduction: anti-alias blur then bilinear resample."""
    sigma = 0.5 * np.sqrt((1.0 / scale) ** 2 - 1.0)
    smoothed = gaussian_filter(img, sigma=sigma, mode="reflect")
    new_h = max(1, int(round(img.shape[0] * scale)))
    new_w = max(1, int(round(img.shape[1] * scale)))
    return _resize_bilinear(smoothed, new_h, new_w)


def _pyramid_float(img: np.ndarray, levels: int, scale: float) -> list[np.ndarray]:
    out = [img]
    for _ in range(1, levels):
        out.append(_downsample(out[-1], scale))
    return out


def build_pyramid(frame: GrayFrame, levels: int, scale: float = 0.5) -> list[GrayFrame]:
    """Coarse-to-fine image stack: level 0 is the input, each further level
    is Gaussian-smoothed and resampled by ``scale``."""
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    if not (0.0 < scale < 1.0):
        raise ConfigError(f"scale must be in (0,1), got {scale}")
    planes = _pyramid_float(frame.to_float(), levels, scale)
    for p in planes:
        if min(p.shape) < MIN_FRAME_SIDE:
            raise ConfigError(
                f"pyramid level of size {p.shape[1]}x{p.shape[0]} is below the "
                f"minimum side {MIN_FRAME_SIDE}"
            )
    return [frame] + [GrayFrame.from_array(p) for p in planes[1:]]


def _poly_kernels(n: int, sigma: float):
    m = n // 2
    t = np.arange(-m, m + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    g /= g.sum()
    m2 = float((g * t**2).sum())
    m4 = float((g * t**4).sum())
    # Inverse of the (constant, dual) normal matrix coupling {1, x^2, y^2}.
    G3 = np.array([[1.0, m2, m2], [m2, m4, m2 * m2], [m2, m2 * m2, m4]])
    G3i = np.linalg.inv(G3)
    return (
        g.astype(np.float32),
        (t * g).astype(np.float32),
        (t * t * g).astype(np.float32),
        m2,
        G3i,
    )


def poly_expansion(img: np.ndarray, n: int, sigma: float):
    """Quadratic-model coefficient planes (a11, a12, a22, b1, b2) of a
    float image: locally ``f(p+d) ~ c + b.d + d'Ad`` with
    ``A = [[a11, a12], [a12, a22]]`` and ``b = (b1, b2)``."""
    g, tg, ttg, m2, G3i = _poly_kernels(n, sigma)
    cg = correlate1d(img, g, axis=1, mode="reflect")
    cx = correlate1d(img, tg, axis=1, mode="reflect")
    cxx = correlate1d(img, ttg, axis=1, mode="reflect")
    h1 = correlate1d(cg, g, axis=0, mode="reflect")
    h2 = correlate1d(cx, g, axis=0, mode="reflect")
    h3 = correlate1d(cg, tg, axis=0, mode="reflect")
    h4 = correlate1d(cxx, g, axis=0, mode="reflect")
    h5 = correlate1d(cg, ttg, axis=0, mode="reflect")
    h6 = correlate1d(cx, tg, axis=0, mode="reflect")
    b1 = h2 / m2
    b2 = h3 / m2
    a12 = h6 / (2.0 * m2 * m2)
    a11 = np.float32(G3i[1, 0]) * h1 + np.float32(G3i[1, 1]) * h4 + np.float32(G3i[1, 2]) * h5
    a22 = np.float32(G3i[2, 0]) * h1 + np.float32(G3i[2, 1]) * h4 + np.float32(G3i[2, 2]) * h5
    return a11, a12, a22, b1, b2


def gradient_energy(frame: GrayFrame, params: FlowParams) -> np.ndarray:
    """Window-averaged squared linear-term magnitude of the local
    polynomial model; the validity floor ``params.min_grad_energy``
    applies to this quantity."""
    _, _, _, b1, b2 = poly_expansion(frame.to_float(), params.poly_n, params.poly_sigma)
    return uniform_filter(b1 * b1 + b2 * b2, size=params.window_size, mode="reflect")


def _solve_step(exp1, exp2, u, v, winsize, grid):
    """One displacement refinement: match the two expansions under the
    current displacement field and solve the aggregated 2x2 systems."""
    a11_1, a12_1, a22_1, b1_1, b2_1 = exp1
    a11_2, a12_2, a22_2, b1_2, b2_2 = exp2
    gx, gy = grid
    h, w = u.shape
    sx = np.clip(gx + u, 0, w - 1)
    sy = np.clip(gy + v, 0, h - 1)
    a11 = 0.5 * (a11_1 + bilinear_sample(a11_2, sx, sy))
    a12 = 0.5 * (a12_1 + bilinear_sample(a12_2, sx, sy))
    a22 = 0.5 * (a22_1 + bilinear_sample(a22_2, sx, sy))
    db1 = -0.5 * (bilinear_sample(b1_2, sx, sy) - b1_1) + a11 * u + a12 * v
    db2 = -0.5 * (bilinear_sample(b2_2, sx, sy) - b2_1) + a12 * u + a22 * v
    g11 = uniform_filter(a11 * a11 + a12 * a12, size=winsize, mode="reflect")
    g12 = uniform_filter(a12 * (a11 + a22), size=winsize, mode="reflect")
    g22 = uniform_filter(a22 * a22 + a12 * a12, size=winsize, mode="reflect")
    r1 = uniform_filter(a11 * db1 + a12 * db2, size=winsize, mode="reflect")
    r2 = uniform_filter(a12 * db1 + a22 * db2, size=winsize, mode="reflect")
    det = g11 * g22 - g12 * g12
    solvable = det > _DET_EPS
    safe_det = np.where(solvable, det, 1.0)
    new_u = np.where(solvable, (g22 * r1 - g12 * r2) / safe_det, 0.0).astype(np.float32)
    new_v = np.where(solvable, (g11 * r2 - g12 * r1) / safe_det, 0.0).astype(np.float32)
    return new_u, new_v, solvable


def farneback_flow(prev: GrayFrame, cur: GrayFrame, params: FlowParams | None = None) -> FlowField:
    """Dense displacement field from ``prev`` to ``cur``.

    Deterministic given inputs and parameters. Validity bits clear pixels
    with degenerate local structure, implausibly large displacement, or
    within half an aggregation window of the border.
    """
    params = params or FlowParams()
    if prev.width != cur.width or prev.height != cur.height:
        raise ContractError(
            f"frame dimensions differ: {prev.width}x{prev.height} vs {cur.width}x{cur.height}"
        )
    required = params.poly_n * (1.0 / params.pyr_scale) ** params.pyramid_levels
    if min(prev.width, prev.height) < required:
        raise ConfigError(
            f"frames of {prev.width}x{prev.height} are too small for "
            f"{params.pyramid_levels} pyramid levels with poly_n={params.poly_n} "
            f"(need >= {int(np.ceil(required))})"
        )

    pyr_prev = _pyramid_float(prev.to_float(), params.pyramid_levels, params.pyr_scale)
    pyr_cur = _pyramid_float(cur.to_float(), params.pyramid_levels, params.pyr_scale)

    u = v = None
    solvable = None
    max_d = np.float32(params.max_displacement)
    for level in range(params.pyramid_levels - 1, -1, -1):
        f1, f2 = pyr_prev[level], pyr_cur[level]
        h, w = f1.shape
        if u is None:
            u = np.zeros((h, w), dtype=np.float32)
            v = np.zeros((h, w), dtype=np.float32)
        else:
            su = np.float32(w / u.shape[1])
            sv = np.float32(h / u.shape[0])
            u = _resize_bilinear(u, h, w) * su
            v = _resize_bilinear(v, h, w) * sv
        exp1 = poly_expansion(f1, params.poly_n, params.poly_sigma)
        exp2 = poly_expansion(f2, params.poly_n, params.poly_sigma)
        grid = np.meshgrid(
            np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32)
        )
        for _ in range(params.iterations):
            u, v, solvable = _solve_step(exp1, exp2, u, v, params.window_size, grid)
            np.clip(u, -max_d, max_d, out=u)
            np.clip(v, -max_d, max_d, out=v)
        if level == 0:
            energy = uniform_filter(
                exp1[3] ** 2 + exp1[4] ** 2, size=params.window_size, mode="reflect"
            )

    valid = solvable & (energy > params.min_grad_energy)
    valid &= (np.abs(u) <= params.max_displacement) & (np.abs(v) <= params.max_displacement)
    border = params.window_size // 2
    valid[:border, :] = False
    valid[-border:, :] = False
    valid[:, :border] = False
    valid[:, -border:] = False
    return FlowField(u, v, valid)
