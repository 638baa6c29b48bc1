"""Synthetic auto-gain thermal sequences with exact ground truth.

A large latent radiance field is viewed through a moving viewport; a per-pixel
bias field is added, hot events inject radiance that drives the per-frame
normalization bounds, and each frame is rendered as
``(radiance + bias - lo) / (hi - lo)``.  The recorded truth (per-frame
log-gain ``ln(hi - lo)`` and offset ``lo``, the bias field, the motion path)
makes every estimator quantity checkable: relative parameters, difference
constraints, and exact correspondences.

Motion offsets are integer pixels so rendered values are pure per-pixel
affine images of the latent radiance; fractional motion would interpolate and
break the exactness the oracle exists to provide.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import GenerationError
from .model import Frame, RelativeParams
from .temporal import CorrespondenceSet
from .validation import derive_seed

__all__ = [
    "HotEvent",
    "SceneSpec",
    "GroundTruth",
    "render_sequence",
    "truth_correspondences",
    "value_noise",
    "gaussian_bias_field",
    "wandering_bounds",
]


@dataclass(frozen=True)
class HotEvent:
    """Extra radiance over a scene-coordinate rectangle for a frame interval.

    Active for frames with ``start <= t < stop`` (1-based); the rectangle is
    (x0, y0, x1, y1) with exclusive upper bounds, in radiance-map coordinates.
    """

    start: int
    stop: int
    rect: tuple[int, int, int, int]
    amplitude: float

    def active(self, t: int) -> bool:
        return self.start <= t < self.stop


@dataclass
class SceneSpec:
    """Everything needed to render a sequence deterministically.

    ``agc_mode`` selects the per-frame normalization bounds: "minmax" (the
    default; bounds are the frame's extremes, so rendered frames span exactly
    [0, 1]), "percentile" (robust bounds, values outside are clipped), or
    "explicit" with ``agc_bounds`` rows of (lo, hi) that must cover the frame
    content.
    """

    radiance_map: np.ndarray
    viewport: tuple[int, int]
    motion_path: np.ndarray
    hot_events: list[HotEvent] = dataclass_field(default_factory=list)
    spatial_field: np.ndarray | None = None
    noise_sigma: float = 0.0
    agc_mode: str = "minmax"
    agc_percentiles: tuple[float, float] = (1.0, 99.0)
    agc_bounds: np.ndarray | None = None

    def __post_init__(self):
        self.radiance_map = np.asarray(self.radiance_map, dtype=np.float64)
        if self.radiance_map.ndim != 2:
            raise GenerationError("radiance_map must be 2-D")
        if not np.all(np.isfinite(self.radiance_map)):
            raise GenerationError("radiance_map must be finite")
        self.motion_path = np.asarray(self.motion_path)
        if self.motion_path.ndim != 2 or self.motion_path.shape[1] != 2:
            raise GenerationError("motion_path must be (n_frames, 2) offsets")
        if not np.issubdtype(self.motion_path.dtype, np.integer):
            if np.any(self.motion_path != np.rint(self.motion_path)):
                raise GenerationError("motion_path offsets must be integer pixels")
            self.motion_path = np.rint(self.motion_path).astype(int)
        w, h = self.viewport
        rh, rw = self.radiance_map.shape
        if w < 2 or h < 2:
            raise GenerationError("viewport too small")
        ox, oy = self.motion_path[:, 0], self.motion_path[:, 1]
        if ox.min() < 0 or oy.min() < 0 or ox.max() + w > rw or oy.max() + h > rh:
            raise GenerationError("motion_path leaves the radiance map")
        if self.spatial_field is not None:
            self.spatial_field = np.asarray(self.spatial_field, dtype=np.float64)
            if self.spatial_field.shape != (h, w):
                raise GenerationError("spatial_field must match the viewport")
        if self.agc_mode not in ("minmax", "percentile", "explicit"):
            raise GenerationError(f"unknown agc_mode {self.agc_mode!r}")
        if self.agc_mode == "explicit":
            if self.agc_bounds is None:
                raise GenerationError("explicit agc_mode requires agc_bounds")
            self.agc_bounds = np.asarray(self.agc_bounds, dtype=np.float64)
            if self.agc_bounds.shape != (self.n_frames, 2):
                raise GenerationError("agc_bounds must be (n_frames, 2)")

    @property
    def n_frames(self) -> int:
        return self.motion_path.shape[0]


@dataclass
class GroundTruth:
    """Per-frame absolute parameters plus the latent quantities behind them."""

    log_gain: np.ndarray  # ln(hi_t - lo_t) per frame
    offset: np.ndarray  # lo_t per frame
    motion_path: np.ndarray
    viewport: tuple[int, int]
    spatial_field: np.ndarray | None
    seed: int
    meta: dict = dataclass_field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.log_gain)

    def relative(self, i: int, j: int) -> RelativeParams:
        """Relative parameters mapping frame i intensities to frame j (1-based)."""
        ai, aj = self.log_gain[i - 1], self.log_gain[j - 1]
        bi, bj = self.offset[i - 1], self.offset[j - 1]
        return RelativeParams(
            a=aj - ai, b=(bj - bi) / math.exp(ai), from_frame=i, to_frame=j
        )

    def chain_entries(self) -> list[RelativeParams]:
        """Parameters of every frame relative to frame 1."""
        return [self.relative(1, t) for t in range(1, self.n_frames + 1)]

    def field_in_reference_gauge(self) -> np.ndarray | None:
        """The bias field as seen through the frame-1 gauge (r / gain_1)."""
        if self.spatial_field is None:
            return None
        return self.spatial_field / math.exp(self.log_gain[0])

    def to_json(self, path) -> None:
        payload = {
            "seed": self.seed,
            "viewport": list(self.viewport),
            "log_gain": [float(v) for v in self.log_gain],
            "offset": [float(v) for v in self.offset],
            "motion_path": [[int(x), int(y)] for x, y in self.motion_path],
            "spatial_field": None
            if self.spatial_field is None
            else [[float(v) for v in row] for row in self.spatial_field],
            "meta": self.meta,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path) -> "GroundTruth":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        field = payload.get("spatial_field")
        return cls(
            log_gain=np.array(payload["log_gain"], dtype=float),
            offset=np.array(payload["offset"], dtype=float),
            motion_path=np.array(payload["motion_path"], dtype=int),
            viewport=tuple(payload["viewport"]),
            spatial_field=None if field is None else np.array(field, dtype=float),
            seed=int(payload["seed"]),
            meta=payload.get("meta", {}),
        )


def render_sequence(spec: SceneSpec, seed: int = 0) -> tuple[list[Frame], GroundTruth]:
    """Render all frames and record the exact parameters used.

    Deterministic given ``seed`` (which only drives measurement noise).
    Raises GenerationError on degenerate frames (no radiance range) or
    explicit bounds that fail to cover the frame content.
    """
    rng = np.random.default_rng(derive_seed(seed, 0xF0A3))
    w, h = spec.viewport
    frames: list[Frame] = []
    log_gain = np.empty(spec.n_frames)
    offset = np.empty(spec.n_frames)

    for t in range(1, spec.n_frames + 1):
        ox, oy = spec.motion_path[t - 1]
        signal = spec.radiance_map[oy : oy + h, ox : ox + w].copy()
        for event in spec.hot_events:
            if not event.active(t):
                continue
            x0, y0, x1, y1 = event.rect
            vx0 = max(x0 - ox, 0)
            vy0 = max(y0 - oy, 0)
            vx1 = min(x1 - ox, w)
            vy1 = min(y1 - oy, h)
            if vx0 < vx1 and vy0 < vy1:
                signal[vy0:vy1, vx0:vx1] += event.amplitude
        if spec.spatial_field is not None:
            signal = signal + spec.spatial_field

        if spec.agc_mode == "minmax":
            lo, hi = float(signal.min()), float(signal.max())
        elif spec.agc_mode == "percentile":
            lo, hi = np.percentile(signal, spec.agc_percentiles)
        else:
            lo, hi = spec.agc_bounds[t - 1]
            if lo > signal.min() + 1e-12 or hi < signal.max() - 1e-12:
                raise GenerationError(
                    f"frame {t}: explicit bounds [{lo:.4g}, {hi:.4g}] do not "
                    f"cover content [{signal.min():.4g}, {signal.max():.4g}]"
                )
        if hi - lo < 1e-9:
            raise GenerationError(f"frame {t}: degenerate radiance range")

        img = (signal - lo) / (hi - lo)
        if spec.noise_sigma > 0.0:
            img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        frames.append(Frame(t, np.clip(img, 0.0, 1.0)))
        log_gain[t - 1] = math.log(hi - lo)
        offset[t - 1] = lo

    truth = GroundTruth(
        log_gain=log_gain,
        offset=offset,
        motion_path=spec.motion_path.copy(),
        viewport=spec.viewport,
        spatial_field=None if spec.spatial_field is None else spec.spatial_field.copy(),
        seed=seed,
    )
    return frames, truth


def truth_correspondences(
    frames: list[Frame],
    truth: GroundTruth,
    frame_i: int,
    frame_j: int,
    n: int,
    seed: int = 0,
    noise_sigma: float = 0.0,
    outlier_fraction: float = 0.0,
    outlier_delta: float = 0.2,
    outlier_mode: str = "random",
) -> CorrespondenceSet:
    """Exact correspondences from the known motion between two rendered frames.

    Samples scene points visible in both viewports (without replacement;
    fewer are returned when the overlap is small) and reads intensities from
    the rendered frames.  ``noise_sigma`` adds zero-mean measurement noise to
    the target intensities (the observation side of the measurement model).
    ``outlier_fraction`` perturbs exactly ``round(fraction * n)`` target
    intensities by +``outlier_delta``; ``outlier_mode`` "random" picks them
    uniformly, "low_from" picks the darkest source pixels, which mimics a
    localized positive bias region and biases an unguarded fit.
    """
    if not (1 <= frame_i < frame_j <= truth.n_frames):
        raise GenerationError(f"invalid frame pair ({frame_i}, {frame_j})")
    w, h = truth.viewport
    oxi, oyi = truth.motion_path[frame_i - 1]
    oxj, oyj = truth.motion_path[frame_j - 1]
    x_lo, x_hi = max(oxi, oxj), min(oxi, oxj) + w
    y_lo, y_hi = max(oyi, oyj), min(oyi, oyj) + h
    if x_hi <= x_lo or y_hi <= y_lo:
        raise GenerationError(
            f"frames {frame_i} and {frame_j} share no overlap"
        )

    rng = np.random.default_rng(derive_seed(seed, frame_i, frame_j))
    available = (x_hi - x_lo) * (y_hi - y_lo)
    count = min(n, available)
    flat = rng.choice(available, size=count, replace=False)
    us = x_lo + flat % (x_hi - x_lo)
    vs = y_lo + flat // (x_hi - x_lo)

    xi = us - oxi
    yi = vs - oyi
    xj = us - oxj
    yj = vs - oyj
    i_from = frames[frame_i - 1].pixels[yi, xi]
    i_to = frames[frame_j - 1].pixels[yj, xj]
    if noise_sigma > 0.0:
        i_to = np.clip(i_to + rng.normal(0.0, noise_sigma, count), 0.0, 1.0)

    n_out = int(round(outlier_fraction * count))
    if n_out > 0:
        if outlier_mode == "random":
            idx = rng.choice(count, size=n_out, replace=False)
        elif outlier_mode == "low_from":
            idx = np.argsort(i_from, kind="stable")[:n_out]
        else:
            raise GenerationError(f"unknown outlier_mode {outlier_mode!r}")
        i_to = i_to.copy()
        i_to[idx] = np.clip(i_to[idx] + outlier_delta, 0.0, 1.0)

    return CorrespondenceSet(
        frame_i,
        frame_j,
        np.stack([xi, yi], axis=1).astype(float),
        np.stack([xj, yj], axis=1).astype(float),
        i_from,
        i_to,
    )


def value_noise(
    width: int,
    height: int,
    octaves: int = 4,
    seed: int = 0,
    lo: float = 0.1,
    hi: float = 0.9,
) -> np.ndarray:
    """Procedural terrain-like texture: bilinear octaves of seeded noise."""
    rng = np.random.default_rng(derive_seed(seed, 0x7E22))
    out = np.zeros((height, width))
    amplitude = 1.0
    for octave in range(octaves):
        cells = 2 ** (octave + 2)
        coarse = rng.normal(size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, height)
        xs = np.linspace(0, cells, width)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        layer = map_coordinates(coarse, [gy.ravel(), gx.ravel()], order=1).reshape(
            height, width
        )
        out += amplitude * layer
        amplitude *= 0.5
    out -= out.min()
    peak = out.max()
    if peak > 0:
        out /= peak
    return lo + (hi - lo) * out


def gaussian_bias_field(
    width: int,
    height: int,
    n_bumps: int = 3,
    amplitude: float = 0.1,
    seed: int = 0,
) -> np.ndarray:
    """Low-frequency bias: a few broad Gaussians scaled to a peak |amplitude|."""
    rng = np.random.default_rng(derive_seed(seed, 0xB1A5))
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    out = np.zeros((height, width))
    for _ in range(n_bumps):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        sx = rng.uniform(0.25, 0.6) * width
        sy = rng.uniform(0.25, 0.6) * height
        sign = rng.choice([-1.0, 1.0])
        out += sign * np.exp(
            -((xs - cx) ** 2) / (2 * sx**2) - ((ys - cy) ** 2) / (2 * sy**2)
        )
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= amplitude / peak
    return out


def wandering_bounds(
    content_lo: float,
    content_hi: float,
    n_frames: int,
    seed: int = 0,
    scale_step: float = 2.0,
    offset_step: float = 0.15,
    max_stretch: float = 4.0,
) -> np.ndarray:
    """Explicit per-frame (lo, hi) bounds following a seeded random walk.

    Consecutive relative gains stay within [1/scale_step, scale_step] and
    relative offsets within +-offset_step, while every frame's bounds cover
    [content_lo, content_hi] so nothing clips.  ``max_stretch`` caps the
    absolute range relative to the content range (a larger stretch compresses
    the rendered contrast).
    """
    if content_hi <= content_lo:
        raise GenerationError("content range is empty")
    if max_stretch < 1.1:
        raise GenerationError("max_stretch must be >= 1.1")
    rng = np.random.default_rng(derive_seed(seed, 0xA6CB))
    crange = content_hi - content_lo
    bounds = np.empty((n_frames, 2))
    range_t = min(1.5, 0.5 * (1.05 + max_stretch)) * crange
    lo_t = content_lo - 0.5 * (range_t - crange)  # center the initial slack
    log_step = math.log(scale_step)
    for t in range(n_frames):
        range_t = min(range_t, max_stretch * crange)
        bounds[t] = (lo_t, lo_t + range_t)
        factor = math.exp(rng.uniform(-log_step, log_step))
        min_range = max(
            1.05 * crange,
            crange + (content_lo - lo_t) - offset_step * range_t,
            range_t / scale_step,
        )
        max_range = min(max_stretch * crange, range_t * scale_step)
        new_range = float(np.clip(range_t * factor, min_range, max_range))
        lo_new = lo_t + rng.uniform(-offset_step, offset_step) * range_t
        lo_new = float(
            np.clip(lo_new, content_lo - (new_range - crange), content_lo)
        )
        range_t, lo_t = new_range, lo_new
    return bounds
