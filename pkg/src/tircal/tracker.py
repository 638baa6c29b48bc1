"""Built-in feature tracker plus ingestion of external correspondence files.

Correspondences between frames can come from any source; this module provides
a self-contained pyramidal gradient-descent tracker (min-eigenvalue corners,
coarse-to-fine alignment) so the pipeline runs without external tooling.
Comparison windows are normalized to zero mean and unit variance before
matching, which makes tracking insensitive to the very gain/offset changes
the calibration is trying to estimate; without that, correspondence search
degrades exactly when calibration is needed most.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d, map_coordinates, uniform_filter

from .errors import ConfigError, DataError
from .model import Frame
from .temporal import CorrespondenceSet

__all__ = [
    "TrackerConfig",
    "detect_features",
    "track",
    "ingest_correspondences",
    "write_correspondences",
]

CSV_HEADER = ["from_frame", "to_frame", "x_from", "y_from", "x_to", "y_to", "i_from", "i_to"]


@dataclass(frozen=True)
class TrackerConfig:
    """Detection and alignment settings.

    ``min_eigen_threshold`` is the absolute corner-score floor (rejects flat
    frames); ``quality_level`` additionally requires each corner to reach
    that fraction of the frame's 95th-percentile positive score.  The
    relative bar keeps detection working when auto-gain compresses the image
    contrast, and anchoring it to a quantile rather than the maximum stops a
    single extreme corner (a hot object's silhouette) from suppressing all
    natural texture.
    """

    max_features: int = 400
    pyramid_levels: int = 3
    window_radius: int = 7
    min_eigen_threshold: float = 1e-7
    quality_level: float = 0.05
    max_track_error: float = 0.25
    grid_occupancy: int = 16
    max_iterations: int = 20
    convergence_eps: float = 0.01
    normalize_windows: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if self.window_radius < 2:
            raise ConfigError("window_radius must be >= 2")
        if self.max_features < 1:
            raise ConfigError("max_features must be >= 1")
        if not (0.0 <= self.quality_level <= 1.0):
            raise ConfigError("quality_level must be in [0, 1]")


def _effective_levels(shape, cfg: TrackerConfig) -> int:
    """Cap pyramid depth so the coarsest level still fits a few windows."""
    levels = cfg.pyramid_levels
    min_dim = min(shape)
    win = 2 * cfg.window_radius + 1
    while levels > 1 and min_dim / 2 ** (levels - 1) < 3 * win:
        levels -= 1
    return levels


def _downsample(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    smoothed = convolve1d(img, k, axis=0, mode="nearest")
    smoothed = convolve1d(smoothed, k, axis=1, mode="nearest")
    return smoothed[::2, ::2]


def build_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(img)
    return gx, gy


def _sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float coordinates; edges clamp."""
    return map_coordinates(
        img, [ys.ravel(), xs.ravel()], order=1, mode="nearest"
    ).reshape(xs.shape)


def detect_features(frame: Frame, cfg: TrackerConfig = TrackerConfig()) -> np.ndarray:
    """Min-eigenvalue corners spread over an occupancy grid.

    Returns (n, 2) pixel coordinates (x, y), strongest first, at most one per
    occupancy cell, at most ``cfg.max_features`` total.  Flat frames return an
    empty array.
    """
    img = frame.pixels
    h, w = img.shape
    gx, gy = _gradients(img)
    # Small fixed tensor window: localizes step corners to the pixel, unlike
    # wider windows whose score peak drifts inward.
    sxx = uniform_filter(gx * gx, size=3, mode="nearest")
    syy = uniform_filter(gy * gy, size=3, mode="nearest")
    sxy = uniform_filter(gx * gy, size=3, mode="nearest")
    trace = sxx + syy
    disc = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy**2)
    score = 0.5 * (trace - disc)

    levels = _effective_levels(img.shape, cfg)
    margin = (cfg.window_radius + 2) * 2 ** (levels - 1)
    margin = min(margin, max(h // 4, 1), max(w // 4, 1))
    usable = np.zeros_like(score, dtype=bool)
    usable[margin : h - margin, margin : w - margin] = True
    positive = score[usable & (score > cfg.min_eigen_threshold)]
    if positive.size == 0:
        return np.empty((0, 2))
    threshold = max(
        cfg.min_eigen_threshold, cfg.quality_level * np.percentile(positive, 95)
    )
    score = np.where(usable & (score >= threshold), score, -np.inf)

    order = np.argsort(-score, axis=None, kind="stable")
    cell_w = max(w / cfg.grid_occupancy, 1.0)
    cell_h = max(h / cfg.grid_occupancy, 1.0)
    taken: set[tuple[int, int]] = set()
    points = []
    for flat in order:
        if len(points) >= cfg.max_features:
            break
        y, x = divmod(int(flat), w)
        if not np.isfinite(score[y, x]):
            break
        cell = (int(x / cell_w), int(y / cell_h))
        if cell in taken:
            continue
        taken.add(cell)
        points.append((float(x), float(y)))
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def track(
    prev: Frame,
    next_frame: Frame,
    points: np.ndarray,
    cfg: TrackerConfig = TrackerConfig(),
) -> CorrespondenceSet:
    """Coarse-to-fine alignment of each point from ``prev`` into ``next_frame``.

    Forward-additive gradient descent over (optionally normalized) windows,
    refined per pyramid level to subpixel precision.  Points whose final
    window error exceeds ``cfg.max_track_error`` or that leave the image are
    dropped silently; intensities are sampled bilinearly at both ends.

    With ``normalize_windows`` the residual is measured between unit-variance
    windows, so the error threshold is in units of locally normalized
    intensity rather than raw [0, 1] values.
    """
    if prev.pixels.shape != next_frame.pixels.shape:
        raise DataError("frames must share dimensions")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n == 0:
        return CorrespondenceSet(
            prev.index, next_frame.index,
            np.empty((0, 2)), np.empty((0, 2)), np.empty(0), np.empty(0),
        )

    levels = _effective_levels(prev.pixels.shape, cfg)
    pyr_prev = build_pyramid(prev.pixels, levels)
    pyr_next = build_pyramid(next_frame.pixels, levels)
    grads = [_gradients(lvl) for lvl in pyr_next]

    r = cfg.window_radius
    win = np.arange(-r, r + 1, dtype=np.float64)
    wy, wx = np.meshgrid(win, win, indexing="ij")
    wx = wx.ravel()[None, :]
    wy = wy.ravel()[None, :]
    k = wx.shape[1]

    offset = np.zeros((n, 2))  # displacement in full-resolution pixels
    alive = np.ones(n, dtype=bool)
    final_err = np.full(n, np.inf)

    for level in range(levels - 1, -1, -1):
        scale = 2.0**level
        img_p = pyr_prev[level]
        img_n = pyr_next[level]
        gx_img, gy_img = grads[level]
        h, w = img_p.shape

        base = pts / scale
        tx = base[:, 0:1] + wx
        ty = base[:, 1:2] + wy
        tmpl = _sample(img_p, tx, ty)
        t_mean = tmpl.mean(axis=1, keepdims=True)
        t_std = tmpl.std(axis=1, keepdims=True)
        flat = t_std[:, 0] < 1e-9
        alive &= ~flat
        if cfg.normalize_windows:
            tmpl_n = (tmpl - t_mean) / np.where(t_std > 1e-9, t_std, 1.0)
        else:
            tmpl_n = tmpl

        for _ in range(cfg.max_iterations):
            if not alive.any():
                break
            cur = base + offset / scale
            inb = (
                (cur[:, 0] > r + 1)
                & (cur[:, 0] < w - r - 2)
                & (cur[:, 1] > r + 1)
                & (cur[:, 1] < h - r - 2)
            )
            alive &= inb
            act = np.nonzero(alive)[0]
            if act.size == 0:
                break
            cx = cur[act, 0:1] + wx
            cy = cur[act, 1:2] + wy
            cand = _sample(img_n, cx, cy)
            gx = _sample(gx_img, cx, cy)
            gy = _sample(gy_img, cx, cy)
            if cfg.normalize_windows:
                c_mean = cand.mean(axis=1, keepdims=True)
                c_std = cand.std(axis=1, keepdims=True)
                c_std = np.where(c_std > 1e-9, c_std, 1.0)
                err = (cand - c_mean) / c_std - tmpl_n[act]
                gx = gx / c_std
                gy = gy / c_std
            else:
                err = cand - tmpl_n[act]

            hxx = np.sum(gx * gx, axis=1)
            hxy = np.sum(gx * gy, axis=1)
            hyy = np.sum(gy * gy, axis=1)
            det = hxx * hyy - hxy * hxy
            ok = det > 1e-12
            bx = np.sum(gx * err, axis=1)
            by = np.sum(gy * err, axis=1)
            det_safe = np.where(ok, det, 1.0)
            dx = -(hyy * bx - hxy * by) / det_safe
            dy = -(-hxy * bx + hxx * by) / det_safe
            alive[act[~ok]] = False
            move = np.hypot(dx, dy)
            upd = act[ok]
            offset[upd, 0] += dx[ok] * scale
            offset[upd, 1] += dy[ok] * scale
            if np.all(move[ok] < cfg.convergence_eps):
                break

        # Window error at this level; the value from level 0 is the verdict.
        act = np.nonzero(alive)[0]
        if act.size:
            cur = base[act] + offset[act] / scale
            cx = cur[:, 0:1] + wx
            cy = cur[:, 1:2] + wy
            cand = _sample(img_n, cx, cy)
            if cfg.normalize_windows:
                c_mean = cand.mean(axis=1, keepdims=True)
                c_std = cand.std(axis=1, keepdims=True)
                c_std = np.where(c_std > 1e-9, c_std, 1.0)
                diff = (cand - c_mean) / c_std - tmpl_n[act]
            else:
                diff = cand - tmpl_n[act]
            final_err[act] = np.sqrt(np.mean(diff**2, axis=1))

    dest = pts + offset
    h, w = prev.pixels.shape
    inb = (
        (dest[:, 0] >= 1.0)
        & (dest[:, 0] <= w - 2.0)
        & (dest[:, 1] >= 1.0)
        & (dest[:, 1] <= h - 2.0)
    )
    keep = alive & inb & (final_err <= cfg.max_track_error)
    src = pts[keep]
    dst = dest[keep]
    i_from = _sample(prev.pixels, src[:, 0], src[:, 1])
    i_to = _sample(next_frame.pixels, dst[:, 0], dst[:, 1])
    return CorrespondenceSet(
        prev.index, next_frame.index, src, dst,
        np.clip(i_from, 0.0, 1.0), np.clip(i_to, 0.0, 1.0),
    )


def write_correspondences(path, sets) -> None:
    """Write correspondence sets to the interchange CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for cset in sets:
            for i in range(len(cset)):
                writer.writerow(
                    [
                        cset.from_frame,
                        cset.to_frame,
                        repr(float(cset.xy_from[i, 0])),
                        repr(float(cset.xy_from[i, 1])),
                        repr(float(cset.xy_to[i, 0])),
                        repr(float(cset.xy_to[i, 1])),
                        "" if np.isnan(cset.i_from[i]) else repr(float(cset.i_from[i])),
                        "" if np.isnan(cset.i_to[i]) else repr(float(cset.i_to[i])),
                    ]
                )


def ingest_correspondences(path, frames=None, bounds=None) -> list[CorrespondenceSet]:
    """Parse and validate an external correspondence CSV.

    Rows are grouped by (from_frame, to_frame).  Missing intensity columns
    are resampled bilinearly from ``frames`` (a mapping of frame index to
    Frame) when given, otherwise left NaN for the caller to fill.  ``bounds``
    as (width, height) enables coordinate range checks; negative coordinates
    are always rejected.  Errors name the offending line.
    """
    path = Path(path)
    groups: dict[tuple[int, int], list[list[float]]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if [c.strip() for c in header] != CSV_HEADER:
            raise DataError(f"{path}: line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields")
            try:
                ff, tf = int(row[0]), int(row[1])
                coords = [float(v) for v in row[2:6]]
                i_from = float(row[6]) if row[6].strip() else float("nan")
                i_to = float(row[7]) if row[7].strip() else float("nan")
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            if ff >= tf:
                raise DataError(
                    f"{path}: line {lineno}: from_frame {ff} not before to_frame {tf}"
                )
            if min(coords) < 0:
                raise DataError(f"{path}: line {lineno}: negative pixel coordinate")
            if bounds is not None:
                w, h = bounds
                if coords[0] >= w or coords[2] >= w or coords[1] >= h or coords[3] >= h:
                    raise DataError(
                        f"{path}: line {lineno}: coordinate outside {w}x{h} image"
                    )
            for name, val in (("i_from", i_from), ("i_to", i_to)):
                if not np.isnan(val) and not (0.0 <= val <= 1.0):
                    raise DataError(
                        f"{path}: line {lineno}: {name} outside [0, 1]"
                    )
            groups.setdefault((ff, tf), []).append(coords + [i_from, i_to])

    out = []
    for (ff, tf), rows in sorted(groups.items()):
        arr = np.array(rows, dtype=np.float64)
        xy_from = arr[:, 0:2]
        xy_to = arr[:, 2:4]
        i_from = arr[:, 4]
        i_to = arr[:, 5]
        if frames is not None:
            if np.isnan(i_from).any():
                f = frames[ff]
                i_from = np.where(
                    np.isnan(i_from),
                    np.clip(_sample(f.pixels, xy_from[:, 0], xy_from[:, 1]), 0, 1),
                    i_from,
                )
            if np.isnan(i_to).any():
                f = frames[tf]
                i_to = np.where(
                    np.isnan(i_to),
                    np.clip(_sample(f.pixels, xy_to[:, 0], xy_to[:, 1]), 0, 1),
                    i_to,
                )
        out.append(CorrespondenceSet(ff, tf, xy_from, xy_to, i_from, i_to))
    return out
