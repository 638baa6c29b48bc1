"""End-to-end calibration: streaming session and sklearn-style estimator.

``CalibrationSession`` is the online engine: frames are pushed in order, each
one's parameters are estimated from correspondences against a window of past
frames, the bias field is re-solved on a cadence, and the calibrated frame is
emitted immediately (frame t's output depends only on frames up to t).

``PhotometricCalibrator`` wraps the session behind fit/transform so the
calibration composes with scikit-learn tooling: ``fit`` runs the streaming
pass and keeps the final chain and field, ``transform`` re-applies them
offline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, DataError
from .gp import GpConfig, SquaredExpGP, fill_field_with_gp
from .model import (
    DriftConfig,
    Frame,
    ParamChain,
    calibrate_pixel,
    cyclic_colormap,
    cyclic_gray,
    rainbow_palette,
)
from .spatial import ConstraintAccumulator, GridSpec, SpatialField, connected_components, solve_spatial
from .temporal import CorrespondenceSet, RansacConfig, process_frame
from .tracker import TrackerConfig, detect_features, track
from .validation import check_frame_sequence

__all__ = [
    "GpSettings",
    "PipelineConfig",
    "FrameResult",
    "CalibrationSession",
    "PhotometricCalibrator",
]

OUTPUT_MODES = ("ramp", "palette", "clamp")


@dataclass(frozen=True)
class GpSettings:
    """GP options with a deferred length scale (None means 25% of image width)."""

    length_scale: float | None = None
    signal_variance: float = 0.05**2
    noise_variance: float = 0.005**2
    max_training_points: int = 1024
    subsample_seed: int = 0

    def resolve(self, image_width: int) -> GpConfig:
        return GpConfig(
            length_scale=self.length_scale
            if self.length_scale is not None
            else 0.25 * image_width,
            signal_variance=self.signal_variance,
            noise_variance=self.noise_variance,
            max_training_points=self.max_training_points,
            subsample_seed=self.subsample_seed,
        )


@dataclass(frozen=True)
class PipelineConfig:
    tracker: TrackerConfig = TrackerConfig()
    ransac: RansacConfig = RansacConfig()
    drift: DriftConfig = DriftConfig()
    gp: GpSettings = GpSettings()
    cells_x: int = 32
    cells_y: int = 32
    window: int = 5
    solve_cadence: int = 50
    output_mode: str = "ramp"
    workers: int = 1

    def __post_init__(self):
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(
                f"output_mode must be one of {OUTPUT_MODES}, got {self.output_mode!r}"
            )
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.solve_cadence < 1:
            raise ConfigError("solve_cadence must be >= 1")


_SECTION_TYPES = {
    "tracker": TrackerConfig,
    "ransac": RansacConfig,
    "drift": DriftConfig,
    "gp": GpSettings,
}
_PIPELINE_KEYS = ("window", "solve_cadence", "output_mode", "workers")
_GRID_KEYS = ("cells_x", "cells_y")


def pipeline_config_from_dict(doc: dict) -> PipelineConfig:
    """Build a config from a parsed document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    known_sections = set(_SECTION_TYPES) | {"grid", "pipeline"}
    for section in doc:
        if section not in known_sections:
            raise ConfigError(f"unknown config section {section!r}")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        sub = doc.get(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        valid = {f.name for f in dataclass_fields(cls)}
        for key in sub:
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in config section {section!r}")
        kwargs[section] = cls(**sub)
    grid = doc.get("grid", {})
    for key in grid:
        if key not in _GRID_KEYS:
            raise ConfigError(f"unknown key {key!r} in config section 'grid'")
    pipe = doc.get("pipeline", {})
    for key in pipe:
        if key not in _PIPELINE_KEYS:
            raise ConfigError(f"unknown key {key!r} in config section 'pipeline'")
    return PipelineConfig(**kwargs, **grid, **pipe)


@dataclass
class FrameResult:
    """Output of one streaming step."""

    index: int
    raw: np.ndarray  # unwrapped calibrated intensities (may exceed [0, 1])
    output: np.ndarray  # mode-mapped image: 2-D gray or (h, w, 3) rgb
    untracked: bool
    n_correspondences: int
    temporal_ms: float
    spatial_ms: float | None = None  # set when this step triggered a solve


class CalibrationSession:
    """Sequential driver of the full calibration pipeline.

    Frames are pushed strictly in order.  Correspondences come from the
    built-in tracker against up to ``config.window`` past frames, or from
    pre-grouped external sets.  The spatial field is re-solved every
    ``config.solve_cadence`` frames (and on ``finalize``), each time on a
    snapshot of the accumulated constraints, then densified by GP regression.
    """

    def __init__(
        self,
        config: PipelineConfig = PipelineConfig(),
        external_sets: dict[int, list[CorrespondenceSet]] | None = None,
    ):
        self.config = config
        self.external_sets = external_sets
        self.chain: ParamChain | None = None
        self.grid: GridSpec | None = None
        self.field: SpatialField | None = None
        self.accumulator: ConstraintAccumulator | None = None
        self.all_sets: list[CorrespondenceSet] = []
        self.temporal_ms: list[float] = []
        self.spatial_ms: list[float] = []
        self._frames: dict[int, Frame] = {}
        self._features: dict[int, np.ndarray] = {}
        self._bias_map: np.ndarray | None = None
        self._palette = rainbow_palette()
        self._n = 0

    @property
    def n_frames(self) -> int:
        return self._n

    def _init_geometry(self, frame: Frame) -> None:
        # Small frames get a coarser effective grid rather than a hard error.
        self.grid = GridSpec(
            min(self.config.cells_x, frame.width),
            min(self.config.cells_y, frame.height),
            frame.width,
            frame.height,
        )
        self.field = SpatialField.empty(self.grid)
        self.accumulator = ConstraintAccumulator(self.grid)
        self.chain = ParamChain(reference_frame=1)
        self._bias_map = np.zeros((frame.height, frame.width))
        self._shape = frame.pixels.shape

    def _collect_sets(self, frame: Frame) -> list[CorrespondenceSet]:
        t = frame.index
        if self.external_sets is not None:
            sets = self.external_sets.get(t, [])
            for cset in sets:
                if not cset.has_intensities:
                    raise DataError(
                        f"external set {cset.from_frame}->{cset.to_frame} lacks "
                        "intensities and no frames were given to resample from"
                    )
            return sets
        sets = []
        for i in range(max(1, t - self.config.window), t):
            pts = self._features.get(i)
            if pts is None or len(pts) == 0:
                continue
            cset = track(self._frames[i], frame, pts, self.config.tracker)
            if len(cset) > 0:
                sets.append(cset)
        return sets

    def push(self, image) -> FrameResult:
        """Process the next frame and return its calibrated output."""
        self._n += 1
        t = self._n
        img = np.asarray(image, dtype=np.float64)
        frame = Frame(t, img)
        if t == 1:
            self._init_geometry(frame)
        elif img.shape != self._shape:
            raise DataError(
                f"frame {t}: dimension mismatch {img.shape} vs {self._shape}"
            )

        sets: list[CorrespondenceSet] = []
        if t > 1:
            sets = self._collect_sets(frame)
            start = time.perf_counter()
            process_frame(
                sets, self.chain, self.config.ransac, self.config.drift,
                workers=self.config.workers,
            )
            self.temporal_ms.append(1000.0 * (time.perf_counter() - start))
            for cset in sets:
                self.accumulator.add(cset, self.chain)
            self.all_sets.extend(sets)

        spatial_ms = None
        if t % self.config.solve_cadence == 0:
            spatial_ms = self.solve_spatial_now()

        if self.external_sets is None:
            self._frames[t] = frame
            self._features[t] = detect_features(frame, self.config.tracker)
            stale = t - self.config.window
            self._frames.pop(stale, None)
            self._features.pop(stale, None)

        raw, output = self._calibrate(frame)
        return FrameResult(
            index=t,
            raw=raw,
            output=output,
            untracked=t in self.chain.untracked,
            n_correspondences=sum(len(s) for s in sets),
            temporal_ms=self.temporal_ms[-1] if t > 1 else 0.0,
            spatial_ms=spatial_ms,
        )

    def _calibrate(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        entry = self.chain.entry(frame.index)
        raw = calibrate_pixel(frame.pixels, entry, self._bias_map)
        mode = self.config.output_mode
        if mode == "clamp":
            output = np.clip(raw, 0.0, 1.0)
        elif mode == "ramp":
            output = cyclic_gray(raw)
        else:
            output = cyclic_colormap(raw, self._palette)
        return raw, output

    def solve_spatial_now(self) -> float | None:
        """Solve the bias field from the current constraint snapshot.

        Returns the solve time in ms, or None when there is nothing to solve.
        The active field swaps only after a successful solve.
        """
        if self.accumulator is None or len(self.accumulator) == 0:
            return None
        start = time.perf_counter()
        constraints = self.accumulator.constraints()
        labels, largest = connected_components(constraints, self.grid)
        if largest.size == 0:
            return None
        solved = solve_spatial(constraints, largest, self.grid, labels)
        gp = SquaredExpGP.from_config(self.config.gp.resolve(self.grid.width))
        self.field = fill_field_with_gp(solved, gp)
        self._bias_map = self.field.pixel_map()
        elapsed = 1000.0 * (time.perf_counter() - start)
        self.spatial_ms.append(elapsed)
        return elapsed

    def finalize(self) -> None:
        """Run a final on-demand spatial solve over everything accumulated."""
        if self._n and self._n % self.config.solve_cadence != 0:
            self.solve_spatial_now()


class PhotometricCalibrator(BaseEstimator, TransformerMixin):
    """Sequence-in, calibrated-sequence-out estimator.

    ``fit`` consumes an ordered frame sequence (list of 2-D arrays, an
    (n, h, w) array, or Frame objects), estimating the per-frame gain/offset
    chain and the spatial bias field.  ``transform`` applies the fitted
    parameters to a sequence of the same length, frame k through chain entry
    k+1.  For strictly causal frame-by-frame output use
    :class:`CalibrationSession` directly; ``fit`` itself processes frames in
    streaming order, so fitted parameters never depend on future frames.

    Parameters follow the nested config dataclasses; None selects defaults.
    """

    def __init__(
        self,
        tracker: TrackerConfig | None = None,
        ransac: RansacConfig | None = None,
        drift: DriftConfig | None = None,
        gp: GpSettings | None = None,
        cells_x: int = 32,
        cells_y: int = 32,
        window: int = 5,
        solve_cadence: int = 50,
        output_mode: str = "ramp",
        workers: int = 1,
    ):
        self.tracker = tracker
        self.ransac = ransac
        self.drift = drift
        self.gp = gp
        self.cells_x = cells_x
        self.cells_y = cells_y
        self.window = window
        self.solve_cadence = solve_cadence
        self.output_mode = output_mode
        self.workers = workers

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            tracker=self.tracker or TrackerConfig(),
            ransac=self.ransac or RansacConfig(),
            drift=self.drift or DriftConfig(),
            gp=self.gp or GpSettings(),
            cells_x=self.cells_x,
            cells_y=self.cells_y,
            window=self.window,
            solve_cadence=self.solve_cadence,
            output_mode=self.output_mode,
            workers=self.workers,
        )

    def fit(self, X, y=None, correspondences=None):
        """Estimate the chain and bias field from an ordered frame sequence.

        ``correspondences`` optionally supplies external sets (a flat list,
        grouped by target frame internally); the built-in tracker is then
        disabled.
        """
        frames = check_frame_sequence(X)
        external = None
        if correspondences is not None:
            external = {}
            for cset in correspondences:
                external.setdefault(cset.to_frame, []).append(cset)
        session = CalibrationSession(self._config(), external_sets=external)
        for img in frames:
            session.push(img)
        session.finalize()
        self.chain_ = session.chain
        self.field_ = session.field
        self.flags_ = sorted(session.chain.untracked)
        self.timing_ = {
            "temporal_ms": list(session.temporal_ms),
            "spatial_ms": list(session.spatial_ms),
        }
        self.n_frames_ = session.n_frames
        self.frame_shape_ = frames[0].shape
        self._bias_map_ = session._bias_map
        self._palette_ = session._palette
        return self

    def _check_fitted(self):
        if not hasattr(self, "chain_"):
            raise NotFittedError("fit must be called before transform")

    def calibrate_frame(self, image, frame_number: int) -> np.ndarray:
        """Unwrapped calibrated intensities for one frame (may exceed [0, 1])."""
        self._check_fitted()
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.frame_shape_:
            raise DataError(f"frame shape {img.shape} differs from fitted "
                            f"{self.frame_shape_}")
        return calibrate_pixel(img, self.chain_.entry(frame_number), self._bias_map_)

    def transform(self, X):
        """Apply the fitted calibration to a same-length frame sequence."""
        self._check_fitted()
        frames = check_frame_sequence(X)
        if len(frames) != self.n_frames_:
            raise DataError(
                f"transform expects the fitted sequence length {self.n_frames_}, "
                f"got {len(frames)}"
            )
        outputs = []
        for k, img in enumerate(frames, start=1):
            raw = self.calibrate_frame(img, k)
            if self.output_mode == "clamp":
                outputs.append(np.clip(raw, 0.0, 1.0))
            elif self.output_mode == "ramp":
                outputs.append(cyclic_gray(raw))
            else:
                outputs.append(cyclic_colormap(raw, self._palette_))
        return np.stack(outputs)
