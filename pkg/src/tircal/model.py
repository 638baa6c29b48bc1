"""Affine gain/offset model for auto-gain video.

A frame's intensities relate to another frame's through an affine map with a
log-parameterized scale: ``i_to = (i_from - b) / exp(a)``.  These maps form a
group under composition, which lets per-pair estimates be chained into
parameters relative to the first frame and lets references be changed without
re-estimating.  The module also carries the drift/gap adjustment that keeps
chained parameters near their nominal values (scale 1, offset 0) and the
cyclic output mappings used to fold calibrated intensities back into [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError, FrameMismatchError

__all__ = [
    "Frame",
    "RelativeParams",
    "DriftConfig",
    "ParamChain",
    "identity",
    "apply_forward",
    "compose",
    "inverse",
    "change_ref",
    "adjust_for_drift",
    "calibrate_pixel",
    "cyclic_gray",
    "cyclic_colormap",
    "grayscale_ramp_palette",
    "rainbow_palette",
    "to_uint8",
]


@dataclass(frozen=True)
class Frame:
    """A normalized intensity image with its position in the sequence.

    Indices start at 1 and increase strictly along a sequence; pixel values
    live in [0, 1].
    """

    index: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.index < 0:
            raise DataError(f"frame index must be nonnegative, got {self.index}")
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise DataError("frame pixels must be a non-empty 2-D array")
        if not np.all(np.isfinite(px)):
            raise DataError(f"frame {self.index}: non-finite intensities")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DataError(f"frame {self.index}: intensities outside [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RelativeParams:
    """Affine intensity map from one frame to another.

    ``a`` is the log of the scale factor (always yields a positive scale),
    ``b`` the offset in intensity units.  Applying the map sends an intensity
    ``i`` of the source frame to ``(i - b) / exp(a)`` in the target frame.
    """

    a: float
    b: float
    from_frame: int = 0
    to_frame: int = 0

    @property
    def scale(self) -> float:
        """exp(a), the gain range represented by this map."""
        return math.exp(self.a)

    @property
    def c(self) -> float:
        """Upper-bound proxy exp(a) + b; the gap c - b equals exp(a)."""
        return math.exp(self.a) + self.b

    def is_identity(self, tol: float = 0.0) -> bool:
        return abs(self.a) <= tol and abs(self.b) <= tol


def identity(from_frame: int = 0, to_frame: int = 0) -> RelativeParams:
    return RelativeParams(0.0, 0.0, from_frame, to_frame)


@dataclass(frozen=True)
class DriftConfig:
    """Coefficients of the drift/gap adjustment.

    ``xi_base`` softly pulls (c, b) toward their nominal values (1, 0);
    ``xi_gap`` counteracts collapse of the gap c - b (loss of contrast);
    ``gap_floor`` is the hard minimum allowed for c - b after adjustment.
    """

    xi_gap: float = 0.1
    xi_base: float = 0.025
    gap_floor: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.xi_gap <= 1.0):
            raise ConfigError(f"xi_gap must be in [0, 1], got {self.xi_gap}")
        if not (0.0 <= self.xi_base < 1.0):
            raise ConfigError(f"xi_base must be in [0, 1), got {self.xi_base}")
        if not self.gap_floor > 0.0:
            raise ConfigError(f"gap_floor must be positive, got {self.gap_floor}")


def apply_forward(params: RelativeParams, intensity):
    """Map a source-frame intensity into the target frame: (i - b) / exp(a).

    Accepts scalars or arrays.  The result is not clamped; callers decide
    between clamping and cyclic wrapping.
    """
    return (intensity - params.b) / math.exp(params.a)


def compose(p12: RelativeParams, p23: RelativeParams) -> RelativeParams:
    """Chain two maps: the result sends frame-1 intensities to frame 3.

    Scales multiply and offsets chain as b = b12 + exp(a12) * b23.
    """
    if p12.to_frame != p23.from_frame:
        raise FrameMismatchError(
            f"cannot compose {p12.from_frame}->{p12.to_frame} with "
            f"{p23.from_frame}->{p23.to_frame}"
        )
    return RelativeParams(
        a=p12.a + p23.a,
        b=p12.b + math.exp(p12.a) * p23.b,
        from_frame=p12.from_frame,
        to_frame=p23.to_frame,
    )


def inverse(p: RelativeParams) -> RelativeParams:
    """The map undoing ``p``; compose(p, inverse(p)) is the identity."""
    return RelativeParams(
        a=-p.a,
        b=-p.b * math.exp(-p.a),
        from_frame=p.to_frame,
        to_frame=p.from_frame,
    )


def change_ref(
    p_it: RelativeParams,
    p_1i: RelativeParams,
    p_1tm1: RelativeParams,
) -> RelativeParams:
    """Re-reference a pair estimate i->t to the (t-1)->t basis.

    ``p_1i`` and ``p_1tm1`` are the chain entries of frames i and t-1 (both
    relative to the reference frame).  First derives the i->(t-1) map from the
    chain, then subtracts it from the i->t estimate.
    """
    if p_1i.from_frame != p_1tm1.from_frame:
        raise FrameMismatchError(
            f"chain entries reference different bases: {p_1i.from_frame} vs "
            f"{p_1tm1.from_frame}"
        )
    if p_it.from_frame != p_1i.to_frame:
        raise FrameMismatchError(
            f"pair estimate starts at frame {p_it.from_frame}, chain entry covers "
            f"frame {p_1i.to_frame}"
        )
    ea_1i = math.exp(p_1i.a)
    a_i_tm1 = p_1tm1.a - p_1i.a
    b_i_tm1 = (p_1tm1.b - p_1i.b) / ea_1i
    ea_i_tm1 = math.exp(a_i_tm1)
    return RelativeParams(
        a=p_it.a - a_i_tm1,
        b=(p_it.b - b_i_tm1) / ea_i_tm1,
        from_frame=p_1tm1.to_frame,
        to_frame=p_it.to_frame,
    )


def adjust_for_drift(p: RelativeParams, cfg: DriftConfig) -> RelativeParams:
    """Pull parameters toward their nominal values and protect the gap.

    Operates on c = exp(a) + b and b: the gap term moves c and b apart by
    delta = (1 - exp(a)) * xi_gap, the base term shrinks (c - 1) and b by the
    factor xi_base.  If the adjusted gap c - b falls to or below
    ``cfg.gap_floor`` the pair is respread symmetrically around its midpoint
    so the floor holds while mean brightness is preserved.

    The pipeline applies this to each newly chained reference-relative entry:
    per-step damping alone cannot bound the accumulated parameters, whereas
    damping the chained entry makes it mean-reverting, which is what keeps the
    rendered contrast (the gap exp(a)) and brightness usable over long runs.
    """
    ea = math.exp(p.a)
    c = ea + p.b
    delta = (1.0 - ea) * cfg.xi_gap
    c_new = c - (c - 1.0) * cfg.xi_base + delta
    b_new = p.b - p.b * cfg.xi_base - delta
    gap = c_new - b_new
    if gap <= cfg.gap_floor:
        mid = 0.5 * (c_new + b_new)
        c_new = mid + 0.5 * cfg.gap_floor
        b_new = mid - 0.5 * cfg.gap_floor
        gap = cfg.gap_floor
    return replace(p, a=math.log(gap), b=b_new)


def calibrate_pixel(intensity, chain_entry: RelativeParams, r=0.0):
    """Undo the frame's gain/offset and subtract the spatial bias.

    Returns ``intensity * exp(a) + b - r``; the result is unwrapped and may
    fall outside [0, 1].  ``r`` is the bias at the pixel's location (0 when no
    bias field is available yet).  Accepts scalars or arrays.
    """
    return intensity * math.exp(chain_entry.a) + chain_entry.b - r


def cyclic_gray(value):
    """Cyclic grayscale ramp with period 1, continuous at the wrap point.

    Rising from 0 to 1 over [0, 0.5) and falling back over [0.5, 1).
    Accepts scalars or arrays; the result lies in [0, 1].
    """
    v = np.mod(value, 1.0)
    out = np.where(v < 0.5, 2.0 * v, -2.0 * v + 2.0)
    if np.isscalar(value):
        return float(out)
    return out


def cyclic_colormap(value, palette: np.ndarray) -> np.ndarray:
    """Map values through a closed cyclic RGB lookup table.

    ``palette`` is an (n, 3) table whose first and last entries coincide;
    values are wrapped mod 1 and linearly interpolated at position
    ``(value mod 1) * (n - 1)``.
    """
    table = np.asarray(palette, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != 3 or table.shape[0] < 2:
        raise ConfigError("palette must be an (n >= 2, 3) RGB table")
    v = np.mod(np.asarray(value, dtype=np.float64), 1.0)
    pos = v * (table.shape[0] - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, table.shape[0] - 1)
    frac = (pos - lo)[..., None]
    return (1.0 - frac) * table[lo] + frac * table[hi]


def grayscale_ramp_palette(size: int = 257) -> np.ndarray:
    """Closed grayscale table sampling the cyclic ramp.

    An odd size places the ramp's peak exactly on a table node.
    """
    if size < 3:
        raise ConfigError("ramp palette needs at least 3 entries")
    g = cyclic_gray(np.linspace(0.0, 1.0, size))
    return np.repeat(g[:, None], 3, axis=1)


def rainbow_palette(size: int = 257) -> np.ndarray:
    """Optional closed rainbow table (sinebow), linear interpolation.

    High-contrast alternative to the grayscale ramp for visual inspection;
    downstream grayscale consumers should prefer the ramp.
    """
    if size < 3:
        raise ConfigError("rainbow palette needs at least 3 entries")
    t = np.linspace(0.0, 1.0, size)
    r = 0.5 + 0.5 * np.cos(2.0 * np.pi * t)
    g = 0.5 + 0.5 * np.cos(2.0 * np.pi * (t - 1.0 / 3.0))
    b = 0.5 + 0.5 * np.cos(2.0 * np.pi * (t - 2.0 / 3.0))
    return np.stack([r, g, b], axis=1)


def to_uint8(values) -> np.ndarray:
    """Re-quantize [0, 1] values to 8 bits by round(255 * v)."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


class ParamChain:
    """Accumulated per-frame parameters, each relative to the first frame.

    Append-only; owned by the sequential pipeline driver.  The entry for the
    reference frame is fixed at the identity.  Frames failing estimation are
    recorded in ``untracked``.
    """

    def __init__(self, reference_frame: int = 1):
        self.reference_frame = int(reference_frame)
        self._entries: list[RelativeParams] = [
            identity(self.reference_frame, self.reference_frame)
        ]
        self.untracked: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def last_frame(self) -> int:
        return self._entries[-1].to_frame

    @property
    def entries(self) -> tuple[RelativeParams, ...]:
        return tuple(self._entries)

    def entry(self, frame: int) -> RelativeParams:
        """Parameters of ``frame`` relative to the reference frame."""
        idx = frame - self.reference_frame
        if not (0 <= idx < len(self._entries)):
            raise FrameMismatchError(
                f"frame {frame} not in chain ({self.reference_frame}.."
                f"{self.last_frame})"
            )
        return self._entries[idx]

    def append_step(self, step: RelativeParams, untracked: bool = False) -> RelativeParams:
        """Chain a (t-1)->t step onto the accumulated entry for t-1."""
        if step.from_frame != self.last_frame or step.to_frame != self.last_frame + 1:
            raise FrameMismatchError(
                f"expected step {self.last_frame}->{self.last_frame + 1}, got "
                f"{step.from_frame}->{step.to_frame}"
            )
        return self.append_entry(compose(self._entries[-1], step), untracked=untracked)

    def append_entry(self, entry: RelativeParams, untracked: bool = False) -> RelativeParams:
        """Append an already reference-relative entry for the next frame."""
        if entry.from_frame != self.reference_frame or entry.to_frame != self.last_frame + 1:
            raise FrameMismatchError(
                f"expected entry {self.reference_frame}->{self.last_frame + 1}, got "
                f"{entry.from_frame}->{entry.to_frame}"
            )
        self._entries.append(entry)
        if untracked:
            self.untracked.add(entry.to_frame)
        return entry

    def frames(self) -> list[int]:
        return [e.to_frame for e in self._entries]

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(frame numbers, a values, b values) as parallel arrays."""
        t = np.array([e.to_frame for e in self._entries], dtype=int)
        a = np.array([e.a for e in self._entries], dtype=float)
        b = np.array([e.b for e in self._entries], dtype=float)
        return t, a, b

    # One record per frame: frame number plus the reference-relative (a, b).
    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self._entries:
                fh.write(
                    json.dumps({"frame": e.to_frame, "a_1t": e.a, "b_1t": e.b})
                    + "\n"
                )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "a_1t", "b_1t"])
            for e in self._entries:
                writer.writerow([e.to_frame, repr(float(e.a)), repr(float(e.b))])

    @classmethod
    def read_jsonl(cls, path) -> "ParamChain":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    records.append((int(rec["frame"]), float(rec["a_1t"]), float(rec["b_1t"])))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataError(f"{path}: line {lineno}: {exc}") from exc
        return cls._from_records(records, path)

    @classmethod
    def read_csv(cls, path) -> "ParamChain":
        records = []
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                try:
                    records.append((int(row["frame"]), float(row["a_1t"]), float(row["b_1t"])))
                except (KeyError, ValueError, TypeError) as exc:
                    raise DataError(f"{path}: line {lineno}: {exc}") from exc
        return cls._from_records(records, path)

    @classmethod
    def _from_records(cls, records, path) -> "ParamChain":
        if not records:
            raise DataError(f"{path}: empty parameter chain")
        records.sort(key=lambda r: r[0])
        first = records[0]
        if abs(first[1]) > 1e-12 or abs(first[2]) > 1e-12:
            raise DataError(f"{path}: reference frame entry must be the identity")
        chain = cls(reference_frame=first[0])
        for frame, a, b in records[1:]:
            if frame != chain.last_frame + 1:
                raise DataError(f"{path}: non-contiguous frame numbers at {frame}")
            chain._entries.append(RelativeParams(a, b, chain.reference_frame, frame))
        return chain
