"""Input validation helpers used across estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import DataError

_SEED_MASK = (1 << 63) - 1


def check_intensity_image(arr, name: str = "frame") -> np.ndarray:
    """Coerce to a 2-D float64 array and verify values lie in [0, 1]."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"{name}: expected a 2-D intensity array, got ndim={img.ndim}")
    if img.size == 0:
        raise DataError(f"{name}: empty image")
    if not np.all(np.isfinite(img)):
        raise DataError(f"{name}: non-finite intensity values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError(
            f"{name}: intensities outside [0, 1] (min={img.min():.4g}, max={img.max():.4g})"
        )
    return img


def check_frame_sequence(frames) -> list[np.ndarray]:
    """Validate an ordered sequence of equally sized intensity images."""
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        frames = list(frames)
    out = []
    shape = None
    for k, f in enumerate(frames):
        img = check_intensity_image(getattr(f, "pixels", f), name=f"frame[{k}]")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(
                f"frame[{k}]: dimension mismatch {img.shape} vs {shape}"
            )
        out.append(img)
    if not out:
        raise DataError("empty frame sequence")
    return out


def derive_seed(base: int, *keys: int) -> int:
    """Deterministic per-stream seed: xor-fold integer keys into the base seed.

    Guarantees that parallel execution order cannot change any stream's draws.
    """
    seed = int(base) & _SEED_MASK
    for i, key in enumerate(keys):
        seed ^= ((int(key) + 0x9E3779B9) * (0x85EBCA6B + 2 * i + 1)) & _SEED_MASK
    return seed
