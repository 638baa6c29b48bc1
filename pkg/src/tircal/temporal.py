"""Per-frame-pair gain/offset estimation from pixel correspondences.

Two correspondences determine the affine map between a pair of frames
exactly, so RANSAC hypothesizes from 2-point samples, scores inliers by
forward-mapped intensity residual, and refits the best consensus by least
squares.  Estimates from several past frames are re-referenced to the
(t-1)->t basis, fused by correspondence count, and chained onto the running
parameter chain with drift adjustment.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateSampleError,
    EstimationFailedError,
    FrameMismatchError,
)
from .model import (
    DriftConfig,
    ParamChain,
    RelativeParams,
    adjust_for_drift,
    apply_forward,
    change_ref,
    compose,
    identity,
)
from .validation import derive_seed

__all__ = [
    "CorrespondenceSet",
    "RansacConfig",
    "PairEstimate",
    "fit_pair_exact",
    "fit_pair_lsq",
    "ransac_estimate",
    "process_frame",
]

# Minimum spread of source intensities for an affine fit to be meaningful.
DEGENERACY_EPS = 1e-4


@dataclass
class CorrespondenceSet:
    """Pixel correspondences from a past frame into the current frame.

    ``xy_from``/``xy_to`` are (n, 2) pixel coordinates, ``i_from``/``i_to``
    the intensities sampled at both ends (NaN when pending resampling from
    frames).
    """

    from_frame: int
    to_frame: int
    xy_from: np.ndarray
    xy_to: np.ndarray
    i_from: np.ndarray
    i_to: np.ndarray

    def __post_init__(self):
        if self.from_frame >= self.to_frame:
            raise DataError(
                f"correspondence set must look backward: {self.from_frame} -> "
                f"{self.to_frame}"
            )
        self.xy_from = np.atleast_2d(np.asarray(self.xy_from, dtype=np.float64))
        self.xy_to = np.atleast_2d(np.asarray(self.xy_to, dtype=np.float64))
        self.i_from = np.atleast_1d(np.asarray(self.i_from, dtype=np.float64))
        self.i_to = np.atleast_1d(np.asarray(self.i_to, dtype=np.float64))
        n = len(self.i_from)
        if (
            self.xy_from.shape != (n, 2)
            or self.xy_to.shape != (n, 2)
            or self.i_to.shape != (n,)
        ):
            raise DataError("correspondence arrays have inconsistent shapes")
        for name, arr in (("i_from", self.i_from), ("i_to", self.i_to)):
            vals = arr[~np.isnan(arr)]
            if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
                raise DataError(f"{name}: intensities outside [0, 1]")

    def __len__(self) -> int:
        return len(self.i_from)

    @property
    def has_intensities(self) -> bool:
        return not (np.isnan(self.i_from).any() or np.isnan(self.i_to).any())

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.from_frame,
            self.to_frame,
            self.xy_from[mask],
            self.xy_to[mask],
            self.i_from[mask],
            self.i_to[mask],
        )


@dataclass(frozen=True)
class RansacConfig:
    """Consensus-search settings; the sample size is fixed at two points."""

    max_iterations: int = 200
    inlier_threshold: float = 0.02
    min_inliers: int = 10
    rng_seed: int = 0
    early_exit_ratio: float = 0.99

    sample_size: int = 2  # two good correspondences determine the map

    def __post_init__(self):
        if self.sample_size != 2:
            raise ConfigError("sample_size is fixed at 2")
        if self.inlier_threshold <= 0:
            raise ConfigError("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")


@dataclass(frozen=True)
class PairEstimate:
    params: RelativeParams
    inlier_count: int
    residual_rms: float


def fit_pair_exact(p1, p2, eps: float = DEGENERACY_EPS) -> RelativeParams:
    """Solve the unique (a, b) sending both (i_from, i_to) samples exactly.

    Raises DegenerateSampleError when the source intensities coincide, the
    target intensities coincide, or the implied scale is non-positive.
    """
    f1, t1 = p1
    f2, t2 = p2
    df = f1 - f2
    dt = t1 - t2
    if abs(df) <= eps:
        raise DegenerateSampleError("source intensities too close")
    if dt == 0.0:
        raise DegenerateSampleError("target intensities coincide")
    scale = df / dt
    if scale <= 0.0:
        raise DegenerateSampleError(f"non-positive scale {scale:.4g}")
    b = f1 - scale * t1
    return RelativeParams(a=math.log(scale), b=b)


def fit_pair_lsq(
    i_from,
    i_to,
    mask=None,
    from_frame: int = 0,
    to_frame: int = 0,
    eps: float = DEGENERACY_EPS,
) -> RelativeParams:
    """Least-squares fit of i_to = (i_from - b) / exp(a) over the masked pairs.

    Linear in the substituted variables u = exp(-a), v = -b * exp(-a):
    i_to = u * i_from + v.  Rejects degenerate sets (no spread in the source
    intensities) and non-positive recovered scales.
    """
    f = np.asarray(i_from, dtype=np.float64)
    t = np.asarray(i_to, dtype=np.float64)
    if mask is not None:
        f = f[mask]
        t = t[mask]
    if f.size < 2:
        raise DegenerateSampleError("need at least two pairs")
    fm = f.mean()
    var = np.mean((f - fm) ** 2)
    if math.sqrt(var) <= eps:
        raise DegenerateSampleError("source intensity spread below epsilon")
    tm = t.mean()
    u = np.mean((f - fm) * (t - tm)) / var
    if u <= 0.0:
        raise DegenerateSampleError(f"non-positive fitted scale factor {u:.4g}")
    v = tm - u * fm
    return RelativeParams(
        a=-math.log(u), b=-v / u, from_frame=from_frame, to_frame=to_frame
    )


def ransac_estimate(cset: CorrespondenceSet, cfg: RansacConfig) -> PairEstimate:
    """Robust pair estimate: 2-point hypotheses, inlier consensus, LSQ refit.

    Deterministic given ``cfg.rng_seed``: the candidate stream is seeded per
    (from_frame, to_frame) so concurrent execution order cannot change the
    result.  Scans candidates in order and commits to the first one whose
    inlier ratio reaches ``early_exit_ratio``, otherwise to the highest count
    (earliest on ties).
    """
    n = len(cset)
    if n < 2:
        raise EstimationFailedError(f"{n} correspondences, need at least 2")
    f = cset.i_from
    t = cset.i_to

    rng = np.random.default_rng(
        derive_seed(cfg.rng_seed, cset.from_frame, cset.to_frame)
    )
    m = cfg.max_iterations
    idx1 = rng.integers(0, n, size=m)
    idx2 = rng.integers(0, n - 1, size=m)
    idx2 = np.where(idx2 >= idx1, idx2 + 1, idx2)  # distinct second index

    df = f[idx1] - f[idx2]
    dt = t[idx1] - t[idx2]
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = df / dt
    valid = (np.abs(df) > DEGENERACY_EPS) & (dt != 0.0) & (scale > 0.0)
    scale = np.where(valid, scale, 1.0)
    offset = f[idx1] - scale * t[idx1]

    # Residual of every pair under every candidate: |i_to - (i_from - b)/e^a|.
    pred = (f[None, :] - offset[:, None]) / scale[:, None]
    resid = np.abs(t[None, :] - pred)
    inlier = resid < cfg.inlier_threshold
    counts = np.where(valid, inlier.sum(axis=1), 0)

    ratios = counts / n
    hits = np.nonzero(ratios >= cfg.early_exit_ratio)[0]
    best = int(hits[0]) if hits.size else int(np.argmax(counts))
    if counts[best] < max(cfg.min_inliers, 2):
        raise EstimationFailedError(
            f"best consensus {counts[best]} below min_inliers {cfg.min_inliers}"
        )

    mask = inlier[best]
    try:
        params = fit_pair_lsq(
            f, t, mask, from_frame=cset.from_frame, to_frame=cset.to_frame
        )
    except DegenerateSampleError:
        # Consensus exists but is too flat to refit; keep the 2-point model.
        params = RelativeParams(
            a=math.log(scale[best]),
            b=offset[best],
            from_frame=cset.from_frame,
            to_frame=cset.to_frame,
        )

    final_resid = np.abs(t - apply_forward(params, f))
    final_mask = final_resid < cfg.inlier_threshold
    inlier_count = int(final_mask.sum())
    if inlier_count < max(cfg.min_inliers, 2):
        raise EstimationFailedError(
            f"refit consensus {inlier_count} below min_inliers {cfg.min_inliers}"
        )
    rms = float(np.sqrt(np.mean(final_resid[final_mask] ** 2)))
    return PairEstimate(params=params, inlier_count=inlier_count, residual_rms=rms)


def process_frame(
    all_sets: list[CorrespondenceSet],
    chain: ParamChain,
    cfg: RansacConfig,
    drift: DriftConfig,
    workers: int = 1,
) -> ParamChain:
    """Estimate frame t's parameters from every set ending at t and extend the chain.

    Each set is estimated independently (concurrently when ``workers`` > 1),
    re-referenced to the (t-1)->t basis via the chain, and fused by a
    correspondence-count weighted average of (a, b).  The fused step is
    composed onto the chain and the new entry drift-adjusted.  Sets that fail
    estimation contribute zero weight; if every set fails (or none is given)
    an identity step is appended and the frame flagged untracked.
    """
    t = chain.last_frame + 1
    for cset in all_sets:
        if cset.to_frame != t:
            raise FrameMismatchError(
                f"set {cset.from_frame}->{cset.to_frame} does not end at frame {t}"
            )
        if cset.from_frame < chain.reference_frame:
            raise FrameMismatchError(
                f"set source frame {cset.from_frame} predates the chain"
            )

    def estimate(cset):
        try:
            return ransac_estimate(cset, cfg)
        except EstimationFailedError:
            return None

    if workers > 1 and len(all_sets) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(estimate, all_sets))
    else:
        results = [estimate(cset) for cset in all_sets]

    acc_a = 0.0
    acc_b = 0.0
    total = 0
    prev = chain.entry(t - 1)
    for cset, est in zip(all_sets, results):
        if est is None:
            continue
        step_i = change_ref(est.params, chain.entry(cset.from_frame), prev)
        weight = len(cset)
        acc_a += step_i.a * weight
        acc_b += step_i.b * weight
        total += weight

    if total == 0:
        chain.append_step(identity(t - 1, t), untracked=True)
        return chain

    step = RelativeParams(acc_a / total, acc_b / total, t - 1, t)
    entry = adjust_for_drift(compose(prev, step), drift)
    chain.append_entry(entry)
    return chain
