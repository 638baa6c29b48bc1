"""Online photometric calibration for automatic-gain thermal-infrared video.

The affine gain/offset of every frame is estimated on the fly from pixel
correspondences, chained relative to the first frame with drift adjustment,
and combined with a per-cell spatial bias field solved from difference
constraints and densified by GP regression.  Calibrated intensities outside
[0, 1] are folded back by a cyclic output mapping.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateSampleError,
    EstimationFailedError,
    FrameMismatchError,
    GenerationError,
    SolverFailureError,
    TircalError,
    UndefinedMetricError,
)
from .gp import GpConfig, SquaredExpGP, fill_field_with_gp
from .metrics import (
    EvalReport,
    pearson,
    pearson_confidence,
    photometric_delta,
    photometric_error,
    threshold_sweep,
)
from .model import (
    DriftConfig,
    Frame,
    ParamChain,
    RelativeParams,
    adjust_for_drift,
    apply_forward,
    calibrate_pixel,
    change_ref,
    compose,
    cyclic_colormap,
    cyclic_gray,
    grayscale_ramp_palette,
    identity,
    inverse,
    rainbow_palette,
)
from .pipeline import (
    CalibrationSession,
    GpSettings,
    PhotometricCalibrator,
    PipelineConfig,
)
from .spatial import (
    ConstraintAccumulator,
    DifferenceConstraint,
    GridSpec,
    SpatialField,
    accumulate_constraints,
    connected_components,
    solve_spatial,
)
from .synth import (
    GroundTruth,
    HotEvent,
    SceneSpec,
    gaussian_bias_field,
    render_sequence,
    truth_correspondences,
    value_noise,
    wandering_bounds,
)
from .temporal import (
    CorrespondenceSet,
    PairEstimate,
    RansacConfig,
    fit_pair_exact,
    fit_pair_lsq,
    process_frame,
    ransac_estimate,
)
from .tracker import (
    TrackerConfig,
    detect_features,
    ingest_correspondences,
    track,
    write_correspondences,
)

__version__ = "0.1.0"
