"""Deep risk bounds for networks with known operators, plus a small CT
surrogate for checking them against data."""

from .calibrate import (
    CalibrationFit,
    SweepRecord,
    calibrated_bound,
    fit_calibration,
    invert_for_n,
    memory_table,
    parameter_counts,
    sample_complexity_ratio,
    structural_sparsity_factor,
)
from .errors import InfeasibleTargetError, InputError, NumericError, ParseError
from .models import (
    Dataset,
    FcModel,
    KoModel,
    fit_fc_ridge,
    fit_ko_ridge,
    fit_ko_sgd,
    predict,
    select_lambda,
)
from .phantom import Ellipse, generate_phantom, generate_pool, render
from .riskbound import (
    LayerSpec,
    NetworkSpec,
    amplification_factors,
    ct_amplifications,
    deep_risk_bound,
    verify_pointwise_bound,
)
from .rng import Rng, derive_seed
from .tomo import ForwardModel, Geometry, forward_project, operator_norm

__version__ = "0.1.0"
