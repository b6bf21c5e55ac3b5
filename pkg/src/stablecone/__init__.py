"""Stable random walks killed on leaving a cone: exit-time asymptotics by simulation."""

__version__ = "0.1.0"

from .cone import ConeSpec, axis_angle, contains, dist_to_boundary, sample_interior_grid
from .stable import (IncrementLaw, QuadratureError, RejectionCapError, StableParams,
                     poisson_ball_density, poisson_normalization, radial_density,
                     sample_ball_exit, sample_isotropic_increment, sample_positive_stable)
from .rng import Stream
from .walk import (WalkConfig, estimate_kappa, estimate_V, harmonicity_residual,
                   simulate_walks, survival_curve)
from .martin import (ExitTailEstimator, MartinEstimate, MartinKernelEstimator, estimate_beta,
                     estimate_martin_ratio, eval_martin_halfspace)
from .compensator import (CompensatorConfig, GreenHalfspace, error_drift_check,
                          supermartingale_trace, u_lambda_mc, u_lambda_quad)
from .meander import invariance_check, sample_conditioned, tightness_check

__all__ = [
    "ConeSpec", "axis_angle", "contains", "dist_to_boundary", "sample_interior_grid",
    "IncrementLaw", "QuadratureError", "RejectionCapError", "StableParams",
    "poisson_ball_density", "poisson_normalization", "radial_density", "sample_ball_exit",
    "sample_isotropic_increment", "sample_positive_stable", "Stream",
    "WalkConfig", "estimate_kappa", "estimate_V", "harmonicity_residual", "simulate_walks",
    "survival_curve", "ExitTailEstimator", "MartinEstimate", "MartinKernelEstimator",
    "estimate_beta", "estimate_martin_ratio", "eval_martin_halfspace", "CompensatorConfig",
    "GreenHalfspace", "error_drift_check", "supermartingale_trace", "u_lambda_mc",
    "u_lambda_quad", "invariance_check", "sample_conditioned", "tightness_check",
]
