"""Nonlinear Kalman filters with tunable covariance compensation.

The package estimates transformed means and covariances with five
estimator families (EKF, EKF2, SKF*, CKF*, SSKF), runs them through a
predict / update / recalibrate / back-out filter loop, and benchmarks them
with seeded Monte-Carlo experiments.
"""

from .errors import (
    BetaOutOfRange,
    ConfigError,
    DegenerateCase,
    DimensionMismatch,
    KfcompError,
    NegativeBeta,
    NonFiniteEvaluation,
    NonFiniteInput,
    NonPositiveEntry,
    NotOrthogonal,
    NotPositiveSemidefinite,
    NotQuadratic,
    SingularInnovation,
    UnknownModel,
)
from .numerics import (
    RngStream,
    cholesky,
    derive_stream,
    fd_hessians,
    fd_jacobian,
    haar_orthogonal,
    min_eig_sym,
    psd_tol,
    symmetrize,
)
from .models import (
    DifferentiableMap,
    PolynomialMap,
    SystemModel,
    make_quadratic,
    random_polynomial_map,
    registry_get,
)
from .moments import (
    EstimatorConfig,
    MomentEstimate,
    SigmaPointSet,
    compensation,
    estimate_ekf,
    estimate_ekf2,
    estimate_sigma,
    rotate_map,
    run_estimator,
    sigma_points,
    sphere_compensation,
    sskf_limit_check,
    sskf_limit_target,
    standardize,
)
from .filtering import (
    Belief,
    FilterConfig,
    StepTrace,
    back_out,
    predict,
    recalibrate,
    run_filter,
    step,
    update,
)
from .experiments import (
    ExperimentSpec,
    McResult,
    ScalarDemoResult,
    beta_sweep,
    geometric_mean_rmse,
    run_application,
    run_scalar_demo,
)

__version__ = "0.1.0"
