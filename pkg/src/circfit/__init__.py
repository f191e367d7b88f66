"""circfit: local likelihood regression with a circular covariate."""

from .errors import (
    CircFitError,
    DegenerateConstantError,
    DegenerateKernelError,
    DegenerateTargetError,
    InfeasibleKappaError,
    InvalidArgumentError,
    InvalidDesignError,
    ModelSpecError,
    MomentDivergenceError,
    ResponseDomainError,
    SelectionFailureError,
    UnsupportedParityError,
)
from .families import (
    CircularSample,
    bernoulli,
    family_by_name,
    gamma,
    loglik,
    make_sample,
    normal,
    poisson,
    score_curvature,
    variance_function,
)
from .kernels import (
    VON_MISES,
    Kernel,
    KernelMoments,
    kernel_eval,
    moment_b,
    moment_d,
    moment_pack,
    xi_factor,
)
from .localfit import (
    CurveFit,
    LocalDesign,
    LocalFit,
    build_design,
    fisher_scoring_fit,
    fit_curve,
    weighted_moments,
    wls_fit,
)

__version__ = "0.1.0"
