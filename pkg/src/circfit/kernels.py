"""Circular kernels and their moment constants.

A circular kernel here is built from a profile K: [0, inf) -> [0, inf)
through K_kappa(theta) = c_kappa * K[kappa * (1 - cos theta)], where
c_kappa normalizes the density over [0, 2pi).  The von Mises kernel is
profile K(r) = exp(-r), for which everything has closed forms and the
density is exp(kappa*cos theta) / (2pi * I0(kappa)).

The moment constants b_j, d_j (and the matrices/vectors assembled from
them) drive the concentration-selection theory: the expected residual
criterion, the asymptotically optimal concentration, and the conversion
factor xi between the two.
"""

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from .errors import (
    DegenerateConstantError,
    DegenerateKernelError,
    InvalidArgumentError,
    MomentDivergenceError,
    UnsupportedParityError,
)
from .quadrature import TWO_PI

MAX_DEGREE = 3

# Condition-number ceiling above which a moment matrix counts as singular.
_COND_LIMIT = 1e12


def _vm_closed_b(j):
    # Gamma((j+1)/2) / Gamma(1/2) for even j.
    return special.gamma((j + 1) / 2.0) / special.gamma(0.5)


def _vm_closed_d(j):
    # Gamma((j+1)/2) * 2^{-(j+1)/2} / pi for even j.
    return special.gamma((j + 1) / 2.0) * 2.0 ** (-(j + 1) / 2.0) / np.pi


def _vm_profile(r):
    return np.exp(-np.asarray(r, dtype=float))


@dataclass(frozen=True)
class Kernel:
    """A circular kernel defined by its profile K(r).

    ``closed_b`` / ``closed_d`` optionally supply closed-form moments for
    even j; when absent, moments fall back to adaptive quadrature.
    Instances are immutable and safe to share across threads.
    """

    name: str
    profile: Callable[[np.ndarray], np.ndarray]
    closed_b: Optional[Callable[[int], float]] = None
    closed_d: Optional[Callable[[int], float]] = None
    validate: bool = field(default=True, repr=False)

    @property
    def has_closed_moments(self):
        return self.closed_b is not None and self.closed_d is not None

    def __post_init__(self):
        if not self.validate:
            return
        r_probe = np.array([0.0, 0.5, 1.0, 5.0, 20.0])
        vals = np.asarray(self.profile(r_probe), dtype=float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise InvalidArgumentError(
                f"kernel profile {self.name!r} must be finite and nonnegative"
            )
        # Finiteness of int r^{(j-1)/2} K^l(r) dr for all j in [0, 2*MAX_DEGREE+2]
        # follows from the two extreme exponents, since
        # r^{(j-1)/2} <= r^{-1/2} + r^{(jmax-1)/2} pointwise on (0, inf).
        jmax = 2 * MAX_DEGREE + 2
        for l in (1, 2, 4):
            for j in (0, jmax):
                _profile_moment_integral(self, j, l)


def _profile_moment_integral(kernel, j, power):
    """int_0^inf r^{(j-1)/2} K(r)^power dr, via the substitution r = u^2.

    The substitution removes the r^{-1/2} endpoint singularity; the
    transformed integrand 2 u^j K(u^2)^power is smooth at 0 and handled
    by adaptive Gauss-Kronrod with a tight absolute tolerance (these
    constants enter selection formulas through fractional powers, so
    their error compounds).
    """

    def integrand(u):
        return 2.0 * u**j * np.asarray(kernel.profile(u * u), dtype=float) ** power

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-12, limit=400)
        except Exception as exc:  # quad warnings/failures all mean a bad moment
            raise MomentDivergenceError(j, f"kernel {kernel.name!r}: {exc}") from exc
    if not np.isfinite(val) or err > max(1e-8, 1e-6 * abs(val)):
        raise MomentDivergenceError(j, f"kernel {kernel.name!r}")
    return val


VON_MISES = Kernel(
    name="von_mises",
    profile=_vm_profile,
    closed_b=_vm_closed_b,
    closed_d=_vm_closed_d,
)


def log_kernel_eval(angle, kappa, kernel=VON_MISES):
    """Log-density of the circular kernel at ``angle`` (von Mises only)."""
    if kernel.name != "von_mises":
        raise InvalidArgumentError("log-space evaluation only available for von Mises")
    angle = np.asarray(angle, dtype=float)
    _check_eval_args(angle, kappa)
    # kappa*(cos - 1) <= 0 never overflows; i0e is the scaled Bessel I0.
    return kappa * (np.cos(angle) - 1.0) - np.log(TWO_PI * special.i0e(kappa))


def kernel_eval(angle, kappa, kernel=VON_MISES):
    """Evaluate K_kappa(angle); periodic in 2pi, symmetric about 0.

    kappa = 0 is the circular-uniform limit 1/(2pi).  Large kappa is safe
    for the von Mises kernel: the computation runs in log space.
    """
    angle = np.asarray(angle, dtype=float)
    _check_eval_args(angle, kappa)
    if kernel.name == "von_mises":
        out = np.exp(kappa * (np.cos(angle) - 1.0)) / (TWO_PI * special.i0e(kappa))
        return out if out.shape else float(out)
    if kappa == 0.0:
        out = np.full_like(angle, 1.0 / TWO_PI)
        return out if out.shape else float(out)
    norm, _ = integrate.quad(
        lambda t: float(kernel.profile(kappa * (1.0 - np.cos(t)))), 0.0, TWO_PI,
        epsabs=1e-12, limit=400,
    )
    out = np.asarray(kernel.profile(kappa * (1.0 - np.cos(angle))), dtype=float) / norm
    return out if out.shape else float(out)


def _check_eval_args(angle, kappa):
    if not np.all(np.isfinite(angle)):
        raise InvalidArgumentError("angle must be finite")
    if not np.isfinite(kappa) or kappa < 0:
        raise InvalidArgumentError("kappa must be finite and >= 0")


def normalization_lambda(kernel, kappa=None):
    """lambda_kappa(K) for finite kappa, or the limit lambda(K) when None.

    lambda_kappa(K) = 2 int_0^{2k} r^{-1/2} (2 - r/kappa)^{-1/2} K(r) dr and
    c_kappa(K)^{-1} = kappa^{-1/2} lambda_kappa(K); as kappa grows,
    lambda_kappa -> lambda(K) = 2^{1/2} int_0^inf r^{-1/2} K(r) dr.
    """
    if kappa is None:
        return np.sqrt(2.0) * _profile_moment_integral(kernel, 0, 1)
    if kappa <= 0:
        raise InvalidArgumentError("kappa must be positive for lambda_kappa")

    def integrand(u):
        # r = u^2 again; the (2 - r/kappa)^{-1/2} factor is integrable at 2k.
        r = u * u
        return 4.0 * np.asarray(kernel.profile(r), dtype=float) / np.sqrt(2.0 - r / kappa)

    val, _ = integrate.quad(integrand, 0.0, np.sqrt(2.0 * kappa), epsabs=1e-12, limit=400)
    return val


def moment_b(j, kernel=VON_MISES):
    """Normalized profile moment b_j(K): zero for odd j."""
    j = _check_moment_order(j)
    if j % 2 == 1:
        return 0.0
    if kernel.closed_b is not None:
        return float(kernel.closed_b(j))
    num = _profile_moment_integral(kernel, j, 1)
    den = _profile_moment_integral(kernel, 0, 1)
    return num / den


def moment_d(j, kernel=VON_MISES):
    """Normalized squared-profile moment d_j(K): zero for odd j."""
    j = _check_moment_order(j)
    if j % 2 == 1:
        return 0.0
    if kernel.closed_d is not None:
        return float(kernel.closed_d(j))
    num = _profile_moment_integral(kernel, j, 2)
    den = _profile_moment_integral(kernel, 0, 1)
    return num / den**2


def _check_moment_order(j):
    if int(j) != j or j < 0:
        raise InvalidArgumentError("moment order j must be a nonnegative integer")
    return int(j)


@dataclass(frozen=True)
class KernelMoments:
    """Moment constants of a kernel for a polynomial degree p.

    ``C_p`` follows the published definition b_{2p+2} - c_p' B c_p; the
    variant with B^{-1} in the quadratic form (identical for p <= 1) is
    kept alongside as a diagnostic.
    """

    p: int
    b_star: np.ndarray  # j = 0 .. 2p+2
    d_star: np.ndarray  # j = 0 .. 2p
    B: np.ndarray
    D: np.ndarray
    c_p: np.ndarray
    C_p: float
    C_p_inv: float
    a: np.ndarray  # diag(B^-1 D B^-1)

    def a_nu(self, nu):
        return float(self.a[nu])


def moment_pack(p, kernel=VON_MISES):
    """Assemble B, D, c_p, C_p and the diagonal a for degree p (0 <= p <= 3)."""
    if int(p) != p or not (0 <= p <= MAX_DEGREE):
        raise InvalidArgumentError(f"degree p must be an integer in [0, {MAX_DEGREE}]")
    p = int(p)
    b = np.array([moment_b(j, kernel) for j in range(2 * p + 3)])
    d = np.array([moment_d(j, kernel) for j in range(2 * p + 1)])
    idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
    B = b[idx]
    D = d[idx]
    c = b[p + 1 : 2 * p + 2]
    if np.linalg.cond(B) > _COND_LIMIT:
        raise DegenerateKernelError(
            f"moment matrix B is singular for kernel {kernel.name!r}, p={p}"
        )
    Binv = np.linalg.inv(B)
    C_p = float(b[2 * p + 2] - c @ B @ c)
    C_p_inv = float(b[2 * p + 2] - c @ Binv @ c)
    a = np.diag(Binv @ D @ Binv).copy()
    return KernelMoments(
        p=p, b_star=b, d_star=d, B=B, D=D, c_p=c, C_p=C_p, C_p_inv=C_p_inv, a=a
    )


def xi_factor(p, nu, kernel=VON_MISES, moments=None):
    """Conversion constant xi_{p,nu}(K) between the residual-criterion
    minimizer and the MSE-optimal concentration; defined for odd (p - nu).
    """
    if int(nu) != nu or nu < 0 or nu > p:
        raise InvalidArgumentError("need 0 <= nu <= p")
    nu = int(nu)
    if (p - nu) % 2 == 0:
        raise UnsupportedParityError(f"(p - nu) must be odd, got p={p}, nu={nu}")
    m = moments if moments is not None else moment_pack(p, kernel)
    e = np.zeros(p + 1)
    e[nu] = 1.0
    proj = float(e @ np.linalg.solve(m.B, m.c_p))
    num = (p + 1 - nu) * m.a[0] * proj**2
    if num == 0.0:
        raise DegenerateConstantError(
            f"xi numerator degenerates for p={p}, nu={nu}, kernel {kernel.name!r}"
        )
    den = (1 + 2 * nu) * m.a[nu] * m.C_p
    return float((num / den) ** (2.0 / (2 * p + 3)))
