"""Local sine-polynomial likelihood fitting.

At an evaluation angle t the target g is approximated by a polynomial in
sin(theta - t) of degree p, and the kernel-weighted log-likelihood is
maximized in the coefficient vector beta; g_hat^(nu)(t) = nu! * beta[nu].
The normal family has the closed weighted-least-squares solution; the
other families run Fisher scoring in the working-response form: with
expected curvatures q_i = -E[l''(eta_i, Y)] evaluated at the current
predictor, each update is the weighted least squares solve of

    Z_i = eta_i - l'(eta_i, Y_i) / E[l''(eta_i, Y)]

on the design with weights K_i * q_i.  The fixed point is the exact
root of the kernel-weighted score equation regardless of the curvature
approximation, and the expected Hessian is negative definite for every
supported family.

Everything is vectorized over evaluation angles (and a leave-one-out
weight mask), because selectors evaluate whole curves per concentration
candidate.  A per-observation ``offset`` enters the linear predictor
additively; the pilot-error and partially-linear machinery both use it.

Concentrations at which the estimator does not exist (divergent scoring,
ill-conditioned normal equations, no iteration convergence) are reported
through feasibility masks; public single-point entry points translate
masks into :class:`~circfit.errors.InfeasibleKappaError`.  One deliberate
exception: when the kernel mass collapses onto a single support angle
equal to the evaluation angle, the fit degenerates to the constant
estimate with the higher coefficients flagged undetermined instead of
erroring (this covers the exact-interpolation limit of huge kappa).
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .errors import InfeasibleKappaError, InvalidArgumentError
from .kernels import MAX_DEGREE, VON_MISES, kernel_eval
from .quadrature import TWO_PI

# Pilot fits go up to degree p + a with p <= 3, a <= 2.
MAX_FIT_DEGREE = MAX_DEGREE + 2

COND_LIMIT = 1e12
BETA_DIVERGENCE = 1e8
REL_TOL = 1e-8
GRAD_TOL = 1e-10
MAX_ITER = 50

# Weighted second-moment floor below which the design is treated as a
# point mass at the evaluation angle (constant-fit fallback).
_DEGENERATE_S2 = 1e-13
_DEGENERATE_S1 = 1e-7


@dataclass(frozen=True)
class LocalDesign:
    """Design rows sin^j(theta_i - theta0) and kernel weights at theta0."""

    theta0: float
    p: int
    rows: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class LocalFit:
    """Local coefficient estimate at one evaluation angle."""

    theta0: float
    p: int
    kappa: float
    beta: np.ndarray
    converged: bool
    iterations: int
    neg_curvature_ok: bool
    undetermined: bool = False

    def deriv(self, nu):
        """g_hat^(nu)(theta0) = nu! * beta[nu]."""
        if nu > self.p:
            raise InvalidArgumentError("derivative order exceeds fit degree")
        return math.factorial(nu) * float(self.beta[nu])


@dataclass(frozen=True)
class CurveFit:
    """A curve of local fits over an angle grid."""

    grid: np.ndarray
    values: np.ndarray
    beta: np.ndarray
    p: int
    nu: int
    kappa: float
    converged: np.ndarray
    feasible: np.ndarray
    iterations: np.ndarray
    undetermined: np.ndarray

    @property
    def fully_feasible(self):
        return bool(np.all(self.feasible))


class Workspace:
    """Per-(sample, grid) cache of sine powers and cosine differences.

    Selectors sweep many kappa candidates over the same sample and grid;
    only the weights change with kappa, so the trigonometric tables are
    computed once here.
    """

    def __init__(self, theta, eval_angles, max_power):
        theta = np.asarray(theta, dtype=float)
        eval_angles = np.atleast_1d(np.asarray(eval_angles, dtype=float))
        delta = theta[None, :] - eval_angles[:, None]
        self.eval_angles = eval_angles
        self.n = theta.size
        self.m = eval_angles.size
        self.cosd = np.cos(delta)
        s = np.sin(delta)
        sp = np.empty((max_power + 1,) + s.shape)
        sp[0] = 1.0
        for j in range(1, max_power + 1):
            sp[j] = sp[j - 1] * s
        self.sp = sp

    def weights(self, kappa, kernel=VON_MISES):
        """Kernel weight matrix K_kappa(theta_i - t_m), shape (m, n)."""
        if kernel.name == "von_mises":
            with np.errstate(under="ignore"):
                return np.exp(kappa * (self.cosd - 1.0)) / (
                    TWO_PI * special.i0e(kappa)
                )
        if kappa == 0.0:
            return np.full_like(self.cosd, 1.0 / TWO_PI)
        from scipy import integrate

        norm, _ = integrate.quad(
            lambda t: float(kernel.profile(kappa * (1.0 - np.cos(t)))),
            0.0, TWO_PI, epsabs=1e-12, limit=400,
        )
        return np.asarray(kernel.profile(kappa * (1.0 - self.cosd)), dtype=float) / norm

    def eta(self, beta, offsets=None):
        """Linear predictors offset + rows' beta, shape (m, n)."""
        k = beta.shape[-1]
        out = np.einsum("jmn,mj->mn", self.sp[:k], beta)
        if offsets is not None:
            out = out + offsets
        return out


def _moment_matrix(moments, k):
    """Map per-row moment vectors (m, 2k-1) to Hankel matrices (m, k, k)."""
    idx = np.add.outer(np.arange(k), np.arange(k))
    return moments[:, idx]


def _equilibrated_inverse(S):
    """Batched inverse with a condition check on the equilibrated matrix.

    Returns (Sinv, ok); rows failing the check get an identity placeholder
    and ok=False.  Systems are (p+1) x (p+1), so explicit inversion is
    cheap and reused across scoring iterations (the design matrix does
    not change within a fit).
    """
    m, k, _ = S.shape
    diag = np.einsum("mii->mi", S)
    ok = np.all(np.isfinite(S), axis=(1, 2)) & np.all(diag > 0.0, axis=1)
    d = np.where(ok[:, None], 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0)), 1.0)
    St = S * d[:, :, None] * d[:, None, :]
    St = np.where(ok[:, None, None], St, np.eye(k))
    try:
        ev = np.linalg.eigvalsh(St)
    except np.linalg.LinAlgError:
        ev = np.full((m, k), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = ev[:, -1] / ev[:, 0]
    ok &= np.isfinite(cond) & (ev[:, 0] > 0.0) & (cond <= COND_LIMIT)
    St = np.where(ok[:, None, None], S * d[:, :, None] * d[:, None, :], np.eye(k))
    inv = np.linalg.inv(St)
    return inv * d[:, :, None] * d[:, None, :], ok


@dataclass
class BatchFit:
    """Vectorized fit result over evaluation angles.

    ``broken`` marks rows where the estimator cannot exist (singular
    design, scoring divergence); rows that merely hit the iteration cap
    have converged=False, broken=False.  ``feasible`` is the usability
    mask selectors consume: converged and not broken.
    """

    beta: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    broken: np.ndarray
    feasible: np.ndarray
    undetermined: np.ndarray
    neg_curvature_ok: Optional[np.ndarray] = None


def batch_fit(ws, y, family, p, kappa, kernel=VON_MISES, *, weights=None,
              wmask=None, offsets=None, init=None, force_iterative=False,
              max_iter=MAX_ITER, check_curvature=False):
    """Fit degree-p local likelihood at every workspace evaluation angle.

    ``wmask`` multiplies the kernel weights (leave-one-out masking),
    ``offsets`` is an additive (n,) or (m, n) term in the predictor, and
    ``init`` optionally seeds the coefficients (shape (p+1,) or (m, p+1)).
    """
    if p > MAX_FIT_DEGREE or p < 0:
        raise InvalidArgumentError(f"degree p must be in [0, {MAX_FIT_DEGREE}]")
    k = p + 1
    m, n = ws.m, ws.n
    y = np.asarray(y, dtype=float)
    w = ws.weights(kappa, kernel) if weights is None else weights
    if wmask is not None:
        w = w * wmask
    if offsets is not None:
        offsets = np.broadcast_to(np.asarray(offsets, dtype=float), (m, n))

    with np.errstate(all="ignore"):
        return _batch_fit_core(
            ws, y, family, p, kappa, w, offsets, init, force_iterative,
            max_iter, check_curvature,
        )


def _batch_fit_core(ws, y, family, p, kappa, w, offsets, init,
                    force_iterative, max_iter, check_curvature):
    k = p + 1
    m, n = ws.m, ws.n
    sm = np.einsum("jmn,mn->mj", ws.sp[: 2 * p + 1], w)
    s0 = sm[:, 0]
    usable = np.isfinite(s0) & (s0 > 0.0)

    degenerate = np.zeros(m, dtype=bool)
    if p >= 1:
        degenerate = usable & (sm[:, 2] <= _DEGENERATE_S2 * s0) & (
            np.abs(sm[:, 1]) <= _DEGENERATE_S1 * s0
        )

    S = _moment_matrix(sm, k)
    Sinv, solvable = _equilibrated_inverse(S)
    solvable &= usable & ~degenerate

    beta = np.zeros((m, k))
    converged = np.zeros(m, dtype=bool)
    iterations = np.zeros(m, dtype=int)
    broken = ~solvable & ~degenerate

    wsum = np.where(s0 > 0, s0, 1.0)
    wmean_y = np.einsum("mn,n->m", w, y) / wsum
    off_mean = np.zeros(m) if offsets is None else np.einsum("mn,mn->m", w, offsets) / wsum

    if np.any(degenerate):
        # Kernel mass sits on a single support angle equal to the
        # evaluation angle: the level is the link of the local response
        # mean (no clamp: an out-of-domain mean means no estimator).
        level = np.asarray(family.link(wmean_y[degenerate]), dtype=float)
        ok = np.isfinite(level - off_mean[degenerate])
        beta[degenerate, 0] = np.where(ok, level - off_mean[degenerate], 0.0)
        converged[degenerate] = ok
        broken[degenerate] = ~ok

    active = solvable.copy()
    if family.name == "bernoulli" and (np.all(y == 0.0) or np.all(y == 1.0)):
        # Constant-response Bernoulli data has no finite maximizer.
        broken |= active
        active[:] = False

    if family.name == "normal" and not force_iterative and np.any(active):
        z = y[None, :] if offsets is None else y[None, :] - offsets
        rhs = np.einsum("jmn,mn->mj", ws.sp[:k], w * z)
        beta_a = np.einsum("mij,mj->mi", Sinv, rhs)
        bad = ~np.all(np.isfinite(beta_a), axis=1)
        beta[active] = beta_a[active]
        converged[active & ~bad] = True
        broken[active & bad] = True
        active[:] = False

    if np.any(active):
        if init is None:
            beta[active, 0] = family.link(family.init_mean(wmean_y[active])) - off_mean[active]
        else:
            init = np.broadcast_to(np.asarray(init, dtype=float), (m, k))
            beta[active] = init[active]
        bad0 = active & ~np.all(np.isfinite(beta), axis=1)
        broken |= bad0
        active &= ~bad0

        spall = ws.sp[: 2 * p + 1]
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            full = idx.size == m
            spk = spall if full else spall[:, idx, :]
            wi = w if full else w[idx]
            bi = beta[idx]
            oi = None if offsets is None else (offsets if full else offsets[idx])

            eta = np.einsum("jmn,mj->mn", spk[:k], bi)
            if oi is not None:
                eta = eta + oi
            lp = family.score(eta, y[None, :])
            grad = np.einsum("jmn,mn->mj", spk[:k], wi * lp)
            gnorm = np.max(np.abs(grad), axis=1)
            done_grad = np.isfinite(gnorm) & (gnorm < GRAD_TOL)
            obj = np.einsum("mn,mn->m", wi, family.loglik(eta, y[None, :]))

            # Working-response step: weights w * (-l''(eta, y)), response
            # Z = eta - l'/l''; one WLS solve per update.  l'' < 0 in every
            # supported family (for normal/Bernoulli/Poisson it is also
            # deterministic in eta, so this is the expected-Hessian step;
            # for gamma the observed curvature is required for convergence).
            curv = np.asarray(family.curvature(eta, y[None, :]), dtype=float)
            curv_ok = np.all(np.isfinite(curv) & (curv < 0.0), axis=1)
            curv = np.where(np.isfinite(curv) & (curv < 0.0), curv, -1.0)
            wq = wi * (-curv)
            zres = eta - lp / curv
            if oi is not None:
                zres = zres - oi
            hm = np.einsum("jmn,mn->mj", spk, wq)
            Hq = _moment_matrix(hm, k)
            rhs = np.einsum("jmn,mn->mj", spk[:k], wq * zres)
            Hinv, solve_ok = _equilibrated_inverse(Hq)
            beta_new = np.einsum("mij,mj->mi", Hinv, rhs)

            # Step halving: the objective is concave, so backtracking
            # toward the current point turns the update into an ascent
            # step whenever the full solve overshoots.
            undecided = np.all(np.isfinite(beta_new), axis=1) & curv_ok & solve_ok
            pending = undecided.copy()
            for _half in range(10):
                sub = np.flatnonzero(pending)
                if sub.size == 0:
                    break
                eta_c = np.einsum("jmn,mj->mn", spk[:k][:, sub, :], beta_new[sub])
                if oi is not None:
                    eta_c = eta_c + oi[sub]
                obj_c = np.einsum(
                    "mn,mn->m", wi[sub], family.loglik(eta_c, y[None, :])
                )
                good = np.isfinite(obj_c) & (obj_c >= obj[sub] - 1e-12 * (1 + np.abs(obj[sub])))
                pending[sub[good]] = False
                rest = sub[~good]
                beta_new[rest] = 0.5 * (beta_new[rest] + bi[rest])

            finite = np.all(np.isfinite(beta_new), axis=1)
            diverged = ~finite | (np.max(np.abs(beta_new), axis=1) > BETA_DIVERGENCE)
            diverged |= ~curv_ok | ~np.isfinite(gnorm) | ~solve_ok
            delta = np.where(finite, np.max(np.abs(beta_new - bi), axis=1), np.inf)
            scale = np.maximum(1.0, np.max(np.abs(bi), axis=1))
            done_step = finite & (delta / scale < REL_TOL)

            step = ~done_grad & ~diverged
            upd = idx[step]
            beta[upd] = beta_new[step]
            iterations[upd] += 1

            converged[idx[done_grad | (done_step & ~diverged)]] = True
            broken[idx[diverged]] = True
            active[idx[done_grad | done_step | diverged]] = False

    neg_ok = None
    if check_curvature:
        neg_ok = np.zeros(m, dtype=bool)
        good = converged & ~broken & ~degenerate
        if np.any(good):
            eta = ws.eta(beta, offsets)
            lpp = np.asarray(family.curvature(eta, y[None, :]), dtype=float)
            hm = np.einsum("jmn,mn->mj", ws.sp[: 2 * p + 1], w * lpp)
            H = _moment_matrix(hm, k)
            try:
                ev = np.linalg.eigvalsh(H[good])
                neg_ok[good] = np.isfinite(ev[:, -1]) & (ev[:, -1] < 0.0)
            except np.linalg.LinAlgError:
                pass

    return BatchFit(
        beta=beta,
        converged=converged,
        iterations=iterations,
        broken=broken,
        feasible=converged & ~broken,
        undetermined=degenerate,
        neg_curvature_ok=neg_ok,
    )


def build_design(sample, theta0, p, kappa, kernel=VON_MISES):
    """Design rows (1, sin(d), ..., sin^p(d)) and weights K_kappa(d)."""
    _check_fit_args(theta0, p, kappa)
    d = sample.angles - theta0
    s = np.sin(d)
    rows = np.column_stack([s**j for j in range(p + 1)])
    return LocalDesign(
        theta0=float(theta0), p=int(p), rows=rows,
        weights=np.asarray(kernel_eval(d, kappa, kernel), dtype=float),
    )


def _check_fit_args(theta0, p, kappa, limit=MAX_DEGREE):
    if not np.isfinite(theta0):
        raise InvalidArgumentError("theta0 must be finite")
    if int(p) != p or not (0 <= p <= limit):
        raise InvalidArgumentError(f"degree p must be an integer in [0, {limit}]")
    if not np.isfinite(kappa) or kappa < 0:
        raise InvalidArgumentError("kappa must be finite and >= 0")


def weighted_moments(sample, theta0, kappa, j, power=1, kernel=VON_MISES,
                     obs_weights=None):
    """Kernel-weighted sine moments of the sample at theta0.

    power=1 gives s_{n,j} = sum sin^j(theta_i - theta0) K_kappa(...),
    power=2 the squared-kernel analogue gamma_{n,j}; ``obs_weights``
    inserts an extra per-observation factor (the sigma^2-weighted
    variant used in variance asymptotics).
    """
    if int(j) != j or j < 0:
        raise InvalidArgumentError("moment order j must be a nonnegative integer")
    if power not in (1, 2):
        raise InvalidArgumentError("power must be 1 or 2")
    d = sample.angles - theta0
    w = np.asarray(kernel_eval(d, kappa, kernel), dtype=float) ** power
    if obs_weights is not None:
        w = w * np.asarray(obs_weights, dtype=float)
    with np.errstate(under="ignore"):
        return float(np.sum(np.sin(d) ** j * w)) if j else float(np.sum(w))


def _single_fit(sample, family, theta0, p, kappa, kernel, *, init=None,
                force_iterative=False, offsets=None):
    ws = Workspace(sample.angles, [theta0], 2 * p)
    res = batch_fit(
        ws, sample.responses, family, p, kappa, kernel,
        offsets=None if offsets is None else np.asarray(offsets, float)[None, :],
        init=None if init is None else np.asarray(init, float)[None, :],
        force_iterative=force_iterative, check_curvature=True,
    )
    return res


def wls_fit(sample, theta0, p, kappa, kernel=VON_MISES):
    """Closed-form weighted least squares (normal-family) local fit."""
    from .families import normal

    _check_fit_args(theta0, p, kappa)
    res = _single_fit(sample, normal(), theta0, p, kappa, kernel)
    if not res.feasible[0]:
        raise InfeasibleKappaError(
            f"normal equations singular or ill-conditioned at theta0={theta0}, kappa={kappa}"
        )
    return LocalFit(
        theta0=float(theta0), p=int(p), kappa=float(kappa),
        beta=res.beta[0], converged=True, iterations=0,
        neg_curvature_ok=bool(res.neg_curvature_ok[0]) or bool(res.undetermined[0]),
        undetermined=bool(res.undetermined[0]),
    )


def fisher_scoring_fit(sample, family, theta0, p, kappa, kernel=VON_MISES, init=None):
    """Fisher scoring local likelihood fit (any family).

    Divergence (or a design at which the estimator cannot exist) raises
    InfeasibleKappaError; hitting the iteration cap returns a LocalFit
    with converged=False.
    """
    _check_fit_args(theta0, p, kappa)
    res = _single_fit(sample, family, theta0, p, kappa, kernel, init=init,
                      force_iterative=True)
    if res.broken[0]:
        raise InfeasibleKappaError(
            f"local likelihood estimator does not exist at theta0={theta0}, "
            f"kappa={kappa} (family {family.name})"
        )
    return LocalFit(
        theta0=float(theta0), p=int(p), kappa=float(kappa),
        beta=res.beta[0], converged=bool(res.converged[0]),
        iterations=int(res.iterations[0]),
        neg_curvature_ok=bool(res.neg_curvature_ok[0]) or bool(res.undetermined[0]),
        undetermined=bool(res.undetermined[0]),
    )


def fit_curve(sample, family, grid, p, nu, kappa, kernel=VON_MISES, offsets=None):
    """Fit the curve g_hat^(nu) over an angle grid at fixed kappa.

    Infeasible grid points are flagged in the returned mask rather than
    raised; selectors mask the whole kappa when any point fails.
    """
    _check_fit_args(0.0, p, kappa)
    if int(nu) != nu or not (0 <= nu <= p):
        raise InvalidArgumentError("need 0 <= nu <= p")
    nu = int(nu)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    ws = Workspace(sample.angles, grid, 2 * p)
    res = batch_fit(ws, sample.responses, family, p, kappa, kernel, offsets=offsets)
    feasible = res.feasible.copy()
    if nu > 0:
        feasible &= ~res.undetermined
    values = math.factorial(nu) * res.beta[:, nu]
    values = np.where(feasible, values, np.nan)
    return CurveFit(
        grid=grid, values=values, beta=res.beta, p=int(p), nu=nu,
        kappa=float(kappa), converged=res.converged, feasible=feasible,
        iterations=res.iterations, undetermined=res.undetermined,
    )
