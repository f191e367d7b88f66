"""Plug-in bias and sandwich variance estimation for local fits.

Bias: a pilot fit of degree p + a (default a = 2) at a pilot
concentration kappa_star estimates the truncation error of the degree-p
expansion at each observation,

    eps_i = sum_{k=p+1}^{p+a} beta_k^pilot * sin^k(theta_i - t),

and the bias vector is [L''(beta_hat)]^{-1} L'(beta_hat) where both
derivatives are taken of the likelihood with eps plugged into the
predictor, evaluated at the ordinary degree-p estimate (no second
maximization).

Variance: the sandwich [L''(beta_hat)]^{-1} Gamma_n [L''(beta_hat)]^{-1}
scaled by an estimate of Var[l'(g(t), Y)]; case A families plug their
known variance function into the fitted level, case B families use the
pilot-weighted average of squared scores at the pilot fit.

The pilot is computed once per evaluation angle and reused across the
kappa grid during selection.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleKappaError, InvalidArgumentError
from .kernels import VON_MISES
from .localfit import MAX_FIT_DEGREE, Workspace, _moment_matrix, batch_fit

DEFAULT_PILOT_EXTRA = 2  # the practical a = 2 recommendation


@dataclass(frozen=True)
class PilotFit:
    """Degree-(p+a) pilot fit at a single evaluation angle."""

    theta0: float
    p: int
    a: int
    kappa_star: float
    beta_pilot: np.ndarray
    epsilon_hat: np.ndarray

    @property
    def degree(self):
        return self.p + self.a


@dataclass(frozen=True)
class BiasVariance:
    theta0: float
    kappa: float
    bias: float
    variance: float
    mse: float
    var_case_used: str


class PilotCurve:
    """Pilot quantities over a whole evaluation grid (internal).

    Holds the degree-(p+a) coefficients, the per-observation truncation
    errors eps, and the case-B variance factor at every grid angle.
    """

    def __init__(self, ws, y, family, p, a, kappa_star, kernel=VON_MISES,
                 offsets=None):
        if a < 1:
            raise InvalidArgumentError("pilot expansion needs a >= 1")
        if p + a > MAX_FIT_DEGREE:
            raise InvalidArgumentError(
                f"pilot degree p + a must be <= {MAX_FIT_DEGREE}"
            )
        res = batch_fit(ws, y, family, p + a, kappa_star, kernel, offsets=offsets)
        self.p, self.a = p, a
        self.kappa_star = kappa_star
        self.beta = res.beta
        self.feasible = res.feasible & ~res.undetermined
        # eps_i = sum_{k=p+1}^{p+a} beta_k sin^k(theta_i - t), per grid angle
        self.eps = np.einsum(
            "jmn,mj->mn", ws.sp[p + 1 : p + a + 1], res.beta[:, p + 1 : p + a + 1]
        )
        w_star = ws.weights(kappa_star, kernel)
        eta_pilot = ws.eta(res.beta, offsets)
        lp = np.asarray(family.score(eta_pilot, y[None, :]), dtype=float)
        with np.errstate(invalid="ignore"):
            denom = w_star.sum(axis=1)
            self.var_factor_b = np.einsum("mn,mn->m", w_star, lp * lp) / denom
        self.feasible &= np.isfinite(self.var_factor_b) & (denom > 0.0)


def batch_bias_variance(ws, y, family, p, nu, kappa, pilot, kernel=VON_MISES,
                        offsets=None, beta=None, fit_feasible=None,
                        force_case_b=False):
    """Bias, variance and MSE of g_hat^(nu) at every grid angle.

    ``beta``/``fit_feasible`` reuse an existing degree-p batch fit at
    kappa; otherwise one is computed.  Returns (bias, variance, ok).
    """
    k = p + 1
    fact = math.factorial(nu)
    if beta is None:
        res = batch_fit(ws, y, family, p, kappa, kernel, offsets=offsets)
        beta, fit_feasible = res.beta, res.feasible & ~res.undetermined
    w = ws.weights(kappa, kernel)
    eta = ws.eta(beta[:, :k], offsets)
    eta_star = eta + pilot.eps

    with np.errstate(all="ignore"):
        lp_star = np.asarray(family.score(eta_star, y[None, :]), dtype=float)
        lpp_star = np.asarray(family.curvature(eta_star, y[None, :]), dtype=float)
        grad = np.einsum("jmn,mn->mj", ws.sp[:k], w * lp_star)
        hess_m = np.einsum("jmn,mn->mj", ws.sp[: 2 * p + 1], w * lpp_star)
        H_star = _moment_matrix(hess_m, k)
        bias_vec, ok_b = _batch_solve(H_star, grad)
        bias = fact * bias_vec[:, nu]

        # Sandwich: H^{-1} Gamma H^{-1} with H the curvature of the plain
        # (eps-free) local likelihood at beta_hat.
        lpp = np.asarray(family.curvature(eta, y[None, :]), dtype=float)
        hm = np.einsum("jmn,mn->mj", ws.sp[: 2 * p + 1], w * lpp)
        H = _moment_matrix(hm, k)
        gm = np.einsum("jmn,mn->mj", ws.sp[: 2 * p + 1], w * w)
        Gamma = _moment_matrix(gm, k)
        e = np.zeros((ws.m, k))
        e[:, nu] = 1.0
        hrow, ok_v = _batch_solve(H, e)
        quad = np.einsum("mi,mij,mj->m", hrow, Gamma, hrow)

        if family.var_case == "A" and not force_case_b:
            ghat = beta[:, 0]
            if offsets is not None:
                w0 = w.sum(axis=1)
                ghat = ghat + np.einsum(
                    "mn,mn->m", w, np.broadcast_to(offsets, w.shape)
                ) / np.where(w0 > 0, w0, 1.0)
            factor = np.asarray(family.variance_function(ghat), dtype=float)
            case = "A"
        else:
            factor = pilot.var_factor_b
            case = "B"
        variance = fact**2 * factor * quad
    variance = np.maximum(variance, 0.0)

    ok = (
        (fit_feasible if fit_feasible is not None else np.ones(ws.m, bool))
        & pilot.feasible
        & ok_b & ok_v
        & np.isfinite(bias) & np.isfinite(variance)
    )
    return bias, variance, ok, case


def _batch_solve(A, b):
    """Batched solve with per-row failure masking (small dense systems)."""
    ok = np.all(np.isfinite(A), axis=(1, 2)) & np.all(np.isfinite(b), axis=1)
    k = A.shape[-1]
    A_safe = np.where(ok[:, None, None], A, np.eye(k))
    try:
        x = np.linalg.solve(A_safe, b[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        x = np.full_like(b, np.nan)
        for i in range(A.shape[0]):
            if not ok[i]:
                continue
            try:
                x[i] = np.linalg.solve(A_safe[i], b[i])
            except np.linalg.LinAlgError:
                ok[i] = False
    ok &= np.all(np.isfinite(x), axis=1)
    return x, ok


def _pilot_workspace(sample, theta0, p, a):
    return Workspace(sample.angles, [theta0], 2 * (p + a))


def pilot_fit(sample, family, theta0, p, a, kappa_star, kernel=VON_MISES):
    """Fit the degree-(p+a) pilot at theta0 and extract eps_i."""
    ws = _pilot_workspace(sample, theta0, p, a)
    pc = PilotCurve(ws, sample.responses, family, p, a, kappa_star, kernel)
    if not pc.feasible[0]:
        raise InfeasibleKappaError(
            f"pilot fit infeasible at theta0={theta0}, kappa*={kappa_star}"
        )
    return PilotFit(
        theta0=float(theta0), p=int(p), a=int(a), kappa_star=float(kappa_star),
        beta_pilot=pc.beta[0], epsilon_hat=pc.eps[0],
    )


class _PilotView:
    """Adapt a single-angle PilotFit to the PilotCurve interface."""

    def __init__(self, ws, y, family, pilot, kernel):
        self.p, self.a = pilot.p, pilot.a
        self.kappa_star = pilot.kappa_star
        self.beta = np.asarray(pilot.beta_pilot, dtype=float)[None, :]
        self.eps = np.asarray(pilot.epsilon_hat, dtype=float)[None, :]
        w_star = ws.weights(pilot.kappa_star, kernel)
        lp = np.asarray(family.score(ws.eta(self.beta), y[None, :]), dtype=float)
        denom = w_star.sum(axis=1)
        with np.errstate(invalid="ignore"):
            self.var_factor_b = np.einsum("mn,mn->m", w_star, lp * lp) / denom
        self.feasible = np.isfinite(self.var_factor_b) & (denom > 0.0)


def _point_bias_variance(sample, family, theta0, p, nu, kappa, pilot, kernel,
                         force_case_b=False):
    if int(nu) != nu or not (0 <= nu <= p):
        raise InvalidArgumentError("need 0 <= nu <= p")
    if pilot.theta0 != theta0 or pilot.p != p:
        raise InvalidArgumentError("pilot was computed for a different (theta0, p)")
    ws = _pilot_workspace(sample, theta0, p, pilot.a)
    pc = _PilotView(ws, sample.responses, family, pilot, kernel)
    bias, var, ok, case = batch_bias_variance(
        ws, sample.responses, family, p, int(nu), kappa, pc, kernel,
        force_case_b=force_case_b,
    )
    if not ok[0]:
        raise InfeasibleKappaError(
            f"bias/variance estimation infeasible at theta0={theta0}, kappa={kappa}"
        )
    return float(bias[0]), float(var[0]), case


def estimate_bias(sample, family, theta0, p, nu, kappa, pilot, kernel=VON_MISES):
    """Estimated bias of g_hat^(nu)(theta0) at concentration kappa."""
    bias, _, _ = _point_bias_variance(sample, family, theta0, p, nu, kappa, pilot, kernel)
    return bias


def estimate_variance(sample, family, theta0, p, nu, kappa, pilot,
                      kernel=VON_MISES, force_case_b=False):
    """Estimated variance of g_hat^(nu)(theta0) at concentration kappa."""
    _, var, _ = _point_bias_variance(
        sample, family, theta0, p, nu, kappa, pilot, kernel, force_case_b=force_case_b
    )
    return var


def estimate_mse(sample, family, theta0, p, nu, kappa, pilot, kernel=VON_MISES):
    """Plug-in MSE estimate: bias^2 + variance."""
    bias, var, case = _point_bias_variance(
        sample, family, theta0, p, nu, kappa, pilot, kernel
    )
    return BiasVariance(
        theta0=float(theta0), kappa=float(kappa), bias=bias, variance=var,
        mse=bias * bias + var, var_case_used=case,
    )
