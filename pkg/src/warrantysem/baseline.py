"""Direct maximization of the incomplete-data likelihood.

Each unreturned unit contributes ``log(1 - P(c))`` where ``P(c)`` is the
probability that a unit with censoring time ``c`` fails inside the warranty
and is returned before the end of study.  ``P`` is a quadrature, and its
error is multiplied by the number of unreturned units; at high missing rates
the direct fit is therefore fragile.  :func:`direct_fit` reports that
fragility instead of hiding it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .data import FieldDataset, Scheme
from .distributions import (LOGNORMAL, BivariateLognormal, IndependentPair, JointModel,
                            ParamSet, Structure)
from .errors import IntegrationError, SchemaError, WarrantySemError

ABS_TOL_1D = 1e-10
ABS_TOL_2D = 1e-8


def _quad(func, a, b, epsabs):
    val, err, info, *rest = integrate.quad(func, a, b, epsabs=epsabs, epsrel=1e-10,
                                           limit=200, full_output=1)
    if rest and err > 1e3 * epsabs:
        raise IntegrationError(
            f"quadrature did not converge on [{a:g}, {b:g}]: achieved {err:.3g}, "
            f"requested {epsabs:.3g} ({rest[0].splitlines()[0]})")
    return val


def _region(censor_c, tau):
    """Upper limit for t, or None when the observation region is empty."""
    upper = min(tau, censor_c)
    if not upper > 0:
        return None
    return upper


def missing_prob_2d(m: JointModel, censor_c, tau):
    """Observation probability by nested adaptive quadrature of the joint density."""
    upper = _region(censor_c, tau)
    if upper is None:
        return 0.0
    structure, theta = m.structure, m.theta

    def dens(x, t):
        return float(np.exp(structure.logpdf(theta, x, t)))

    if math.isinf(censor_c):
        def inner(t):
            return _quad(lambda x: dens(x, t), 0.0, math.inf, ABS_TOL_2D)
    else:
        def inner(t):
            return _quad(lambda x: dens(x, t), 0.0, censor_c - t, ABS_TOL_2D)
    return min(1.0, max(0.0, _quad(inner, 0.0, upper, ABS_TOL_2D)))


def missing_prob(m: JointModel, censor_c, tau):
    """P(X + T < censor_c, T < tau): the chance a unit is returned and observed.

    Independent (X, T) reduce to one integral of F_X(c - t) dF_T(t), and the
    bivariate lognormal to one integral of the conditional normal cdf; other
    structures fall back to :func:`missing_prob_2d`.
    """
    censor_c = float(censor_c)
    tau = float(tau)
    upper = _region(censor_c, tau)
    if upper is None:
        return 0.0
    if isinstance(m.structure, IndependentPair):
        s = m.structure
        px, pt = s.split(m.theta)
        if math.isinf(censor_c):
            return float(s.fam_t.cdf(upper, pt))

        def integrand(t):
            return float(s.fam_x.cdf(censor_c - t, px) * np.exp(s.fam_t.logpdf(t, pt)))

        val = _quad(integrand, 0.0, upper, ABS_TOL_1D)
        return min(1.0, max(0.0, val))
    if isinstance(m.structure, BivariateLognormal):
        return _bivariate_lognormal_prob(m.theta, censor_c, upper)
    if m.structure.arity != 2:
        raise SchemaError("missing_prob needs a two-variable model")
    return missing_prob_2d(m, censor_c, tau)


def _bivariate_lognormal_prob(theta, censor_c, upper):
    # log X given log T is normal, so the inner integral over x is a normal cdf
    mu1, mu2, s11, s22, s12 = theta
    sd_t = math.sqrt(s22)
    if math.isinf(censor_c):
        return float(special.ndtr((math.log(upper) - mu2) / sd_t))
    slope = s12 / s22
    sd_cond = math.sqrt(s11 - s12 * slope)

    def integrand(t):
        lt = math.log(t)
        inner = special.ndtr((math.log(censor_c - t) - mu1 - slope * (lt - mu2)) / sd_cond)
        dens = math.exp(-0.5 * ((lt - mu2) / sd_t) ** 2) / (t * sd_t * math.sqrt(2 * math.pi))
        return inner * dens

    val = _quad(integrand, 0.0, upper, ABS_TOL_1D)
    return min(1.0, max(0.0, val))


def _require_pair(d: FieldDataset):
    if d.scheme is not Scheme.PAIR:
        raise SchemaError("the direct likelihood is implemented for pair_xt data only")


def direct_loglik(theta, d: FieldDataset, structure: Structure):
    """Incomplete-data log-likelihood; ``-inf`` when some P(c) is numerically 1."""
    _require_pair(d)
    theta = theta.as_array() if isinstance(theta, ParamSet) else np.asarray(theta, dtype=float)
    m = JointModel(structure, ParamSet(structure.param_names, theta))
    arr = d.arrays
    total = float(structure.logpdf(theta, arr["claim_x"], arr["claim_t"]).sum())
    cens, counts = np.unique(arr["unret_c"], return_counts=True)
    for c, n in zip(cens, counts):
        p = missing_prob(m, c, d.tau)
        if p >= 1.0:
            return -math.inf
        total += n * math.log1p(-p)
    return total


# -- unconstrained parameterization for the optimizer -------------------------


def _positive_mask(structure):
    if isinstance(structure, BivariateLognormal):
        return None
    fams = [structure.fam_x, structure.fam_t]
    mask = []
    for fam in fams:
        if fam is LOGNORMAL:
            mask.extend([False, True])
        else:
            mask.extend([True] * fam.n_params)
    return np.array(mask)


def to_free(structure, theta):
    theta = np.asarray(theta, dtype=float)
    if isinstance(structure, BivariateLognormal):
        mu1, mu2, s11, s22, s12 = theta
        rho = s12 / math.sqrt(s11 * s22)
        return np.array([mu1, mu2, math.log(s11), math.log(s22), math.atanh(rho)])
    mask = _positive_mask(structure)
    return np.where(mask, np.log(np.where(mask, theta, 1.0)), theta)


def from_free(structure, free):
    free = np.asarray(free, dtype=float)
    if isinstance(structure, BivariateLognormal):
        mu1, mu2, l11, l22, z = free
        s11, s22 = math.exp(l11), math.exp(l22)
        return np.array([mu1, mu2, s11, s22, math.tanh(z) * math.sqrt(s11 * s22)])
    mask = _positive_mask(structure)
    with np.errstate(over="ignore"):
        return np.where(mask, np.exp(free), free)


@dataclass(frozen=True)
class DirectFitReport:
    estimate: ParamSet | None
    converged: bool
    loglik: float
    iterations: int
    grad_norm: float
    condition: float
    message: str

    def lines(self):
        out = [f"converged: {str(self.converged).lower()}",
               f"loglik: {self.loglik:.10g}",
               f"iterations: {self.iterations}",
               f"gradient norm: {self.grad_norm:.3g}",
               f"inverse-Hessian condition number: {self.condition:.3g}",
               f"message: {self.message}"]
        if self.estimate is not None:
            out += [f"{n}: {v:.10g}" for n, v in zip(self.estimate.names, self.estimate.values)]
        return out


def direct_fit(d: FieldDataset, structure: Structure, init, gtol=1e-4, maxiter=500):
    """BFGS ascent of :func:`direct_loglik` over log-scale parameters.

    Never raises for numerical trouble: the report's ``converged`` flag says
    whether the optimizer stopped at a point with a small gradient.
    """
    _require_pair(d)
    theta0 = init.as_array() if isinstance(init, ParamSet) else np.asarray(init, dtype=float)
    structure.check(theta0)

    def objective(free):
        try:
            theta = from_free(structure, free)
            structure.check(theta)
            ll = direct_loglik(theta, d, structure)
        except WarrantySemError:
            return math.inf
        return -ll if math.isfinite(ll) else math.inf

    try:
        res = optimize.minimize(objective, to_free(structure, theta0), method="BFGS",
                                options={"gtol": gtol, "maxiter": maxiter})
    except (WarrantySemError, ValueError, FloatingPointError) as exc:
        return DirectFitReport(None, False, -math.inf, 0, math.inf, math.inf,
                               f"optimizer error: {exc}")
    theta = from_free(structure, res.x)
    grad = np.asarray(getattr(res, "jac", np.full(theta.size, np.nan)), dtype=float)
    gnorm = float(np.max(np.abs(grad))) if np.all(np.isfinite(grad)) else math.inf
    try:
        cond = float(np.linalg.cond(res.hess_inv))
    except (AttributeError, np.linalg.LinAlgError):
        cond = math.inf
    loglik = -float(res.fun)
    try:
        estimate = structure.params(theta)
    except WarrantySemError:
        estimate = None
    converged = bool(res.success and gnorm < gtol and math.isfinite(loglik)
                     and estimate is not None)
    return DirectFitReport(estimate, converged, loglik, int(res.nit), gnorm, cond,
                           str(res.message))


def aic(loglik, n_params):
    return 2.0 * n_params - 2.0 * loglik


def model_aic(theta_hat, d: FieldDataset, structure: Structure):
    """Direct log-likelihood at ``theta_hat`` and the matching AIC."""
    ll = direct_loglik(theta_hat, d, structure)
    return ll, aic(ll, structure.n_params)
