"""Parametric families for sales lag, lifetime and report delay.

Every family works on plain numpy arrays of parameters so that the S-step,
the M-step and the finite-difference information code can evaluate
densities on whole batches of completed datasets at once.

Parameterizations
-----------------
Exponential(rate)        mean 1/rate
Weibull(scale, shape)    F(t) = 1 - exp(-(t/scale)**shape)
Lognormal(mu, sigma)     log value ~ Normal(mu, sigma**2)
Gamma(shape, scale)      mean shape*scale
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import DomainError, FitDegenerateError, ParameterDomainError

LOG_2PI = math.log(2.0 * math.pi)

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 200


@dataclass(frozen=True)
class ParamSet:
    """Ordered, named parameter values.

    Immutable; ``values`` is stored as a tuple of floats so instances hash
    and compare exactly.
    """

    names: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.names) != len(self.values):
            raise ParameterDomainError(
                f"{len(self.names)} names but {len(self.values)} values")

    def __getitem__(self, name):
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def as_array(self):
        return np.array(self.values, dtype=float)

    def as_dict(self):
        return dict(zip(self.names, self.values))


def _solve_increasing(gd, u0, tol=NEWTON_TOL, maxiter=NEWTON_MAXITER):
    """Root of an increasing function of ``u`` by safeguarded Newton.

    ``gd(u)`` returns the value and derivative.  Every evaluation narrows a
    sign-change bracket; a Newton step that leaves the bracket is replaced
    by bisection, or by a doubling search while one side is still open.
    """
    lo, hi = -math.inf, math.inf
    u = u0
    reach = 1.0
    for _ in range(maxiter):
        gu, du = gd(u)
        if gu == 0.0:
            return u
        if gu > 0.0:
            hi = u
        else:
            lo = u
        u_new = u - gu / du if du > 0.0 and math.isfinite(du) else math.nan
        if not (lo < u_new < hi):
            if math.isinf(hi):
                u_new = u + reach
                reach *= 2.0
            elif math.isinf(lo):
                u_new = u - reach
                reach *= 2.0
            else:
                u_new = 0.5 * (lo + hi)
        if abs(u_new) > 700.0:
            raise FitDegenerateError("likelihood equation has no finite root")
        if abs(u_new - u) < tol * max(1.0, abs(u)):
            return u_new
        u = u_new
    return u


class Family:
    """Base class; subclasses supply the formulas."""

    name = ""
    param_names: tuple = ()
    # index of parameters that scale the variable (multiplied when widening)
    _scale_index: int | None = None

    @property
    def n_params(self):
        return len(self.param_names)

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))

    def check(self, params):
        p = np.asarray(params, dtype=float)
        if p.shape != (self.n_params,):
            raise ParameterDomainError(
                f"{self.name} takes {self.n_params} parameters, got {p.shape}")
        if not all(map(math.isfinite, p.tolist())):
            raise ParameterDomainError(f"{self.name} parameters not finite: {p}")
        return p

    def pdf(self, x, params):
        return np.exp(self.logpdf(x, params))

    def sf(self, x, params):
        return 1.0 - self.cdf(x, params)

    def widen(self, params, factor):
        """Parameters of the law of ``factor * V`` where ``V`` follows ``params``."""
        p = self.check(params).copy()
        p[self._scale_index] *= factor
        return p

    def fit(self, data):
        raise NotImplementedError

    @staticmethod
    def _positive_data(data, name):
        v = np.asarray(data, dtype=float).ravel()
        if v.size == 0:
            raise FitDegenerateError(f"{name} fit needs at least one value")
        if not (v.min() > 0.0 and v.max() < math.inf):
            raise DomainError(f"{name} fit needs finite positive values")
        return v


class Exponential(Family):
    name = "exponential"
    param_names = ("rate",)

    def check(self, params):
        p = super().check(params)
        if p[0] <= 0:
            raise ParameterDomainError(f"exponential rate must be > 0, got {p[0]}")
        return p

    def logpdf(self, x, params):
        (rate,) = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            out = math.log(rate) - rate * x
        return np.where(x > 0, out, -np.inf)

    def cdf(self, x, params):
        (rate,) = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return -np.expm1(-rate * x)

    def sf(self, x, params):
        (rate,) = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return np.exp(-rate * x)

    def ppf(self, u, params):
        (rate,) = self.check(params)
        return -np.log1p(-np.asarray(u, dtype=float)) / rate

    def sample(self, params, rng, size=None):
        (rate,) = self.check(params)
        return rng.exponential(1.0 / rate, size)

    def widen(self, params, factor):
        p = self.check(params).copy()
        p[0] /= factor
        return p

    def fit(self, data):
        v = self._positive_data(data, self.name)
        return np.array([1.0 / v.mean()])


class Weibull(Family):
    name = "weibull"
    param_names = ("scale", "shape")
    _scale_index = 0

    def check(self, params):
        p = super().check(params)
        if p[0] <= 0 or p[1] <= 0:
            raise ParameterDomainError(f"weibull scale and shape must be > 0, got {p}")
        return p

    def logpdf(self, x, params):
        scale, shape = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.log(x) - math.log(scale)
            out = math.log(shape / scale) + (shape - 1.0) * z - np.exp(shape * z)
        return np.where(x > 0, out, -np.inf)

    def cdf(self, x, params):
        scale, shape = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return -np.expm1(-((x / scale) ** shape))

    def sf(self, x, params):
        scale, shape = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return np.exp(-((x / scale) ** shape))

    def ppf(self, u, params):
        scale, shape = self.check(params)
        return scale * (-np.log1p(-np.asarray(u, dtype=float))) ** (1.0 / shape)

    def sample(self, params, rng, size=None):
        scale, shape = self.check(params)
        return scale * rng.weibull(shape, size)

    def fit(self, data):
        """Complete-data MLE.

        Solves the profile equation for the shape on the log scale; the scale
        then has a closed form.  Values are rescaled by their maximum so that
        ``t**shape`` cannot overflow.
        """
        v = self._positive_data(data, self.name)
        if v.size < 2 or np.ptp(v) == 0.0:
            raise FitDegenerateError("weibull fit needs at least 2 distinct values")
        logs = np.log(v)
        top = logs.max()
        z = logs - top
        zbar = z.mean()

        def gd(u):
            beta = math.exp(u)
            w = np.exp(beta * z)
            w /= w.sum()
            m = float(w @ z)
            var = float(w @ (z - m) ** 2)
            return m - 1.0 / beta - zbar, beta * var + 1.0 / beta

        sd = logs.std()
        u0 = math.log(1.2825 / sd) if sd > 0 else 0.0
        beta = math.exp(_solve_increasing(gd, u0))
        scale = math.exp(top + math.log(np.mean(np.exp(beta * z))) / beta)
        return np.array([scale, beta])


class Lognormal(Family):
    name = "lognormal"
    param_names = ("mu", "sigma")

    def check(self, params):
        p = super().check(params)
        if p[1] <= 0:
            raise ParameterDomainError(f"lognormal sigma must be > 0, got {p[1]}")
        return p

    def logpdf(self, x, params):
        mu, sigma = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(x)
            out = -lx - math.log(sigma) - 0.5 * LOG_2PI - 0.5 * ((lx - mu) / sigma) ** 2
        return np.where(x > 0, out, -np.inf)

    def cdf(self, x, params):
        mu, sigma = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0)) - mu) / sigma
        return special.ndtr(z)

    def sf(self, x, params):
        mu, sigma = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0)) - mu) / sigma
        return special.ndtr(-z)

    def ppf(self, u, params):
        mu, sigma = self.check(params)
        return np.exp(mu + sigma * special.ndtri(np.asarray(u, dtype=float)))

    def sample(self, params, rng, size=None):
        mu, sigma = self.check(params)
        return rng.lognormal(mu, sigma, size)

    def widen(self, params, factor):
        p = self.check(params).copy()
        p[0] += math.log(factor)
        return p

    def fit(self, data):
        v = self._positive_data(data, self.name)
        logs = np.log(v)
        sigma = logs.std()
        if v.size < 2 or sigma == 0.0:
            raise FitDegenerateError("lognormal fit needs at least 2 distinct values")
        return np.array([logs.mean(), sigma])


class Gamma(Family):
    name = "gamma"
    param_names = ("shape", "scale")
    _scale_index = 1

    def check(self, params):
        p = super().check(params)
        if p[0] <= 0 or p[1] <= 0:
            raise ParameterDomainError(f"gamma shape and scale must be > 0, got {p}")
        return p

    def logpdf(self, x, params):
        shape, scale = self.check(params)
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = ((shape - 1.0) * np.log(x) - x / scale
                   - special.gammaln(shape) - shape * math.log(scale))
        return np.where(x > 0, out, -np.inf)

    def cdf(self, x, params):
        shape, scale = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return special.gammainc(shape, x / scale)

    def sf(self, x, params):
        shape, scale = self.check(params)
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return special.gammaincc(shape, x / scale)

    def ppf(self, u, params):
        shape, scale = self.check(params)
        return scale * special.gammaincinv(shape, np.asarray(u, dtype=float))

    def sample(self, params, rng, size=None):
        shape, scale = self.check(params)
        return rng.gamma(shape, scale, size)

    def fit(self, data):
        v = self._positive_data(data, self.name)
        if v.size < 2 or np.ptp(v) == 0.0:
            raise FitDegenerateError("gamma fit needs at least 2 distinct values")
        mean = v.mean()
        # log(mean) - mean(log) > 0 by Jensen; the shape solves log k - digamma(k) = r
        r = math.log(mean) - np.log(v).mean()
        if r <= 0.0:
            raise FitDegenerateError("gamma fit: data too concentrated")

        def gd(u):
            k = math.exp(u)
            return r - (u - special.digamma(k)), k * special.polygamma(1, k) - 1.0

        k0 = mean ** 2 / v.var()
        shape = math.exp(_solve_increasing(gd, math.log(k0)))
        return np.array([shape, mean / shape])


EXPONENTIAL = Exponential()
WEIBULL = Weibull()
LOGNORMAL = Lognormal()
GAMMA = Gamma()

FAMILIES = {f.name: f for f in (EXPONENTIAL, WEIBULL, LOGNORMAL, GAMMA)}
_ALIASES = {"exp": EXPONENTIAL, "logn": LOGNORMAL, "lnorm": LOGNORMAL}


def family(name):
    """Look up a family by (case-insensitive) name."""
    key = str(name).strip().lower()
    if key in FAMILIES:
        return FAMILIES[key]
    if key in _ALIASES:
        return _ALIASES[key]
    raise KeyError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}")


def eval_pdf(fam, p, x):
    return fam.pdf(x, _values(p))


def eval_cdf(fam, p, x):
    return fam.cdf(x, _values(p))


def eval_quantile(fam, p, u):
    u_arr = np.asarray(u, dtype=float)
    if np.any(~((u_arr > 0) & (u_arr < 1))):
        raise DomainError(f"quantile level must lie in (0, 1), got {u}")
    return fam.ppf(u_arr, _values(p))


def draw_sample(fam, p, rng, size=None):
    return fam.sample(_values(p), rng, size)


def fit_univariate(fam, data):
    vals = fam.fit(data)
    return ParamSet(fam.param_names, vals)


def _values(p):
    return p.as_array() if isinstance(p, ParamSet) else np.asarray(p, dtype=float)


# -- joint structures ---------------------------------------------------------


class Structure:
    """Joint law of (X, T) or (X, T, Y) up to its parameter values."""

    arity = 2
    param_names: tuple = ()

    @property
    def n_params(self):
        return len(self.param_names)

    def params(self, values):
        p = ParamSet(self.param_names, values)
        self.check(p.as_array())
        return p

    def check(self, params):
        raise NotImplementedError

    def logpdf(self, params, *coords):
        raise NotImplementedError

    def sample(self, params, rng, size=None):
        raise NotImplementedError

    def fit(self, *columns, **extra):
        raise NotImplementedError

    def widen(self, params, factor):
        raise NotImplementedError


class IndependentPair(Structure):
    """Independent sales lag X and lifetime T."""

    arity = 2

    def __init__(self, fam_x, fam_t):
        self.fam_x = family(fam_x) if isinstance(fam_x, str) else fam_x
        self.fam_t = family(fam_t) if isinstance(fam_t, str) else fam_t
        self.param_names = (tuple(f"x_{n}" for n in self.fam_x.param_names)
                            + tuple(f"t_{n}" for n in self.fam_t.param_names))
        self._nx = self.fam_x.n_params

    def __repr__(self):
        return f"IndependentPair({self.fam_x.name}, {self.fam_t.name})"

    def __eq__(self, other):
        return (isinstance(other, IndependentPair)
                and (self.fam_x, self.fam_t) == (other.fam_x, other.fam_t))

    def __hash__(self):
        return hash((type(self), self.fam_x, self.fam_t))

    def split(self, params):
        p = np.asarray(params, dtype=float)
        return p[: self._nx], p[self._nx:]

    def check(self, params):
        p = np.asarray(params, dtype=float)
        if p.shape != (self.n_params,):
            raise ParameterDomainError(f"{self!r} takes {self.n_params} parameters")
        px, pt = self.split(p)
        self.fam_x.check(px)
        self.fam_t.check(pt)
        return p

    def marginal(self, which):
        return {"x": self.fam_x, "t": self.fam_t}[which]

    def marginal_params(self, params, which):
        px, pt = self.split(params)
        return {"x": px, "t": pt}[which]

    def logpdf(self, params, x, t):
        px, pt = self.split(self.check(params))
        return self.fam_x.logpdf(x, px) + self.fam_t.logpdf(t, pt)

    def sample(self, params, rng, size=None):
        px, pt = self.split(self.check(params))
        return self.fam_x.sample(px, rng, size), self.fam_t.sample(pt, rng, size)

    def fit(self, x, t):
        return np.concatenate([self.fam_x.fit(x), self.fam_t.fit(t)])

    def widen(self, params, factor):
        px, pt = self.split(self.check(params))
        return np.concatenate([self.fam_x.widen(px, factor), self.fam_t.widen(pt, factor)])


class BivariateLognormal(Structure):
    """(ln X, ln T) ~ N(mu, Sigma); Sigma stored as (s11, s22, s12)."""

    arity = 2
    param_names = ("mu1", "mu2", "sigma11", "sigma22", "sigma12")

    def __repr__(self):
        return "BivariateLognormal()"

    def __eq__(self, other):
        return isinstance(other, BivariateLognormal)

    def __hash__(self):
        return hash(type(self))

    def check(self, params):
        p = np.asarray(params, dtype=float)
        if p.shape != (5,) or not np.all(np.isfinite(p)):
            raise ParameterDomainError(f"bivariate lognormal takes 5 finite parameters, got {p}")
        _, _, s11, s22, s12 = p
        if s11 <= 0 or s22 <= 0 or s11 * s22 - s12 * s12 <= 0:
            raise ParameterDomainError(f"covariance not positive definite: {p[2:]}")
        return p

    def marginal(self, which):
        return LOGNORMAL

    def marginal_params(self, params, which):
        mu1, mu2, s11, s22, _ = params
        return np.array([mu1, math.sqrt(s11)]) if which == "x" else np.array([mu2, math.sqrt(s22)])

    def logpdf(self, params, x, t):
        mu1, mu2, s11, s22, s12 = self.check(params)
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        det = s11 * s22 - s12 * s12
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(x)
            lt = np.log(t)
            z1 = lx - mu1
            z2 = lt - mu2
            quad = (s22 * z1 * z1 - 2.0 * s12 * z1 * z2 + s11 * z2 * z2) / det
            out = -LOG_2PI - 0.5 * math.log(det) - 0.5 * quad - lx - lt
        return np.where((x > 0) & (t > 0), out, -np.inf)

    def sample(self, params, rng, size=None):
        mu1, mu2, s11, s22, s12 = self.check(params)
        l11 = math.sqrt(s11)
        l21 = s12 / l11
        l22 = math.sqrt(s22 - l21 * l21)
        z1 = rng.standard_normal(size)
        z2 = rng.standard_normal(size)
        return np.exp(mu1 + l11 * z1), np.exp(mu2 + l21 * z1 + l22 * z2)

    def fit(self, x, t):
        lx = np.log(np.asarray(x, dtype=float))
        lt = np.log(np.asarray(t, dtype=float))
        if lx.size < 2:
            raise FitDegenerateError("bivariate lognormal fit needs at least 2 points")
        m1, m2 = lx.mean(), lt.mean()
        d1, d2 = lx - m1, lt - m2
        s11 = float(d1 @ d1) / lx.size
        s22 = float(d2 @ d2) / lx.size
        s12 = float(d1 @ d2) / lx.size
        if s11 <= 0 or s22 <= 0 or s11 * s22 - s12 * s12 <= 0:
            raise FitDegenerateError("log-scale sample covariance is singular")
        return np.array([m1, m2, s11, s22, s12])

    def widen(self, params, factor):
        p = self.check(params).copy()
        p[:2] += math.log(factor)
        return p


class IndependentTriple(Structure):
    """Independent sales lag X, lifetime T and report delay Y.

    Parameters are ordered X, T, Y.
    """

    arity = 3

    def __init__(self, fam_x, fam_t, fam_y):
        fams = [family(f) if isinstance(f, str) else f for f in (fam_x, fam_t, fam_y)]
        self.fam_x, self.fam_t, self.fam_y = fams
        names = []
        for tag, fam in zip("xty", fams):
            names.extend(f"{tag}_{n}" for n in fam.param_names)
        self.param_names = tuple(names)
        cuts = np.cumsum([f.n_params for f in fams])
        self._cuts = (int(cuts[0]), int(cuts[1]))

    def __repr__(self):
        return f"IndependentTriple({self.fam_x.name}, {self.fam_t.name}, {self.fam_y.name})"

    def __eq__(self, other):
        return (isinstance(other, IndependentTriple)
                and (self.fam_x, self.fam_t, self.fam_y)
                == (other.fam_x, other.fam_t, other.fam_y))

    def __hash__(self):
        return hash((type(self), self.fam_x, self.fam_t, self.fam_y))

    def split(self, params):
        p = np.asarray(params, dtype=float)
        a, b = self._cuts
        return p[:a], p[a:b], p[b:]

    def check(self, params):
        p = np.asarray(params, dtype=float)
        if p.shape != (self.n_params,):
            raise ParameterDomainError(f"{self!r} takes {self.n_params} parameters")
        for fam, part in zip((self.fam_x, self.fam_t, self.fam_y), self.split(p)):
            fam.check(part)
        return p

    def marginal(self, which):
        return {"x": self.fam_x, "t": self.fam_t, "y": self.fam_y}[which]

    def marginal_params(self, params, which):
        px, pt, py = self.split(params)
        return {"x": px, "t": pt, "y": py}[which]

    def logpdf(self, params, x, t, y):
        px, pt, py = self.split(self.check(params))
        return self.fam_x.logpdf(x, px) + self.fam_t.logpdf(t, pt) + self.fam_y.logpdf(y, py)

    def sample(self, params, rng, size=None):
        px, pt, py = self.split(self.check(params))
        return (self.fam_x.sample(px, rng, size), self.fam_t.sample(pt, rng, size),
                self.fam_y.sample(py, rng, size))

    def fit(self, x, t, y):
        return np.concatenate([self.fam_x.fit(x), self.fam_t.fit(t), self.fam_y.fit(y)])

    def widen(self, params, factor):
        px, pt, py = self.split(self.check(params))
        return np.concatenate([self.fam_x.widen(px, factor), self.fam_t.widen(pt, factor),
                               self.fam_y.widen(py, factor)])


@dataclass(frozen=True)
class JointModel:
    """A structure bound to a validated parameter set."""

    structure: Structure
    params: ParamSet

    def __post_init__(self):
        if tuple(self.params.names) != self.structure.param_names:
            raise ParameterDomainError(
                f"parameter names {self.params.names} do not match {self.structure!r}")
        self.structure.check(self.params.as_array())

    @classmethod
    def build(cls, structure, values):
        return cls(structure, structure.params(values))

    @property
    def theta(self):
        return self.params.as_array()


def joint_logpdf(m, point):
    point = tuple(float(v) for v in point)
    if len(point) != m.structure.arity:
        raise DomainError(f"{m.structure!r} expects {m.structure.arity} coordinates")
    if any(v <= 0 for v in point):
        raise DomainError(f"coordinates must be positive, got {point}")
    return float(m.structure.logpdf(m.theta, *point))


def joint_sample(m, rng, size=None):
    return m.structure.sample(m.theta, rng, size)


def joint_fit(structure, completed: Sequence[Sequence[float]]):
    """Complete-data MLE from a list of points (x, t) or (x, t, y)."""
    arr = np.asarray(completed, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != structure.arity:
        raise FitDegenerateError(f"need a nonempty list of {structure.arity}-tuples")
    if not np.all(arr > 0):
        raise DomainError("completed data must be positive")
    return ParamSet(structure.param_names, structure.fit(*arr.T))


def make_structure(model_x=None, model_t=None, model_y=None, dependence="independent"):
    """Structure from configuration strings."""
    if dependence == "bivariate_lognormal":
        if model_y:
            raise ParameterDomainError("a bivariate lognormal model has no report delay")
        return BivariateLognormal()
    if dependence != "independent":
        raise ParameterDomainError(f"unknown dependence {dependence!r}")
    if model_y:
        return IndependentTriple(family(model_x), family(model_t), family(model_y))
    return IndependentPair(family(model_x), family(model_t))
