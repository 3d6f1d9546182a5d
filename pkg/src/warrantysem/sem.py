"""Stochastic EM for field failure data with unknown sales dates.

Each cycle imputes every missing quantity from its conditional law given the
observed data and the current parameters (S-step), then refits the joint
model to the completed data by maximum likelihood (M-step).  The estimate
is the average of the parameter trace after burn-in.

Imputation uses plain acceptance-rejection: candidates are drawn from the
unconstrained model and kept only when they are consistent with what was
(not) observed.  Candidates are drawn in blocks for all pending records at
once, which is what makes a thousand cycles affordable in numpy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FieldDataset, Scheme
from .distributions import (BivariateLognormal, IndependentPair, IndependentTriple,
                            JointModel, ParamSet, Structure)
from .errors import DomainError, FitDegenerateError, ImputationStallError, SchemaError

DEFAULT_MAX_ATTEMPTS = 1_000_000
# cap on candidates held in memory per rejection round
_MAX_BLOCK_DRAWS = 1 << 20


@dataclass(frozen=True)
class SemConfig:
    burn_in: int = 100
    iterations: int = 1000
    seed: int = 0
    max_reject_attempts: int = DEFAULT_MAX_ATTEMPTS
    init: ParamSet | str = "auto"

    def __post_init__(self):
        if self.burn_in < 0 or self.iterations < 1 or self.max_reject_attempts < 1:
            raise ValueError("need burn_in >= 0, iterations >= 1, max_reject_attempts >= 1")


@dataclass(frozen=True)
class SumIn:
    a: float
    b: float


@dataclass(frozen=True)
class SumAtLeast:
    c: float


def cycle_rng(seed, cycle):
    """Generator for one SEM cycle; independent of every other cycle."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cycle,)))


# -- acceptance-rejection core ------------------------------------------------


def _block_rejection(propose, accept, n, max_attempts, describe):
    """Draw one accepted candidate per record.

    ``propose(idx, k)`` returns a tuple of arrays shaped ``(len(idx), k)`` and
    ``accept(idx, draws)`` a boolean array of the same shape.  Returns the
    accepted coordinates and the total number of rejected candidates.
    """
    out = None
    pending = np.arange(n)
    attempts = np.zeros(n, dtype=np.int64)
    k = min(2, max_attempts)
    while pending.size:
        draws = propose(pending, k)
        ok = accept(pending, draws)
        if out is None:
            out = [np.empty(n) for _ in draws]
        hit = ok.any(axis=1)
        first = ok.argmax(axis=1)
        attempts[pending] += np.where(hit, first + 1, k)
        rows = np.flatnonzero(hit)
        for dst, src in zip(out, draws):
            dst[pending[rows]] = src[rows, first[rows]]
        rate = ok.mean()
        pending = pending[~hit]
        if pending.size:
            worst = int(attempts[pending].max())
            if worst >= max_attempts:
                j = pending[np.argmax(attempts[pending])]
                raise ImputationStallError(
                    f"imputation stalled after {worst} rejected draws for {describe(j)}; "
                    "current parameters leave almost no probability outside the "
                    "observed region",
                    constraint=describe(j))
            want = math.ceil(2.0 / rate) if rate > 0 else 4 * k
            k = int(max(1, min(want, max_attempts - worst, _MAX_BLOCK_DRAWS // pending.size)))
    if out is None:
        return (), 0
    return tuple(out), int(attempts.sum() - n)


def impute_pairs(structure, theta, censor_c, tau, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """Vectorized version of :func:`impute_missing_pair` for many records."""
    c = np.asarray(censor_c, dtype=float)
    if c.size == 0:
        return np.empty(0), np.empty(0), 0

    def propose(idx, k):
        return structure.sample(theta, rng, (idx.size, k))

    def accept(idx, draws):
        x, t = draws
        return ~((x + t < c[idx, None]) & (t < tau))

    (x, t), rej = _block_rejection(propose, accept, c.size, max_attempts,
                                   lambda j: f"censor_c={c[j]:g}")
    return x, t, rej


def impute_missing_pair(m: JointModel, censor_c, tau, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """One (x, t) from the model conditioned on the unit not being returned."""
    if m.structure.arity != 2:
        raise SchemaError("impute_missing_pair needs a two-variable model")
    x, t, _ = impute_pairs(m.structure, m.theta, [censor_c], tau, rng, max_attempts)
    return float(x[0]), float(t[0])


def impute_censored_lifetimes(fam, params, tc, rng):
    """Lifetimes conditioned on exceeding ``tc`` by quantile inversion."""
    tc = np.asarray(tc, dtype=float)
    if tc.size == 0:
        return np.empty(0)
    if np.any(tc < 0):
        raise DomainError("censoring ages must be >= 0")
    surv = fam.sf(tc, params)
    if np.any(surv <= 0.0):
        bad = float(tc[np.argmin(surv)])
        raise ImputationStallError(
            f"lifetime survival at censoring age {bad:g} is numerically zero",
            constraint=f"Tc={bad:g}")
    u = rng.random(tc.shape)
    # u + (1-u) F(Tc) written through the survival function to keep precision
    level = 1.0 - (1.0 - u) * surv
    t = fam.ppf(level, params)
    return np.maximum(t, np.nextafter(tc, np.inf))


def impute_censored_lifetime(fam, p, tc, rng):
    params = p.as_array() if isinstance(p, ParamSet) else np.asarray(p, dtype=float)
    return float(impute_censored_lifetimes(fam, params, [tc], rng)[0])


def impute_intervals(fam, params, a, b, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """Values of ``fam`` conditioned on falling in ``[a, b)``, by rejection."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return np.empty(0), 0
    if np.any(~(a < b)):
        raise DomainError("intervals must satisfy a < b")

    def propose(idx, k):
        return (fam.sample(params, rng, (idx.size, k)),)

    def accept(idx, draws):
        (v,) = draws
        return (v >= a[idx, None]) & (v < b[idx, None])

    (v,), rej = _block_rejection(propose, accept, a.size, max_attempts,
                                 lambda j: f"interval=[{a[j]:g}, {b[j]:g})")
    return v, rej


def impute_interval(fam, p, interval, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    params = p.as_array() if isinstance(p, ParamSet) else np.asarray(p, dtype=float)
    v, _ = impute_intervals(fam, params, [interval[0]], [interval[1]], rng, max_attempts)
    return float(v[0])


def impute_triples(structure, theta, lower, upper, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    """Triples (x, t, y) with ``lower <= x + t + y < upper`` per record."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if lo.size == 0:
        return np.empty(0), np.empty(0), np.empty(0), 0

    def propose(idx, k):
        return structure.sample(theta, rng, (idx.size, k))

    def accept(idx, draws):
        x, t, y = draws
        s = x + t + y
        return (s >= lo[idx, None]) & (s < hi[idx, None])

    (x, t, y), rej = _block_rejection(propose, accept, lo.size, max_attempts,
                                      lambda j: f"sum in [{lo[j]:g}, {hi[j]:g})")
    return x, t, y, rej


def impute_triple(m: JointModel, constraint, rng, max_attempts=DEFAULT_MAX_ATTEMPTS):
    if not isinstance(m.structure, IndependentTriple):
        raise SchemaError("impute_triple needs an IndependentTriple model")
    if isinstance(constraint, SumIn):
        lo, hi = constraint.a, constraint.b
    elif isinstance(constraint, SumAtLeast):
        lo, hi = constraint.c, math.inf
    else:
        raise TypeError(f"unknown constraint {constraint!r}")
    x, t, y, _ = impute_triples(m.structure, m.theta, [lo], [hi], rng, max_attempts)
    return float(x[0]), float(t[0]), float(y[0])


# -- completed data, S-step, M-step -------------------------------------------


@dataclass
class Completed:
    """Observed plus imputed data.

    ``x``, ``t`` (and ``y`` for the triple scheme) are the joint records.
    ``t_extra`` holds lifetimes of directly sold units (observed or imputed),
    ``aux_x``/``aux_y`` the imputed auxiliary sales lags and report delays.
    Arrays may carry leading batch axes; the record axis is always last.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray | None = None
    t_extra: np.ndarray = field(default_factory=lambda: np.empty(0))
    aux_x: np.ndarray = field(default_factory=lambda: np.empty(0))
    aux_y: np.ndarray = field(default_factory=lambda: np.empty(0))
    rejections: int = 0

    @property
    def n_records(self):
        n = self.x.shape[-1] + self.t_extra.shape[-1]
        return n

    def is_complete(self):
        cols = [self.x, self.t, self.t_extra, self.aux_x, self.aux_y]
        if self.y is not None:
            cols.append(self.y)
        return all(np.all(np.isfinite(c)) and np.all(c > 0) for c in cols)

    def points(self):
        cols = (self.x, self.t) if self.y is None else (self.x, self.t, self.y)
        return np.stack(cols, axis=-1)


def check_compatible(d: FieldDataset, structure: Structure):
    """Raise :class:`SchemaError` unless ``structure`` can model ``d``."""
    if d.scheme is Scheme.TRIPLE:
        if not isinstance(structure, IndependentTriple):
            raise SchemaError("triple_xyt data needs an independent (X, T, Y) model")
        return
    if isinstance(structure, IndependentTriple):
        raise SchemaError("an (X, T, Y) model needs triple_xyt data")
    if isinstance(structure, BivariateLognormal):
        arr = d.arrays
        if arr["direct_t"].size or arr["direct_tc"].size:
            raise SchemaError("direct-sale records need independent X and T")
        if arr["aux_x_a"].size:
            raise SchemaError("auxiliary sales-lag samples need independent X and T")


def s_step(d: FieldDataset, m: JointModel, rng, max_attempts=DEFAULT_MAX_ATTEMPTS,
           copies=None):
    """Impute every missing record of ``d`` under ``m``.

    With ``copies=M`` the result holds ``M`` independent completions stacked
    along a leading axis (used by the information matrix).
    """
    structure, theta = m.structure, m.theta
    arr = d.arrays
    reps = 1 if copies is None else int(copies)

    def tile(v):
        return np.tile(v, reps)

    def shape(v, n):
        return v if copies is None else v.reshape(reps, n)

    def join(obs, imp, n_imp):
        if copies is None:
            return np.concatenate([obs, imp])
        return np.concatenate([np.broadcast_to(obs, (reps, obs.size)),
                               imp.reshape(reps, n_imp)], axis=1)

    rejections = 0
    if d.scheme is Scheme.TRIPLE:
        n_in, n_out = arr["sum_a"].size, arr["sumunret_c"].size
        lo = tile(np.concatenate([arr["sum_a"], arr["sumunret_c"]]))
        hi = tile(np.concatenate([arr["sum_b"], np.full(n_out, math.inf)]))
        x, t, y, rej = impute_triples(structure, theta, lo, hi, rng, max_attempts)
        rejections += rej
        n = n_in + n_out
        x, t, y = (shape(v, n) for v in (x, t, y))
        px, _, py = structure.split(theta)
        ax, rej_x = impute_intervals(structure.fam_x, px, tile(arr["aux_x_a"]),
                                     tile(arr["aux_x_b"]), rng, max_attempts)
        ay, rej_y = impute_intervals(structure.fam_y, py, tile(arr["aux_y_a"]),
                                     tile(arr["aux_y_b"]), rng, max_attempts)
        rejections += rej_x + rej_y
        return Completed(x=x, t=t, y=y,
                         aux_x=shape(ax, arr["aux_x_a"].size),
                         aux_y=shape(ay, arr["aux_y_a"].size),
                         rejections=rejections)

    n_unret = arr["unret_c"].size
    xi, ti, rej = impute_pairs(structure, theta, tile(arr["unret_c"]), d.tau, rng, max_attempts)
    rejections += rej
    x = join(arr["claim_x"], xi, n_unret)
    t = join(arr["claim_t"], ti, n_unret)
    t_extra = np.empty(0) if copies is None else np.empty((reps, 0))
    aux_x = t_extra
    if arr["direct_t"].size or arr["direct_tc"].size:
        fam_t = structure.marginal("t")
        pt = structure.marginal_params(theta, "t")
        tc = impute_censored_lifetimes(fam_t, pt, tile(arr["direct_tc"]), rng)
        t_extra = join(arr["direct_t"], tc, arr["direct_tc"].size)
    if arr["aux_x_a"].size:
        fam_x = structure.marginal("x")
        px = structure.marginal_params(theta, "x")
        ax, rej_x = impute_intervals(fam_x, px, tile(arr["aux_x_a"]), tile(arr["aux_x_b"]),
                                     rng, max_attempts)
        rejections += rej_x
        aux_x = shape(ax, arr["aux_x_a"].size)
    return Completed(x=x, t=t, t_extra=t_extra, aux_x=aux_x, rejections=rejections)


def pseudo_q_terms(theta, completed: Completed, structure: Structure):
    """Per-record log-density terms whose sum over the last axis is the pseudo Q."""
    theta = theta.as_array() if isinstance(theta, ParamSet) else np.asarray(theta, dtype=float)
    c = completed
    if c.y is None:
        parts = [structure.logpdf(theta, c.x, c.t)]
    else:
        parts = [structure.logpdf(theta, c.x, c.t, c.y)]
    for values, which in ((c.t_extra, "t"), (c.aux_x, "x"), (c.aux_y, "y")):
        if values.shape[-1]:
            parts.append(structure.marginal(which).logpdf(
                values, structure.marginal_params(theta, which)))
    if len(parts) == 1:
        return parts[0]
    lead = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
    return np.concatenate([np.broadcast_to(p, lead + p.shape[-1:]) for p in parts], axis=-1)


def pseudo_q(theta, completed: Completed, structure: Structure):
    """Complete-data log-likelihood; sums over the record axis only."""
    return pseudo_q_terms(theta, completed, structure).sum(axis=-1)


def _m_step_values(c: Completed, structure: Structure):
    if isinstance(structure, BivariateLognormal):
        return structure.fit(c.x, c.t)
    if isinstance(structure, IndependentTriple):
        return np.concatenate([
            structure.fam_x.fit(np.concatenate([c.x, c.aux_x])),
            structure.fam_t.fit(c.t),
            structure.fam_y.fit(np.concatenate([c.y, c.aux_y])),
        ])
    return np.concatenate([
        structure.fam_x.fit(np.concatenate([c.x, c.aux_x])),
        structure.fam_t.fit(np.concatenate([c.t, c.t_extra])),
    ])


def m_step(completed: Completed, structure: Structure) -> ParamSet:
    return ParamSet(structure.param_names, _m_step_values(completed, structure))


def _midpoints(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid = np.where(np.isfinite(b), 0.5 * (a + b), a + 1.0)
    return np.maximum(mid, 1e-3)


def initial_params(d: FieldDataset, structure: Structure, factor=2.0) -> ParamSet:
    """Starting point: fit the observed records as if complete, then widen.

    Multiplying scale-type parameters by ``factor`` lengthens the imputed
    times, which keeps the early rejection rate low.
    """
    arr = d.arrays
    if d.scheme is Scheme.TRIPLE:
        sums = _midpoints(arr["sum_a"], arr["sum_b"])
        xs = _midpoints(arr["aux_x_a"], arr["aux_x_b"]) if arr["aux_x_a"].size else sums / 3
        ys = _midpoints(arr["aux_y_a"], arr["aux_y_b"]) if arr["aux_y_a"].size else sums / 3
        vals = structure.fit(xs, sums, ys)
        # X and Y start at their auxiliary-sample fits; only T is widened
        px, pt, py = structure.split(vals)
        return structure.params(np.concatenate([px, structure.fam_t.widen(pt, factor), py]))
    elif isinstance(structure, BivariateLognormal):
        vals = structure.fit(arr["claim_x"], arr["claim_t"])
    else:
        xs = arr["claim_x"]
        if arr["aux_x_a"].size:
            xs = np.concatenate([xs, _midpoints(arr["aux_x_a"], arr["aux_x_b"])])
        ts = np.concatenate([arr["claim_t"], arr["direct_t"]])
        vals = structure.fit(xs, ts)
    return structure.params(structure.widen(vals, factor))


# -- the SEM loop -------------------------------------------------------------


@dataclass(frozen=True)
class SemTrace:
    """Parameter values for cycles 0..K (row 0 is the starting point)."""

    names: tuple
    thetas: np.ndarray
    rejections: np.ndarray
    burn_in: int

    @property
    def post_burn_in(self):
        return self.thetas[self.burn_in + 1:]

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", *self.names, "rejections"])
            for k, (row, rej) in enumerate(zip(self.thetas, self.rejections)):
                w.writerow([k, *(f"{v:.17g}" for v in row), int(rej)])


@dataclass(frozen=True)
class SemEstimate:
    estimate: ParamSet
    trace: SemTrace
    structure: Structure

    @property
    def model(self):
        return JointModel(self.structure, self.estimate)


def run_sem(d: FieldDataset, structure: Structure, cfg: SemConfig = SemConfig()) -> SemEstimate:
    """Run ``burn_in + iterations`` SEM cycles and average the post-burn-in trace.

    Raises
    ------
    ImputationStallError, FitDegenerateError
        With ``.cycle`` set to the failing cycle (0 for the starting point).
    """
    check_compatible(d, structure)
    if d.n_claims < 1:
        raise FitDegenerateError("no observed claims", cycle=0)
    if isinstance(cfg.init, ParamSet):
        theta = structure.params(cfg.init.values).as_array()
    else:
        try:
            theta = initial_params(d, structure).as_array()
        except FitDegenerateError as exc:
            exc.cycle = 0
            raise
    total = cfg.burn_in + cfg.iterations
    thetas = np.empty((total + 1, structure.n_params))
    rejections = np.zeros(total + 1, dtype=np.int64)
    thetas[0] = theta
    for k in range(1, total + 1):
        model = JointModel(structure, ParamSet(structure.param_names, theta))
        try:
            completed = s_step(d, model, cycle_rng(cfg.seed, k), cfg.max_reject_attempts)
            theta = _m_step_values(completed, structure)
            structure.check(theta)
        except (ImputationStallError, FitDegenerateError) as exc:
            exc.cycle = k
            exc.args = (f"cycle {k}: {exc.args[0]}",)
            raise
        thetas[k] = theta
        rejections[k] = completed.rejections
    trace = SemTrace(structure.param_names, thetas, rejections, cfg.burn_in)
    estimate = ParamSet(structure.param_names, trace.post_burn_in.mean(axis=0))
    return SemEstimate(estimate, trace, structure)
