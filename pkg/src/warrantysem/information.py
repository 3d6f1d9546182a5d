"""Observed information by the missing information principle.

The incomplete-data information is approximated by Monte Carlo over ``M``
completions of the data drawn at the estimate::

    I = mean(B) - mean(S S') + mean(S) mean(S)'

where ``S`` and ``B`` are the complete-data score and negative Hessian.
Derivatives are central finite differences on the natural parameter scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .distributions import JointModel, ParamSet
from .errors import DomainError, NotPositiveDefiniteError, ParameterDomainError
from .sem import DEFAULT_MAX_ATTEMPTS, pseudo_q_terms, s_step

REL_STEP = 1e-5
MAX_HALVINGS = 8
CHUNK = 500


def _as_theta(theta):
    return theta.as_array() if isinstance(theta, ParamSet) else np.asarray(theta, dtype=float)


def _valid(structure, theta):
    try:
        structure.check(theta)
    except ParameterDomainError:
        return False
    return True


def fd_steps(theta, structure):
    """Per-coordinate steps, halved until every stencil point stays in the domain."""
    theta = _as_theta(theta)
    p = theta.size
    h = REL_STEP * np.maximum(1.0, np.abs(theta))
    eye = np.eye(p)
    for j in range(p):
        for _ in range(MAX_HALVINGS + 1):
            pts = [theta + s * h[j] * eye[j] for s in (-2, -1, 1, 2)]
            if all(_valid(structure, q) for q in pts):
                break
            h[j] /= 2.0
        else:
            raise DomainError(
                f"finite-difference step for {structure.param_names[j]} still crosses the "
                f"parameter boundary after {MAX_HALVINGS} halvings")
    for j in range(p):
        for k in range(j + 1, p):
            for _ in range(MAX_HALVINGS + 1):
                corners = [theta + a * h[j] * eye[j] + b * h[k] * eye[k]
                           for a in (-1, 1) for b in (-1, 1)]
                if all(_valid(structure, q) for q in corners):
                    break
                h[j] /= 2.0
                h[k] /= 2.0
            else:
                raise DomainError("finite-difference stencil crosses the parameter boundary "
                                  f"after {MAX_HALVINGS} halvings")
    return h


def complete_score(theta, completed, structure, steps=None):
    """Gradient of the pseudo Q-function (batched over leading axes).

    Differences are taken record by record before summing, which avoids the
    cancellation of differencing two large totals.
    """
    theta = _as_theta(theta)
    h = fd_steps(theta, structure) if steps is None else steps
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h[j]
        diff = (pseudo_q_terms(theta + e, completed, structure)
                - pseudo_q_terms(theta - e, completed, structure))
        cols.append(diff.sum(axis=-1) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


def complete_neg_hessian(theta, completed, structure, steps=None):
    """Negative Hessian of the pseudo Q-function.

    Central differences of the central-difference score: the diagonal uses
    the stencil at +-2h, off-diagonal entries the four corners +-h_j +-h_k.
    Each off-diagonal entry is computed once, so the result is symmetric.
    """
    theta = _as_theta(theta)
    p = theta.size
    h = fd_steps(theta, structure) if steps is None else steps
    f0 = pseudo_q_terms(theta, completed, structure)
    out = np.empty(f0.shape[:-1] + (p, p))
    eye = np.eye(p)

    def f(*shift):
        return pseudo_q_terms(theta + sum(shift), completed, structure)

    for j in range(p):
        dj = h[j] * eye[j]
        second = (f(2 * dj) - 2.0 * f0 + f(-2 * dj)).sum(axis=-1)
        out[..., j, j] = -second / (4.0 * h[j] ** 2)
        for k in range(j + 1, p):
            dk = h[k] * eye[k]
            cross = (f(dj, dk) - f(dj, -dk) - f(-dj, dk) + f(-dj, -dk)).sum(axis=-1)
            val = -cross / (4.0 * h[j] * h[k])
            out[..., j, k] = val
            out[..., k, j] = val
    return out


@dataclass(frozen=True)
class InfoMatrix:
    matrix: np.ndarray
    imputations: int
    names: tuple
    positive_definite: bool

    def covariance(self):
        """Inverse via Cholesky; refuses matrices that are not positive definite."""
        try:
            chol = np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(
                "information matrix is not positive definite; increase the number of "
                "imputations M or collect more data") from None
        inv_l = np.linalg.inv(chol)
        return inv_l.T @ inv_l


def _is_pd(mat):
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return True


def louis_information(theta_hat, d, structure, M, rng, max_attempts=DEFAULT_MAX_ATTEMPTS,
                      chunk=CHUNK) -> InfoMatrix:
    """Monte Carlo missing-information approximation at ``theta_hat``.

    ``rng`` may be a seed or a Generator; completions are drawn in chunks of
    ``chunk`` datasets, each from its own substream, so results do not depend
    on how chunks are scheduled.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    theta = _as_theta(theta_hat)
    structure.check(theta)
    model = JointModel(structure, ParamSet(structure.param_names, theta))
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(2 ** 63))
    else:
        seed = int(rng)
    h = fd_steps(theta, structure)
    p = theta.size
    sums_b, sums_ss, sums_s = [], [], []
    done = 0
    for index in range(math.ceil(M / chunk)):
        m = min(chunk, M - done)
        sub = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
        completed = s_step(d, model, sub, max_attempts, copies=m)
        s = complete_score(theta, completed, structure, h).reshape(m, p)
        b = complete_neg_hessian(theta, completed, structure, h).reshape(m, p, p)
        sums_b.append(b.sum(axis=0))
        sums_ss.append(np.einsum("ij,ik->jk", s, s))
        sums_s.append(s.sum(axis=0))
        done += m
    mean_b = np.sum(sums_b, axis=0) / M
    mean_ss = np.sum(sums_ss, axis=0) / M
    mean_s = np.sum(sums_s, axis=0) / M
    info = mean_b - mean_ss + np.outer(mean_s, mean_s)
    info = 0.5 * (info + info.T)
    return InfoMatrix(info, int(M), structure.param_names, _is_pd(info))


@dataclass(frozen=True)
class CiRow:
    param: str
    estimate: float
    se: float
    lower: float
    upper: float
    level: float


@dataclass(frozen=True)
class CiTable:
    rows: tuple

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, name):
        for r in self.rows:
            if r.param == name:
                return r
        raise KeyError(name)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "estimate", "se", "lower", "upper", "level"])
            for r in self.rows:
                w.writerow([r.param] + [f"{v:.17g}" for v in
                                        (r.estimate, r.se, r.lower, r.upper)] + [f"{r.level:g}"])


def normal_quantile(level):
    """Two-sided critical value z with P(|Z| < z) = level."""
    if not 0.0 < level < 1.0:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    return float(special.ndtri(0.5 + 0.5 * level))


def wald_intervals(theta_hat, info: InfoMatrix, level=0.95) -> CiTable:
    theta = _as_theta(theta_hat)
    z = normal_quantile(level)
    cov = info.covariance()
    se = np.sqrt(np.diag(cov))
    rows = tuple(CiRow(name, float(est), float(s), float(est - z * s), float(est + z * s),
                       float(level))
                 for name, est, s in zip(info.names, theta, se))
    return CiTable(rows)
