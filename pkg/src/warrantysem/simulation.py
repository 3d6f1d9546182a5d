"""Monte Carlo studies of the SEM estimator on simulated warranty batches."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Claim, FieldDataset, Unreturned, parse_float, parse_int, read_keyvalue
from .distributions import JointModel, ParamSet, make_structure
from .errors import (ConfigError, FitDegenerateError, ImputationStallError, StudyError,
                     WarrantySemError)
from .sem import SemConfig, run_sem


def _substream_seed(seed, *key):
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0])


def generate_batch(truth: JointModel, N, tau, T0, seed) -> FieldDataset:
    """One batch of ``N`` units shipped together at time 0.

    A unit becomes a claim when ``x + t < T0`` and ``t < tau``; every other
    unit is unreturned with censoring time ``T0``.
    """
    rng = np.random.default_rng(seed)
    x, t = truth.structure.sample(truth.theta, rng, int(N))
    seen = (x + t < T0) & (t < tau)
    c = None if math.isinf(T0) else float(T0)
    records = [Claim(float(a), float(b), c) if s else Unreturned(float(T0))
               for a, b, s in zip(x, t, seen)]
    return FieldDataset(tau=tau, records=records)


@dataclass(frozen=True)
class SimScenario:
    truth: JointModel
    n_units: int
    tau: float
    T0: float
    replications: int
    sem: SemConfig = SemConfig()
    label: str = "scenario"
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 1 or self.replications < 1:
            raise ValueError("need N >= 1 and replications >= 1")


@dataclass(frozen=True)
class SimReport:
    label: str
    names: tuple
    truth: np.ndarray
    estimates: np.ndarray
    missing_rates: np.ndarray
    failures: int
    replications: int
    failure_messages: tuple = field(default=(), repr=False)
    # replication index of each row of ``estimates``
    indices: tuple = field(default=(), repr=False)

    @property
    def bias(self):
        return self.estimates.mean(axis=0) - self.truth

    @property
    def rmse(self):
        return np.sqrt(((self.estimates - self.truth) ** 2).mean(axis=0))

    @property
    def variance(self):
        return self.estimates.var(axis=0)

    @property
    def mean_missing_rate(self):
        return float(self.missing_rates.mean())

    def rows(self):
        for name, tv, b, r in zip(self.names, self.truth, self.bias, self.rmse):
            yield {"scenario": self.label, "param": name, "truth": f"{tv:.17g}",
                   "bias": f"{b:.17g}", "rmse": f"{r:.17g}", "failures": self.failures,
                   "replications": self.replications}

    def table(self):
        lines = [f"{self.label}: {self.replications - self.failures}/{self.replications} "
                 f"replications ok, mean missing rate {self.mean_missing_rate:.4f}",
                 f"{'param':>10} {'truth':>10} {'bias':>12} {'rmse':>10}"]
        for name, tv, b, r in zip(self.names, self.truth, self.bias, self.rmse):
            lines.append(f"{name:>10} {tv:>10.4g} {b:>12.4e} {r:>10.4f}")
        return lines


REPORT_FIELDS = ("scenario", "param", "truth", "bias", "rmse", "failures", "replications")


def write_reports(reports, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerows(rep.rows())


def replication_data(s: SimScenario, r) -> FieldDataset:
    """The batch that replication ``r`` of ``s`` fits."""
    return generate_batch(s.truth, s.n_units, s.tau, s.T0, _substream_seed(s.seed, r, 0))


def _one_replication(args):
    scenario, r = args
    data = replication_data(scenario, r)
    rate = data.n_missing / data.n_units
    cfg = replace(scenario.sem, seed=_substream_seed(scenario.seed, r, 1))
    try:
        est = run_sem(data, scenario.truth.structure, cfg)
    except (ImputationStallError, FitDegenerateError) as exc:
        return None, rate, f"replication {r}: {exc}"
    return est.estimate.as_array(), rate, None


def run_study(s: SimScenario, workers=1) -> SimReport:
    """Replicate generate-then-fit ``s.replications`` times.

    Replication ``r`` draws its data and its SEM randomness from substreams
    keyed by ``(seed, r)``, so results do not depend on ``workers``.
    """
    jobs = [(s, r) for r in range(s.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs, chunksize=4))
    else:
        results = [_one_replication(j) for j in jobs]
    ests = [e for e, _, _ in results if e is not None]
    indices = tuple(r for r, (e, _, _) in enumerate(results) if e is not None)
    msgs = tuple(m for _, _, m in results if m is not None)
    if not ests:
        raise StudyError(f"{s.label}: all {s.replications} replications failed; "
                         f"first failure: {msgs[0] if msgs else 'unknown'}")
    return SimReport(
        label=s.label,
        names=s.truth.structure.param_names,
        truth=s.truth.theta,
        estimates=np.array(ests),
        missing_rates=np.array([rate for _, rate, _ in results]),
        failures=len(msgs),
        replications=s.replications,
        failure_messages=msgs,
        indices=indices,
    )


@dataclass(frozen=True)
class BreakdownPoint:
    value: float
    missing_rate: float
    relative_bias: np.ndarray
    relative_rmse: np.ndarray
    failures: int
    report: SimReport | None = None
    error: str | None = None


def breakdown_sweep(base: SimScenario, values, param="t_scale", workers=1):
    """Vary one true parameter (by default the lifetime scale) and rerun the study.

    Relative bias and RMSE are divided by the true value at each grid point.
    A grid point whose study fails entirely is reported with ``error`` set.
    """
    names = base.truth.structure.param_names
    j = names.index(param)
    out = []
    for v in values:
        theta = base.truth.theta.copy()
        theta[j] = v
        truth = JointModel(base.truth.structure, ParamSet(names, theta))
        scenario = replace(base, truth=truth, label=f"{base.label}[{param}={v:g}]")
        try:
            rep = run_study(scenario, workers)
        except StudyError as exc:
            nan = np.full(len(names), np.nan)
            out.append(BreakdownPoint(float(v), math.nan, nan, nan, base.replications,
                                      None, str(exc)))
            continue
        out.append(BreakdownPoint(float(v), rep.mean_missing_rate, rep.bias / theta,
                                  rep.rmse / theta, rep.failures, rep))
    return out


SCENARIO_KEYS = ("label", "model_x", "model_t", "dependence", "truth", "N", "tau", "T0",
                 "replications", "seed", "burn_in", "iterations", "max_reject_attempts",
                 "threads")


def scenario_from_mapping(raw):
    """Build a scenario from key=value settings; returns (scenario, threads)."""
    unknown = sorted(set(raw) - set(SCENARIO_KEYS))
    if unknown:
        raise ConfigError(f"unknown scenario key(s): {', '.join(unknown)}")
    for key in ("truth", "N", "tau", "T0", "replications", "seed"):
        if str(raw.get(key, "")).strip() == "":
            raise ConfigError(f"missing scenario key {key!r}")
    dependence = str(raw.get("dependence", "independent")).strip().lower()
    try:
        structure = make_structure(raw.get("model_x"), raw.get("model_t"), None, dependence)
    except (KeyError, WarrantySemError) as exc:
        raise ConfigError(f"bad model specification: {exc}") from None
    try:
        values = [float(v) for v in str(raw["truth"]).split(",")]
        truth = JointModel.build(structure, values)
    except (ValueError, WarrantySemError) as exc:
        raise ConfigError(f"bad truth {raw['truth']!r} for {structure!r}: {exc}") from None
    sem = SemConfig(
        burn_in=parse_int(raw.get("burn_in", 100), "burn_in"),
        iterations=parse_int(raw.get("iterations", 1000), "iterations"),
        max_reject_attempts=parse_int(raw.get("max_reject_attempts", 1_000_000),
                                      "max_reject_attempts"),
    )
    scenario = SimScenario(
        truth=truth,
        n_units=parse_int(raw["N"], "N"),
        tau=parse_float(raw["tau"], "tau"),
        T0=parse_float(raw["T0"], "T0"),
        replications=parse_int(raw["replications"], "replications"),
        sem=sem,
        label=str(raw.get("label", "scenario")).strip(),
        seed=parse_int(raw["seed"], "seed"),
    )
    threads = parse_int(raw.get("threads", 1), "threads")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return scenario, threads


def load_scenario(path):
    return scenario_from_mapping(read_keyvalue(path))


def scenario_lines(s: SimScenario, threads=1):
    st = s.truth.structure
    model = ("dependence = bivariate_lognormal" if not hasattr(st, "fam_x")
             else f"model_x = {st.fam_x.name}\nmodel_t = {st.fam_t.name}\n"
                  "dependence = independent")
    return [f"label = {s.label}", *model.split("\n"),
            "truth = " + ",".join(f"{v:g}" for v in s.truth.theta),
            f"N = {s.n_units}", f"tau = {s.tau:g}", f"T0 = {s.T0:g}",
            f"replications = {s.replications}", f"seed = {s.seed}",
            f"burn_in = {s.sem.burn_in}", f"iterations = {s.sem.iterations}",
            f"max_reject_attempts = {s.sem.max_reject_attempts}", f"threads = {threads}"]
