"""Field failure datasets: records, CSV ingestion, validation and run configs.

All times are decimal months.  Unreturned units carry their own censoring
time ``censor_c`` (end-of-study date minus shipment date), so a single batch
and staggered shipments share one representation.
"""

from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataParseError, DataValidationError, SchemaError

DAYS_PER_MONTH = 30.4375

CSV_FIELDS = ("kind", "x", "t", "a", "b", "censor_c", "target", "count")
KINDS = ("claim", "unreturned", "direct_censored", "sum_claim", "sum_unreturned", "aux")


class Scheme(str, Enum):
    PAIR = "pair_xt"
    PAIR_DIRECT = "pair_xt_direct"
    TRIPLE = "triple_xyt"


SALES_LAG = "sales_lag"
REPORT_DELAY = "report_delay"


@dataclass(frozen=True)
class Claim:
    """Returned unit with observed lifetime.

    ``x`` is None for a unit sold directly by the manufacturer (no sales
    lag).  ``censor_c`` is optional and only used for validation.
    """

    x: float | None
    t: float
    censor_c: float | None = None


@dataclass(frozen=True)
class Unreturned:
    censor_c: float


@dataclass(frozen=True)
class DirectCensored:
    """Directly sold unit still working at age ``tc``."""

    tc: float


@dataclass(frozen=True)
class SumClaim:
    """Return whose total time x + t + y fell in ``[a, b)``."""

    a: float
    b: float


@dataclass(frozen=True)
class SumUnreturned:
    censor_c: float


@dataclass(frozen=True)
class AuxiliarySample:
    """Interval-censored extra observation of the sales lag or report delay."""

    target: str
    a: float
    b: float


_PAIR_KINDS = (Claim, Unreturned)
_DIRECT_KINDS = (Claim, Unreturned, DirectCensored)
_TRIPLE_KINDS = (SumClaim, SumUnreturned)


@dataclass(frozen=True)
class FieldDataset:
    tau: float
    records: tuple
    aux: tuple = ()
    scheme: Scheme = Scheme.PAIR

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "aux", tuple(self.aux))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n_units(self):
        return len(self.records)

    @property
    def n_claims(self):
        return sum(isinstance(r, (Claim, SumClaim)) for r in self.records)

    @property
    def n_missing(self):
        return self.n_units - self.n_claims

    @cached_property
    def arrays(self):
        """Column arrays grouped by record kind (read-only views)."""
        cols = {k: [] for k in ("claim_x", "claim_t", "direct_t", "unret_c", "direct_tc",
                                "sum_a", "sum_b", "sumunret_c")}
        for r in self.records:
            if isinstance(r, Claim):
                if r.x is None:
                    cols["direct_t"].append(r.t)
                else:
                    cols["claim_x"].append(r.x)
                    cols["claim_t"].append(r.t)
            elif isinstance(r, Unreturned):
                cols["unret_c"].append(r.censor_c)
            elif isinstance(r, DirectCensored):
                cols["direct_tc"].append(r.tc)
            elif isinstance(r, SumClaim):
                cols["sum_a"].append(r.a)
                cols["sum_b"].append(r.b)
            elif isinstance(r, SumUnreturned):
                cols["sumunret_c"].append(r.censor_c)
        for target, tag in ((SALES_LAG, "aux_x"), (REPORT_DELAY, "aux_y")):
            picked = [s for s in self.aux if s.target == target]
            cols[f"{tag}_a"] = [s.a for s in picked]
            cols[f"{tag}_b"] = [s.b for s in picked]
        out = {}
        for k, v in cols.items():
            arr = np.asarray(v, dtype=float)
            arr.setflags(write=False)
            out[k] = arr
        return out


@dataclass(frozen=True)
class DatasetSummary:
    n_units: int
    n_claims: int
    missing_rate: float
    tau: float
    censor_min: float | None
    censor_max: float | None
    scheme: Scheme

    def lines(self):
        rng = ("n/a" if self.censor_min is None
               else f"{_fmt(self.censor_min)}..{_fmt(self.censor_max)}")
        return [
            f"scheme: {self.scheme.value}",
            f"N: {self.n_units}",
            f"C: {self.n_claims}",
            f"missing rate: {self.missing_rate:.6f}",
            f"tau: {_fmt(self.tau)}",
            f"censor times: {rng}",
        ]


def dataset_summary(d: FieldDataset) -> DatasetSummary:
    cens = [r.censor_c for r in d.records if isinstance(r, (Unreturned, SumUnreturned))]
    cens += [r.tc for r in d.records if isinstance(r, DirectCensored)]
    n = d.n_units
    return DatasetSummary(
        n_units=n,
        n_claims=d.n_claims,
        missing_rate=(n - d.n_claims) / n if n else 0.0,
        tau=d.tau,
        censor_min=min(cens) if cens else None,
        censor_max=max(cens) if cens else None,
        scheme=d.scheme,
    )


def validate_dataset(d: FieldDataset) -> list:
    """Return human-readable constraint violations (empty when valid)."""
    out = []
    allowed = {Scheme.PAIR: _PAIR_KINDS, Scheme.PAIR_DIRECT: _DIRECT_KINDS,
               Scheme.TRIPLE: _TRIPLE_KINDS}[d.scheme]
    tau = d.tau
    if not tau >= 0:
        out.append(f"warranty limit must be >= 0, got {tau}")
    if d.scheme is Scheme.TRIPLE and math.isfinite(tau):
        out.append("triple_xyt scheme requires tau = inf")
    for i, r in enumerate(d.records):
        where = f"record {i}"
        if not isinstance(r, allowed):
            out.append(f"{where}: {type(r).__name__} not allowed in scheme {d.scheme.value}")
            continue
        if isinstance(r, Claim):
            if r.x is None and d.scheme is not Scheme.PAIR_DIRECT:
                out.append(f"{where}: claim without sales lag outside pair_xt_direct")
            if r.x is not None and not r.x > 0:
                out.append(f"{where}: nonpositive sales lag")
            if not r.t > 0:
                out.append(f"{where}: nonpositive lifetime")
            if not r.t < tau:
                out.append(f"{where}: lifetime exceeds warranty")
            if r.censor_c is not None and r.x is not None and not r.x + r.t < r.censor_c:
                out.append(f"{where}: claim after end of study")
        elif isinstance(r, (Unreturned, SumUnreturned)):
            if not r.censor_c > 0:
                out.append(f"{where}: nonpositive censor time")
        elif isinstance(r, DirectCensored):
            if not r.tc >= 0:
                out.append(f"{where}: negative censor time")
        elif isinstance(r, SumClaim):
            if not r.a >= 0:
                out.append(f"{where}: negative interval start")
            if not r.a < r.b:
                out.append(f"{where}: empty interval")
    for i, s in enumerate(d.aux):
        where = f"aux {i}"
        if s.target not in (SALES_LAG, REPORT_DELAY):
            out.append(f"{where}: unknown target {s.target!r}")
        if s.target == REPORT_DELAY and d.scheme is not Scheme.TRIPLE:
            out.append(f"{where}: report-delay samples need scheme triple_xyt")
        if not s.a >= 0:
            out.append(f"{where}: negative interval start")
        if not s.a < s.b:
            out.append(f"{where}: empty interval")
    if d.n_claims == 0:
        out.append("no observed claims")
    return out


def check_dataset(d: FieldDataset) -> FieldDataset:
    violations = validate_dataset(d)
    if violations:
        raise DataValidationError(violations)
    return d


# -- CSV ----------------------------------------------------------------------


def _num(row, key, line, required=True):
    raw = (row.get(key) or "").strip()
    if raw == "":
        if required:
            raise DataParseError(f"missing value for {key!r}", line)
        return None
    try:
        return float(raw)
    except ValueError:
        raise DataParseError(f"bad number {raw!r} in column {key!r}", line) from None


def _fmt(v):
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def infer_scheme(records, aux=()):
    kinds = {type(r) for r in records}
    if kinds & {SumClaim, SumUnreturned}:
        if kinds - {SumClaim, SumUnreturned}:
            raise SchemaError("sum_* records cannot be mixed with pair records")
        return Scheme.TRIPLE
    if DirectCensored in kinds or any(isinstance(r, Claim) and r.x is None for r in records):
        return Scheme.PAIR_DIRECT
    return Scheme.PAIR


def read_records(path):
    """Parse a dataset CSV into (records, aux) without validation."""
    path = Path(path)
    records, aux = [], []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataParseError("empty file", 1)
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        unknown = set(header) - set(CSV_FIELDS)
        if unknown or "kind" not in header:
            raise DataParseError(f"bad header {header}; expected columns from {CSV_FIELDS}", 1)
        for row in reader:
            line = reader.line_num
            if None in row:
                raise DataParseError("too many fields", line)
            kind = (row.get("kind") or "").strip().lower()
            if kind == "" and all(not (v or "").strip() for v in row.values()):
                continue
            count_raw = _num(row, "count", line, required=False)
            count = 1 if count_raw is None else int(count_raw)
            if count_raw is not None and (count != count_raw or count < 1):
                raise DataParseError(f"count must be a positive integer, got {count_raw}", line)
            if kind == "claim":
                rec = Claim(_num(row, "x", line, required=False), _num(row, "t", line),
                            _num(row, "censor_c", line, required=False))
            elif kind == "unreturned":
                rec = Unreturned(_num(row, "censor_c", line))
            elif kind == "direct_censored":
                rec = DirectCensored(_num(row, "censor_c", line))
            elif kind == "sum_claim":
                rec = SumClaim(_num(row, "a", line), _num(row, "b", line))
            elif kind == "sum_unreturned":
                rec = SumUnreturned(_num(row, "censor_c", line))
            elif kind == "aux":
                target = (row.get("target") or "").strip().lower()
                if target not in (SALES_LAG, REPORT_DELAY):
                    raise DataParseError(
                        f"aux target must be {SALES_LAG!r} or {REPORT_DELAY!r}", line)
                aux.extend([AuxiliarySample(target, _num(row, "a", line),
                                            _num(row, "b", line))] * count)
                continue
            else:
                raise DataParseError(f"unknown kind {kind!r}; expected one of {KINDS}", line)
            records.extend([rec] * count)
    return records, aux


def load_dataset(path, config=None) -> FieldDataset:
    """Read and validate a dataset CSV.

    ``config`` supplies ``tau`` (required) and optionally ``scheme``; it may
    be a :class:`RunConfig` or any mapping.
    """
    cfg = _as_mapping(config)
    if "tau" not in cfg or cfg["tau"] in (None, ""):
        raise ConfigError("missing config key 'tau'")
    tau = parse_float(cfg["tau"], "tau")
    records, aux = read_records(path)
    inferred = infer_scheme(records, aux)
    scheme = cfg.get("scheme")
    scheme = Scheme(scheme) if scheme not in (None, "") else inferred
    if scheme is not inferred and not (scheme is Scheme.PAIR_DIRECT and inferred is Scheme.PAIR):
        raise SchemaError(f"records imply scheme {inferred.value}, config says {scheme.value}")
    return check_dataset(FieldDataset(tau=tau, records=records, aux=aux, scheme=scheme))


def _record_row(r):
    if isinstance(r, Claim):
        return {"kind": "claim", "x": _fmt(r.x), "t": _fmt(r.t), "censor_c": _fmt(r.censor_c)}
    if isinstance(r, Unreturned):
        return {"kind": "unreturned", "censor_c": _fmt(r.censor_c)}
    if isinstance(r, DirectCensored):
        return {"kind": "direct_censored", "censor_c": _fmt(r.tc)}
    if isinstance(r, SumClaim):
        return {"kind": "sum_claim", "a": _fmt(r.a), "b": _fmt(r.b)}
    if isinstance(r, SumUnreturned):
        return {"kind": "sum_unreturned", "censor_c": _fmt(r.censor_c)}
    if isinstance(r, AuxiliarySample):
        return {"kind": "aux", "a": _fmt(r.a), "b": _fmt(r.b), "target": r.target}
    raise TypeError(f"not a record: {r!r}")


def write_dataset(d: FieldDataset, path):
    """Write ``d`` as CSV; runs of identical records collapse into one counted row."""
    items = list(d.records) + list(d.aux)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, restval="", lineterminator="\n")
        w.writeheader()
        i = 0
        while i < len(items):
            j = i + 1
            while j < len(items) and items[j] == items[i]:
                j += 1
            row = _record_row(items[i])
            if j - i > 1:
                row["count"] = str(j - i)
            w.writerow(row)
            i = j


def months_between(start, end):
    """Month offset between two ISO dates (30.4375-day months)."""
    d0 = _dt.date.fromisoformat(str(start))
    d1 = _dt.date.fromisoformat(str(end))
    return (d1 - d0).days / DAYS_PER_MONTH


# -- run configuration --------------------------------------------------------


def parse_float(raw, key):
    s = str(raw).strip().lower()
    if s in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"config key {key!r}: not a number: {raw!r}") from None


def parse_int(raw, key):
    try:
        v = float(str(raw).strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: not an integer: {raw!r}") from None
    if v != int(v):
        raise ConfigError(f"config key {key!r}: not an integer: {raw!r}")
    return int(v)


def read_keyvalue(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with Path(path).open() as fh:
        for n, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"line {n}: empty key")
            if key in out:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            out[key] = value
    return out


RUN_KEYS = ("tau", "scheme", "model_x", "model_t", "model_y", "dependence", "seed",
            "burn_in", "iterations", "info_imputations", "threads", "max_reject_attempts")


@dataclass(frozen=True)
class RunConfig:
    tau: float
    model_x: str
    model_t: str
    seed: int
    scheme: Scheme | None = None
    model_y: str | None = None
    dependence: str = "independent"
    burn_in: int = 100
    iterations: int = 1000
    info_imputations: int = 100_000
    threads: int = 1
    max_reject_attempts: int = 1_000_000

    @classmethod
    def from_mapping(cls, raw):
        unknown = sorted(set(raw) - set(RUN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        dependence = str(raw.get("dependence", "independent")).strip().lower()
        if dependence not in ("independent", "bivariate_lognormal"):
            raise ConfigError(f"config key 'dependence': {dependence!r} is not "
                              "'independent' or 'bivariate_lognormal'")
        required = ["tau", "seed"]
        if dependence == "independent":
            required += ["model_x", "model_t"]
        for key in required:
            if str(raw.get(key, "")).strip() == "":
                raise ConfigError(f"missing config key {key!r}")
        scheme = raw.get("scheme")
        try:
            scheme = Scheme(scheme.strip().lower()) if scheme else None
        except ValueError:
            raise ConfigError(f"config key 'scheme': unknown scheme {scheme!r}") from None
        cfg = cls(
            tau=parse_float(raw["tau"], "tau"),
            model_x=str(raw.get("model_x", "lognormal")).strip().lower(),
            model_t=str(raw.get("model_t", "lognormal")).strip().lower(),
            seed=parse_int(raw["seed"], "seed"),
            scheme=scheme,
            model_y=(str(raw["model_y"]).strip().lower() if raw.get("model_y") else None),
            dependence=dependence,
            burn_in=parse_int(raw.get("burn_in", 100), "burn_in"),
            iterations=parse_int(raw.get("iterations", 1000), "iterations"),
            info_imputations=parse_int(raw.get("info_imputations", 100_000), "info_imputations"),
            threads=parse_int(raw.get("threads", 1), "threads"),
            max_reject_attempts=parse_int(raw.get("max_reject_attempts", 1_000_000),
                                          "max_reject_attempts"),
        )
        if cfg.burn_in < 0 or cfg.iterations < 1 or cfg.info_imputations < 1:
            raise ConfigError("need burn_in >= 0, iterations >= 1, info_imputations >= 1")
        if cfg.threads < 1 or cfg.max_reject_attempts < 1:
            raise ConfigError("need threads >= 1 and max_reject_attempts >= 1")
        if cfg.scheme is Scheme.TRIPLE and not cfg.model_y:
            raise ConfigError("missing config key 'model_y' (required by triple_xyt)")
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_mapping(read_keyvalue(path))

    def resolved_lines(self):
        return [
            f"tau = {_fmt(self.tau)}",
            f"scheme = {self.scheme.value if self.scheme else 'auto'}",
            f"model_x = {self.model_x}",
            f"model_t = {self.model_t}",
            f"model_y = {self.model_y or ''}",
            f"dependence = {self.dependence}",
            f"seed = {self.seed}",
            f"burn_in = {self.burn_in}",
            f"iterations = {self.iterations}",
            f"info_imputations = {self.info_imputations}",
            f"threads = {self.threads}",
            f"max_reject_attempts = {self.max_reject_attempts}",
        ]


def _as_mapping(config):
    if config is None:
        return {}
    if isinstance(config, RunConfig):
        return {"tau": config.tau, "scheme": config.scheme.value if config.scheme else None}
    return dict(config)
