"""Cox proportional-hazards fitting and concordance evaluation.

The partial log-likelihood uses Efron's correction for tied event times and
is maximized by damped Newton iteration. Covariates are standardized
internally for conditioning; reported coefficients are in raw units.

`build_results_table` joins per-patient biomarker values onto a covariate
table and fits, per (biomarker, method), a univariable model and two
adjusted models (age + gender + smoking + FVC or DLco).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DataError, NumericalError
from .util import format_float, item_rng

SURVIVAL_HEADER = ("patient_id", "time_days", "event", "age", "gender",
                   "smoker", "fvc", "dlco", "biomarker")
TABLE_HEADER = ("biomarker", "method", "model", "n_patients", "c_index", "p_value")
DETAIL_HEADER = ("biomarker", "method", "model", "covariate", "beta", "se",
                 "p_value", "is_biomarker")

MODEL_COVARIATES = {
    "univariable": ("biomarker",),
    "fvc": ("biomarker", "age", "gender", "smoker", "fvc"),
    "dlco": ("biomarker", "age", "gender", "smoker", "dlco"),
}

_DIVERGENCE_BOUND = 30.0  # |beta| in standardized units, checked per step
_SEPARATION_BOUND = 10.0  # |beta| in standardized units, checked at solution


@dataclass
class SurvivalRecord:
    patient_id: str
    time_days: float
    event: bool
    age: float
    gender: float
    smoker: float
    fvc: float | None = None
    dlco: float | None = None
    biomarker: float | None = None

    def validate(self) -> None:
        if not self.time_days > 0:
            raise DataError(f"patient {self.patient_id}: time_days must be > 0")
        for name in ("age", "gender", "smoker"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"patient {self.patient_id}: non-finite {name}")

    def covariate(self, name: str) -> float | None:
        if name not in SURVIVAL_HEADER[3:]:
            raise DataError(f"unknown covariate {name!r}")
        return getattr(self, name)


@dataclass
class CoxFit:
    covariate_names: tuple[str, ...]
    beta: np.ndarray
    standard_errors: np.ndarray
    p_values: np.ndarray
    concordance: float
    log_likelihood: float
    n_used: int
    n_dropped: int
    n_events: int
    iterations: int
    converged: bool

    def p_value(self, name: str) -> float:
        return float(self.p_values[self.covariate_names.index(name)])


def _design_matrix(records, covariate_names):
    rows, times, events, used = [], [], [], []
    dropped = 0
    for record in records:
        record.validate()
        values = [record.covariate(name) for name in covariate_names]
        if any(v is None for v in values):
            dropped += 1
            continue
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"patient {record.patient_id}: non-finite covariate")
        rows.append(values)
        times.append(record.time_days)
        events.append(bool(record.event))
        used.append(record)
    if len(rows) < 2:
        raise DataError(f"only {len(rows)} usable records after dropping "
                        f"{dropped} with missing covariates")
    x = np.asarray(rows, dtype=np.float64)
    return x, np.asarray(times), np.asarray(events, dtype=bool), dropped


def _efron_loglik(eta, times, events, x):
    """(loglik, gradient, information) at linear predictor eta = X beta."""
    n, p = x.shape
    order = np.argsort(times, kind="stable")
    t, e = times[order], events[order]
    xs, etas = x[order], eta[order]
    shift = float(etas.max())
    w = np.exp(etas - shift)
    xw = xs * w[:, None]
    xxw = xs[:, :, None] * xs[:, None, :] * w[:, None, None]
    suf_w = np.cumsum(w[::-1])[::-1]
    suf_xw = np.cumsum(xw[::-1], axis=0)[::-1]
    suf_xxw = np.cumsum(xxw[::-1], axis=0)[::-1]

    loglik = 0.0
    grad = np.zeros(p)
    info = np.zeros((p, p))
    start = 0
    while start < n:
        stop = start
        while stop < n and t[stop] == t[start]:
            stop += 1
        dead = np.nonzero(e[start:stop])[0] + start
        d = dead.size
        if d:
            s0, s1, s2 = suf_w[start], suf_xw[start], suf_xxw[start]
            d0 = w[dead].sum()
            d1 = xw[dead].sum(axis=0)
            d2 = xxw[dead].sum(axis=0)
            loglik += float(etas[dead].sum())
            for l in range(d):
                frac = l / d
                f0 = s0 - frac * d0
                f1 = s1 - frac * d1
                f2 = s2 - frac * d2
                loglik -= math.log(f0) + shift
                z = f1 / f0
                grad -= z
                info += f2 / f0 - np.outer(z, z)
            grad += xs[dead].sum(axis=0)
        start = stop
    return loglik, grad, info


def cox_fit(records, covariate_names, *, max_iterations: int = 100,
            tolerance: float = 1e-8, max_halvings: int = 20) -> CoxFit:
    covariate_names = tuple(covariate_names)
    x_raw, times, events, dropped = _design_matrix(records, covariate_names)
    n_events = int(events.sum())
    if n_events < 2:
        raise DataError(f"need >= 2 events, got {n_events}")
    scale = x_raw.std(axis=0)
    for j, s in enumerate(scale):
        if s == 0:
            raise DataError(
                f"covariate {covariate_names[j]!r} is constant across records")
    x = (x_raw - x_raw.mean(axis=0)) / scale

    beta = np.zeros(len(covariate_names))
    loglik, grad, info = _efron_loglik(x @ beta, times, events, x)
    iterations = 0
    converged = False
    while iterations < max_iterations:
        iterations += 1
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular information matrix for covariates {covariate_names}"
            ) from exc
        if not np.all(np.isfinite(step)):
            raise NumericalError(
                f"non-finite Newton step for covariates {covariate_names}")
        new_beta = beta + step
        new = _efron_loglik(x @ new_beta, times, events, x)
        # decreases at float rounding scale are not overshoot
        decrease_floor = loglik - 1e-9 * (1.0 + abs(loglik))
        halvings = 0
        while new[0] < decrease_floor and halvings < max_halvings:
            halvings += 1
            step = step / 2.0
            new_beta = beta + step
            new = _efron_loglik(x @ new_beta, times, events, x)
        beta = new_beta
        loglik, grad, info = new
        worst = int(np.argmax(np.abs(beta)))
        if abs(beta[worst]) > _DIVERGENCE_BOUND:
            raise ConvergenceError(
                f"monotone likelihood: coefficient for "
                f"{covariate_names[worst]!r} diverges")
        if float(np.max(np.abs(grad))) < tolerance:
            converged = True
            break
    if not converged:
        worst = int(np.argmax(np.abs(beta)))
        raise ConvergenceError(
            f"Cox fit did not converge in {max_iterations} iterations; "
            f"largest coefficient is for {covariate_names[worst]!r}")
    worst = int(np.argmax(np.abs(beta)))
    if abs(beta[worst]) > _SEPARATION_BOUND:
        # a gradient this flat at a huge standardized effect is separation
        raise ConvergenceError(
            f"monotone likelihood: coefficient for "
            f"{covariate_names[worst]!r} diverges")

    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular information matrix at solution") from exc
    variances = np.diag(covariance)
    if np.any(variances <= 0):
        raise NumericalError("non-positive variance estimate at solution")
    se_std = np.sqrt(variances)

    beta_raw = beta / scale
    se_raw = se_std / scale
    z = beta / se_std
    p_values = np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in z])
    risk = x_raw @ beta_raw
    return CoxFit(covariate_names=covariate_names, beta=beta_raw,
                  standard_errors=se_raw, p_values=p_values,
                  concordance=concordance_index(risk, times, events),
                  log_likelihood=loglik, n_used=x.shape[0], n_dropped=dropped,
                  n_events=n_events, iterations=iterations, converged=True)


def concordance_index(risk_scores, times, events) -> float:
    """Harrell's C by brute-force pair enumeration."""
    risk = np.asarray(risk_scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not risk.shape == times.shape == events.shape:
        raise DataError("risk, time and event arrays must have equal length")
    # pair (i, j) comparable when t_i < t_j and subject i had the event
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise DataError("concordance undefined: no comparable pairs")
    higher = risk[:, None] > risk[None, :]
    tied = risk[:, None] == risk[None, :]
    mass = (higher & comparable).sum() + 0.5 * (tied & comparable).sum()
    return float(mass / n_pairs)


def read_survival_csv(path) -> list[SurvivalRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"survival file not found: {path}")
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SURVIVAL_HEADER:
            raise DataError(
                f"{path}: bad header {header!r}, expected {list(SURVIVAL_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(SURVIVAL_HEADER):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(SURVIVAL_HEADER)} fields, got {len(row)}")
            try:
                record = SurvivalRecord(
                    patient_id=row[0], time_days=float(row[1]),
                    event=_parse_event(row[2]), age=float(row[3]),
                    gender=float(row[4]), smoker=float(row[5]),
                    fvc=float(row[6]) if row[6] else None,
                    dlco=float(row[7]) if row[7] else None,
                    biomarker=float(row[8]) if row[8] else None)
                record.validate()
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            records.append(record)
    return records


def _parse_event(text: str) -> bool:
    if text in ("0", "1"):
        return text == "1"
    raise ValueError(f"event must be 0 or 1, got {text!r}")


def write_survival_csv(path, records: list[SurvivalRecord]) -> None:
    def opt(v):
        return format_float(v) if v is not None else ""

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURVIVAL_HEADER)
        for r in records:
            writer.writerow([r.patient_id, format_float(r.time_days),
                             int(r.event), format_float(r.age),
                             format_float(r.gender), format_float(r.smoker),
                             opt(r.fvc), opt(r.dlco), opt(r.biomarker)])


@dataclass
class TableRow:
    biomarker: str
    method: str
    model: str
    n_patients: int
    c_index: float
    p_value: float  # Wald p of the biomarker coefficient


@dataclass
class DetailRow:
    biomarker: str
    method: str
    model: str
    covariate: str
    beta: float
    se: float
    p_value: float
    is_biomarker: bool


def build_results_table(records: list[SurvivalRecord], biomarker_rows,
                        aggregation: str = "mean",
                        models=tuple(MODEL_COVARIATES)) -> tuple[list[TableRow], list[DetailRow]]:
    """Fit every (biomarker, method) x model combination.

    `biomarker_rows` is the parsed biomarker CSV; rows with other
    aggregation modes are ignored. Patients without a biomarker value are
    dropped from that combination's fits.
    """
    by_patient: dict[tuple[str, str], dict[str, float]] = {}
    for row in biomarker_rows:
        if row.aggregation != aggregation:
            continue
        by_patient.setdefault((row.biomarker, row.method), {})[row.patient_id] = row.value
    if not by_patient:
        raise DataError(f"no biomarker rows with aggregation {aggregation!r}")

    table, detail = [], []
    for biomarker, method in sorted(by_patient):
        values = by_patient[(biomarker, method)]
        cohort = []
        for record in records:
            if record.patient_id in values:
                import dataclasses
                cohort.append(dataclasses.replace(
                    record, biomarker=values[record.patient_id]))
        if not cohort:
            raise DataError(
                f"no patients matched between covariates and biomarker rows "
                f"for ({biomarker}, {method})")
        for model in models:
            try:
                fit = cox_fit(cohort, MODEL_COVARIATES[model])
            except NumericalError:
                # one diverging fit must not lose the rest of the table
                table.append(TableRow(
                    biomarker=biomarker, method=method, model=model,
                    n_patients=len(cohort), c_index=float("nan"),
                    p_value=float("nan")))
                continue
            table.append(TableRow(
                biomarker=biomarker, method=method, model=model,
                n_patients=fit.n_used, c_index=fit.concordance,
                p_value=fit.p_value("biomarker")))
            for j, name in enumerate(fit.covariate_names):
                detail.append(DetailRow(
                    biomarker=biomarker, method=method, model=model,
                    covariate=name, beta=float(fit.beta[j]),
                    se=float(fit.standard_errors[j]),
                    p_value=float(fit.p_values[j]),
                    is_biomarker=name == "biomarker"))
    if not detail:
        raise NumericalError("every Cox fit diverged; no usable results")
    return table, detail


def write_results_table(path, rows: list[TableRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_HEADER)
        for r in rows:
            writer.writerow([r.biomarker, r.method, r.model, r.n_patients,
                             format_float(r.c_index), format_float(r.p_value)])


def write_details(path, rows: list[DetailRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETAIL_HEADER)
        for r in rows:
            writer.writerow([r.biomarker, r.method, r.model, r.covariate,
                             format_float(r.beta), format_float(r.se),
                             format_float(r.p_value), int(r.is_biomarker)])


def simulate_cohort(n: int, true_beta: float, seed: int,
                    baseline_rate: float = 1.0 / 1000.0,
                    censor_fraction: float = 0.2) -> list[SurvivalRecord]:
    """Exponential-hazard cohort with a standard-normal biomarker.

    Event time ~ Exp(rate * exp(beta * biomarker)); independent exponential
    censoring tuned so roughly `censor_fraction` of subjects are censored.
    """
    if n < 2:
        raise DataError("cohort needs n >= 2")
    rng = item_rng(seed, 11)
    biomarker = rng.standard_normal(n)
    rates = baseline_rate * np.exp(true_beta * biomarker)
    t_event = rng.exponential(1.0 / rates)
    if censor_fraction > 0:
        # solve mean_i rate_c/(rate_c + rate_i) = censor_fraction by bisection
        lo, hi = baseline_rate * 1e-6, baseline_rate * 1e6
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            frac = float(np.mean(mid / (mid + rates)))
            if frac < censor_fraction:
                lo = mid
            else:
                hi = mid
        t_censor = rng.exponential(1.0 / mid, size=n)
        time = np.minimum(t_event, t_censor)
        event = t_event <= t_censor
    else:
        time, event = t_event, np.ones(n, dtype=bool)
    age = rng.uniform(45, 85, size=n)
    gender = (rng.uniform(size=n) < 0.5).astype(float)
    smoker = (rng.uniform(size=n) < 0.6).astype(float)
    fvc = rng.uniform(50, 120, size=n)
    dlco = rng.uniform(30, 90, size=n)
    return [SurvivalRecord(patient_id=f"sim{i:04d}",
                           time_days=float(np.maximum(time[i], 1e-3)),
                           event=bool(event[i]), age=float(age[i]),
                           gender=float(gender[i]), smoker=float(smoker[i]),
                           fvc=float(fvc[i]), dlco=float(dlco[i]),
                           biomarker=float(biomarker[i])) for i in range(n)]
