"""Binary-confounder simulation design, misspecification scenarios and
replication harness producing operating characteristics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import __version__
from .data import CategoricalCoding, Dataset, ModelSpec
from .errors import NegCtrlError, NumericalError, ValidationError
from .estimators import ROUTES, FitCache, report

log = logging.getLogger(__name__)

COVARIATES = tuple(f"X{i}" for i in range(1, 9))
INTERACTION = "X7*X8"
SCENARIOS = ("all_correct", "m1_only", "m2_only", "m3_only", "all_wrong")
TRIM_PER_TAIL = 0.005
MAX_FAILURE_RATE = 0.02
RNG_NAME = f"numpy.random.Philox (numpy {np.__version__})"


@dataclass(frozen=True)
class DgpSpec:
    """Constants of the data-generating process; every one can be overridden."""

    n: int = 2000
    seed: int = 0
    alpha: tuple[float, ...] = tuple(-0.01 * v for v in (1, 1, 1, 1, 1, 1, 1, 1, -20))
    beta: tuple[float, ...] = tuple(-0.1 for _ in range(9))
    a_intercept: float = -0.01
    z_intercept: float = -0.01
    z_a_effect: float = -0.2
    u_z: float = 0.4
    u_az: float = 0.4
    w_intercept: float = -1.0
    w_u_shift: float = 0.5
    y_intercept: float = -1.0
    y_au: float = 0.25

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"sample size must be positive, got {self.n}")
        if len(self.alpha) != 9 or len(self.beta) != 9:
            raise ValidationError("alpha and beta need 9 coefficients (X1..X8 and X7*X8)")


def _design(x8: np.ndarray) -> np.ndarray:
    return np.column_stack([x8, x8[:, 6] * x8[:, 7]])


def _rng(seed: int, index: int | None = None) -> np.random.Generator:
    ss = np.random.SeedSequence(seed) if index is None else np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def _bernoulli(rng, p, what):
    if not ((p > 0) & (p < 1)).all():
        raise NumericalError(f"generated probability for {what} outside (0, 1)")
    return (rng.random(p.shape) < p).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    """The observed dataset plus the latent confounder, kept apart so that
    estimation code only ever receives ``data``."""

    data: Dataset
    latent_u: np.ndarray


def generate_dataset(spec: DgpSpec, rng: np.random.Generator | None = None) -> SimulatedSample:
    rng = rng or _rng(spec.seed)
    n = spec.n
    x8 = rng.random((n, 8))
    xd = _design(x8)
    lin = xd @ np.asarray(spec.alpha)
    a = _bernoulli(rng, expit(spec.a_intercept + lin), "A")
    z = _bernoulli(rng, expit(spec.z_intercept + spec.z_a_effect * a + lin), "Z")
    pu = spec.u_z * z + spec.u_az * a * z
    if ((pu < 0) | (pu > 1)).any():
        raise NumericalError("generated probability for U outside [0, 1]")
    u = (rng.random(n) < pu).astype(np.int64)
    base = xd @ np.asarray(spec.beta)
    pw = expit(spec.w_intercept + base) + spec.w_u_shift * u
    py = expit(spec.y_intercept + base) + spec.y_au * a * u
    for p, what in ((pw, "W"), (py, "Y")):
        if ((p < 0) | (p > 1)).any():
            raise NumericalError(f"generated probability for {what} outside [0, 1]")
    w = (rng.random(n) < pw).astype(np.int64)
    y = (rng.random(n) < py).astype(float)
    coding = CategoricalCoding(("0", "1"))
    return SimulatedSample(Dataset(y, a, z, w, x8, coding, coding, COVARIATES), u)


def true_ate_oracle(spec: DgpSpec = DgpSpec(), precision_n: int = 1_000_000,
                    seed: int = 20240101) -> tuple[float, float]:
    """Monte Carlo value of E[Y(1) - Y(0)] = y_au * E[U], with E[U | X]
    integrated exactly over (A, Z); returns (value, Monte Carlo SE)."""
    if precision_n < 1_000_000:
        raise ValidationError("the ATE oracle needs at least 10^6 covariate draws")
    rng = _rng(seed)
    xd = _design(rng.random((precision_n, 8)))
    lin = xd @ np.asarray(spec.alpha)
    pa = expit(spec.a_intercept + lin)
    eu = np.zeros(precision_n)
    for a, wa in ((0, 1 - pa), (1, pa)):
        pz = expit(spec.z_intercept + spec.z_a_effect * a + lin)
        eu += wa * pz * (spec.u_z + spec.u_az * a)
    vals = spec.y_au * eu
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(precision_n))


# ---------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class Scenario:
    tag: str

    def __post_init__(self):
        if self.tag not in SCENARIOS:
            raise ValidationError(f"unknown scenario {self.tag!r}; choose from {SCENARIOS}")


def scenario_model_specs(scenario: Scenario | str) -> ModelSpec:
    """Working models fitted under a scenario; all_correct matches the DGP."""
    tag = scenario.tag if isinstance(scenario, Scenario) else Scenario(scenario).tag
    xs = (*COVARIATES, INTERACTION)
    short = COVARIATES
    spec = ModelSpec(exposure="factorized", a=xs, z=("A", *xs), y=("A", *xs), y_link="logit",
                     w0=xs, wa=(), wz=(), waz=(), r=("A",))
    if tag == "m1_only":
        return spec.replace(waz=None)
    if tag == "m2_only":
        return spec.replace(r=())
    if tag == "m3_only":
        return spec.replace(z=("A", *short))
    if tag == "all_wrong":
        return spec.replace(z=("A", *short), y=("A", *short))
    return spec


# ---------------------------------------------------------------- replications

@dataclass(frozen=True)
class ReplicationRow:
    replication: int
    estimator: str
    delta: float
    se: float
    covered: int
    failed: int
    message: str = ""


def run_replication(index: int, scenario: str, n: int, base_seed: int,
                    estimators: Sequence[str], true_ate: float, level: float = 0.95,
                    dgp: DgpSpec | None = None) -> list[ReplicationRow]:
    dgp = replace(dgp or DgpSpec(), n=n)
    sample = generate_dataset(dgp, _rng(base_seed, index))
    spec = scenario_model_specs(scenario)
    rows = []
    cache = None
    try:
        cache = FitCache(sample.data, spec)
    except NegCtrlError as exc:
        return [ReplicationRow(index, e, math.nan, math.nan, 0, 1, str(exc)) for e in estimators]
    for est in estimators:
        try:
            rep = report(sample.data, cache.theta(est), est, level, True, cache.index)
            lo, hi = rep.ci
            rows.append(ReplicationRow(index, est, rep.delta, rep.se, int(lo <= true_ate <= hi), 0))
        except (NegCtrlError, np.linalg.LinAlgError) as exc:
            rows.append(ReplicationRow(index, est, math.nan, math.nan, 0, 1, str(exc)))
    return rows


def _run_chunk(args):
    indices, kw = args
    return [r for i in indices for r in run_replication(i, **kw)]


@dataclass
class EstimatorSummary:
    estimator: str
    bias: float
    variance: float
    proportion_bias: float
    mse: float
    coverage: float
    reps_succeeded: int
    reps_after_trim: int
    failures: int

    def row(self) -> dict:
        """Table-style row: bias, variance and MSE scaled by 10^3, proportion bias in %."""
        return {"estimator": self.estimator, "bias_x1e3": self.bias * 1e3,
                "var_x1e3": self.variance * 1e3, "proportion_bias_pct": self.proportion_bias,
                "mse_x1e3": self.mse * 1e3, "coverage": self.coverage,
                "reps_succeeded": self.reps_succeeded, "reps_after_trim": self.reps_after_trim,
                "failures": self.failures}


@dataclass
class OperatingCharacteristics:
    scenario: str
    true_ate: float
    summaries: list[EstimatorSummary]
    raw: list[ReplicationRow] = field(repr=False)
    metadata: dict = field(default_factory=dict)

    def summary(self, estimator: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.estimator == estimator:
                return s
        raise KeyError(estimator)

    def table_tsv(self) -> str:
        return _tsv([s.row() for s in self.summaries])

    def raw_tsv(self) -> str:
        return _tsv([asdict(r) for r in self.raw])

    def to_dict(self) -> dict:
        return {"schema": "negctrl-simulation/1", "scenario": self.scenario, "true_ate": self.true_ate,
                "metadata": self.metadata, "table": [s.row() for s in self.summaries]}

    def write(self, out: str | Path, fmt: str = "tsv") -> list[Path]:
        """Writes <out>.raw.tsv and <out>.tsv or <out>.json; returns the paths."""
        out = Path(out)
        raw = out.with_name(out.name + ".raw.tsv")
        raw.write_text(self.raw_tsv())
        table = out.with_name(out.name + (".json" if fmt == "json" else ".tsv"))
        if fmt == "json":
            table.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        else:
            meta = "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in sorted(self.metadata.items()))
            table.write_text(meta + self.table_tsv())
        return [raw, table]


def _tsv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        wr = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def summarize(rows: Sequence[ReplicationRow], estimator: str, true_ate: float,
              trim: float = TRIM_PER_TAIL) -> EstimatorSummary:
    mine = sorted((r for r in rows if r.estimator == estimator), key=lambda r: r.replication)
    ok = [r for r in mine if not r.failed]
    if not ok:
        raise NumericalError(f"every replication of {estimator} failed")
    est = np.sort(np.array([r.delta for r in ok]))
    cut = int(math.floor(trim * est.size))
    kept = est[cut:est.size - cut] if cut else est
    bias = float(kept.mean() - true_ate)
    var = float(kept.var())
    return EstimatorSummary(estimator, bias, var, 100.0 * bias / true_ate, bias ** 2 + var,
                            float(np.mean([r.covered for r in ok])), len(ok), int(kept.size),
                            len(mine) - len(ok))


def run_study(scenario: str, reps: int, n: int = 2000, base_seed: int = 0,
              estimators: Sequence[str] = ROUTES, level: float = 0.95, threads: int = 1,
              true_ate: float | None = None, dgp: DgpSpec | None = None) -> OperatingCharacteristics:
    Scenario(scenario)
    if reps < 1:
        raise ValidationError(f"reps must be positive, got {reps}")
    if n < 10:
        raise ValidationError(f"n must be at least 10, got {n}")
    unknown = [e for e in estimators if e not in ROUTES]
    if unknown or not estimators:
        raise ValidationError(f"unknown estimator(s) {unknown}; choose from {ROUTES}")
    dgp = dgp or DgpSpec()
    if true_ate is None:
        true_ate, _ = true_ate_oracle(dgp)
    kw = dict(scenario=scenario, n=n, base_seed=base_seed, estimators=tuple(estimators),
              true_ate=true_ate, level=level, dgp=dgp)
    if threads > 1:
        chunks = [(list(range(i, reps, threads)), kw) for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = [r for part in pool.map(_run_chunk, chunks) for r in part]
    else:
        rows = _run_chunk((range(reps), kw))
    rows.sort(key=lambda r: (r.replication, estimators.index(r.estimator)))
    for e in estimators:
        bad = [r for r in rows if r.estimator == e and r.failed]
        for r in bad[:5]:
            log.warning("replication %d, %s failed: %s", r.replication, e, r.message)
        if len(bad) > MAX_FAILURE_RATE * reps:
            raise NumericalError(f"{len(bad)} of {reps} replications of {e} failed "
                                 f"(limit {MAX_FAILURE_RATE:.0%}); first: {bad[0].message}")
    meta = {"package_version": __version__, "rng": RNG_NAME, "seed_scheme": "SeedSequence(base_seed, spawn_key=(replication,))",
            "base_seed": base_seed, "reps": reps, "n": n, "level": level,
            "trimming": f"symmetric, {TRIM_PER_TAIL:.1%} of each estimator's estimates per tail, "
                        "applied to bias/variance/MSE only",
            "coverage": "all successful replications, before trimming",
            "model_spec": scenario_model_specs(scenario).to_dict(), "dgp": asdict(dgp)}
    sums = [summarize(rows, e, true_ate) for e in estimators]
    return OperatingCharacteristics(scenario, true_ate, sums, rows, meta)


# ---------------------------------------------------------------- vaccine-style example data

VACCINE_COLUMNS = ("flu_hosp", "vaccinated", "ringworm", "injury", "age65", "chronic")


def vaccine_style_dataset(n: int = 4000, seed: int = 2016) -> Dataset:
    """Binary outcome, treatment and negative controls with two binary covariates
    and a binary latent health-seeking trait driving all of them."""
    rng = _rng(seed)
    age = (rng.random(n) < 0.35).astype(float)
    chronic = (rng.random(n) < 0.25 + 0.2 * age).astype(float)
    u = (rng.random(n) < 0.3 + 0.2 * chronic).astype(np.int64)
    a = (rng.random(n) < expit(-0.6 + 0.8 * age + 0.5 * chronic + 0.9 * u)).astype(np.int64)
    z = (rng.random(n) < expit(-1.5 + 0.3 * age + 2.5 * u + 0.2 * a)).astype(np.int64)
    w = (rng.random(n) < 0.05 + 0.05 * age + 0.45 * u).astype(np.int64)
    y = (rng.random(n) < 0.08 + 0.06 * age + 0.05 * chronic + 0.15 * u - 0.03 * a - 0.02 * a * u)
    coding = CategoricalCoding(("0", "1"))
    return Dataset(y.astype(float), a, z, w, np.column_stack([age, chronic]), coding, coding,
                   VACCINE_COLUMNS[4:])
