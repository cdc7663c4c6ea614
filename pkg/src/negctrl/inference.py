"""Stacked M-estimation sandwich variance, Wald intervals and tests, bootstrap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import NumericalError, ValidationError

FD_REL_STEP = 1e-6
COND_LIMIT = 1e12
MIN_RESAMPLES = 50
MAX_BOOT_FAILURE = 0.05


@dataclass
class EstimatingBlock:
    """One block of a stacked estimating-equation system.

    ``psi`` maps the full parameter dictionary to per-observation values
    (n, size). ``depends`` lists the parameter blocks ``psi`` reads;
    derivatives with respect to any other block are taken as zero.
    ``jacobian``, if given, returns the analytic derivative of the mean of
    ``psi`` with respect to the block's own parameters.
    """

    name: str
    estimate: np.ndarray
    psi: Callable[[Mapping[str, np.ndarray]], np.ndarray]
    depends: tuple[str, ...] = ()
    jacobian: Callable[[], np.ndarray] | None = None

    def __post_init__(self):
        self.estimate = np.atleast_1d(np.asarray(self.estimate, float))
        if self.name not in self.depends:
            self.depends = (*self.depends, self.name)


@dataclass
class SandwichResult:
    cov: np.ndarray
    names: list[str]
    influence: np.ndarray
    condition: float
    slices: dict[str, slice] = field(default_factory=dict)

    def se(self, name: str) -> np.ndarray:
        s = self.slices[name]
        return np.sqrt(np.diag(self.cov)[s])

    def block_cov(self, name: str) -> np.ndarray:
        s = self.slices[name]
        return self.cov[s, s]


class StackedSystem:
    """gamma = (theta blocks..., target blocks) with psi stacked in the same order."""

    def __init__(self, blocks: Sequence[EstimatingBlock], n: int):
        self.blocks = list(blocks)
        self.n = n
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate block names {names}")
        self.slices, i = {}, 0
        for b in self.blocks:
            self.slices[b.name] = slice(i, i + b.estimate.size)
            i += b.estimate.size
        self.dim = i
        for b in self.blocks:
            unknown = set(b.depends) - set(names)
            if unknown:
                raise ValidationError(f"block {b.name} depends on unknown blocks {sorted(unknown)}")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {b.name: b.estimate for b in self.blocks}

    @property
    def gamma(self) -> np.ndarray:
        return np.concatenate([b.estimate for b in self.blocks])

    def psi(self, params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        params = self.params if params is None else params
        cols = []
        for b in self.blocks:
            v = np.asarray(b.psi(params), float)
            v = v.reshape(self.n, -1)
            if v.shape[1] != b.estimate.size:
                raise ValidationError(f"block {b.name}: psi has {v.shape[1]} columns, "
                                      f"expected {b.estimate.size}")
            cols.append(v)
        out = np.hstack(cols)
        if not np.isfinite(out).all():
            raise NumericalError("NaN or infinite value in the stacked estimating functions")
        return out

    def jacobian(self) -> np.ndarray:
        """Mean derivative of psi: analytic diagonal blocks where supplied,
        central finite differences elsewhere."""
        base = self.params
        jac = np.zeros((self.dim, self.dim))
        for row in self.blocks:
            rs = self.slices[row.name]
            for col_name in row.depends:
                cs = self.slices[col_name]
                if col_name == row.name and row.jacobian is not None:
                    jac[rs, cs] = row.jacobian()
                    continue
                theta = base[col_name]
                for j in range(theta.size):
                    h = FD_REL_STEP * (1.0 + abs(theta[j]))
                    vals = []
                    for sign in (1.0, -1.0):
                        t = theta.copy()
                        t[j] += sign * h
                        p = dict(base)
                        p[col_name] = t
                        vals.append(np.asarray(row.psi(p), float).reshape(self.n, -1).mean(axis=0))
                    jac[rs, cs.start + j] = (vals[0] - vals[1]) / (2 * h)
        return jac


def sandwich_variance(system: StackedSystem) -> SandwichResult:
    """V = A^{-1} B A^{-T} / n with A = -P_n[dpsi/dgamma] and B = P_n[psi psi^T]."""
    psi = system.psi()
    a_mat = -system.jacobian()
    cond = float(np.linalg.cond(a_mat))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"singular bread matrix A_n (condition number {cond:.3g})")
    infl = np.linalg.solve(a_mat, psi.T).T
    cov = infl.T @ infl / system.n / system.n
    names = [b.name for b in system.blocks]
    return SandwichResult(cov, names, infl, cond, dict(system.slices))


def _check_level(level: float):
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")


def wald_interval(delta_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    _check_level(level)
    if not se > 0:
        raise ValidationError(f"standard error must be positive, got {se}")
    half = norm.ppf(0.5 + level / 2.0) * se
    return float(delta_hat - half), float(delta_hat + half)


def wald_test(delta_hat: float, se: float) -> float:
    """Two-sided normal p-value for H0: Delta = 0."""
    if not se > 0:
        raise ValidationError(f"standard error must be positive, got {se}")
    return float(2.0 * norm.sf(abs(delta_hat / se)))


@dataclass
class BootstrapResult:
    se: float
    estimates: np.ndarray
    failures: list[tuple[int, str]]


def bootstrap_se(data, estimator: Callable[[object], float], resamples: int = 500,
                 seed: int = 0) -> BootstrapResult:
    """Standard deviation of ``estimator`` over row resamples drawn with replacement."""
    if resamples < MIN_RESAMPLES:
        raise ValidationError(f"at least {MIN_RESAMPLES} resamples are required, got {resamples}")
    rng = np.random.Generator(np.random.Philox(seed))
    ests, failures = [], []
    for b in range(resamples):
        idx = rng.integers(0, data.n, size=data.n)
        try:
            ests.append(float(estimator(data.take(idx))))
        except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
            failures.append((b, str(exc)))
    if len(failures) > MAX_BOOT_FAILURE * resamples:
        log = "; ".join(f"#{b}: {m}" for b, m in failures[:5])
        raise NumericalError(f"{len(failures)} of {resamples} bootstrap fits failed ({log})")
    ests = np.array(ests)
    return BootstrapResult(float(np.std(ests, ddof=1)), ests, failures)
