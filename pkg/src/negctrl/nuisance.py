"""Likelihood-fitted nuisance models.

All categorical fits go through :func:`fisher_scoring`, which works for
any model whose class probabilities are a smooth function of a parameter
vector. For logit/softmax links Fisher scoring coincides with
Newton-Raphson.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, ModelSpec, design_matrix, indicator_matrix
from .errors import NumericalError, ValidationError

SCORE_TOL = 1e-10
MAX_ITER = 100
COEF_BOUND = 30.0
DENSITY_GUARD = 1e-12

Predictor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------- generic fitter

def _loglik(p: np.ndarray, y: np.ndarray) -> float:
    p0 = 1.0 - p.sum(axis=1)
    if (p <= 0).any() or (p0 <= 0).any() or not np.isfinite(p).all():
        return -np.inf
    y0 = 1.0 - y.sum(axis=1)
    return float((y * np.log(p)).sum() + (y0 * np.log(p0)).sum())


def categorical_score_parts(p: np.ndarray, d: np.ndarray, y: np.ndarray, information: bool = True):
    """Per-observation score and the summed Fisher information.

    ``p`` (n, k) holds non-reference class probabilities, ``d`` (n, k, q)
    their derivatives and ``y`` (n, k) the observed indicators. Uses the
    closed-form inverse of the multinomial covariance
    ``diag(1/p) + 11'/p0``. The information is None when not requested.
    """
    p0 = 1.0 - p.sum(axis=1)
    resid = y - p
    r = resid / p + (resid.sum(axis=1) / p0)[:, None]
    scores = np.einsum("ncq,nc->nq", d, r)
    if not information:
        return scores, None
    s = d.sum(axis=1)
    info = (s / p0[:, None]).T @ s
    for c in range(p.shape[1]):
        info += (d[:, c, :] / p[:, c:c + 1]).T @ d[:, c, :]
    return scores, info


def fisher_scoring(predict: Predictor, y: np.ndarray, beta0: np.ndarray, *,
                   names: Sequence[str] | None = None, logit_mask: np.ndarray | None = None,
                   what: str = "model", tol: float = SCORE_TOL, max_iter: int = MAX_ITER) -> np.ndarray:
    """Maximize a categorical log-likelihood by Fisher scoring with step-halving.

    Converges when the max-abs mean score is below ``tol``. Raises
    :class:`NumericalError` on rank deficiency, on a logit-scale coefficient
    beyond +/-30 (separation), or after ``max_iter`` iterations.
    """
    y = np.asarray(y, float)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    beta = np.asarray(beta0, float).copy()
    names = list(names) if names is not None else [f"coef[{i}]" for i in range(beta.size)]
    mask = np.ones(beta.size, bool) if logit_mask is None else np.asarray(logit_mask, bool)
    p, d = predict(beta)
    ll = _loglik(p, y)
    if not np.isfinite(ll):
        raise NumericalError(f"{what}: starting values give invalid probabilities")
    converged = False
    for _ in range(max_iter):
        scores, info = categorical_score_parts(p, d, y)
        grad = scores.sum(axis=0)
        if converged:
            break
        # one more full step after the tolerance is met, so that fits are
        # accurate well beyond the stopping rule
        converged = np.max(np.abs(grad)) / n < tol
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.isfinite(step).all() or np.linalg.cond(info) > 1e14:
            raise NumericalError(f"{what}: information matrix is singular (rank-deficient design)")
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            p_new, d_new = predict(cand)
            ll_new = _loglik(p_new, y)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise NumericalError(f"{what}: step-halving failed to improve the likelihood")
        beta, p, d, ll = cand, p_new, d_new, ll_new
        big = np.nonzero(mask & (np.abs(beta) > COEF_BOUND))[0]
        if big.size:
            raise NumericalError(
                f"{what}: separation suspected, coefficient of {names[big[0]]!r} "
                f"reached {beta[big[0]]:.3g}")
    if converged:
        return beta
    raise NumericalError(f"{what}: no convergence after {max_iter} iterations")


def softmax_parts(x: np.ndarray, coef: np.ndarray):
    """Non-reference probabilities and their derivatives for a multinomial logit.

    ``coef`` has shape (k, q); parameters are flattened class-major.
    """
    k, q = coef.shape
    eta = x @ coef.T
    m = np.maximum(eta.max(axis=1), 0.0)
    e = np.exp(eta - m[:, None])
    denom = np.exp(-m) + e.sum(axis=1)
    p = e / denom[:, None]
    jac = np.eye(k)[None] * p[:, :, None] - p[:, :, None] * p[:, None, :]
    d = (jac[:, :, :, None] * x[:, None, None, :]).reshape(x.shape[0], k, k * q)
    return p, d


def softmax_probs(x: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """All class probabilities (reference first), shape (n, k+1)."""
    eta = x @ coef.T
    m = np.maximum(eta.max(axis=1), 0.0)
    e = np.exp(eta - m[:, None])
    e0 = np.exp(-m)
    denom = e0 + e.sum(axis=1)
    return np.column_stack([e0 / denom, e / denom[:, None]])


def _check_rank(x: np.ndarray, terms: Sequence[str], what: str):
    if x.shape[0] < x.shape[1] or np.linalg.matrix_rank(x) < x.shape[1]:
        raise NumericalError(f"{what}: design over terms {['1', *terms]} is rank-deficient")


def fit_multinomial(x: np.ndarray, y: np.ndarray, terms: Sequence[str], *, what: str,
                    labels: Sequence[str] | None = None) -> np.ndarray:
    """Multinomial (or binary, k=1) logit MLE; returns coefficients (k, q)."""
    y = np.asarray(y, float)
    y = y[:, None] if y.ndim == 1 else y
    k, q = y.shape[1], x.shape[1]
    _check_rank(x, terms, what)
    labels = labels or [f"class{c + 1}" for c in range(k)]
    names = [f"{lab}:{t}" for lab in labels for t in ["(Intercept)", *terms]]
    beta = fisher_scoring(lambda b: softmax_parts(x, b.reshape(k, q)), y, np.zeros(k * q),
                          names=names, what=what)
    return beta.reshape(k, q)


def softmax_information(x: np.ndarray, coef: np.ndarray) -> np.ndarray:
    p, d = softmax_parts(x, coef)
    return categorical_score_parts(p, d, np.zeros_like(p))[1]


# ---------------------------------------------------------------- exposure model

@dataclass(frozen=True, eq=False)
class ExposureDensities:
    """Exposure densities at every row, each indexed [row, a, z]."""

    f_az: np.ndarray

    @property
    def f_a_given_z(self) -> np.ndarray:
        return self.f_az / self.f_az.sum(axis=1, keepdims=True)

    @property
    def f_z_given_a(self) -> np.ndarray:
        return self.f_az / self.f_az.sum(axis=2, keepdims=True)

    @property
    def f_a(self) -> np.ndarray:
        """f(a | x), shape (n, 2)."""
        return self.f_az.sum(axis=2)

    @property
    def f_z(self) -> np.ndarray:
        """f(z | x), shape (n, |Z|)."""
        return self.f_az.sum(axis=1)


@dataclass(frozen=True, eq=False)
class JointExposureModel:
    """f(A, Z | X) as one multinomial logit over the 2|Z| cells, or as
    logistic A|X times multinomial Z|A,X.

    ``coef`` maps block names to coefficient matrices: ``az`` of shape
    (2|Z|-1, q) for the joint form (cell index a*|Z| + z, reference
    cell (0, z0)); ``a`` (1, q_a) and ``z`` (|Z|-1, q_z) when factorized.
    """

    kind: str
    n_z: int
    terms: dict
    coef: dict

    @property
    def blocks(self) -> tuple[str, ...]:
        return ("az",) if self.kind == "joint" else ("a", "z")

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.coef[b].ravel() for b in self.blocks])

    def with_params(self, v: np.ndarray) -> "JointExposureModel":
        out, i = {}, 0
        for b in self.blocks:
            size = self.coef[b].size
            out[b] = np.asarray(v[i:i + size], float).reshape(self.coef[b].shape)
            i += size
        return JointExposureModel(self.kind, self.n_z, self.terms, out)

    def cell_probs(self, data: Dataset) -> np.ndarray:
        """f(a, z | x_i) with shape (n, 2, |Z|)."""
        K = self.n_z
        if self.kind == "joint":
            x = design_matrix(data, self.terms["az"])
            return softmax_probs(x, self.coef["az"]).reshape(data.n, 2, K)
        xa = design_matrix(data, self.terms["a"])
        pa1 = expit(xa @ self.coef["a"][0])
        out = np.empty((data.n, 2, K))
        for a, pa in ((0, 1.0 - pa1), (1, pa1)):
            xz = design_matrix(data, self.terms["z"], a=a)
            out[:, a, :] = pa[:, None] * softmax_probs(xz, self.coef["z"])
        return out

    def densities(self, data: Dataset) -> ExposureDensities:
        return exposure_densities(self, data)

    def _parts(self, data: Dataset):
        """(design, probs, derivs, indicators) per factor, evaluated at observed A."""
        K = self.n_z
        if self.kind == "joint":
            x = design_matrix(data, self.terms["az"])
            p, d = softmax_parts(x, self.coef["az"])
            y = indicator_matrix(data.a * K + data.zc, 2 * K)
            return [(p, d, y)]
        xa = design_matrix(data, self.terms["a"])
        pa, da = softmax_parts(xa, self.coef["a"])
        xz = design_matrix(data, self.terms["z"])
        pz, dz = softmax_parts(xz, self.coef["z"])
        return [(pa, da, data.a[:, None].astype(float)), (pz, dz, data.gamma_z)]

    def scores(self, data: Dataset) -> np.ndarray:
        """Per-observation score of the log-likelihood, shape (n, dim)."""
        return np.hstack([categorical_score_parts(p, d, y, False)[0] for p, d, y in self._parts(data)])

    def mean_score_jacobian(self, data: Dataset) -> np.ndarray:
        """Analytic derivative of the mean score (minus mean information)."""
        infos = [categorical_score_parts(p, d, y)[1] for p, d, y in self._parts(data)]
        out = np.zeros((self.params.size,) * 2)
        i = 0
        for m in infos:
            out[i:i + m.shape[0], i:i + m.shape[0]] = -m / data.n
            i += m.shape[0]
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_z": self.n_z,
                "terms": {b: list(self.terms[b]) for b in self.blocks},
                "coef": {b: self.coef[b].tolist() for b in self.blocks}}

    @classmethod
    def from_dict(cls, d) -> "JointExposureModel":
        return cls(d["kind"], int(d["n_z"]), {b: tuple(t) for b, t in d["terms"].items()},
                   {b: np.array(c, float) for b, c in d["coef"].items()})


def _cell_label(data: Dataset, a: int, zc: int) -> str:
    return f"({a},{data.z_coding.levels[data.z_coding.order[zc]]})"


def fit_joint_exposure(data: Dataset, spec: ModelSpec) -> JointExposureModel:
    """MLE of f(A, Z | X) in the form requested by ``spec.exposure``."""
    spec.validate(data.covariate_names)
    K = data.n_z
    counts = np.bincount(data.a * K + data.zc, minlength=2 * K)
    for cell in np.nonzero(counts == 0)[0]:
        raise ValidationError(f"empty cell {_cell_label(data, cell // K, cell % K)}: "
                              "no observations with this (A, Z) combination")
    if spec.exposure == "joint":
        x = design_matrix(data, spec.az)
        labels = [_cell_label(data, c // K, c % K) for c in range(1, 2 * K)]
        coef = fit_multinomial(x, indicator_matrix(data.a * K + data.zc, 2 * K), spec.az,
                               what="exposure model f(A,Z|X)", labels=labels)
        return JointExposureModel("joint", K, {"az": spec.az}, {"az": coef})
    xa = design_matrix(data, spec.a)
    ca = fit_multinomial(xa, data.a.astype(float), spec.a, what="treatment model f(A|X)",
                         labels=["A=1"])
    xz = design_matrix(data, spec.z)
    labels = [f"Z={data.z_coding.levels[data.z_coding.order[j]]}" for j in range(1, K)]
    cz = fit_multinomial(xz, data.gamma_z, spec.z, what="NCE model f(Z|A,X)", labels=labels)
    return JointExposureModel("factorized", K, {"a": spec.a, "z": spec.z}, {"a": ca, "z": cz})


def exposure_densities(model: JointExposureModel, data: Dataset) -> ExposureDensities:
    f = model.cell_probs(data)
    if (f < DENSITY_GUARD).any():
        rows = np.unique(np.nonzero(f < DENSITY_GUARD)[0])[:10]
        raise NumericalError(f"exposure cell probability below {DENSITY_GUARD} at rows {rows.tolist()}")
    return ExposureDensities(f)


# ---------------------------------------------------------------- baseline outcome

@dataclass(frozen=True, eq=False)
class BaselineOutcomeModel:
    """E[Y | Z=z0, A, X] with a logit or identity link."""

    terms: tuple[str, ...]
    coef: np.ndarray
    link: str = "logit"

    @property
    def params(self) -> np.ndarray:
        return self.coef

    def with_params(self, v) -> "BaselineOutcomeModel":
        return BaselineOutcomeModel(self.terms, np.asarray(v, float).copy(), self.link)

    def predict(self, data: Dataset, a=None) -> np.ndarray:
        eta = design_matrix(data, self.terms, a=a) @ self.coef
        return expit(eta) if self.link == "logit" else eta

    def scores(self, data: Dataset) -> np.ndarray:
        """Score contributions, zero outside the Z=z0 subsample."""
        x = design_matrix(data, self.terms)
        resid = (data.y - self.predict(data)) * (data.zc == 0)
        return x * resid[:, None]

    def mean_score_jacobian(self, data: Dataset) -> np.ndarray:
        x = design_matrix(data, self.terms)
        wt = (data.zc == 0).astype(float)
        if self.link == "logit":
            mu = self.predict(data)
            wt = wt * mu * (1 - mu)
        return -(x * wt[:, None]).T @ x / data.n

    def to_dict(self) -> dict:
        return {"terms": list(self.terms), "coef": self.coef.tolist(), "link": self.link}

    @classmethod
    def from_dict(cls, d) -> "BaselineOutcomeModel":
        return cls(tuple(d["terms"]), np.array(d["coef"], float), d.get("link", "logit"))


def _check_unit_interval(y: np.ndarray, what: str):
    if ((y < 0) | (y > 1)).any():
        raise ValidationError(f"{what}: the logit link needs outcomes in [0, 1]; use the identity link")


def fit_baseline_outcome(data: Dataset, spec: ModelSpec) -> BaselineOutcomeModel:
    """Restricted MLE of E[Y | Z=z0, A, X] on the Z=z0 subsample."""
    spec.validate(data.covariate_names)
    sub = data.take(np.nonzero(data.zc == 0)[0]) if (data.zc == 0).any() else None
    what = "baseline outcome model E[Y|Z=z0,A,X]"
    if sub is None:
        raise ValidationError(f"{what}: the Z=z0 subsample is empty")
    if len(np.unique(sub.a)) < 2:
        raise ValidationError(f"{what}: the Z=z0 subsample lacks one treatment arm")
    x = design_matrix(sub, spec.y)
    _check_rank(x, spec.y, what)
    if spec.y_link == "identity":
        coef = np.linalg.lstsq(x, sub.y, rcond=None)[0]
    else:
        _check_unit_interval(sub.y, what)
        coef = fit_multinomial(x, sub.y, spec.y, what=what, labels=["Y"])[0]
    return BaselineOutcomeModel(spec.y, coef, spec.y_link)


# ---------------------------------------------------------------- baseline NCO

@dataclass(frozen=True, eq=False)
class BaselineNcoModel:
    """P(W = w_i | A=0, Z=z0, X) for the non-reference levels, multinomial logit."""

    terms: tuple[str, ...]
    coef: np.ndarray

    @property
    def params(self) -> np.ndarray:
        return self.coef.ravel()

    def with_params(self, v) -> "BaselineNcoModel":
        return BaselineNcoModel(self.terms, np.asarray(v, float).reshape(self.coef.shape).copy())

    def predict(self, data: Dataset) -> np.ndarray:
        """Non-reference probabilities, shape (n, |W|-1)."""
        return softmax_probs(design_matrix(data, self.terms), self.coef)[:, 1:]

    def _mask(self, data):
        return ((data.a == 0) & (data.zc == 0)).astype(float)

    def scores(self, data: Dataset) -> np.ndarray:
        x = design_matrix(data, self.terms)
        p, d = softmax_parts(x, self.coef)
        s = categorical_score_parts(p, d, data.gamma_w, False)[0]
        return s * self._mask(data)[:, None]

    def mean_score_jacobian(self, data: Dataset) -> np.ndarray:
        keep = self._mask(data) > 0
        x = design_matrix(data, self.terms)[keep]
        return -softmax_information(x, self.coef) / data.n

    def to_dict(self) -> dict:
        return {"terms": list(self.terms), "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BaselineNcoModel":
        return cls(tuple(d["terms"]), np.atleast_2d(np.array(d["coef"], float)))


def fit_baseline_nco(data: Dataset, spec: ModelSpec) -> BaselineNcoModel:
    """Restricted MLE of P(W | A=0, Z=z0, X) on the (A=0, Z=z0) subsample."""
    spec.validate(data.covariate_names)
    what = "baseline NCO model P(W|A=0,Z=z0,X)"
    keep = np.nonzero((data.a == 0) & (data.zc == 0))[0]
    if keep.size == 0:
        raise ValidationError(f"{what}: the (A=0, Z=z0) subsample is empty")
    sub = data.take(keep)
    x = design_matrix(sub, spec.w0)
    labels = [f"W={data.w_coding.levels[data.w_coding.order[i]]}" for i in range(1, data.n_w)]
    return BaselineNcoModel(spec.w0, fit_multinomial(x, sub.gamma_w, spec.w0, what=what, labels=labels))


def score_contributions(exposure: JointExposureModel, outcome: BaselineOutcomeModel,
                        nco: BaselineNcoModel, data: Dataset) -> np.ndarray:
    """Stacked per-observation scores of the three likelihood blocks."""
    return np.hstack([exposure.scores(data), outcome.scores(data), nco.scores(data)])
