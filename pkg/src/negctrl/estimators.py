"""Influence-function evaluators and the five ATE estimators.

Every estimator is written as the difference of two sample means,
Delta = P_n[conf] - P_n[bias], whose per-observation contributions come
from :func:`contributions`. Standard errors come from a stacked
estimating-equation system holding the nuisance fits of the estimator
followed by the two means.

Routes (which nuisance fits each estimator uses):

``delta1``  exposure model + R by exposure-centered g-estimation
``delta2``  exposure model + W contrasts by exposure-centered g-estimation
``delta3``  baseline outcome + joint NCO likelihood + R by outcome-route g-estimation
``mle``     exposure + joint NCO likelihood + joint outcome likelihood, bridge plug-in
``mr``      all likelihood blocks, then doubly robust W contrasts, then R
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, ModelSpec, design_matrix
from .errors import NumericalError, ValidationError
from .gestimation import (ContrastSet, IndexFunctions, NcoJointModel, _kron_rows,
                          default_index_functions, fit_w_joint, gest_r_m1, gest_r_m3,
                          gest_w_m2, m1_moments, m2_moments, m3_moments, r_contrast_moments,
                          solve_r_contrast, solve_w_contrasts, w_contrast_moments)
from .inference import (EstimatingBlock, SandwichResult, StackedSystem, sandwich_variance,
                        wald_interval, wald_test)
from .nuisance import (BaselineNcoModel, BaselineOutcomeModel, JointExposureModel,
                       categorical_score_parts, fisher_scoring, fit_baseline_nco,
                       fit_baseline_outcome, fit_joint_exposure)

ROUTES = ("delta1", "delta2", "delta3", "mle", "mr")
DENSITY_FLOOR = 1e-6
BRIDGE_COND_LIMIT = 1e12


# ---------------------------------------------------------------- nuisance values

@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Nuisance functions evaluated at each row's covariates.

    f_az (n, 2, |Z|); m_y0 (n, 2) = E[Y | Z=z0, a, x]; base_w (n, k);
    delta0 (n, k); xi0, eta (n, k, k); r (n, 2, k) = R(a, x).
    """

    f_az: np.ndarray | None
    m_y0: np.ndarray
    base_w: np.ndarray
    delta0: np.ndarray
    xi0: np.ndarray
    eta: np.ndarray
    r: np.ndarray

    @property
    def k(self) -> int:
        return self.base_w.shape[1]

    def xi(self, a) -> np.ndarray:
        a = np.asarray(a, float)
        return self.xi0 + np.reshape(a, (-1, 1, 1)) * self.eta

    def zeroed(self, *names: str) -> "NuisanceValues":
        changes = {}
        for name in names:
            if name == "w_model":
                for f in ("base_w", "delta0", "xi0", "eta"):
                    changes[f] = np.zeros_like(getattr(self, f))
            elif name in ("m_y0", "base_w", "r"):
                changes[name] = np.zeros_like(getattr(self, name))
            else:
                raise ValidationError(f"cannot zero component {name!r}")
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class NuisanceTheta:
    """Fitted working models; components an estimator does not use stay None."""

    route: str
    spec: ModelSpec
    k: int
    exposure: JointExposureModel | None = None
    outcome: BaselineOutcomeModel | None = None
    nco: BaselineNcoModel | None = None
    contrasts: ContrastSet | None = None

    def values(self, data: Dataset) -> NuisanceValues:
        n, k = data.n, self.k
        f_az = self.exposure.cell_probs(data) if self.exposure is not None else None
        if self.outcome is not None:
            m_y0 = np.column_stack([self.outcome.predict(data, a=0), self.outcome.predict(data, a=1)])
        else:
            m_y0 = np.zeros((n, 2))
        base = self.nco.predict(data) if self.nco is not None else np.zeros((n, k))
        cs = self.contrasts
        if cs is not None and cs.bw is not None:
            delta0, xi0, eta = cs.delta0(data), cs.xi0(data), cs.eta(data)
        else:
            delta0, xi0, eta = np.zeros((n, k)), np.zeros((n, k, k)), np.zeros((n, k, k))
        if cs is not None and cs.br is not None:
            r = np.stack([cs.r_values(data, 0), cs.r_values(data, 1)], axis=1)
        else:
            r = np.zeros((n, 2, k))
        return NuisanceValues(f_az, m_y0, base, delta0, xi0, eta, r)

    def to_dict(self) -> dict:
        d = lambda m: None if m is None else m.to_dict()  # noqa: E731
        return {"route": self.route, "spec": self.spec.to_dict(), "k": self.k,
                "exposure": d(self.exposure), "outcome": d(self.outcome), "nco": d(self.nco),
                "contrasts": d(self.contrasts)}

    @classmethod
    def from_dict(cls, d) -> "NuisanceTheta":
        load = lambda typ, v: None if v is None else typ.from_dict(v)  # noqa: E731
        return cls(d["route"], ModelSpec.from_dict(d["spec"]), int(d["k"]),
                   load(JointExposureModel, d["exposure"]), load(BaselineOutcomeModel, d["outcome"]),
                   load(BaselineNcoModel, d["nco"]), load(ContrastSet, d["contrasts"]))


# ---------------------------------------------------------------- joint outcome likelihood

@dataclass(frozen=True, eq=False)
class OutcomeJointModel:
    """E[Y | Z, A, X] = m_Y0(A, X) + R(A, X) xi^W(A, X) Gamma_Z with xi^W held fixed."""

    outcome: BaselineOutcomeModel
    contrasts: ContrastSet

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.outcome.coef, self.contrasts.br.ravel()])

    def with_params(self, v) -> "OutcomeJointModel":
        m = self.outcome.coef.size
        return OutcomeJointModel(self.outcome.with_params(v[:m]), self.contrasts.with_r(v[m:]))

    def parts(self, data: Dataset, w_contrasts: ContrastSet, beta=None):
        beta = self.params if beta is None else beta
        m = self.outcome.coef.size
        dy = design_matrix(data, self.outcome.terms)
        c = np.einsum("nij,nj->ni", w_contrasts.xi_w(data, data.a), data.gamma_z)
        dr = _kron_rows(c, self.contrasts.r_design(data))
        eta = dy @ beta[:m]
        if self.outcome.link == "logit":
            mu0 = expit(eta)
            dy = dy * (mu0 * (1 - mu0))[:, None]
        else:
            mu0 = eta
        return mu0 + dr @ beta[m:], np.hstack([dy, dr])

    def scores(self, data: Dataset, w_contrasts: ContrastSet) -> np.ndarray:
        mu, d = self.parts(data, w_contrasts)
        if self.outcome.link == "logit":
            return categorical_score_parts(mu[:, None], d[:, None, :], data.y[:, None], False)[0]
        return d * (data.y - mu)[:, None]


def fit_outcome_joint(data: Dataset, spec: ModelSpec, w_joint: NcoJointModel,
                      start: BaselineOutcomeModel | None = None) -> OutcomeJointModel:
    """Joint MLE of (beta^Y, beta^R) for E[Y | Z, A, X] given the fitted W contrasts."""
    what = "joint outcome model E[Y|Z,A,X]"
    start = start or fit_baseline_outcome(data, spec)
    cs = w_joint.contrasts.with_r(np.zeros((w_joint.contrasts.k, w_joint.contrasts.p_r)))
    model = OutcomeJointModel(start, cs)
    if spec.y_link == "identity":
        _, d = model.parts(data, w_joint.contrasts)
        return model.with_params(np.linalg.lstsq(d, data.y, rcond=None)[0])
    if ((data.y < 0) | (data.y > 1)).any():
        raise ValidationError(f"{what}: the logit link needs outcomes in [0, 1]")
    m = start.coef.size

    def predict(beta):
        mu, d = model.parts(data, w_joint.contrasts, beta)
        return mu[:, None], d[:, None, :]

    mask = np.r_[np.ones(m, bool), np.zeros(cs.br.size, bool)]
    names = [f"y:{t}" for t in ("(Intercept)", *start.terms)] + [f"R[{i}]" for i in range(cs.br.size)]
    beta = fisher_scoring(predict, data.y, model.params, names=names, logit_mask=mask, what=what)
    return model.with_params(beta)


# ---------------------------------------------------------------- fitting pipelines

class FitCache:
    """Shares nuisance fits between routes fitted on the same data and spec."""

    def __init__(self, data: Dataset, spec: ModelSpec, index: IndexFunctions | None = None):
        spec.validate(data.covariate_names)
        if data.n_z != data.n_w:
            raise ValidationError(
                f"the parametric estimators need |Z| = |W| (got {data.n_z} and {data.n_w}); "
                "coarsen the levels first")
        self.data, self.spec = data, spec
        self.index = index or default_index_functions(spec, data.n_z)
        self._store = {}

    def get(self, key):
        if key not in self._store:
            self._store[key] = getattr(self, f"_fit_{key}")()
        return self._store[key]

    def _fit_exposure(self):
        return fit_joint_exposure(self.data, self.spec)

    def _fit_outcome(self):
        return fit_baseline_outcome(self.data, self.spec)

    def _fit_nco(self):
        return fit_baseline_nco(self.data, self.spec)

    def _fit_w_joint(self):
        return fit_w_joint(self.data, self.spec)

    def theta(self, route: str) -> NuisanceTheta:
        d, s, k, ix = self.data, self.spec, self.data.n_z - 1, self.index
        if route == "delta1":
            ex = self.get("exposure")
            return NuisanceTheta(route, s, k, exposure=ex, contrasts=gest_r_m1(d, ex, s, ix))
        if route == "delta2":
            ex = self.get("exposure")
            return NuisanceTheta(route, s, k, exposure=ex, contrasts=gest_w_m2(d, ex, s, ix))
        if route == "delta3":
            out, wj = self.get("outcome"), self.get("w_joint")
            cs = gest_r_m3(d, out, wj.nco, wj.contrasts, ix)
            return NuisanceTheta(route, s, k, outcome=out, nco=wj.nco, contrasts=cs)
        if route == "mle":
            ex, wj = self.get("exposure"), self.get("w_joint")
            oj = fit_outcome_joint(d, s, wj, start=self.get("outcome"))
            cs = wj.contrasts.with_r(oj.contrasts.br)
            return NuisanceTheta(route, s, k, exposure=ex, outcome=oj.outcome, nco=wj.nco, contrasts=cs)
        if route == "mr":
            ex, out, nco = self.get("exposure"), self.get("outcome"), self.get("nco")
            cs = solve_w_contrasts(d, ex, nco, s, ix)
            cs = solve_r_contrast(d, ex, out, nco, cs, ix)
            return NuisanceTheta(route, s, k, exposure=ex, outcome=out, nco=nco, contrasts=cs)
        raise ValidationError(f"unknown estimator {route!r}; choose from {ROUTES}")


def fit_nuisance(data: Dataset, spec: ModelSpec, route: str = "mr",
                 index: IndexFunctions | None = None) -> NuisanceTheta:
    return FitCache(data, spec, index).theta(route)


# ---------------------------------------------------------------- influence functions

@dataclass(frozen=True, eq=False)
class EifTerms:
    """Per-observation influence-function pieces (uncentered)."""

    confounded: np.ndarray
    bias: np.ndarray
    bias_terms: tuple[np.ndarray, np.ndarray, np.ndarray]
    e_r_given_zx: np.ndarray
    e_delta_given_other_arm: np.ndarray
    pi: np.ndarray
    gamma_w: np.ndarray
    gamma_z: np.ndarray

    @property
    def eif(self) -> np.ndarray:
        return self.confounded - self.bias


def _rows(n):
    return np.arange(n)


def _check_floor(name: str, values: np.ndarray, floor: float):
    bad = np.nonzero(values < floor)[0]
    if bad.size:
        raise NumericalError(f"density floor breached: {name} < {floor} at rows "
                             f"{bad[:10].tolist()}{' ...' if bad.size > 10 else ''}")


def _exposure_pieces(f_az: np.ndarray, a: np.ndarray, zc: np.ndarray, floor: float):
    """Inverse-weight ingredients at the observed (A, Z)."""
    if f_az is None:
        raise ValidationError("this computation needs a fitted exposure model")
    n = a.shape[0]
    i = _rows(n)
    f_a_given_z = f_az / f_az.sum(axis=1, keepdims=True)
    f_z_given_a = f_az / f_az.sum(axis=2, keepdims=True)
    f_a = f_az.sum(axis=2)
    fa_zx = f_a_given_z[i, a, zc]
    fz_ax = f_z_given_a[i, a, :]
    _check_floor("f(A|Z,X)", fa_zx, floor)
    _check_floor("f(Z|A,X)", fz_ax[i, zc], floor)
    _check_floor("f(A|X)", f_a[i, a], floor)
    return {
        "fa_zx": fa_zx,
        "f_a_given_z": f_a_given_z[i, :, zc],   # (n, 2) = f(a | Z_i, X_i)
        "fz_ax": fz_ax,                          # (n, K) = f(z | A_i, X_i)
        "fz_other": f_z_given_a[i, 1 - a, :],    # (n, K) = f(z | 1-A_i, X_i)
        "ratio": f_a[i, 1 - a] / f_a[i, a],
    }


def _pi_weights(fz_ax: np.ndarray, zc: np.ndarray) -> np.ndarray:
    """Pi(Z|A,X)_j = 1(Z=z_j)/f(z_j|A,X) - 1(Z=z0)/f(z0|A,X), j = 1..k."""
    n, K = fz_ax.shape
    i = _rows(n)
    inv = np.zeros((n, K))
    inv[i, zc] = 1.0 / fz_ax[i, zc]
    return inv[:, 1:] - inv[:, :1]


def _delta_by_level(nv: NuisanceValues) -> np.ndarray:
    """delta^W(z, x_i) for every working NCE level z, shape (n, K, k)."""
    n, k = nv.base_w.shape
    out = np.repeat(nv.delta0[:, None, :], k + 1, axis=1)
    out[:, 1:, :] += np.transpose(nv.eta, (0, 2, 1))
    return out


def _ey_by_cell(nv: NuisanceValues) -> np.ndarray:
    """E[Y | a, z, x_i] from the baseline plus R xi^W Gamma_z, shape (n, 2, K)."""
    n, k = nv.base_w.shape
    out = np.empty((n, 2, k + 1))
    for a in (0, 1):
        out[:, a, 0] = nv.m_y0[:, a]
        out[:, a, 1:] = nv.m_y0[:, a, None] + np.einsum("ni,nij->nj", nv.r[:, a, :], nv.xi(np.full(n, a)))
    return out


def _ew_by_cell(nv: NuisanceValues) -> np.ndarray:
    """E[Gamma_W | a, z, x_i], shape (n, 2, K, k)."""
    n, k = nv.base_w.shape
    out = np.empty((n, 2, k + 1, k))
    for a in (0, 1):
        b = nv.base_w + a * nv.delta0
        out[:, a, 0, :] = b
        out[:, a, 1:, :] = b[:, None, :] + np.transpose(nv.xi(np.full(n, a)), (0, 2, 1))
    return out


def _batched_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if mat.shape[1] == 1:
        return rhs / mat[:, 0, :]
    return np.linalg.solve(mat, rhs[..., None])[..., 0]


def eif_terms(data: Dataset, nv: NuisanceValues, zero: Iterable[str] = (),
              floor: float = DENSITY_FLOOR) -> EifTerms:
    """Uncentered influence-function contributions, general |Z| = |W| path.

    ``zero`` may name model components to set to zero: ``m_y0``,
    ``w_model``, ``base_w``, ``r`` (nuisance functions) and ``inv_f_a``,
    ``inv_f_z`` (the inverse weights 1/f(A|Z,X) and Pi(Z|A,X)).
    """
    zero = set(zero)
    nv = nv.zeroed(*(zero & {"m_y0", "w_model", "base_w", "r"}))
    y, a, zc, gw, gz = data.y, data.a, data.zc, data.gamma_w, data.gamma_z
    n, k = gw.shape
    i = _rows(n)
    ex = _exposure_pieces(nv.f_az, a, zc, floor)
    inv_fa = np.zeros(n) if "inv_f_a" in zero else 1.0 / ex["fa_zx"]
    pi = np.zeros((n, k)) if "inv_f_z" in zero else _pi_weights(ex["fz_ax"], zc)
    sgn = 2.0 * a - 1.0

    ey = _ey_by_cell(nv)
    ew = _ew_by_cell(nv)
    delta_z = _delta_by_level(nv)
    r_a, r_other = nv.r[i, a, :], nv.r[i, 1 - a, :]

    conf = sgn * inv_fa * (y - ey[i, a, zc]) + ey[i, 1, zc] - ey[i, 0, zc]

    # E[R(1-A, X) | Z, X] = sum_a R(1-a, X) f(a | Z, X)
    e_r = nv.r[:, 1, :] * ex["f_a_given_z"][:, :1] + nv.r[:, 0, :] * ex["f_a_given_z"][:, 1:]
    t1 = sgn * inv_fa * np.einsum("nj,nj->n", e_r, gw - ew[i, a, zc, :])

    e_delta = np.einsum("nz,nzj->nj", ex["fz_other"], delta_z)
    if np.any(pi) and np.any(e_delta):
        v = _batched_solve(nv.xi(a), e_delta)
        resid = y - nv.m_y0[i, a] - np.einsum("nj,nj->n", r_a, gw - nv.base_w - a[:, None] * nv.delta0)
        t2 = resid * ex["ratio"] * np.einsum("nj,nj->n", pi, v)
    else:
        t2 = np.zeros(n)
    t3 = np.einsum("nj,nj->n", r_other, delta_z[i, zc, :])
    return EifTerms(conf, t1 + t2 + t3, (t1, t2, t3), e_r, e_delta, pi, gw, gz)


def eif_bias_binary(data: Dataset, nv: NuisanceValues, floor: float = DENSITY_FLOOR) -> np.ndarray:
    """Scalar |Z| = |W| = 2 evaluator of the bias-term influence function.

    Written with scalar weights (2Z-1)/f(Z|A,X) and the residual
    (Y - E[Y|A,Z,X]) - R(A,X)(W - E[W|A,Z,X]).
    """
    if nv.k != 1:
        raise ValidationError("the scalar evaluator needs binary Z and W")
    y, a, z, w = data.y, data.a, data.zc, data.gamma_w[:, 0]
    n = data.n
    i = _rows(n)
    f = nv.f_az
    f_z = f[i, :, z]
    fa_zx = f[i, a, z] / f_z.sum(axis=1)
    f1_zx = f[i, 1, z] / f_z.sum(axis=1)
    fz_ax = f[i, a, z] / f[i, a, :].sum(axis=1)
    fa = f.sum(axis=2)
    _check_floor("f(A|Z,X)", fa_zx, floor)
    _check_floor("f(Z|A,X)", fz_ax, floor)
    ratio = fa[i, 1 - a] / fa[i, a]
    r0, r1 = nv.r[:, 0, 0], nv.r[:, 1, 0]
    r_a = np.where(a == 1, r1, r0)
    r_other = np.where(a == 1, r0, r1)
    xi_a = nv.xi0[:, 0, 0] + a * nv.eta[:, 0, 0]
    delta_z = nv.delta0[:, 0] + z * nv.eta[:, 0, 0]
    e_w = nv.base_w[:, 0] + a * nv.delta0[:, 0] + xi_a * z
    e_y = nv.m_y0[i, a] + r_a * xi_a * z
    e_r = r0 * f1_zx + r1 * (1 - f1_zx)
    f1_other = f[i, 1 - a, 1] / f[i, 1 - a, :].sum(axis=1)
    e_delta = nv.delta0[:, 0] + nv.eta[:, 0, 0] * f1_other
    t1 = e_r * (2 * a - 1) / fa_zx * (w - e_w)
    t2 = (2 * z - 1) / fz_ax * ratio * e_delta / xi_a * ((y - e_y) - r_a * (w - e_w))
    t3 = r_other * delta_z
    return t1 + t2 + t3


def eif_confounded(data: Dataset, theta: NuisanceTheta, floor: float = DENSITY_FLOOR) -> np.ndarray:
    return eif_terms(data, theta.values(data), floor=floor).confounded


def eif_bias(data: Dataset, theta: NuisanceTheta, path: str = "auto",
             floor: float = DENSITY_FLOOR) -> np.ndarray:
    """Bias-term influence function; ``path`` is ``auto``, ``binary`` or ``general``."""
    nv = theta.values(data)
    if path == "binary" or (path == "auto" and nv.k == 1):
        return eif_bias_binary(data, nv, floor)
    if path not in ("auto", "general"):
        raise ValidationError(f"unknown path {path!r}")
    return eif_terms(data, nv, floor=floor).bias


# ---------------------------------------------------------------- estimator contributions

def _plugin_pieces(data: Dataset, nv: NuisanceValues):
    n, k = nv.base_w.shape
    ew = _ew_by_cell(nv)                                   # (n, 2, K, k)
    pw = np.empty((n, 2, k + 1, k + 1))                    # [row, a, w, z]
    pw[:, :, 1:, :] = np.transpose(ew, (0, 1, 3, 2))
    pw[:, :, 0, :] = 1.0 - ew.sum(axis=3)
    return pw, _ey_by_cell(nv)


def bridge_contributions(data: Dataset, nv: NuisanceValues) -> np.ndarray:
    """[h(1, X_i) - h(0, X_i)] P(W | X_i) from model-implied matrices."""
    from .identify import solve_bridges

    pw, ey = _plugin_pieces(data, nv)
    h = np.stack([solve_bridges(pw[:, a], ey[:, a]) for a in (0, 1)], axis=1)
    p_w_x = np.einsum("naz,nawz->nw", nv.f_az, pw)
    return np.einsum("nw,nw->n", h[:, 1] - h[:, 0], p_w_x)


def contributions(data: Dataset, theta: NuisanceTheta, route: str | None = None,
                  floor: float = DENSITY_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation (confounded, bias) contributions of an estimator.

    ``route`` defaults to the route ``theta`` was fitted for; any theta
    holding the needed components can be fed to any route.
    """
    route = route or theta.route
    nv = theta.values(data)
    y, a, zc, gw = data.y, data.a, data.zc, data.gamma_w
    n = data.n
    i = _rows(n)
    if route == "mr":
        t = eif_terms(data, nv, floor=floor)
        return t.confounded, t.bias
    if route == "delta3":
        ey = _ey_by_cell(nv)
        delta_z = _delta_by_level(nv)
        return ey[i, 1, zc] - ey[i, 0, zc], np.einsum("nj,nj->n", nv.r[i, 1 - a, :], delta_z[i, zc, :])
    ex = _exposure_pieces(nv.f_az, a, zc, floor)
    sgn = 2.0 * a - 1.0
    ipw = sgn * y / ex["fa_zx"]
    if route == "delta1":
        e_r = nv.r[:, 1, :] * ex["f_a_given_z"][:, :1] + nv.r[:, 0, :] * ex["f_a_given_z"][:, 1:]
        return ipw, sgn / ex["fa_zx"] * np.einsum("nj,nj->n", e_r, gw)
    if route == "delta2":
        e_delta = np.einsum("nz,nzj->nj", ex["fz_other"], _delta_by_level(nv))
        v = _batched_solve(nv.xi(a), e_delta)
        pi = _pi_weights(ex["fz_ax"], zc)
        return ipw, y * ex["ratio"] * np.einsum("nj,nj->n", pi, v)
    if route == "mle":
        ey = _ey_by_cell(nv)
        conf = np.einsum("naz,nz->n", nv.f_az, ey[:, 1, :] - ey[:, 0, :])
        return conf, conf - bridge_contributions(data, nv)
    raise ValidationError(f"unknown estimator {route!r}; choose from {ROUTES}")


def plugin_bias_direct(data: Dataset, theta: NuisanceTheta) -> np.ndarray:
    """sum_{a,z} f(a,z|X) R(1-a,X) delta^W(z,X): the plug-in bias term computed directly."""
    nv = theta.values(data)
    delta_z = _delta_by_level(nv)
    return sum(np.einsum("nz,nj,nzj->n", nv.f_az[:, a, :], nv.r[:, 1 - a, :], delta_z) for a in (0, 1))


# ---------------------------------------------------------------- stacked systems

def _rebuild(theta: NuisanceTheta, params) -> NuisanceTheta:
    ex, out, nco, cs = theta.exposure, theta.outcome, theta.nco, theta.contrasts
    if "alpha" in params:
        ex = ex.with_params(params["alpha"])
    if "beta_y" in params:
        out = out.with_params(params["beta_y"])
    if "beta_w0" in params:
        nco = nco.with_params(params["beta_w0"])
    if "beta_w" in params:
        cs = cs.with_w(params["beta_w"])
    if "beta_w_joint" in params:
        m = nco.params.size
        nco = nco.with_params(params["beta_w_joint"][:m])
        cs = cs.with_w(params["beta_w_joint"][m:])
    if "beta_yr_joint" in params:
        m = out.coef.size
        out = out.with_params(params["beta_yr_joint"][:m])
        cs = cs.with_r(params["beta_yr_joint"][m:])
    if "beta_r" in params:
        cs = cs.with_r(params["beta_r"])
    return replace(theta, exposure=ex, outcome=out, nco=nco, contrasts=cs)


def stacked_system(data: Dataset, theta: NuisanceTheta, index: IndexFunctions | None = None,
                   route: str | None = None, floor: float = DENSITY_FLOOR) -> StackedSystem:
    """Nuisance estimating functions of ``route`` followed by the two target means."""
    route = route or theta.route
    index = index or default_index_functions(theta.spec, data.n_z)
    th = theta
    blocks: list[EstimatingBlock] = []

    def add(name, est, fn, depends=(), jac=None):
        blocks.append(EstimatingBlock(name, est, lambda p, fn=fn: fn(_rebuild(th, p)), depends, jac))

    def add_alpha():
        add("alpha", th.exposure.params, lambda t: t.exposure.scores(data),
            jac=lambda: th.exposure.mean_score_jacobian(data))

    def add_beta_y():
        add("beta_y", th.outcome.params, lambda t: t.outcome.scores(data),
            jac=lambda: th.outcome.mean_score_jacobian(data))

    def add_w_joint():
        add("beta_w_joint", NcoJointModel(th.nco, th.contrasts).params,
            lambda t: NcoJointModel(t.nco, t.contrasts).scores(data))

    cs = th.contrasts
    if route == "mr":
        add_alpha()
        add_beta_y()
        add("beta_w0", th.nco.params, lambda t: t.nco.scores(data),
            jac=lambda: th.nco.mean_score_jacobian(data))
        add("beta_w", cs.bw.ravel(),
            lambda t: w_contrast_moments(data, t.exposure, t.nco, t.contrasts, index),
            ("alpha", "beta_w0"))
        add("beta_r", cs.br.ravel(),
            lambda t: r_contrast_moments(data, t.exposure, t.outcome, t.nco, t.contrasts, index),
            ("alpha", "beta_y", "beta_w0", "beta_w"))
    elif route == "delta1":
        add_alpha()
        add("beta_r", cs.br.ravel(), lambda t: m1_moments(data, t.exposure, t.contrasts, index),
            ("alpha",))
    elif route == "delta2":
        add_alpha()
        add("beta_w", cs.bw.ravel(), lambda t: m2_moments(data, t.exposure, t.contrasts, index),
            ("alpha",))
    elif route == "delta3":
        add_beta_y()
        add_w_joint()
        add("beta_r", cs.br.ravel(),
            lambda t: m3_moments(data, t.outcome, t.nco, t.contrasts, index),
            ("beta_y", "beta_w_joint"))
    elif route == "mle":
        add_alpha()
        add_w_joint()
        oj = OutcomeJointModel(th.outcome, cs)
        add("beta_yr_joint", oj.params,
            lambda t: OutcomeJointModel(t.outcome, t.contrasts).scores(data, t.contrasts),
            ("beta_w_joint",))
    else:
        raise ValidationError(f"unknown estimator {route!r}; choose from {ROUTES}")

    theta_names = tuple(b.name for b in blocks)
    conf, bias = contributions(data, th, route, floor)
    est = np.array([conf.mean(), bias.mean()])

    def target_psi(p):
        c, b = contributions(data, _rebuild(th, p), route, floor)
        d = p["targets"]
        return np.column_stack([c - d[0], b - d[1]])

    blocks.append(EstimatingBlock("targets", est, target_psi, theta_names, lambda: -np.eye(2)))
    return StackedSystem(blocks, data.n)


# ---------------------------------------------------------------- reports

@dataclass
class EstimateReport:
    estimator: str
    delta: float
    delta_confounded: float | None
    delta_bias: float | None
    n: int
    level: float = 0.95
    se: float | None = None
    se_confounded: float | None = None
    se_bias: float | None = None
    ci: tuple[float, float] | None = None
    ci_confounded: tuple[float, float] | None = None
    ci_bias: tuple[float, float] | None = None
    p_value: float | None = None
    theta: dict | None = field(default=None, repr=False)

    COLUMNS = ("estimator", "n", "delta", "se", "ci_lower", "ci_upper", "p_value",
               "delta_confounded", "se_confounded", "ci_confounded_lower", "ci_confounded_upper",
               "delta_bias", "se_bias", "ci_bias_lower", "ci_bias_upper", "level")

    def row(self, scale: float = 1.0) -> dict:
        s = lambda v: None if v is None else v * scale  # noqa: E731
        lo_hi = lambda ci: (None, None) if ci is None else (ci[0] * scale, ci[1] * scale)  # noqa: E731
        ci, cc, cb = lo_hi(self.ci), lo_hi(self.ci_confounded), lo_hi(self.ci_bias)
        vals = (self.estimator, self.n, s(self.delta), s(self.se), *ci, self.p_value,
                s(self.delta_confounded), s(self.se_confounded), *cc,
                s(self.delta_bias), s(self.se_bias), *cb, self.level)
        return dict(zip(self.COLUMNS, vals))

    def to_dict(self) -> dict:
        d = self.row()
        d["theta"] = self.theta
        return d


def _attach_inference(rep: EstimateReport, sw: SandwichResult, level: float):
    cov = sw.block_cov("targets")
    var_c, var_b = cov[0, 0], cov[1, 1]
    var_d = var_c + var_b - 2 * cov[0, 1]
    rep.se_confounded, rep.se_bias = math.sqrt(var_c), math.sqrt(max(var_b, 0.0))
    rep.se = math.sqrt(max(var_d, 0.0))
    rep.ci = wald_interval(rep.delta, rep.se, level)
    rep.p_value = wald_test(rep.delta, rep.se)
    rep.ci_confounded = wald_interval(rep.delta_confounded, rep.se_confounded, level)
    if rep.se_bias > 0:
        rep.ci_bias = wald_interval(rep.delta_bias, rep.se_bias, level)


def report(data: Dataset, theta: NuisanceTheta, route: str | None = None, level: float = 0.95,
           inference: bool = True, index: IndexFunctions | None = None,
           floor: float = DENSITY_FLOOR) -> EstimateReport:
    route = route or theta.route
    conf, bias = contributions(data, theta, route, floor)
    dc, db = float(conf.mean()), float(bias.mean())
    rep = EstimateReport(route, dc - db, dc, db, data.n, level, theta=theta.to_dict())
    if inference:
        sw = sandwich_variance(stacked_system(data, theta, index, route, floor))
        _attach_inference(rep, sw, level)
    return rep


def estimate_delta1(data, theta, level=0.95, inference=True, floor=DENSITY_FLOOR):
    """IPW of Y minus the weighted NCO term, with R from the exposure route."""
    return report(data, theta, "delta1", level, inference, floor=floor)


def estimate_delta2(data, theta, level=0.95, inference=True, floor=DENSITY_FLOOR):
    return report(data, theta, "delta2", level, inference, floor=floor)


def estimate_delta3(data, theta, level=0.95, inference=True, floor=DENSITY_FLOOR):
    return report(data, theta, "delta3", level, inference, floor=floor)


def estimate_plugin_mle(data, theta, level=0.95, inference=True, floor=DENSITY_FLOOR):
    """Bridge-vector plug-in with every nuisance fitted by likelihood."""
    return report(data, theta, "mle", level, inference, floor=floor)


def estimate_mr(data, theta, level=0.95, inference=True, floor=DENSITY_FLOOR):
    """P_n[conf] - P_n[bias] of the influence-function contributions."""
    return report(data, theta, "mr", level, inference, floor=floor)


def estimate(data: Dataset, spec: ModelSpec, estimators: Sequence[str] = ROUTES,
             level: float = 0.95, inference: bool = True,
             index: IndexFunctions | None = None, floor: float = DENSITY_FLOOR) -> list[EstimateReport]:
    """Fit every requested estimator, sharing nuisance fits between them."""
    unknown = [e for e in estimators if e not in ROUTES]
    if unknown:
        raise ValidationError(f"unknown estimator(s) {unknown}; choose from {ROUTES}")
    cache = FitCache(data, spec, index)
    return [report(data, cache.theta(r), r, level, inference, cache.index, floor) for r in estimators]


# ---------------------------------------------------------------- reduction identities

@dataclass
class ReductionReport:
    mr: float
    checks: dict[str, tuple[float, float]]
    tol: float

    @property
    def max_abs_diff(self) -> float:
        return max(abs(a - b) for a, b in self.checks.values())

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol


REDUCTIONS = {
    "delta1": ("m_y0", "w_model"),
    "delta2": ("m_y0", "base_w", "r"),
    "delta3": ("inv_f_a", "inv_f_z"),
}


def reduction_check(data: Dataset, theta: NuisanceTheta, tol: float = 1e-10,
                    raise_on_fail: bool = True) -> ReductionReport:
    """Zero components of the multiply robust estimator and compare with the
    separately coded single-model estimators fed the same theta."""
    nv = theta.values(data)
    mr = float(eif_terms(data, nv).eif.mean())
    checks = {"none": (mr, float(np.mean(np.subtract(*contributions(data, theta, "mr")))))}
    for route, zero in REDUCTIONS.items():
        zeroed = float(eif_terms(data, nv, zero).eif.mean())
        c, b = contributions(data, theta, route)
        checks[route] = (zeroed, float(c.mean() - b.mean()))
    rep = ReductionReport(mr, checks, tol)
    if raise_on_fail and not rep.passed:
        raise NumericalError(f"reduction identity mismatch {rep.max_abs_diff:.3g} > {tol}")
    return rep
