"""Contrast parameters without a likelihood: doubly robust g-estimation.

Conventions, with k = |Z|-1 = |W|-1 and Gamma_Z, Gamma_W the indicator
vectors of the non-reference levels:

* E[Gamma_W | A, Z, X] = base(X) + delta0(X) A + xi0(X) Gamma_Z + A eta(X) Gamma_Z
  where base is the (A=0, Z=z0) baseline, delta0 a k-vector and xi0, eta
  are k x k matrices (rows: NCO levels, columns: NCE levels);
* xi^W(a, x) = xi0(x) + a eta(x) and delta^W(z, x) = delta0(x) + eta(x) Gamma_z;
* R(a, x) is a row k-vector with linear entries R_j = d_r(a, x) . br_j.

The W-contrast coefficients of NCO level i are stored as row ``bw[i]``,
laid out as [delta0 terms | xi0 terms for z_1..z_k | eta terms for z_1..z_k],
which is also the column layout of :meth:`ContrastSet.design`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, ModelSpec, design_matrix, indicator_matrix
from .errors import NumericalError, ValidationError
from .nuisance import (BaselineNcoModel, BaselineOutcomeModel, JointExposureModel,
                       categorical_score_parts, fisher_scoring, fit_baseline_nco, softmax_parts)

XI_SINGULAR_TOL = 1e-6
SOLVE_COND_LIMIT = 1e12

IndexFn = Callable[[Dataset, np.ndarray, np.ndarray], np.ndarray]


def _gamma(zc, k: int, n: int) -> np.ndarray:
    zc = np.broadcast_to(np.asarray(zc, np.int64), (n,))
    return indicator_matrix(zc, k + 1)


def _kron_rows(g: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: column j*d.shape[1] + l holds g_j d_l."""
    return (g[:, :, None] * d[:, None, :]).reshape(g.shape[0], -1)


@dataclass(frozen=True, eq=False)
class ContrastSet:
    """W contrasts (``bw``) and the ratio R (``br``); either may be absent."""

    k: int
    wa: tuple[str, ...]
    wz: tuple[str, ...]
    waz: tuple[str, ...] | None
    r: tuple[str, ...]
    bw: np.ndarray | None = None
    br: np.ndarray | None = None

    @classmethod
    def empty(cls, spec: ModelSpec, k: int) -> "ContrastSet":
        return cls(k, spec.wa, spec.wz, spec.waz, spec.r)

    # -- layout
    @property
    def p_wa(self) -> int:
        return len(self.wa) + 1

    @property
    def p_wz(self) -> int:
        return len(self.wz) + 1

    @property
    def p_waz(self) -> int:
        return 0 if self.waz is None else len(self.waz) + 1

    @property
    def p_r(self) -> int:
        return len(self.r) + 1

    @property
    def q(self) -> int:
        return self.p_wa + self.k * (self.p_wz + self.p_waz)

    def with_w(self, bw) -> "ContrastSet":
        bw = np.asarray(bw, float).reshape(self.k, self.q)
        return ContrastSet(self.k, self.wa, self.wz, self.waz, self.r, bw, self.br)

    def with_r(self, br) -> "ContrastSet":
        br = np.asarray(br, float).reshape(self.k, self.p_r)
        return ContrastSet(self.k, self.wa, self.wz, self.waz, self.r, self.bw, br)

    # -- designs
    def design(self, data: Dataset, a, zc) -> np.ndarray:
        """Gradient of the W-contrast mean with respect to one row of ``bw``."""
        n, k = data.n, self.k
        a = np.broadcast_to(np.asarray(a, float), (n,))
        gz = _gamma(zc, k, n)
        parts = [a[:, None] * design_matrix(data, self.wa),
                 _kron_rows(gz, design_matrix(data, self.wz))]
        if self.waz is not None:
            parts.append(a[:, None] * _kron_rows(gz, design_matrix(data, self.waz)))
        return np.hstack(parts)

    def r_design(self, data: Dataset, a=None) -> np.ndarray:
        return design_matrix(data, self.r, a=a)

    # -- evaluators
    def _require(self, which):
        if getattr(self, which) is None:
            raise ValidationError(f"contrast block {which} has not been estimated")

    def delta0(self, data: Dataset) -> np.ndarray:
        self._require("bw")
        return design_matrix(data, self.wa) @ self.bw[:, :self.p_wa].T

    def xi0(self, data: Dataset) -> np.ndarray:
        self._require("bw")
        k, s = self.k, self.p_wa
        block = self.bw[:, s:s + k * self.p_wz].reshape(k, k, self.p_wz)
        return np.einsum("nl,ijl->nij", design_matrix(data, self.wz), block)

    def eta(self, data: Dataset) -> np.ndarray:
        self._require("bw")
        k = self.k
        if self.waz is None:
            return np.zeros((data.n, k, k))
        s = self.p_wa + k * self.p_wz
        block = self.bw[:, s:].reshape(k, k, self.p_waz)
        return np.einsum("nl,ijl->nij", design_matrix(data, self.waz), block)

    def xi_w(self, data: Dataset, a) -> np.ndarray:
        """xi^W(a, x_i), shape (n, k, k)."""
        a = np.broadcast_to(np.asarray(a, float), (data.n,))
        return self.xi0(data) + a[:, None, None] * self.eta(data)

    def delta_w(self, data: Dataset, zc) -> np.ndarray:
        """delta^W(z, x_i), shape (n, k)."""
        gz = _gamma(zc, self.k, data.n)
        return self.delta0(data) + np.einsum("nij,nj->ni", self.eta(data), gz)

    def eta_w(self, data: Dataset) -> np.ndarray:
        return self.eta(data)

    def r_values(self, data: Dataset, a=None) -> np.ndarray:
        """R(a, x_i), shape (n, k)."""
        self._require("br")
        return self.r_design(data, a) @ self.br.T

    def to_dict(self) -> dict:
        return {"k": self.k, "wa": list(self.wa), "wz": list(self.wz),
                "waz": None if self.waz is None else list(self.waz), "r": list(self.r),
                "bw": None if self.bw is None else self.bw.tolist(),
                "br": None if self.br is None else self.br.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ContrastSet":
        arr = lambda v: None if v is None else np.array(v, float)  # noqa: E731
        return cls(int(d["k"]), tuple(d["wa"]), tuple(d["wz"]),
                   None if d["waz"] is None else tuple(d["waz"]), tuple(d["r"]),
                   arr(d["bw"]), arr(d["br"]))


# ---------------------------------------------------------------- index functions

@dataclass(frozen=True)
class IndexFunctions:
    """Index functions g0, g1, h1, h2, h3, each mapping (data, a, z) to (n, dim)."""

    g0: IndexFn
    g1: IndexFn
    h1: IndexFn
    h2: IndexFn
    h3: IndexFn
    dim_w: int
    dim_r: int


def default_index_functions(spec: ModelSpec, n_z: int = 2) -> IndexFunctions:
    """Model-gradient index functions giving square linear systems."""
    k = n_z - 1
    cs = ContrastSet.empty(spec, k)

    def g_w(data, a, zc):
        return cs.design(data, a, zc)

    def g_r(data, a, zc):
        return _kron_rows(_gamma(zc, k, data.n), cs.r_design(data, a))

    # beta^WA holds delta0 and eta, beta^WZ holds xi0 and eta; eta is shared.
    dim_wa = cs.p_wa + k * cs.p_waz
    dim_wz = k * (cs.p_wz + cs.p_waz)
    dim_w = dim_wa + dim_wz - k * cs.p_waz
    if dim_w != cs.q:
        raise ValidationError(f"index dimension {dim_w} does not match the contrast model ({cs.q})")
    return IndexFunctions(g0=g_w, g1=g_r, h1=g_r, h2=g_w, h3=g_r, dim_w=cs.q, dim_r=k * cs.p_r)


def center_given_x(fn: IndexFn, data: Dataset, f_az: np.ndarray) -> np.ndarray:
    """E[fn(A, Z, X) | X] as an exact sum over the (a, z) cells."""
    out = 0.0
    for a in (0, 1):
        for z in range(f_az.shape[2]):
            out = out + f_az[:, a, z, None] * fn(data, a, z)
    return out


def center_given_ax(fn: IndexFn, data: Dataset, f_az: np.ndarray) -> np.ndarray:
    """E[fn(A, Z, X) | A, X] at the observed A."""
    fz = f_az[np.arange(data.n), data.a, :]
    fz = fz / fz.sum(axis=1, keepdims=True)
    out = 0.0
    for z in range(f_az.shape[2]):
        out = out + fz[:, z, None] * fn(data, data.a, z)
    return out


def _solve(m: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"{what}: index functions give {m.shape[0]} equations "
                              f"for {m.shape[1]} parameters")
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > SOLVE_COND_LIMIT:
        raise NumericalError(f"{what}: singular estimating-equation system "
                             f"(condition number {cond:.3g}); index functions may be collinear")
    return np.linalg.solve(m, rhs)


def check_xi_invertible(cs: ContrastSet, data: Dataset, raise_error: bool = False) -> float:
    """Smallest singular value of xi^W(a, x_i) over rows and arms."""
    smin = np.inf
    for a in (0, 1):
        sv = np.linalg.svd(cs.xi_w(data, a), compute_uv=False)
        smin = min(smin, float(sv[:, -1].min()))
    if smin < XI_SINGULAR_TOL:
        msg = (f"xi^W(a,x) is nearly singular (smallest singular value {smin:.3g}); "
               "the NCE/NCO pair may be too weakly associated for identification")
        if raise_error:
            raise NumericalError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return smin


# ---------------------------------------------------------------- residual pieces

def _w_baseline_resid(data: Dataset, nco: BaselineNcoModel, cs: ContrastSet) -> np.ndarray:
    """Gamma_W - E[Gamma_W | Z=z0, A, X]."""
    return data.gamma_w - nco.predict(data) - data.a[:, None] * cs.delta0(data)


def _r_design_times(data: Dataset, cs: ContrastSet, e: np.ndarray) -> np.ndarray:
    """Design of R(A,X) e with respect to vec(br)."""
    return _kron_rows(e, cs.r_design(data))


# ---------------------------------------------------------------- doubly robust solves

def w_contrast_moments(data: Dataset, exposure: JointExposureModel, nco: BaselineNcoModel,
                       cs: ContrastSet, index: IndexFunctions) -> np.ndarray:
    """Per-observation W-contrast estimating functions, shape (n, k*q)."""
    f = exposure.cell_probs(data)
    gc = index.g0(data, data.a, data.zc) - center_given_x(index.g0, data, f)
    resid = data.gamma_w - nco.predict(data) - cs.design(data, data.a, data.zc) @ cs.bw.T
    return _kron_rows(resid, gc)


def solve_w_contrasts(data: Dataset, exposure: JointExposureModel, nco: BaselineNcoModel,
                      spec: ModelSpec, index: IndexFunctions | None = None) -> ContrastSet:
    """Doubly robust g-estimation of the W contrasts, one linear solve per NCO level."""
    _check_square(data)
    cs = ContrastSet.empty(spec, data.n_z - 1)
    index = index or default_index_functions(spec, data.n_z)
    f = exposure.cell_probs(data)
    gc = index.g0(data, data.a, data.zc) - center_given_x(index.g0, data, f)
    g = cs.design(data, data.a, data.zc)
    target = data.gamma_w - nco.predict(data)
    b = _solve(gc.T @ g / data.n, gc.T @ target / data.n, "W-contrast g-estimation")
    return cs.with_w(b.T)


def r_contrast_moments(data: Dataset, exposure: JointExposureModel, outcome: BaselineOutcomeModel,
                       nco: BaselineNcoModel, cs: ContrastSet, index: IndexFunctions) -> np.ndarray:
    f = exposure.cell_probs(data)
    gc = index.g1(data, data.a, data.zc) - center_given_ax(index.g1, data, f)
    e = _w_baseline_resid(data, nco, cs)
    resid = data.y - outcome.predict(data) - np.einsum("nj,nj->n", cs.r_values(data), e)
    return gc * resid[:, None]


def solve_r_contrast(data: Dataset, exposure: JointExposureModel, outcome: BaselineOutcomeModel,
                     nco: BaselineNcoModel, cs: ContrastSet,
                     index: IndexFunctions | None = None) -> ContrastSet:
    """Doubly robust g-estimation of R(A, X) given the fitted W contrasts."""
    index = index or _index_for(cs, data)
    f = exposure.cell_probs(data)
    gc = index.g1(data, data.a, data.zc) - center_given_ax(index.g1, data, f)
    d = _r_design_times(data, cs, _w_baseline_resid(data, nco, cs))
    br = _solve(gc.T @ d / data.n, gc.T @ (data.y - outcome.predict(data)) / data.n,
                "R g-estimation")
    out = cs.with_r(br)
    check_xi_invertible(out, data)
    return out


def _index_for(cs: ContrastSet, data: Dataset) -> IndexFunctions:
    spec = ModelSpec(wa=cs.wa, wz=cs.wz, waz=cs.waz, r=cs.r)
    return default_index_functions(spec, data.n_z)


def _check_square(data: Dataset):
    if data.n_z != data.n_w:
        raise ValidationError(
            f"the parametric estimators need |Z| = |W| (got {data.n_z} and {data.n_w}); "
            "coarsen the levels first")
    if data.n_z < 2:
        raise ValidationError("the NCE and NCO need at least two levels")


# ---------------------------------------------------------------- single-model routes

def m1_moments(data: Dataset, exposure: JointExposureModel, cs: ContrastSet,
               index: IndexFunctions) -> np.ndarray:
    f = exposure.cell_probs(data)
    hc = index.h1(data, data.a, data.zc) - center_given_ax(index.h1, data, f)
    resid = data.y - np.einsum("nj,nj->n", cs.r_values(data), data.gamma_w)
    return hc * resid[:, None]


def gest_r_m1(data: Dataset, exposure: JointExposureModel, spec: ModelSpec,
              index: IndexFunctions | None = None) -> ContrastSet:
    """R(A, X) from residual Y - R(A,X) Gamma_W with exposure-centered h1."""
    _check_square(data)
    cs = ContrastSet.empty(spec, data.n_z - 1)
    index = index or default_index_functions(spec, data.n_z)
    f = exposure.cell_probs(data)
    hc = index.h1(data, data.a, data.zc) - center_given_ax(index.h1, data, f)
    d = _r_design_times(data, cs, data.gamma_w)
    br = _solve(hc.T @ d / data.n, hc.T @ data.y / data.n, "R g-estimation (exposure route)")
    return cs.with_r(br)


def m2_moments(data: Dataset, exposure: JointExposureModel, cs: ContrastSet,
               index: IndexFunctions) -> np.ndarray:
    f = exposure.cell_probs(data)
    hc = index.h2(data, data.a, data.zc) - center_given_x(index.h2, data, f)
    resid = data.gamma_w - cs.design(data, data.a, data.zc) @ cs.bw.T
    return _kron_rows(resid, hc)


def gest_w_m2(data: Dataset, exposure: JointExposureModel, spec: ModelSpec,
              index: IndexFunctions | None = None) -> ContrastSet:
    """W contrasts from residual Gamma_W - contrasts, centered at E[h2 | X]."""
    _check_square(data)
    cs = ContrastSet.empty(spec, data.n_z - 1)
    index = index or default_index_functions(spec, data.n_z)
    f = exposure.cell_probs(data)
    hc = index.h2(data, data.a, data.zc) - center_given_x(index.h2, data, f)
    g = cs.design(data, data.a, data.zc)
    b = _solve(hc.T @ g / data.n, hc.T @ data.gamma_w / data.n,
               "W-contrast g-estimation (exposure route)")
    return cs.with_w(b.T)


def m3_moments(data: Dataset, outcome: BaselineOutcomeModel, nco: BaselineNcoModel,
               cs: ContrastSet, index: IndexFunctions) -> np.ndarray:
    h = index.h3(data, data.a, data.zc)
    e = _w_baseline_resid(data, nco, cs)
    resid = data.y - outcome.predict(data) - np.einsum("nj,nj->n", cs.r_values(data), e)
    return h * resid[:, None]


def gest_r_m3(data: Dataset, outcome: BaselineOutcomeModel, nco: BaselineNcoModel,
              cs: ContrastSet, index: IndexFunctions | None = None) -> ContrastSet:
    """R(A, X) from the outcome-model residual, with uncentered h3."""
    index = index or _index_for(cs, data)
    h = index.h3(data, data.a, data.zc)
    d = _r_design_times(data, cs, _w_baseline_resid(data, nco, cs))
    br = _solve(h.T @ d / data.n, h.T @ (data.y - outcome.predict(data)) / data.n,
                "R g-estimation (outcome route)")
    return cs.with_r(br)


# ---------------------------------------------------------------- joint NCO likelihood

@dataclass(frozen=True, eq=False)
class NcoJointModel:
    """P(W | A, Z, X): softmax baseline plus additive linear contrasts."""

    nco: BaselineNcoModel
    contrasts: ContrastSet

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.nco.params, self.contrasts.bw.ravel()])

    def with_params(self, v) -> "NcoJointModel":
        m = self.nco.params.size
        return NcoJointModel(self.nco.with_params(v[:m]), self.contrasts.with_w(v[m:]))

    def parts(self, data: Dataset, base_coef=None, bw=None):
        base_coef = self.nco.coef if base_coef is None else base_coef
        bw = self.contrasts.bw if bw is None else bw
        k, q = bw.shape
        x0 = design_matrix(data, self.nco.terms)
        p0, d0 = softmax_parts(x0, base_coef)
        g = self.contrasts.design(data, data.a, data.zc)
        p = p0 + g @ bw.T
        dg = np.zeros((data.n, k, k * q))
        for i in range(k):
            dg[:, i, i * q:(i + 1) * q] = g
        return p, np.concatenate([d0, dg], axis=2)

    def scores(self, data: Dataset) -> np.ndarray:
        p, d = self.parts(data)
        return categorical_score_parts(p, d, data.gamma_w, False)[0]


def fit_w_joint(data: Dataset, spec: ModelSpec) -> NcoJointModel:
    """Joint MLE of P(W | A, Z, X) under the additive contrast parameterization."""
    _check_square(data)
    nco = fit_baseline_nco(data, spec)
    cs = ContrastSet.empty(spec, data.n_z - 1)
    cs = cs.with_w(np.zeros((cs.k, cs.q)))
    model = NcoJointModel(nco, cs)
    m = nco.params.size
    shape = nco.coef.shape

    def predict(beta):
        return model.parts(data, beta[:m].reshape(shape), beta[m:].reshape(cs.k, cs.q))

    names = [f"base[{i}]" for i in range(m)] + [f"contrast[{i}]" for i in range(cs.k * cs.q)]
    mask = np.r_[np.ones(m, bool), np.zeros(cs.k * cs.q, bool)]
    beta = fisher_scoring(predict, data.gamma_w, model.params, names=names, logit_mask=mask,
                          what="joint NCO model P(W|A,Z,X)")
    return model.with_params(beta)

