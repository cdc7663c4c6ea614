"""Exact identification on finite laws and saturated empirical laws.

Indexing conventions: NCE and NCO levels are in working order (reference
first). Matrices P(W | Z, a, x) have NCO levels as rows and NCE levels as
columns, so a bridge row vector h(a, x) solves E[Y | Z, a, x] = h P.
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CategoricalCoding, Dataset, ModelSpec
from .errors import NumericalError, ValidationError

RANK_TOL = 1e-8
BRIDGE_RESID_TOL = 1e-8
BRIDGE_COND_LIMIT = 1e12
GMM_RIDGE = 1e-10
LAW_SCHEMA = "negctrl-law/1"


# ---------------------------------------------------------------- laws

def _normalized(arr, axis, what):
    arr = np.asarray(arr, float)
    if (arr < 0).any():
        raise ValidationError(f"{what} has negative entries")
    sums = arr.sum(axis=axis)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValidationError(f"{what} does not sum to one (max deviation {np.abs(sums - 1).max():.3g})")
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Finite joint law of (X, U, A, Z, W, Y) with latent U.

    p_x (nx,), p_u_given_x (nx, nu), p_az_given_ux (nx, nu, 2, nz),
    ey_given_aux (nx, 2, nu) = E[Y | a, u, x] and p_w_given_ux (nx, nu, nw).
    W and (A, Z) are independent given (U, X) and E[Y] does not depend on Z
    given (A, U, X) by construction.
    """

    p_x: np.ndarray
    p_u_given_x: np.ndarray
    p_az_given_ux: np.ndarray
    ey_given_aux: np.ndarray
    p_w_given_ux: np.ndarray
    x_values: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("p_x", _normalized(self.p_x, 0, "P(x)"))
        nx = self.p_x.shape[0]
        set_("p_u_given_x", _normalized(self.p_u_given_x, 1, "P(u|x)"))
        set_("p_az_given_ux", _normalized(self.p_az_given_ux, (2, 3), "P(a,z|u,x)"))
        set_("p_w_given_ux", _normalized(self.p_w_given_ux, 2, "P(w|u,x)"))
        set_("ey_given_aux", np.asarray(self.ey_given_aux, float))
        nu = self.p_u_given_x.shape[1]
        nz, nw = self.p_az_given_ux.shape[3], self.p_w_given_ux.shape[2]
        shapes = {"p_u_given_x": (nx, nu), "p_az_given_ux": (nx, nu, 2, nz),
                  "ey_given_aux": (nx, 2, nu), "p_w_given_ux": (nx, nu, nw)}
        for key, shape in shapes.items():
            if getattr(self, key).shape != shape:
                raise ValidationError(f"{key} has shape {getattr(self, key).shape}, expected {shape}")
        if self.x_values is not None:
            xv = np.asarray(self.x_values, float).reshape(nx, -1)
            set_("x_values", xv)
            names = tuple(self.covariate_names) or tuple(f"X{i + 1}" for i in range(xv.shape[1]))
            if len(names) != xv.shape[1]:
                raise ValidationError("covariate_names does not match x_values")
            set_("covariate_names", names)

    @property
    def sizes(self) -> dict:
        nx, nu, _, nz = self.p_az_given_ux.shape
        return {"x": nx, "u": nu, "z": nz, "w": self.p_w_given_ux.shape[2]}

    def latent_ate(self) -> float:
        diff = self.ey_given_aux[:, 1, :] - self.ey_given_aux[:, 0, :]
        return float(np.einsum("x,xu,xu->", self.p_x, self.p_u_given_x, diff))

    def observed(self) -> "ObservedLaw":
        return ObservedLaw.from_latent(self)

    @classmethod
    def random(cls, rng: np.random.Generator, n_u: int, n_z: int, n_w: int, n_x: int = 2,
               floor: float = 0.05, max_cond: float = 1e4) -> "DiscreteLaw":
        """A random law with full-rank factors and every probability table
        entry at least ``floor`` (when the table is small enough to allow it)."""

        def table(shape):
            m = shape[-1] if not isinstance(shape[-1], tuple) else None
            raw = rng.dirichlet(np.ones(m), size=shape[:-1])
            fl = floor if floor * m < 1 else 0.5 / m
            return fl + (1 - fl * m) * raw

        for _ in range(1000):
            p_w = table((n_x, n_u, n_w))
            p_az = table((n_x, n_u, 2 * n_z)).reshape(n_x, n_u, 2, n_z)
            ok = all(np.linalg.cond(p_w[x].T) < max_cond for x in range(n_x))
            if ok and n_u > 1:
                for x in range(n_x):
                    for a in range(2):
                        pz = p_az[x, :, a, :]          # rows u, cols z
                        ok = ok and np.linalg.cond(pz) < max_cond
            if ok:
                break
        else:
            raise NumericalError("could not draw a well-conditioned random law")
        return cls(table((n_x,)), table((n_x, n_u)), p_az,
                   rng.uniform(0.05, 0.95, size=(n_x, 2, n_u)), p_w)

    def to_dict(self) -> dict:
        d = {"schema": LAW_SCHEMA, "p_x": self.p_x.tolist(), "p_u_given_x": self.p_u_given_x.tolist(),
             "p_az_given_ux": self.p_az_given_ux.tolist(), "ey_given_aux": self.ey_given_aux.tolist(),
             "p_w_given_ux": self.p_w_given_ux.tolist()}
        if self.x_values is not None:
            d["x_values"] = self.x_values.tolist()
            d["covariate_names"] = list(self.covariate_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteLaw":
        if d.get("schema", LAW_SCHEMA) != LAW_SCHEMA:
            raise ValidationError(f"unsupported law schema {d.get('schema')!r}")
        try:
            return cls(d["p_x"], d["p_u_given_x"], d["p_az_given_ux"], d["ey_given_aux"],
                       d["p_w_given_ux"], d.get("x_values"), tuple(d.get("covariate_names", ())))
        except KeyError as exc:
            raise ValidationError(f"law document lacks field {exc.args[0]!r}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DiscreteLaw":
        return cls.from_dict(read_json(path))


def read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path} at line {exc.lineno}, column {exc.colno}: "
                              f"{exc.msg}") from None


@dataclass(frozen=True, eq=False)
class ObservedLaw:
    """Observed-data law over cells (x, a, z, w): joint mass and E[Y | cell]."""

    p_xazw: np.ndarray
    ey_xazw: np.ndarray
    x_values: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    @classmethod
    def from_latent(cls, law: DiscreteLaw) -> "ObservedLaw":
        joint_u = np.einsum("x,xu,xuaz,xuw->xazwu", law.p_x, law.p_u_given_x,
                            law.p_az_given_ux, law.p_w_given_ux)
        p = joint_u.sum(axis=4)
        ey = np.einsum("xazwu,xau->xazw", joint_u, law.ey_given_aux) / p
        return cls(p, ey, law.x_values, law.covariate_names)

    @classmethod
    def from_dataset(cls, data: Dataset) -> "ObservedLaw":
        """Empirical law; covariate rows are the x cells (sorted unique rows)."""
        xv, xi = np.unique(data.x, axis=0, return_inverse=True)
        xi = np.asarray(xi).reshape(-1)
        shape = (xv.shape[0], 2, data.n_z, data.n_w)
        flat = np.ravel_multi_index((xi, data.a, data.zc, data.wc), shape)
        size = int(np.prod(shape))
        counts = np.bincount(flat, minlength=size).reshape(shape)
        sums = np.bincount(flat, weights=data.y, minlength=size).reshape(shape)
        ey = np.divide(sums, counts, out=np.zeros(shape), where=counts > 0)
        return cls(counts / data.n, ey, xv, data.covariate_names)

    @property
    def shape(self):
        return self.p_xazw.shape

    @property
    def p_x(self) -> np.ndarray:
        return self.p_xazw.sum(axis=(1, 2, 3))

    @property
    def p_az_given_x(self) -> np.ndarray:
        return self.p_xazw.sum(axis=3) / self.p_x[:, None, None]

    def _cell_mass(self):
        m = self.p_xazw.sum(axis=3)
        if (m <= 0).any():
            x, a, z = map(int, np.argwhere(m <= 0)[0])
            raise NumericalError(f"empty cell: no mass at x={x}, a={a}, z={z}")
        return m

    @property
    def p_w_given_azx(self) -> np.ndarray:
        """P(w | a, z, x), indexed [x, a, z, w]."""
        return self.p_xazw / self._cell_mass()[..., None]

    @property
    def ey_given_azx(self) -> np.ndarray:
        return (self.p_xazw * self.ey_xazw).sum(axis=3) / self._cell_mass()

    def matrices(self) -> "ObservedLawMatrices":
        pw = np.transpose(self.p_w_given_azx, (0, 1, 3, 2))           # [x, a, w, z]
        p_w_x = self.p_xazw.sum(axis=(1, 2)) / self.p_x[:, None]
        return ObservedLawMatrices(pw, self.ey_given_azx, p_w_x, self.p_az_given_x, self.p_x)

    def nuisance_values(self, x_index: np.ndarray):
        """Exact nuisance functions at the given x cells (needs |Z| = |W|)."""
        from .estimators import NuisanceValues

        nx, _, nz, nw = self.shape
        if nz != nw:
            raise ValidationError("reparameterized quantities need |Z| = |W|")
        pw = self.p_w_given_azx[:, :, :, 1:]                # [x, a, z, i]
        ey = self.ey_given_azx                              # [x, a, z]
        xi = np.transpose(pw[:, :, 1:, :] - pw[:, :, :1, :], (0, 1, 3, 2))   # [x, a, i, j]
        xi_y = ey[:, :, 1:] - ey[:, :, :1]                  # [x, a, j]
        _check_xi(xi)
        r = np.linalg.solve(np.transpose(xi, (0, 1, 3, 2)), xi_y[..., None])[..., 0]
        xs = np.asarray(x_index)
        return NuisanceValues(
            f_az=self.p_az_given_x[xs], m_y0=ey[xs][:, :, 0], base_w=pw[xs, 0, 0, :],
            delta0=pw[xs, 1, 0, :] - pw[xs, 0, 0, :], xi0=xi[xs, 0], eta=xi[xs, 1] - xi[xs, 0],
            r=r[xs])

    def cell_dataset(self):
        """Every positive-mass (x, a, z, w) cell as one row, Y set to E[Y | cell].

        Returns (dataset, weights, x_index). Weighted means over the rows are
        exact expectations of any function linear in Y.
        """
        idx = np.argwhere(self.p_xazw > 0)
        x, a, z, w = idx.T
        nz, nw = self.shape[2], self.shape[3]
        if self.x_values is not None:
            xv, names = self.x_values[x], self.covariate_names
        else:
            xv, names = x[:, None].astype(float), ("xcell",)
        data = Dataset(self.ey_xazw[x, a, z, w], a, z, w, xv,
                       CategoricalCoding(tuple(f"z{i}" for i in range(nz))),
                       CategoricalCoding(tuple(f"w{i}" for i in range(nw))), names)
        return data, self.p_xazw[x, a, z, w], x


def _check_xi(xi):
    sv = np.linalg.svd(xi, compute_uv=False)
    if (sv[..., -1] < 1e-12).any():
        raise NumericalError("singular xi^W(a,x): the NCE does not shift the NCO distribution "
                             "in some (a, x) stratum")


@dataclass(frozen=True, eq=False)
class ObservedLawMatrices:
    """Per-(x, a) matrices: pw [x, a, w, z], ey [x, a, z], p_w_x [x, w], p_az_x [x, a, z], p_x."""

    pw: np.ndarray
    ey: np.ndarray
    p_w_x: np.ndarray
    p_az_x: np.ndarray
    p_x: np.ndarray


def observed_matrices(law: DiscreteLaw | ObservedLaw | Dataset) -> ObservedLawMatrices:
    return _as_observed(law).matrices()


def _as_observed(obj) -> ObservedLaw:
    if isinstance(obj, ObservedLaw):
        return obj
    if isinstance(obj, DiscreteLaw):
        return obj.observed()
    if isinstance(obj, Dataset):
        return ObservedLaw.from_dataset(obj)
    raise ValidationError(f"expected a law or dataset, got {type(obj).__name__}")


# ---------------------------------------------------------------- rank and bridges

def numerical_rank(mat: np.ndarray, tol: float = RANK_TOL) -> int:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int((sv > tol * sv[0]).sum())


def infer_latent_cardinality(m: ObservedLawMatrices, tol: float = RANK_TOL) -> int:
    """Largest numerical rank of P(W | Z, a, x) over all (a, x)."""
    if not np.any(m.pw):
        raise ValidationError("all-zero conditional probability matrices")
    ranks = [numerical_rank(m.pw[x, a], tol) for x in range(m.pw.shape[0]) for a in (0, 1)]
    return max(ranks)


@dataclass(frozen=True)
class BridgeVector:
    h: np.ndarray
    method: str
    residual: float


def solve_bridge(m: ObservedLawMatrices, a: int, x: int, tol: float = RANK_TOL) -> BridgeVector:
    """Solve E[Y | Z, a, x] = h P(W | Z, a, x) for the row vector h."""
    p, ey = m.pw[x, a], m.ey[x, a]
    if p.shape[0] == p.shape[1] and numerical_rank(p, tol) == p.shape[0]:
        h, method = np.linalg.solve(p.T, ey), "inverse"
    else:
        h, method = ey @ np.linalg.pinv(p, rcond=tol), "pseudoinverse"
    resid = float(np.max(np.abs(ey - h @ p)))
    if resid > BRIDGE_RESID_TOL:
        raise NumericalError(
            f"inconsistent bridge system at a={a}, x={x} (residual {resid:.3g}); "
            "the negative-control assumptions fail in the input law")
    return BridgeVector(h, method, resid)


def solve_bridges(pw: np.ndarray, ey: np.ndarray) -> np.ndarray:
    """Batched square solves h_i P_i = ey_i, with a 1-norm conditioning guard."""
    if pw.shape[1:] == (2, 2):
        det = pw[:, 0, 0] * pw[:, 1, 1] - pw[:, 0, 1] * pw[:, 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.stack([np.stack([pw[:, 1, 1], -pw[:, 0, 1]], -1),
                            np.stack([-pw[:, 1, 0], pw[:, 0, 0]], -1)], 1) / det[:, None, None]
    else:
        try:
            inv = np.linalg.inv(pw)
        except np.linalg.LinAlgError:
            inv = None
    if inv is not None:
        norm1 = lambda m: np.abs(m).sum(axis=1).max(axis=1)  # noqa: E731
        cond = norm1(pw) * norm1(inv)
    if inv is None or not np.isfinite(cond).all() or (cond > BRIDGE_COND_LIMIT).any():
        bad = np.linalg.cond(pw)
        rows = np.nonzero(~np.isfinite(bad) | (bad > BRIDGE_COND_LIMIT))[0][:10]
        raise NumericalError(f"singular model-implied P(W|Z,a,x) at rows {rows.tolist()}")
    return np.einsum("nz,nzw->nw", ey, inv)


@dataclass(frozen=True)
class IdentificationResult:
    delta: float
    ey1: float
    ey0: float
    bridges: dict = field(repr=False, default_factory=dict)


def ate_by_identification(obj, tol: float = RANK_TOL) -> IdentificationResult:
    """E[Y(a)] = sum_x h(a, x) P(W | x) P(x) for a law, observed law or saturated dataset."""
    m = obj if isinstance(obj, ObservedLawMatrices) else observed_matrices(obj)
    ey = [0.0, 0.0]
    bridges = {}
    for x in range(m.pw.shape[0]):
        if m.p_x[x] <= 0:
            continue
        for a in (0, 1):
            b = solve_bridge(m, a, x, tol)
            bridges[(a, x)] = b
            ey[a] += float(b.h @ m.p_w_x[x]) * m.p_x[x]
    return IdentificationResult(ey[1] - ey[0], ey[1], ey[0], bridges)


@dataclass(frozen=True)
class ReparameterizedAte:
    delta: float
    delta_confounded: float
    delta_bias: float


def ate_by_reparameterization(obj) -> ReparameterizedAte:
    """Delta = E[delta^Y(Z, X)] - E[R(1-A, X) delta^W(Z, X)]."""
    law = _as_observed(obj)
    nx = law.shape[0]
    nv = law.nuisance_values(np.arange(nx))
    pw = law.p_w_given_azx[:, :, :, 1:]
    ey = law.ey_given_azx
    delta_y = ey[:, 1, :] - ey[:, 0, :]                     # [x, z]
    delta_w = pw[:, 1, :, :] - pw[:, 0, :, :]               # [x, z, i]
    p_xaz = law.p_xazw.sum(axis=3)
    conf = float(np.einsum("xaz,xz->", p_xaz, delta_y))
    bias = float(sum(np.einsum("xz,xi,xzi->", p_xaz[:, a, :], nv.r[:, 1 - a, :], delta_w)
                     for a in (0, 1)))
    return ReparameterizedAte(conf - bias, conf, bias)


# ---------------------------------------------------------------- coarsening and GMM

def set_partitions(n: int, blocks: int) -> list[tuple[int, ...]]:
    """All partitions of range(n) into exactly ``blocks`` blocks, as restricted
    growth strings (block labels in order of first appearance)."""
    out = []

    def grow(prefix, used):
        if len(prefix) == n:
            if used == blocks:
                out.append(tuple(prefix))
            return
        if blocks - used > n - len(prefix):
            return
        for b in range(min(used + 1, blocks)):
            grow(prefix + [b], max(used, b + 1))

    grow([], 0)
    return out


@dataclass(frozen=True)
class Coarsening:
    """Block index of every original level (in coding order) for Z and W."""

    z_map: tuple[int, ...]
    w_map: tuple[int, ...]


def enumerate_coarsenings(z_coding: CategoricalCoding, w_coding: CategoricalCoding,
                          target: int) -> list[Coarsening]:
    if target < 1 or target > min(z_coding.size, w_coding.size):
        raise ValidationError(f"target {target} exceeds the available levels "
                              f"(|Z|={z_coding.size}, |W|={w_coding.size})")
    return [Coarsening(zm, wm) for zm, wm in itertools.product(
        set_partitions(z_coding.size, target), set_partitions(w_coding.size, target))]


def _coarse_coding(coding: CategoricalCoding, mapping: Sequence[int]):
    nb = max(mapping) + 1
    labels = tuple("|".join(coding.levels[i] for i in range(coding.size) if mapping[i] == b)
                   for b in range(nb))
    return CategoricalCoding(labels, mapping[coding.reference])


def coarsen(data: Dataset, c: Coarsening) -> Dataset:
    zm, wm = np.asarray(c.z_map), np.asarray(c.w_map)
    if zm.size != data.n_z or wm.size != data.n_w:
        raise ValidationError("coarsening does not match the dataset codings")
    return data.replace(z=zm[data.z], w=wm[data.w], z_coding=_coarse_coding(data.z_coding, c.z_map),
                        w_coding=_coarse_coding(data.w_coding, c.w_map))


@dataclass
class GmmResult:
    delta: float
    se: float | None
    weights: np.ndarray
    per_coarsening: list[float]
    first_step: float


def gmm_combine(data: Dataset, spec: ModelSpec, coarsenings: Sequence[Coarsening],
                estimator_kind: str = "mr", inference: bool = True) -> GmmResult:
    """Two-step GMM over the influence-function moments of several coarsenings."""
    from .estimators import FitCache, contributions, stacked_system
    from .inference import sandwich_variance

    if not coarsenings:
        raise ValidationError("at least one coarsening is required")
    phis, infl = [], []
    for c in coarsenings:
        d = coarsen(data, c)
        try:
            theta = FitCache(d, spec).theta(estimator_kind)
            conf, bias = contributions(d, theta, estimator_kind)
        except NumericalError as exc:
            raise NumericalError(f"coarsening Z{c.z_map} W{c.w_map}: {exc}") from exc
        phis.append(conf - bias)
        if inference:
            sw = sandwich_variance(stacked_system(d, theta, route=estimator_kind))
            s = sw.slices["targets"]
            infl.append(sw.influence[:, s.start] - sw.influence[:, s.start + 1])
    phi = np.column_stack(phis)
    est = phi.mean(axis=0)
    m = est.size
    first = float(est.mean())
    g = phi - first
    omega = g.T @ g / data.n
    try:
        if np.linalg.cond(omega) > 1e14:
            raise np.linalg.LinAlgError
        w_hat = np.linalg.inv(omega)
    except np.linalg.LinAlgError:
        warnings.warn("singular GMM weight matrix; adding a ridge of 1e-10", RuntimeWarning, stacklevel=2)
        w_hat = np.linalg.inv(omega + GMM_RIDGE * np.eye(m))
    ones = np.ones(m)
    weights = w_hat @ ones / (ones @ w_hat @ ones)
    delta = float(weights @ est)
    se = None
    if inference:
        psi = np.column_stack(infl) @ weights
        se = float(np.sqrt(np.mean(psi ** 2) / data.n))
    return GmmResult(delta, se, weights, est.tolist(), first)
