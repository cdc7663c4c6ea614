"""Datasets, categorical codings, model specifications and CSV ingestion."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

TREATMENT_TOKEN = "A"
_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class CategoricalCoding:
    """Ordered level labels plus the index of the reference level."""

    levels: tuple[str, ...]
    reference: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if not self.levels:
            raise ValidationError("a coding needs at least one level")
        if len(set(self.levels)) != len(self.levels):
            raise ValidationError(f"duplicate levels in coding {self.levels}")
        if not 0 <= self.reference < len(self.levels):
            raise ValidationError(
                f"reference index {self.reference} out of range for {len(self.levels)} levels")

    @property
    def size(self) -> int:
        return len(self.levels)

    @property
    def order(self) -> tuple[int, ...]:
        """Level indices in working order: the reference first, the rest as listed."""
        rest = [i for i in range(self.size) if i != self.reference]
        return (self.reference, *rest)

    @cached_property
    def to_working(self) -> np.ndarray:
        """Map from level index to working index (reference -> 0)."""
        out = np.empty(self.size, dtype=np.int64)
        out[list(self.order)] = np.arange(self.size)
        return out

    def with_reference(self, label: str) -> "CategoricalCoding":
        try:
            return CategoricalCoding(self.levels, self.levels.index(str(label)))
        except ValueError:
            raise ValidationError(f"reference level {label!r} not among {self.levels}") from None

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "reference": self.reference}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoricalCoding":
        return cls(tuple(d["levels"]), int(d.get("reference", 0)))


@dataclass(frozen=True)
class ObservedSample:
    y: float
    a: int
    z: int
    w: int
    x: tuple[float, ...]


def _readonly(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable observed data (Y, A, Z, W, X).

    ``z`` and ``w`` hold indices into ``z_coding.levels`` and
    ``w_coding.levels``; :attr:`zc` and :attr:`wc` give the working
    indices in which the reference level is 0.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    z_coding: CategoricalCoding
    w_coding: CategoricalCoding
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = _readonly(self.y, float)
        n = y.shape[0] if y.ndim == 1 else -1
        if y.ndim != 1 or n < 1:
            raise ValidationError("a dataset needs at least one observation")
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1 and x.size == 0:
            x = np.zeros((n, 0))
        names = tuple(str(c) for c in self.covariate_names)
        if x.shape != (n, len(names)):
            raise ValidationError(
                f"covariate matrix has shape {x.shape}, expected ({n}, {len(names)})")
        if TREATMENT_TOKEN in names:
            raise ValidationError(f"covariate name {TREATMENT_TOKEN!r} is reserved for the treatment")
        arrays = {"y": y, "a": _readonly(self.a, np.int64), "z": _readonly(self.z, np.int64),
                  "w": _readonly(self.w, np.int64), "x": _readonly(x, float)}
        for key in ("a", "z", "w"):
            if arrays[key].shape != (n,):
                raise ValidationError(f"column {key} has {arrays[key].shape[0]} rows, expected {n}")
        if not np.isin(arrays["a"], (0, 1)).all():
            raise ValidationError("non-binary treatment: A must be 0 or 1")
        for key, coding in (("z", self.z_coding), ("w", self.w_coding)):
            v = arrays[key]
            if v.min() < 0 or v.max() >= coding.size:
                raise ValidationError(f"{key} index outside its coding of {coding.size} levels")
        if not (np.isfinite(y).all() and np.isfinite(arrays["x"]).all()):
            raise ValidationError("non-finite values in Y or covariates")
        for key, val in arrays.items():
            object.__setattr__(self, key, val)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> list[ObservedSample]:
        return [ObservedSample(float(self.y[i]), int(self.a[i]), int(self.z[i]), int(self.w[i]),
                               tuple(float(v) for v in self.x[i])) for i in range(self.n)]

    @classmethod
    def from_samples(cls, samples: Sequence[ObservedSample], z_coding: CategoricalCoding,
                     w_coding: CategoricalCoding, covariate_names: Sequence[str]) -> "Dataset":
        if not samples:
            raise ValidationError("a dataset needs at least one observation")
        p = len(covariate_names)
        if any(len(s.x) != p for s in samples):
            raise ValidationError(f"every sample needs {p} covariates")
        return cls(y=[s.y for s in samples], a=[s.a for s in samples], z=[s.z for s in samples],
                   w=[s.w for s in samples], x=np.array([s.x for s in samples], float).reshape(-1, p),
                   z_coding=z_coding, w_coding=w_coding, covariate_names=tuple(covariate_names))

    @cached_property
    def _designs(self) -> dict:
        return {}

    @cached_property
    def zc(self) -> np.ndarray:
        return self.z_coding.to_working[self.z]

    @cached_property
    def wc(self) -> np.ndarray:
        return self.w_coding.to_working[self.w]

    @property
    def n_z(self) -> int:
        return self.z_coding.size

    @property
    def n_w(self) -> int:
        return self.w_coding.size

    @cached_property
    def gamma_z(self) -> np.ndarray:
        """Indicators of the non-reference NCE levels, shape (n, |Z|-1)."""
        return indicator_matrix(self.zc, self.n_z)

    @cached_property
    def gamma_w(self) -> np.ndarray:
        """Indicators of the non-reference NCO levels, shape (n, |W|-1)."""
        return indicator_matrix(self.wc, self.n_w)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.x[:, self.covariate_names.index(name)]
        except ValueError:
            raise ValidationError(f"unknown covariate {name!r}") from None

    def take(self, idx) -> "Dataset":
        """Row subset (or resample, when ``idx`` repeats rows)."""
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.w[idx], self.x[idx],
                       self.z_coding, self.w_coding, self.covariate_names)

    def replace(self, **changes) -> "Dataset":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return Dataset(**kw)

    def with_reference(self, z_ref: str | None = None, w_ref: str | None = None) -> "Dataset":
        zc = self.z_coding.with_reference(z_ref) if z_ref is not None else self.z_coding
        wc = self.w_coding.with_reference(w_ref) if w_ref is not None else self.w_coding
        return self.replace(z_coding=zc, w_coding=wc)


def indicator_matrix(codes: np.ndarray, size: int) -> np.ndarray:
    """One-hot columns for working codes 1..size-1 (reference code 0 dropped)."""
    out = np.zeros((codes.shape[0], size - 1))
    rows = np.nonzero(codes > 0)[0]
    out[rows, codes[rows] - 1] = 1.0
    return out


# ---------------------------------------------------------------- terms

def parse_term(term: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in str(term).split("*"))
    if not parts or any(not p for p in parts):
        raise ValidationError(f"malformed term {term!r}")
    return parts


def _check_terms(terms: Iterable[str], names: Sequence[str], allow_treatment: bool, block: str):
    for term in terms:
        for factor in parse_term(term):
            if factor == TREATMENT_TOKEN:
                if not allow_treatment:
                    raise ValidationError(f"term {term!r} in block {block!r} may not involve the treatment")
            elif factor not in names:
                raise ValidationError(f"unknown covariate {factor!r} in term {term!r} (block {block!r})")


def build_design(sample: ObservedSample, terms: Sequence[str],
                 covariate_names: Sequence[str] | None = None) -> np.ndarray:
    """Design vector ``[1, t1(x), t2(x), ...]`` for one sample.

    Without ``covariate_names`` the covariates are called X1, X2, ...
    """
    names = list(covariate_names) if covariate_names is not None else [
        f"X{i + 1}" for i in range(len(sample.x))]
    values = dict(zip(names, sample.x))
    values[TREATMENT_TOKEN] = float(sample.a)
    out = [1.0]
    for term in terms:
        prod = 1.0
        for factor in parse_term(term):
            if factor not in values:
                raise ValidationError(f"unknown covariate {factor!r} in term {term!r}")
            prod *= values[factor]
        out.append(prod)
    return np.array(out)


def design_matrix(data: Dataset, terms: Sequence[str], a=None) -> np.ndarray:
    """Design matrix with an intercept column; ``a`` overrides the treatment column.

    Results for the observed or a constant treatment are memoized on the
    dataset and returned read-only.
    """
    if a is None or np.ndim(a) == 0:
        key = (tuple(terms), None if a is None else float(a))
        cache = data._designs
        if key not in cache:
            mat = _build_matrix(data, terms, a)
            mat.flags.writeable = False
            cache[key] = mat
        return cache[key]
    return _build_matrix(data, terms, a)


def _build_matrix(data: Dataset, terms: Sequence[str], a) -> np.ndarray:
    n = data.n
    out = np.empty((n, len(terms) + 1))
    out[:, 0] = 1.0
    treat = data.a.astype(float) if a is None else np.broadcast_to(np.asarray(a, float), (n,))
    for j, term in enumerate(terms, start=1):
        col = np.ones(n)
        for factor in parse_term(term):
            col = col * (treat if factor == TREATMENT_TOKEN else data.column(factor))
        out[:, j] = col
    return out


def uses_treatment(terms: Sequence[str]) -> bool:
    return any(TREATMENT_TOKEN in parse_term(t) for t in terms)


# ---------------------------------------------------------------- model spec

BLOCKS = ("az", "a", "z", "y", "w0", "wa", "wz", "waz", "r")
_TREATMENT_OK = {"z", "y", "r"}


def _tuple_or_none(v):
    return None if v is None else tuple(str(t) for t in v)


@dataclass(frozen=True)
class ModelSpec:
    """Term lists for every working model; an intercept is always implied.

    exposure
        ``"joint"``: one multinomial logit over the 2|Z| (A, Z) cells using
        ``az``; ``"factorized"``: logistic A|X on ``a`` times multinomial
        Z|A,X on ``z`` (which may contain ``A``).
    y, y_link
        Baseline outcome E[Y | Z=z0, A, X]; ``y`` may contain ``A``.
    w0
        Baseline NCO probabilities at A=0, Z=z0.
    wa, wz, waz
        Covariate terms of the A contrast at z0, the Z contrasts at A=0 and
        the A x Z interaction. ``waz=None`` removes the interaction.
    r
        Terms of R(A, X); may contain ``A``.
    """

    exposure: str = "joint"
    az: tuple[str, ...] = ()
    a: tuple[str, ...] = ()
    z: tuple[str, ...] = ()
    y: tuple[str, ...] = (TREATMENT_TOKEN,)
    y_link: str = "logit"
    w0: tuple[str, ...] = ()
    wa: tuple[str, ...] = ()
    wz: tuple[str, ...] = ()
    waz: tuple[str, ...] | None = ()
    r: tuple[str, ...] = (TREATMENT_TOKEN,)

    def __post_init__(self):
        for b in BLOCKS:
            object.__setattr__(self, b, _tuple_or_none(getattr(self, b)))
            if b != "waz" and getattr(self, b) is None:
                raise ValidationError(f"block {b!r} needs a term list")
        if self.exposure not in ("joint", "factorized"):
            raise ValidationError(f"exposure must be 'joint' or 'factorized', got {self.exposure!r}")
        if self.y_link not in ("logit", "identity"):
            raise ValidationError(f"y_link must be 'logit' or 'identity', got {self.y_link!r}")
        if self.waz is not None:
            extra = set(self.waz) - (set(self.wa) & set(self.wz))
            if extra:
                raise ValidationError(
                    f"interaction terms {sorted(extra)} must appear in both the wa and wz lists")

    def validate(self, covariate_names: Sequence[str]) -> "ModelSpec":
        for b in BLOCKS:
            terms = getattr(self, b)
            if terms is not None:
                _check_terms(terms, covariate_names, b in _TREATMENT_OK, b)
        return self

    def replace(self, **changes) -> "ModelSpec":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return ModelSpec(**kw)

    @property
    def has_interaction(self) -> bool:
        return self.waz is not None

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model-spec keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def saturated(cls, covariate_names: Sequence[str], exposure: str = "joint",
                  y_link: str = "logit") -> "ModelSpec":
        """Every product of the (binary) covariates, with full A interactions
        where the treatment may appear."""
        x_terms = tuple("*".join(c) for r in range(1, len(covariate_names) + 1)
                        for c in itertools.combinations(covariate_names, r))
        with_a = (TREATMENT_TOKEN, *x_terms, *(f"{TREATMENT_TOKEN}*{t}" for t in x_terms))
        return cls(exposure=exposure, az=x_terms, a=x_terms, z=with_a, y=with_a, y_link=y_link,
                   w0=x_terms, wa=x_terms, wz=x_terms, waz=x_terms, r=with_a)


# ---------------------------------------------------------------- CSV

@dataclass(frozen=True)
class ColumnSchema:
    """Which CSV columns play which role."""

    outcome: str
    treatment: str
    nce: str
    nco: str
    covariates: tuple[str, ...] = ()
    z_ref: str | None = None
    w_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


def _parse_float(cell: str, row: int, col: str) -> float:
    if cell.strip().lower() in _MISSING:
        raise ValidationError(f"missing value at row {row}, column {col!r}")
    try:
        v = float(cell)
    except ValueError:
        raise ValidationError(f"unparseable cell {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"non-finite value {cell!r} at row {row}, column {col!r}")
    return v


def load_dataset(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Rows are numbered from 1 for the first data row. NCE and NCO levels are
    sorted lexicographically; the first level is the reference unless the
    schema names another.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"empty file {path}")
        header = [h.strip() for h in header]
        rows = list(reader)
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"file {path} has a header but no data rows")
    needed = [schema.outcome, schema.treatment, schema.nce, schema.nco, *schema.covariates]
    missing = [c for c in needed if c not in header]
    if missing:
        raise ValidationError(f"missing column(s) {missing} in {path}")
    pos = {c: header.index(c) for c in needed}

    def cell(r, i, col):
        try:
            return r[pos[col]].strip()
        except IndexError:
            raise ValidationError(f"row {i} is too short: no value for column {col!r}") from None

    y, a, zl, wl, x = [], [], [], [], []
    for i, r in enumerate(rows, start=1):
        y.append(_parse_float(cell(r, i, schema.outcome), i, schema.outcome))
        av = _parse_float(cell(r, i, schema.treatment), i, schema.treatment)
        if av not in (0.0, 1.0):
            raise ValidationError(
                f"non-binary treatment: value {cell(r, i, schema.treatment)!r} at row {i}, "
                f"column {schema.treatment!r}")
        a.append(int(av))
        for col, store in ((schema.nce, zl), (schema.nco, wl)):
            v = cell(r, i, col)
            if v.lower() in _MISSING:
                raise ValidationError(f"missing value at row {i}, column {col!r}")
            store.append(v)
        x.append([_parse_float(cell(r, i, c), i, c) for c in schema.covariates])

    def coding(labels, ref):
        c = CategoricalCoding(tuple(sorted(set(labels))))
        return c.with_reference(ref) if ref is not None else c

    zcod, wcod = coding(zl, schema.z_ref), coding(wl, schema.w_ref)
    zi = {lab: i for i, lab in enumerate(zcod.levels)}
    wi = {lab: i for i, lab in enumerate(wcod.levels)}
    return Dataset(y=y, a=a, z=[zi[v] for v in zl], w=[wi[v] for v in wl],
                   x=np.array(x, float).reshape(len(rows), len(schema.covariates)),
                   z_coding=zcod, w_coding=wcod, covariate_names=schema.covariates)


def write_dataset(data: Dataset, path: str | Path, names: Sequence[str] = ("Y", "A", "Z", "W")) -> ColumnSchema:
    """Write ``data`` as CSV; returns the schema that reloads it."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow([*names, *data.covariate_names])
        for i in range(data.n):
            out.writerow([repr(float(data.y[i])), int(data.a[i]), data.z_coding.levels[data.z[i]],
                          data.w_coding.levels[data.w[i]], *(repr(float(v)) for v in data.x[i])])
    return ColumnSchema(*names, covariates=data.covariate_names,
                        z_ref=data.z_coding.levels[data.z_coding.reference],
                        w_ref=data.w_coding.levels[data.w_coding.reference])
