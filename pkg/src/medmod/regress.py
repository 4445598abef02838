"""Ordinary least squares with coefficient inference.

The pieces here are deliberately small: an immutable :class:`DataTable`, a
:class:`ModelFormula` made of main-effect and product terms, and
:func:`fit_ols`, which solves the least-squares problem through a QR
factorisation and reports t tests for every coefficient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.special import betainc

from .errors import (
    FormulaError,
    InvalidData,
    InvalidDf,
    MissingTerm,
    RankDeficient,
    TooFewRows,
    UnknownColumn,
)

RANK_TOL = 1e-10


class DataTable:
    """Named numeric columns of equal length.

    Columns are stored as read-only float64 arrays; operations that modify
    data return a new table.
    """

    __slots__ = ("_cols",)

    def __init__(self, columns: Union[Mapping[str, Sequence[float]], Iterable]):
        items = columns.items() if isinstance(columns, Mapping) else columns
        cols = {}
        n = None
        for name, values in items:
            name = str(name)
            if name in cols:
                raise InvalidData(f"duplicate column name {name!r}")
            arr = np.array(values, dtype=float).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise InvalidData(f"column {name!r} contains non-finite values")
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise InvalidData(
                    f"column {name!r} has length {arr.size}, expected {n}"
                )
            arr.setflags(write=False)
            cols[name] = arr
        if not cols:
            raise InvalidData("a DataTable needs at least one column")
        if n < 1:
            raise InvalidData("a DataTable needs at least one row")
        self._cols = cols

    @property
    def names(self) -> tuple:
        return tuple(self._cols)

    @property
    def n(self) -> int:
        return next(iter(self._cols.values())).size

    def __len__(self):
        return self.n

    def __contains__(self, name):
        return name in self._cols

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._cols[name]
        except KeyError:
            raise UnknownColumn(f"unknown column {name!r}") from None

    def __eq__(self, other):
        if not isinstance(other, DataTable):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self._cols[k], other._cols[k]) for k in self.names
        )

    def __repr__(self):
        return f"DataTable(n={self.n}, columns={list(self.names)})"

    def to_dict(self) -> dict:
        return {k: v.copy() for k, v in self._cols.items()}

    def with_columns(self, **columns) -> "DataTable":
        """Return a table with the given columns replaced or appended."""
        merged = dict(self._cols)
        merged.update(columns)
        return DataTable(merged)

    def select(self, names: Sequence[str]) -> "DataTable":
        return DataTable({k: self[k] for k in names})

    def take(self, rows) -> "DataTable":
        """Return the rows at ``rows`` (an index array), in that order."""
        rows = np.asarray(rows)
        return DataTable({k: v[rows] for k, v in self._cols.items()})

    @classmethod
    def from_csv(cls, path, columns: Sequence[str] | None = None) -> "DataTable":
        """Read a comma-separated file with a header row.

        Only ``columns`` are parsed when given; every parsed cell must be a
        number. Missing cells are rejected rather than imputed.
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise InvalidData(f"{path}: empty file") from None
            rows = list(reader)
        wanted = list(header) if columns is None else list(columns)
        for name in wanted:
            if name not in header:
                raise UnknownColumn(f"{path}: no column named {name!r}")
        idx = {name: header.index(name) for name in wanted}
        data = {name: [] for name in wanted}
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            for name, j in idx.items():
                cell = row[j].strip() if j < len(row) else ""
                if cell == "":
                    raise InvalidData(f"{path}:{lineno}: missing value in {name!r}")
                try:
                    value = float(cell)
                except ValueError:
                    raise InvalidData(
                        f"{path}:{lineno}: non-numeric value {cell!r} in {name!r}"
                    ) from None
                data[name].append(value)
        if not data[wanted[0]]:
            raise InvalidData(f"{path}: no data rows")
        return cls(data)


@dataclass(frozen=True)
class Main:
    """A main-effect term."""

    name: str

    @property
    def label(self) -> str:
        return self.name

    @property
    def factors(self) -> tuple:
        return (self.name,)


@dataclass(frozen=True, eq=False)
class Product:
    """Elementwise product of two columns.

    ``Product("z", "x")`` and ``Product("x", "z")`` compare equal.
    """

    left: str
    right: str

    @property
    def label(self) -> str:
        return f"{self.left}:{self.right}"

    @property
    def factors(self) -> tuple:
        return (self.left, self.right)

    def __eq__(self, other):
        if not isinstance(other, Product):
            return NotImplemented
        return sorted(self.factors) == sorted(other.factors)

    def __hash__(self):
        return hash(("Product",) + tuple(sorted(self.factors)))


Term = Union[Main, Product]


def parse_term(text: str) -> Term:
    parts = [p.strip() for p in text.replace("*", ":").split(":")]
    if len(parts) == 1 and parts[0]:
        return Main(parts[0])
    if len(parts) == 2 and all(parts):
        return Product(parts[0], parts[1])
    raise FormulaError(f"cannot parse term {text!r}")


@dataclass(frozen=True)
class ModelFormula:
    response: str
    terms: tuple
    intercept: bool = True

    def __post_init__(self):
        terms = tuple(parse_term(t) if isinstance(t, str) else t for t in self.terms)
        if len(set(terms)) != len(terms):
            raise FormulaError(f"duplicate terms in formula for {self.response!r}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def parse(cls, text: str) -> "ModelFormula":
        """Parse ``"y ~ x + z + z:x"``; a ``- 1`` term drops the intercept."""
        if "~" not in text:
            raise FormulaError(f"formula {text!r} has no '~'")
        lhs, rhs = text.split("~", 1)
        intercept = True
        terms = []
        for piece in rhs.replace("-", "+-").split("+"):
            piece = piece.strip()
            if not piece:
                continue
            if piece in ("-1", "- 1"):
                intercept = False
            elif piece == "1":
                continue
            else:
                terms.append(parse_term(piece))
        return cls(lhs.strip(), tuple(terms), intercept)

    @property
    def labels(self) -> tuple:
        out = ("(Intercept)",) if self.intercept else ()
        return out + tuple(t.label for t in self.terms)

    def columns_used(self) -> set:
        used = {self.response}
        for t in self.terms:
            used.update(t.factors)
        return used

    def __str__(self):
        rhs = " + ".join(t.label for t in self.terms) or "1"
        if not self.intercept:
            rhs += " - 1"
        return f"{self.response} ~ {rhs}"


def _ordered_terms(formula: ModelFormula) -> list:
    # mains first, then products, each group in formula order
    mains = [t for t in formula.terms if isinstance(t, Main)]
    prods = [t for t in formula.terms if isinstance(t, Product)]
    return mains + prods


def build_design(data: DataTable, formula: ModelFormula):
    """Assemble the design matrix for ``formula``.

    Returns ``(X, labels, terms)``. Column order is intercept, main effects,
    then products. Products are computed from whatever main columns are in
    ``data``, so centring the mains first yields products of centred
    variables.
    """
    for name in sorted(formula.columns_used()):
        data[name]  # raises UnknownColumn
    terms = _ordered_terms(formula)
    cols = []
    labels = []
    if formula.intercept:
        cols.append(np.ones(data.n))
        labels.append("(Intercept)")
    for t in terms:
        if isinstance(t, Main):
            cols.append(np.asarray(data[t.name], dtype=float))
        else:
            cols.append(data[t.left] * data[t.right])
        labels.append(t.label)
    if cols:
        X = np.column_stack(cols)
    else:
        X = np.empty((data.n, 0))
    return X, tuple(labels), ((None,) if formula.intercept else ()) + tuple(terms)


def mean_center(data: DataTable, names: Sequence[str]) -> DataTable:
    """Subtract the sample mean from each of ``names``."""
    updates = {}
    for name in names:
        col = data[name]
        updates[name] = col - col.mean()
    return data.with_columns(**updates)


def two_sided_p(t, df):
    """Two-sided p-value of a Student t statistic.

    Uses ``P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)``. Accepts scalars or
    arrays for ``t``; ``df`` must be at least 1.
    """
    df = np.asarray(df, dtype=float)
    if np.any(df < 1) or np.any(~np.isfinite(df)):
        raise InvalidDf(f"degrees of freedom must be >= 1, got {df}")
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        xval = df / (df + t * t)
    xval = np.where(np.isinf(t), 0.0, xval)
    p = betainc(df / 2.0, 0.5, xval)
    p = np.clip(p, 0.0, 1.0)
    if p.ndim == 0:
        return float(p)
    return p


@dataclass(frozen=True)
class TermEstimate:
    term: str
    estimate: float
    se: float
    t: float
    p: float


@dataclass(frozen=True)
class RegressionFit:
    """Result of one OLS fit.

    Coefficients can be looked up by label (``fit["z:x"]``) or by term object;
    product lookups ignore factor order.
    """

    formula: ModelFormula
    labels: tuple
    terms: tuple
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    sigma2: float
    df_resid: int
    r_squared: float
    n: int
    rss: float = field(repr=False, default=0.0)

    def index(self, key) -> int:
        if isinstance(key, str):
            if key in self.labels:
                return self.labels.index(key)
            key = parse_term(key) if key != "(Intercept)" else None
        if key is None:
            if self.formula.intercept:
                return 0
        else:
            for i, term in enumerate(self.terms):
                if term is not None and term == key:
                    return i
        raise MissingTerm(f"term {key!r} not in fit of {self.formula}")

    def __getitem__(self, key) -> TermEstimate:
        i = self.index(key)
        return TermEstimate(
            self.labels[i],
            float(self.coef[i]),
            float(self.se[i]),
            float(self.t[i]),
            float(self.p[i]),
        )

    def __contains__(self, key):
        try:
            self.index(key)
        except KeyError:
            return False
        return True

    @property
    def records(self) -> list:
        return [self[i_label] for i_label in self.labels]

    def to_dict(self) -> dict:
        return {
            "formula": str(self.formula),
            "n": self.n,
            "df_resid": self.df_resid,
            "sigma2": self.sigma2,
            "r_squared": self.r_squared,
            "coefficients": [
                {
                    "term": r.term,
                    "estimate": r.estimate,
                    "se": r.se,
                    "t": r.t,
                    "p": r.p,
                }
                for r in self.records
            ],
        }


def fit_ols(data: DataTable, formula: Union[ModelFormula, str]) -> RegressionFit:
    """Least-squares fit of ``formula`` on ``data``.

    Raises
    ------
    UnknownColumn
        A referenced column is missing.
    TooFewRows
        ``n <= k``; at least one residual degree of freedom is required.
    RankDeficient
        Some design column is (numerically) a combination of the others.
    """
    if isinstance(formula, str):
        formula = ModelFormula.parse(formula)
    X, labels, terms = build_design(data, formula)
    y = np.asarray(data[formula.response], dtype=float)
    n, k = X.shape
    if k == 0:
        raise FormulaError("formula has no intercept and no terms")
    if n <= k:
        raise TooFewRows(f"{n} rows for {k} design columns in {formula}")
    if any(isinstance(t, Main) and t.name == formula.response for t in terms):
        raise RankDeficient(f"response {formula.response!r} appears as a regressor")
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.max() == 0.0 or np.any(diag < RANK_TOL * diag.max()):
        bad = [labels[i] for i in np.flatnonzero(diag < RANK_TOL * max(diag.max(), 1e-300))]
        raise RankDeficient(f"collinear design in {formula}; dependent column(s): {bad}")
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    df_resid = n - k
    sigma2 = rss / df_resid
    Rinv = np.linalg.inv(R)
    se = np.sqrt(sigma2 * np.sum(Rinv * Rinv, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    t = np.where(np.isnan(t), 0.0, t)
    p = np.atleast_1d(two_sided_p(t, df_resid))
    if formula.intercept:
        tss = float(np.sum((y - y.mean()) ** 2))
    else:
        tss = float(y @ y)
    r2 = 0.0 if tss == 0.0 else min(max(1.0 - rss / tss, 0.0), 1.0)
    return RegressionFit(
        formula=formula,
        labels=labels,
        terms=terms,
        coef=coef,
        se=se,
        t=t,
        p=p,
        sigma2=sigma2,
        df_resid=df_resid,
        r_squared=r2,
        n=n,
        rss=rss,
    )

