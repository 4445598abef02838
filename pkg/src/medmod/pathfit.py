"""Maximum-likelihood fitting of recursive path models over observed variables.

A :class:`PathModel` is a set of linear equations ``v = B v + e`` among
observed variables. Variables that never appear as a response form the
exogenous block; their variances are free and so are the covariances listed
in ``exo_cov``. Each endogenous variable has one free residual variance. The
implied covariance is ``Sigma = A Psi A'`` with ``A = (I - B)^-1``.

Fitting minimises the ML discrepancy

    F = ln|Sigma| + tr(S Sigma^-1) - ln|S| - p

with a BFGS iteration on the free parameters (variances on the log scale).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaincc

from .errors import DimensionMismatch, NonConvergence, SingularImplied, ZeroDf
from .regress import DataTable, mean_center


@dataclass(frozen=True)
class PathModel:
    observed: tuple
    equations: tuple
    exo_cov: tuple | None = None
    name: str = "model"

    def __post_init__(self):
        observed = tuple(self.observed)
        eqs = tuple((r, tuple(regs)) for r, regs in self.equations)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "equations", eqs)
        if len(set(observed)) != len(observed):
            raise ValueError("duplicate observed variable")
        responses = [r for r, _ in eqs]
        if len(set(responses)) != len(responses):
            raise ValueError("a variable may be the response of only one equation")
        for r, regs in eqs:
            for v in (r,) + regs:
                if v not in observed:
                    raise ValueError(f"{v!r} is not an observed variable")
            if r in regs:
                raise ValueError(f"{r!r} regressed on itself")
        self._check_acyclic()
        exo = self.exogenous
        if self.exo_cov is None:
            pairs = tuple(itertools.combinations(exo, 2))
        else:
            pairs = tuple(tuple(p) for p in self.exo_cov)
            for a, b in pairs:
                if a not in exo or b not in exo or a == b:
                    raise ValueError(f"covariance ({a}, {b}) is not between two exogenous variables")
        object.__setattr__(self, "exo_cov", pairs)
        if self.n_params > self.n_moments:
            raise ValueError(f"{self.n_params} free parameters exceed {self.n_moments} moments")

    def _check_acyclic(self):
        deps = {r: set(regs) for r, regs in self.equations}
        seen, done = set(), set()

        def visit(v):
            if v in done:
                return
            if v in seen:
                raise ValueError(f"equations contain a cycle through {v!r}")
            seen.add(v)
            for u in deps.get(v, ()):
                visit(u)
            done.add(v)

        for v in deps:
            visit(v)

    @property
    def p(self) -> int:
        return len(self.observed)

    @property
    def endogenous(self) -> tuple:
        return tuple(r for r, _ in self.equations)

    @property
    def exogenous(self) -> tuple:
        endo = set(self.endogenous)
        return tuple(v for v in self.observed if v not in endo)

    @property
    def n_moments(self) -> int:
        return self.p * (self.p + 1) // 2

    @property
    def param_names(self) -> tuple:
        names = []
        for r, regs in self.equations:
            names += [f"{r}<-{v}" for v in regs]
        names += [f"var({v})" for v in self.exogenous]
        names += [f"cov({a},{b})" for a, b in self.exo_cov]
        names += [f"resvar({r})" for r in self.endogenous]
        return tuple(names)

    @property
    def n_params(self) -> int:
        return sum(len(regs) for _, regs in self.equations) + len(self.exogenous) + len(self.exo_cov) + len(self.endogenous)

    @property
    def df(self) -> int:
        return self.n_moments - self.n_params

    @property
    def n_coef(self) -> int:
        return sum(len(regs) for _, regs in self.equations)

    def variance_mask(self) -> np.ndarray:
        """True for parameters that are variances (optimised on the log scale)."""
        k = self.n_coef
        ne, nc = len(self.exogenous), len(self.exo_cov)
        mask = np.zeros(self.n_params, dtype=bool)
        mask[k : k + ne] = True
        mask[k + ne + nc :] = True
        return mask

    # -- structure ------------------------------------------------------
    def _index(self):
        return {v: i for i, v in enumerate(self.observed)}

    def unpack(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise DimensionMismatch(
                f"{self.name}: expected {self.n_params} parameters, got shape {params.shape}"
            )
        idx = self._index()
        p = self.p
        B = np.zeros((p, p))
        Psi = np.zeros((p, p))
        k = 0
        for r, regs in self.equations:
            for v in regs:
                B[idx[r], idx[v]] = params[k]
                k += 1
        for v in self.exogenous:
            Psi[idx[v], idx[v]] = params[k]
            k += 1
        for a, b in self.exo_cov:
            Psi[idx[a], idx[b]] = Psi[idx[b], idx[a]] = params[k]
            k += 1
        for r in self.endogenous:
            Psi[idx[r], idx[r]] = params[k]
            k += 1
        return B, Psi

    def start_values(self, S) -> np.ndarray:
        """Equation-wise regressions on ``S`` and sample moments for the exogenous block."""
        idx = self._index()
        out = []
        resvars = []
        for r, regs in self.equations:
            ri = idx[r]
            ci = [idx[v] for v in regs]
            if ci:
                b = np.linalg.solve(S[np.ix_(ci, ci)], S[ci, ri])
                rv = S[ri, ri] - S[ri, ci] @ b
            else:
                b = np.empty(0)
                rv = S[ri, ri]
            out += list(b)
            resvars.append(max(rv, 1e-6 * S[ri, ri]))
        out += [S[idx[v], idx[v]] for v in self.exogenous]
        out += [S[idx[a], idx[b]] for a, b in self.exo_cov]
        out += resvars
        return np.array(out, dtype=float)


def implied_covariance(model: PathModel, params) -> np.ndarray:
    B, Psi = model.unpack(params)
    A = np.linalg.inv(np.eye(model.p) - B)
    Sigma = A @ Psi @ A.T
    return 0.5 * (Sigma + Sigma.T)


def _logdet_pd(M):
    sign, ld = np.linalg.slogdet(M)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return None
    return ld if sign > 0 else None


def discrepancy(model: PathModel, params, S) -> float:
    """ML discrepancy; ``inf`` when the implied covariance is not positive definite."""
    Sigma = implied_covariance(model, params)
    ld = _logdet_pd(Sigma)
    if ld is None:
        return np.inf
    _, lds = np.linalg.slogdet(S)
    return float(ld + np.trace(np.linalg.solve(Sigma, S)) - lds - model.p)


def discrepancy_gradient(model: PathModel, params, S) -> np.ndarray:
    """Analytic gradient of :func:`discrepancy` with respect to ``params``."""
    B, Psi = model.unpack(params)
    A = np.linalg.inv(np.eye(model.p) - B)
    Sigma = A @ Psi @ A.T
    Si = np.linalg.inv(Sigma)
    G = Si @ (Sigma - S) @ Si
    G = 0.5 * (G + G.T)
    dB = 2.0 * (A.T @ G @ Sigma)
    dPsi = A.T @ G @ A
    idx = model._index()
    grad = []
    for r, regs in model.equations:
        grad += [dB[idx[r], idx[v]] for v in regs]
    grad += [dPsi[idx[v], idx[v]] for v in model.exogenous]
    grad += [2.0 * dPsi[idx[a], idx[b]] for a, b in model.exo_cov]
    grad += [dPsi[idx[r], idx[r]] for r in model.endogenous]
    return np.array(grad)


@dataclass
class OptimResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    converged: bool
    n_iter: int
    history: list = field(default_factory=list)
    message: str = ""


def bfgs(fun, grad, x0, gtol=1e-8, ftol=1e-12, maxiter=500):
    """BFGS with a backtracking Armijo line search.

    Trial points where ``fun`` is not finite are rejected by halving the
    step, so the recorded objective values never increase.
    """
    x = np.array(x0, dtype=float)
    f = fun(x)
    if not np.isfinite(f):
        raise SingularImplied("objective is not finite at the starting point")
    g = grad(x)
    H = np.eye(x.size)
    history = [f]
    for it in range(1, maxiter + 1):
        if np.max(np.abs(g)) < gtol:
            return OptimResult(x, f, g, True, it - 1, history, "gradient tolerance")
        d = -H @ g
        slope = g @ d
        if slope >= 0:
            H = np.eye(x.size)
            d = -g
            slope = g @ d
        step = 1.0
        for _ in range(60):
            xn = x + step * d
            fn = fun(xn)
            if np.isfinite(fn) and fn <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            return OptimResult(x, f, g, False, it, history, "line search failed")
        gn = grad(xn)
        s, yv = xn - x, gn - g
        df = f - fn
        x, f, g = xn, fn, gn
        history.append(f)
        if np.max(np.abs(g)) < gtol or df < ftol:
            return OptimResult(x, f, g, True, it, history, "converged")
        sy = s @ yv
        if sy > 1e-14:
            rho = 1.0 / sy
            if it == 1:
                H = np.eye(x.size) * (sy / (yv @ yv))
            V = np.eye(x.size) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
    return OptimResult(x, f, g, False, maxiter, history, "iteration limit")


@dataclass
class SemFit:
    model: PathModel
    params: np.ndarray
    sigma: np.ndarray
    f_min: float
    chi2: float
    df: int
    p: float
    n: int
    gfi: float = float("nan")
    agfi: float = float("nan")
    tli: float = float("nan")
    converged: bool = True
    n_iter: int = 0
    history: list = field(default_factory=list, repr=False)

    def estimates(self) -> dict:
        return dict(zip(self.model.param_names, (float(v) for v in self.params)))

    def to_dict(self) -> dict:
        def num(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "model": self.model.name,
            "chi2": num(self.chi2),
            "df": self.df,
            "p": num(self.p),
            "gfi": num(self.gfi),
            "agfi": num(self.agfi),
            "tli": num(self.tli),
            "converged": self.converged,
            "f_min": num(self.f_min),
            "n": self.n,
            "estimates": self.estimates(),
        }


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if df <= 0:
        return 1.0 if x <= 1e-12 else 0.0
    return float(gammaincc(df / 2.0, max(x, 0.0) / 2.0))


def _check_S(S, p):
    S = np.asarray(S, dtype=float)
    if S.shape != (p, p):
        raise DimensionMismatch(f"covariance matrix must be {p}x{p}, got {S.shape}")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance matrix is not symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError("covariance matrix is not positive definite") from None
    return 0.5 * (S + S.T)


def independence_fit(S, n: int) -> SemFit:
    """Baseline model: free variances, all covariances fixed at zero."""
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    names = tuple(f"v{i}" for i in range(p))
    model = PathModel(names, (), exo_cov=(), name="independence")
    params = np.diag(S).copy()
    sigma = np.diag(params)
    f = float(np.sum(np.log(params)) - np.linalg.slogdet(S)[1])
    df = model.df
    chi2 = (n - 1) * f
    return SemFit(model, params, sigma, f, chi2, df, chi2_sf(chi2, df), n)


def fit_indices(fit: SemFit, S, Sigma_hat, baseline: SemFit):
    """GFI, AGFI and TLI for ``fit`` against the independence ``baseline``."""
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    M = np.linalg.solve(Sigma_hat, S)
    R = M - np.eye(p)
    gfi = 1.0 - np.trace(R @ R) / np.trace(M @ M)
    if fit.df <= 0:
        raise ZeroDf("AGFI and TLI are undefined for a model with zero degrees of freedom")
    agfi = 1.0 - (p * (p + 1) / (2.0 * fit.df)) * (1.0 - gfi)
    rb = baseline.chi2 / baseline.df
    tli = (rb - fit.chi2 / fit.df) / (rb - 1.0)
    return float(gfi), float(agfi), float(tli)


def _finish(model, params, S, n, converged, n_iter, history, f=None):
    sigma = implied_covariance(model, params)
    if f is None:
        f = discrepancy(model, params, S)
    f = max(float(f), 0.0)
    chi2 = (n - 1) * f
    fit = SemFit(model, params, sigma, f, chi2, model.df, chi2_sf(chi2, model.df), n,
                 converged=converged, n_iter=n_iter, history=history)
    base = independence_fit(S, n)
    M = np.linalg.solve(sigma, S)
    R = M - np.eye(model.p)
    fit.gfi = float(1.0 - np.trace(R @ R) / np.trace(M @ M))
    if model.df > 0:
        fit.gfi, fit.agfi, fit.tli = fit_indices(fit, S, sigma, base)
    return fit


def fit_ml(model: PathModel, S, n: int, start=None, maxiter: int = 500, strict: bool = False) -> SemFit:
    """ML fit of ``model`` to covariance matrix ``S`` from ``n`` observations.

    A fit that fails to converge is returned with ``converged=False``, or
    raised as :class:`NonConvergence` (carrying the fit) when ``strict``.
    """
    S = _check_S(S, model.p)
    if n <= model.p:
        raise ValueError(f"n={n} must exceed the number of variables ({model.p})")
    mask = model.variance_mask()
    theta0 = model.start_values(S) if start is None else np.asarray(start, dtype=float)
    if np.any(theta0[mask] <= 0):
        raise ValueError("starting variances must be positive")

    def to_theta(phi):
        th = phi.copy()
        th[mask] = np.exp(phi[mask])
        return th

    def fun(phi):
        return discrepancy(model, to_theta(phi), S)

    def grad(phi):
        th = to_theta(phi)
        g = discrepancy_gradient(model, th, S)
        g[mask] *= th[mask]
        return g

    phi0 = theta0.copy()
    phi0[mask] = np.log(theta0[mask])
    res = bfgs(fun, grad, phi0, maxiter=maxiter)
    fit = _finish(model, to_theta(res.x), S, n, res.converged, res.n_iter, res.history, res.f)
    if strict and not res.converged:
        raise NonConvergence(f"{model.name}: {res.message}", fit)
    return fit


# -- the two competing models ------------------------------------------------

def bk_model(x="x", z="z", zx="z:x", m="m", y="y") -> PathModel:
    """First-stage moderated mediation: ``M <- X, Z, ZX``; ``Y <- X, M``.

    X, Z and ZX are exogenous with all covariances free (13 parameters,
    df = 2).
    """
    return PathModel(
        observed=(x, z, zx, m, y),
        equations=((m, (z, x, zx)), (y, (x, m))),
        name="bk",
    )


def memo_model(x="x", z="z", w="w", wx="w:x", y="y", w_on_x=True) -> PathModel:
    """Mediated moderation: ``W <- Z, X``; ``Y <- X, Z, W, WX``.

    Exogenous block X, Z, WX with covariances X-Z and X-WX free and Z-WX
    fixed at zero, giving 13 parameters and df = 2. The freeing pattern is
    a reconstruction: for mean-zero normal predictors the product WX is
    uncorrelated with X, Z and W, so the fixed covariance and the implied
    W-WX covariance are both correct in the population.

    With ``w_on_x=False`` the W equation drops X (``W <- Z``) and all three
    exogenous covariances are free, again df = 2. That form cannot reproduce
    a direct W-X correlation and misfits data with one.
    """
    if w_on_x:
        return PathModel(
            observed=(x, z, w, wx, y),
            equations=((w, (z, x)), (y, (x, z, w, wx))),
            exo_cov=((x, z), (x, wx)),
            name="memo",
        )
    return PathModel(
        observed=(x, z, w, wx, y),
        equations=((w, (z,)), (y, (x, z, w, wx))),
        name="memo",
    )


def sample_covariance(data: DataTable, names) -> np.ndarray:
    X = np.column_stack([data[v] for v in names])
    return np.cov(X, rowvar=False, ddof=1)


def model_covariance(data: DataTable, kind: str, x="x", z="z", mediator="w", y="y"):
    """Centre X, Z and the mediator, append the product term, return (names, S).

    ``kind`` is "bk" (product ZX) or "memo" (product WX).
    """
    d = mean_center(data, [x, z, mediator])
    if kind == "bk":
        prod = product_name(z, x)
        d = d.with_columns(**{prod: d[z] * d[x]})
        names = (x, z, prod, mediator, y)
    elif kind == "memo":
        prod = product_name(mediator, x)
        d = d.with_columns(**{prod: d[mediator] * d[x]})
        names = (x, z, mediator, prod, y)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return names, sample_covariance(d, names)


def product_name(a: str, b: str) -> str:
    return f"{a}:{b}"


def build_model(kind: str, x="x", z="z", mediator="w", y="y", w_on_x=True) -> PathModel:
    """The BK or MeMo model over the given variable names."""
    if kind == "bk":
        return bk_model(x, z, product_name(z, x), mediator, y)
    if kind == "memo":
        return memo_model(x, z, mediator, product_name(mediator, x), y, w_on_x=w_on_x)
    raise ValueError(f"unknown model kind {kind!r}")


def fit_model_to_data(data: DataTable, kind: str, x="x", z="z", mediator="w", y="y", w_on_x=True) -> SemFit:
    _, S = model_covariance(data, kind, x, z, mediator, y)
    return fit_ml(build_model(kind, x, z, mediator, y, w_on_x), S, data.n)


# -- reduced forms -----------------------------------------------------------

@dataclass(frozen=True)
class BKParams:
    b_m0: float = 0.0
    b_mz: float = 0.0
    b_mx: float = 0.0
    b_mzx: float = 0.0
    b_y0: float = 0.0
    b_yx: float = 0.0
    b_ym: float = 0.0


@dataclass(frozen=True)
class MeMoParams:
    b_w0: float = 0.0
    b_wz: float = 0.0
    b_y0: float = 0.0
    b_yx: float = 0.0
    b_yz: float = 0.0
    b_yw: float = 0.0
    b_ywx: float = 0.0


@dataclass(frozen=True)
class ReducedForm:
    """Y expressed in X, Z, ZX and the structural disturbances.

    Keys of ``coef``: ``1``, ``x``, ``z``, ``zx``, ``e_med`` (the mediator's
    disturbance), ``e_med*x`` (random X slope carried by that disturbance)
    and ``e_y``.
    """

    kind: str
    coef: dict

    def evaluate(self, x, z, e_med, e_y):
        c = self.coef
        return (
            c["1"]
            + c["x"] * x
            + c["z"] * z
            + c["zx"] * (z * x)
            + c["e_med"] * e_med
            + c["e_med*x"] * (e_med * x)
            + c["e_y"] * e_y
        )


def reduced_form(kind: str, params) -> ReducedForm:
    """Substitute the mediator equation into the Y equation."""
    if kind == "bk":
        q = params
        coef = {
            "1": q.b_y0 + q.b_ym * q.b_m0,
            "x": q.b_yx + q.b_ym * q.b_mx,
            "z": q.b_ym * q.b_mz,
            "zx": q.b_ym * q.b_mzx,
            "e_med": q.b_ym,
            "e_med*x": 0.0,
            "e_y": 1.0,
        }
    elif kind == "memo":
        q = params
        coef = {
            "1": q.b_y0 + q.b_yw * q.b_w0,
            "x": q.b_yx + q.b_ywx * q.b_w0,
            "z": q.b_yz + q.b_yw * q.b_wz,
            "zx": q.b_ywx * q.b_wz,
            "e_med": q.b_yw,
            "e_med*x": q.b_ywx,
            "e_y": 1.0,
        }
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return ReducedForm(kind, coef)


def two_stage(kind: str, params, x, z, e_med, e_y):
    """Y computed by evaluating the mediator equation, then the Y equation."""
    q = params
    if kind == "bk":
        m = q.b_m0 + q.b_mz * z + q.b_mx * x + q.b_mzx * (z * x) + e_med
        return q.b_y0 + q.b_yx * x + q.b_ym * m + e_y
    if kind == "memo":
        w = q.b_w0 + q.b_wz * z + e_med
        return q.b_y0 + q.b_yx * x + q.b_yz * z + q.b_yw * w + q.b_ywx * (w * x) + e_y
    raise ValueError(f"unknown model kind {kind!r}")
