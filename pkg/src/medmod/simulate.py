"""Monte Carlo study of the mediated-moderation decision tree.

Data come from the generating model

    Y = b_x X + b_z Z + b_w W + b_wx W X + e,    (X, Z, W) ~ N(0, R)

and each replication is analysed with the same three regressions as
:func:`medmod.inference.assess_mediated_moderation`, vectorised over a batch
of replications.

Random streams
--------------
Every replication owns a Philox stream whose key is derived from the
condition seed and whose counter starts at ``rep << 192``. A replication's
draws therefore depend only on ``(condition seed, replication index)``;
chunking and worker count cannot change them. Condition seeds are derived
from a master seed and the condition's position in the grid.
"""

from __future__ import annotations

import csv
import io
import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import NotPositiveDefinite, RankDeficient
from .inference import InferenceConfig
from .regress import RANK_TOL, DataTable, Main, ModelFormula, Product, fit_ols, mean_center, two_sided_p

CHUNK = 500


@dataclass(frozen=True)
class GeneratingModel:
    beta_wx: float = 0.0
    beta_x: float = 0.3
    beta_z: float = 0.3
    beta_w: float = 0.3
    noise_sd: float = 1.0

    def __post_init__(self):
        if not self.noise_sd > 0:
            raise ValueError(f"noise_sd must be positive, got {self.noise_sd}")


@dataclass(frozen=True)
class CorrelationSpec:
    rho_zw: float = 0.0
    rho_xw: float = 0.4
    rho_xz: float = 0.4

    def matrix(self) -> np.ndarray:
        """Correlation matrix in (x, z, w) order."""
        return np.array(
            [
                [1.0, self.rho_xz, self.rho_xw],
                [self.rho_xz, 1.0, self.rho_zw],
                [self.rho_xw, self.rho_zw, 1.0],
            ]
        )

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.matrix())
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite(
                f"correlation matrix is not positive definite: {self}"
            ) from None


@dataclass(frozen=True)
class Condition:
    n: int
    model: GeneratingModel = field(default_factory=GeneratingModel)
    corr: CorrelationSpec = field(default_factory=CorrelationSpec)
    nrun: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.n <= 6:
            raise ValueError(f"n must exceed 6 (the largest design width), got {self.n}")
        if self.nrun < 1:
            raise ValueError("nrun must be positive")
        self.corr.cholesky()


STEP_NAMES = ("step1", "step2", "step3", "step4", "mediated_moderation")


@dataclass(frozen=True)
class ConditionResult:
    """Tallies for one condition.

    ``primary_counts[k]`` counts replications answering step k+1 "yes";
    ``conjunctive_counts[k]`` those answering steps 1..k+1 all "yes". The last
    entry of both is the mediated-moderation count.
    """

    nrun: int
    primary_counts: tuple
    conjunctive_counts: tuple

    @property
    def primary(self) -> tuple:
        return tuple(c / self.nrun for c in self.primary_counts)

    @property
    def conjunctive(self) -> tuple:
        return tuple(c / self.nrun for c in self.conjunctive_counts)


def derive_seed(master: int, index: int) -> int:
    """64-bit seed for condition ``index`` of a study run with ``master``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _philox_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)


def replication_rng(seed: int, rep: int, key=None) -> np.random.Generator:
    if key is None:
        key = _philox_key(seed)
    counter = np.array([0, 0, 0, rep], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sample_mvn(n: int, corr: CorrelationSpec, rng: np.random.Generator) -> DataTable:
    """Draw ``n`` rows of (x, z, w) with unit variances and correlations ``corr``.

    Standard normals are drawn row by row in (x, z, w) order and mapped
    through the lower Cholesky factor.
    """
    L = corr.cholesky()
    u = rng.standard_normal((n, 3)) @ L.T
    return DataTable({"x": u[:, 0], "z": u[:, 1], "w": u[:, 2]})


def _outcome(model, x, z, w, e):
    return (
        model.beta_x * x
        + model.beta_z * z
        + model.beta_w * w
        + model.beta_wx * (w * x)
        + model.noise_sd * e
    )


def generate_dataset(cond: Condition, rng: np.random.Generator) -> DataTable:
    """One simulated dataset; the outcome noise is drawn after the predictors."""
    d = sample_mvn(cond.n, cond.corr, rng)
    e = rng.standard_normal(cond.n)
    y = _outcome(cond.model, d["x"], d["z"], d["w"], e)
    return d.with_columns(y=y)


def replication_dataset(cond: Condition, rep: int) -> DataTable:
    """The dataset that replication ``rep`` of ``cond`` analyses."""
    return generate_dataset(cond, replication_rng(cond.seed, rep))


def _draw_batch(cond: Condition, start: int, stop: int):
    key = _philox_key(cond.seed)
    L = cond.corr.cholesky()
    b = stop - start
    u = np.empty((b, cond.n, 3))
    e = np.empty((b, cond.n))
    for i, rep in enumerate(range(start, stop)):
        rng = replication_rng(cond.seed, rep, key)
        u[i] = rng.standard_normal((cond.n, 3))
        e[i] = rng.standard_normal(cond.n)
    v = u @ L.T
    x, z, w = v[..., 0], v[..., 1], v[..., 2]
    return x, z, w, _outcome(cond.model, x, z, w, e)


def batch_ols(X: np.ndarray, y: np.ndarray):
    """OLS for a stack of designs ``X`` (b, n, k) and responses ``y`` (b, n).

    Returns ``(coef, se, p)``, each of shape (b, k). Raises
    :class:`RankDeficient` naming the first offending batch member.
    """
    b, n, k = X.shape
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    bad = np.any(diag < RANK_TOL * diag.max(axis=1, keepdims=True), axis=1)
    if bad.any():
        raise RankDeficient(f"collinear design in batch member {int(np.argmax(bad))}")
    qty = np.einsum("bnk,bn->bk", Q, y)
    coef = np.linalg.solve(R, qty[..., None])[..., 0]
    resid = y - np.einsum("bnk,bk->bn", X, coef)
    df = n - k
    s2 = np.einsum("bn,bn->b", resid, resid) / df
    Rinv = np.linalg.inv(R)
    se = np.sqrt(s2[:, None] * np.sum(Rinv * Rinv, axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, 0.0)
    return coef, se, two_sided_p(t, df)


def tree_pvalues(x, z, w, y, cfg: InferenceConfig) -> np.ndarray:
    """Step p-values (b, 4) for a batch of datasets given as (b, n) arrays."""
    if cfg.center_first:
        x = x - x.mean(axis=1, keepdims=True)
        z = z - z.mean(axis=1, keepdims=True)
        w = w - w.mean(axis=1, keepdims=True)
    one = np.ones_like(x)
    zx, wx = z * x, w * x
    # eq7 columns: 1, x, z, w, zx, wx; eq4 uses the 1, x, z, zx subset
    X7 = np.stack([one, x, z, w, zx, wx], axis=-1)
    X4 = X7[..., [0, 1, 2, 4]]
    X8 = np.stack([one, z, x], axis=-1)
    try:
        _, _, p4 = batch_ols(X4, y)
        _, _, p7 = batch_ols(X7, y)
        _, _, p8 = batch_ols(X8, w)
    except RankDeficient as exc:
        raise RankDeficient(f"simulated replication has a singular design ({exc})") from None
    return np.column_stack([p4[:, 3], p7[:, 5], p7[:, 4], p8[:, 1]])


def condition_pvalues(cond: Condition, cfg=InferenceConfig(), start=0, stop=None) -> np.ndarray:
    """Step p-values for replications ``start..stop`` of ``cond``."""
    stop = cond.nrun if stop is None else stop
    out = []
    for lo in range(start, stop, CHUNK):
        hi = min(lo + CHUNK, stop)
        out.append(tree_pvalues(*_draw_batch(cond, lo, hi), cfg))
    return np.concatenate(out) if out else np.empty((0, 4))


def _tally(pvals: np.ndarray, alpha: float):
    yes = np.column_stack(
        [pvals[:, 0] < alpha, pvals[:, 1] < alpha, pvals[:, 2] >= alpha, pvals[:, 3] < alpha]
    )
    conj = np.logical_and.accumulate(yes, axis=1)
    memo = conj[:, 3]
    primary = np.append(yes.sum(axis=0), memo.sum()).astype(np.int64)
    conjunctive = np.append(conj.sum(axis=0), memo.sum()).astype(np.int64)
    return primary, conjunctive


def _chunk_task(args):
    cond, cfg, lo, hi = args
    p = tree_pvalues(*_draw_batch(cond, lo, hi), cfg)
    return _tally(p, cfg.alpha)


def _chunks(cond):
    return [(lo, min(lo + CHUNK, cond.nrun)) for lo in range(0, cond.nrun, CHUNK)]


def default_workers() -> int:
    return os.cpu_count() or 1


def _run_tasks(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_chunk_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_chunk_task, tasks, chunksize=1))


def _collect(nrun, tallies):
    primary = np.zeros(5, dtype=np.int64)
    conjunctive = np.zeros(5, dtype=np.int64)
    for p, c in tallies:
        primary += p
        conjunctive += c
    return ConditionResult(nrun, tuple(int(v) for v in primary), tuple(int(v) for v in conjunctive))


def run_condition(cond: Condition, cfg=InferenceConfig(), workers: int = 1) -> ConditionResult:
    """Simulate ``cond.nrun`` replications and tabulate the tree's answers."""
    tasks = [(cond, cfg, lo, hi) for lo, hi in _chunks(cond)]
    return _collect(cond.nrun, _run_tasks(tasks, workers))


@dataclass(frozen=True)
class StudyGrid:
    """Full-factorial design over sample size, W's interaction and corr(Z, W)."""

    ns: tuple = (100, 250)
    beta_wx: tuple = (-0.4, -0.2, 0.0, 0.2, 0.4)
    rho_zw: tuple = (0.0, 0.3, 0.6)
    nrun: int = 10_000
    model: GeneratingModel = field(default_factory=GeneratingModel)
    corr: CorrelationSpec = field(default_factory=CorrelationSpec)

    def conditions(self, master_seed: int) -> list:
        out = []
        for i, (n, bwx, rzw) in enumerate(itertools.product(self.ns, self.beta_wx, self.rho_zw)):
            out.append(
                Condition(
                    n=int(n),
                    model=replace(self.model, beta_wx=float(bwx)),
                    corr=replace(self.corr, rho_zw=float(rzw)),
                    nrun=self.nrun,
                    seed=derive_seed(master_seed, i),
                )
            )
        return out


def run_study(grid=StudyGrid(), cfg=InferenceConfig(), seed: int = 0, workers: int = 1) -> list:
    """Run every condition of ``grid``; rows come back in grid order.

    Chunks of all conditions share one worker pool. Because every
    replication's stream is fixed by its seed and index, the output is the
    same for any ``workers``.
    """
    conds = grid.conditions(seed)
    tasks = []
    owner = []
    for ci, cond in enumerate(conds):
        for lo, hi in _chunks(cond):
            tasks.append((cond, cfg, lo, hi))
            owner.append(ci)
    tallies = _run_tasks(tasks, workers)
    grouped = [[] for _ in conds]
    for ci, t in zip(owner, tallies):
        grouped[ci].append(t)
    return [(c, _collect(c.nrun, g)) for c, g in zip(conds, grouped)]


def _fmt_param(v: float) -> str:
    return format(float(v) + 0.0, "g")


def table_csv(results, kind: str) -> str:
    """Render study results as CSV text; ``kind`` is "conjunctive" or "primary"."""
    if kind not in ("conjunctive", "primary"):
        raise ValueError(f"unknown table kind {kind!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("beta_wx", "rho_zw", "n") + STEP_NAMES)
    for cond, res in results:
        props = res.conjunctive if kind == "conjunctive" else res.primary
        writer.writerow(
            [_fmt_param(cond.model.beta_wx), _fmt_param(cond.corr.rho_zw), cond.n]
            + [f"{p:.4f}" for p in props]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class SlopeEstimate:
    estimate: float
    se: float
    n: int


def slope_oracle(
    model: GeneratingModel, corr: CorrelationSpec, n_big: int = 2_000_000, seed: int = 0
) -> SlopeEstimate:
    """Large-sample estimate of the ZX slope in ``Y ~ X + Z + ZX``.

    The reported standard error is the usual OLS one; the omitted WX term
    makes residuals heteroscedastic, so treat it as approximate when
    ``beta_wx != 0``.
    """
    cond = Condition(n=n_big, model=model, corr=corr, nrun=1, seed=seed)
    d = mean_center(generate_dataset(cond, replication_rng(seed, 0)), ["x", "z"])
    fit = fit_ols(d, ModelFormula("y", (Main("x"), Main("z"), Product("z", "x"))))
    r = fit["z:x"]
    return SlopeEstimate(r.estimate, r.se, n_big)


def condition_to_dict(cond: Condition) -> dict:
    return asdict(cond)
