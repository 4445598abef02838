"""Mediation, moderation and mediated-moderation decision procedures.

Every procedure here is a handful of OLS fits followed by a rule on the
resulting t tests. Names of the fitted equations follow the usual numbering
of the Baron-Kenny and moderation literature:

=========  ==========================================
eq1        ``Y ~ X``
eq2        ``M ~ X``
eq3        ``Y ~ X + M``
eq4        ``Y ~ X + Z + ZX``
eq5        ``M ~ X + Z + ZX``
eq6        ``Y ~ X + M + Z + ZX``
eq7        ``Y ~ X + Z + ZX + W + WX``
eq8        ``W ~ Z + X``
=========  ==========================================
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import MedModError, NonPSDCorrelation, RankDeficient
from .regress import DataTable, Main, ModelFormula, Product, RegressionFit, fit_ols, mean_center


@dataclass(frozen=True)
class InferenceConfig:
    alpha: float = 0.05
    skip_bk_step1: bool = False
    center_first: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "skip_bk_step1": self.skip_bk_step1,
            "center_first": self.center_first,
        }


class MediationConclusion(str, enum.Enum):
    NO_MEDIATION = "NoMediation"
    PARTIAL = "PartialMediation"
    COMPLETE = "CompleteMediation"


class TreeConclusion(str, enum.Enum):
    NO_INITIAL_MODERATION = "NoInitialModeration"
    W_NOT_MODERATOR = "WNotModerator"
    MULTIPLE_MODERATOR = "MultipleModeratorModel"
    SPURIOUS = "SpuriousModeration"
    MEDIATED_MODERATION = "MediatedModeration"


def _fit(data, formula, equation):
    try:
        return fit_ols(data, formula)
    except RankDeficient as exc:
        exc.equation = equation
        raise
    except MedModError as exc:
        raise type(exc)(f"{equation}: {exc}") from exc


def _prepare(data, names, centered, cfg):
    if len(set(names)) != len(names):
        raise ValueError(f"variable roles must be distinct columns, got {names}")
    for name in names:
        data[name]
    if cfg.center_first:
        return mean_center(data, centered)
    return data


@dataclass(frozen=True)
class MediationResult:
    eq1: RegressionFit
    eq2: RegressionFit
    eq3: RegressionFit
    conditions_met: tuple
    conclusion: MediationConclusion

    def to_dict(self):
        return {
            "procedure": "mediation",
            "conditions_met": list(self.conditions_met),
            "conclusion": self.conclusion.value,
            "equations": {
                "eq1": self.eq1.to_dict(),
                "eq2": self.eq2.to_dict(),
                "eq3": self.eq3.to_dict(),
            },
        }


def assess_mediation(data: DataTable, x: str, y: str, m: str, cfg=InferenceConfig()):
    """Baron-Kenny causal-steps test of ``X -> M -> Y``.

    The four conditions are: X predicts Y (eq1), X predicts M (eq2), M
    predicts Y controlling for X (eq3), and the direct effect shrinks,
    ``|b_3X| < |b_1X|``. With ``cfg.skip_bk_step1`` the first condition is
    still reported but no longer required.
    """
    data = _prepare(data, [x, y, m], [], cfg)
    eq1 = _fit(data, ModelFormula(y, (Main(x),)), "eq1")
    eq2 = _fit(data, ModelFormula(m, (Main(x),)), "eq2")
    eq3 = _fit(data, ModelFormula(y, (Main(x), Main(m))), "eq3")
    a = cfg.alpha
    c1 = eq1[x].p < a
    c2 = eq2[x].p < a
    c3 = eq3[m].p < a
    c4 = abs(eq3[x].estimate) < abs(eq1[x].estimate)
    required = (c2, c3, c4) if cfg.skip_bk_step1 else (c1, c2, c3, c4)
    if not all(required):
        conclusion = MediationConclusion.NO_MEDIATION
    elif eq3[x].p < a:
        conclusion = MediationConclusion.PARTIAL
    else:
        conclusion = MediationConclusion.COMPLETE
    return MediationResult(eq1, eq2, eq3, (c1, c2, c3, c4), conclusion)


@dataclass(frozen=True)
class ModerationResult:
    eq4: RegressionFit
    moderated: bool
    p: float

    def to_dict(self):
        return {
            "procedure": "moderation",
            "conclusion": "Moderation" if self.moderated else "NoModeration",
            "moderated": self.moderated,
            "p_interaction": self.p,
            "equations": {"eq4": self.eq4.to_dict()},
        }


def assess_moderation(data: DataTable, x: str, y: str, z: str, cfg=InferenceConfig()):
    """Test the ZX interaction in ``Y ~ X + Z + ZX``.

    X and Z are mean-centred first when ``cfg.center_first`` is set, which
    changes the main-effect estimates but not the interaction test.
    """
    data = _prepare(data, [x, y, z], [x, z], cfg)
    eq4 = _fit(data, ModelFormula(y, (Main(x), Main(z), Product(z, x))), "eq4")
    p = eq4[Product(z, x)].p
    return ModerationResult(eq4, p < cfg.alpha, p)


def tree_conclusion(step_yes) -> TreeConclusion:
    """Map the four step answers to a terminal node of the decision tree."""
    s1, s2, s3, s4 = (bool(s) for s in step_yes)
    if not s1:
        return TreeConclusion.NO_INITIAL_MODERATION
    if not s2:
        return TreeConclusion.W_NOT_MODERATOR
    if not s3:
        return TreeConclusion.MULTIPLE_MODERATOR
    if not s4:
        return TreeConclusion.SPURIOUS
    return TreeConclusion.MEDIATED_MODERATION


def step_answers(step_p, alpha):
    """Step answers from the four p-values.

    Steps 1, 2 and 4 ask for a significant coefficient; step 3 asks for the
    Z interaction to *lose* significance once W enters.
    """
    p1, p2, p3, p4 = step_p
    return (p1 < alpha, p2 < alpha, p3 >= alpha, p4 < alpha)


@dataclass(frozen=True)
class DecisionTrace:
    step_p: tuple
    step_yes: tuple
    conclusion: TreeConclusion
    eq4: RegressionFit
    eq7: RegressionFit
    eq8: RegressionFit

    def to_dict(self):
        return {
            "procedure": "tree",
            "step_p": list(self.step_p),
            "step_yes": list(self.step_yes),
            "conclusion": self.conclusion.value,
            "equations": {
                "eq4": self.eq4.to_dict(),
                "eq7": self.eq7.to_dict(),
                "eq8": self.eq8.to_dict(),
            },
        }


def assess_mediated_moderation(
    data: DataTable, x: str, y: str, z: str, w: str, cfg=InferenceConfig()
) -> DecisionTrace:
    """Run the four-step mediated-moderation decision tree.

    Steps:

    1. is ``b_4(ZX)`` significant (Z moderates X without W in the model)?
    2. is ``b_7(WX)`` significant (W moderates X with both moderators in)?
    3. is ``b_7(ZX)`` non-significant (Z loses its moderating effect)?
    4. is ``b_8Z`` significant (Z predicts W, controlling for X)?

    All three equations are fitted and all four p-values are reported even
    when an early step already ends the tree; the conclusion still follows
    the first "no".
    """
    data = _prepare(data, [x, y, z, w], [x, z, w], cfg)
    zx, wx = Product(z, x), Product(w, x)
    eq4 = _fit(data, ModelFormula(y, (Main(x), Main(z), zx)), "eq4")
    eq7 = _fit(data, ModelFormula(y, (Main(x), Main(z), zx, Main(w), wx)), "eq7")
    eq8 = _fit(data, ModelFormula(w, (Main(z), Main(x))), "eq8")
    step_p = (eq4[zx].p, eq7[wx].p, eq7[zx].p, eq8[z].p)
    yes = step_answers(step_p, cfg.alpha)
    return DecisionTrace(step_p, yes, tree_conclusion(yes), eq4, eq7, eq8)


@dataclass(frozen=True)
class CurrentMeMoResult:
    eq4: RegressionFit
    eq5: RegressionFit
    eq6: RegressionFit
    inferred: bool
    b4zx: float
    b5zx: float
    b6zx: float
    p5zx: float

    def to_dict(self):
        return {
            "procedure": "current-memo",
            "conclusion": "MediatedModeration" if self.inferred else "NoMediatedModeration",
            "inferred": self.inferred,
            "b4zx": self.b4zx,
            "b5zx": self.b5zx,
            "b6zx": self.b6zx,
            "p5zx": self.p5zx,
            "equations": {
                "eq4": self.eq4.to_dict(),
                "eq5": self.eq5.to_dict(),
                "eq6": self.eq6.to_dict(),
            },
        }


def assess_current_memo(
    data: DataTable, x: str, y: str, z: str, m: str, cfg=InferenceConfig()
) -> CurrentMeMoResult:
    """Mediated moderation in the Baron-Kenny sense (first-stage moderated mediation).

    Inferred when ``b_5(ZX)`` is significant and ``|b_6(ZX)| < |b_4(ZX)|``.
    No test of the difference between the two interaction estimates is made.
    """
    data = _prepare(data, [x, y, z, m], [x, z], cfg)
    zx = Product(z, x)
    eq4 = _fit(data, ModelFormula(y, (Main(x), Main(z), zx)), "eq4")
    eq5 = _fit(data, ModelFormula(m, (Main(x), Main(z), zx)), "eq5")
    eq6 = _fit(data, ModelFormula(y, (Main(x), Main(m), Main(z), zx)), "eq6")
    b4, b5, b6 = eq4[zx].estimate, eq5[zx].estimate, eq6[zx].estimate
    p5 = eq5[zx].p
    inferred = p5 < cfg.alpha and abs(b6) < abs(b4)
    return CurrentMeMoResult(eq4, eq5, eq6, bool(inferred), b4, b5, b6, p5)


def simple_slope(fit: RegressionFit, z0: float, w0: float, x="x", z="z", w="w") -> float:
    """Conditional effect of X at ``Z = z0``, ``W = w0`` from an eq7 fit."""
    bx = fit[Main(x)].estimate
    bzx = fit[Product(z, x)].estimate
    bwx = fit[Product(w, x)].estimate
    return bx + bzx * z0 + bwx * w0


@dataclass(frozen=True)
class SpuriousSlopeInput:
    beta_wx: float
    sigma_w: float = 1.0
    sigma_z: float = 1.0
    rho_zw: float = 0.0
    rho_wx: float = 0.4
    rho_zx: float = 0.4

    def __post_init__(self):
        if not (self.sigma_w > 0 and self.sigma_z > 0):
            raise ValueError("standard deviations must be positive")
        for name in ("rho_zw", "rho_wx", "rho_zx"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise NonPSDCorrelation(f"{name} must lie in [-1, 1]")
        eig = np.linalg.eigvalsh(self.correlation_matrix())
        if eig.min() < -1e-12:
            raise NonPSDCorrelation(
                f"correlations do not form a positive semi-definite matrix "
                f"(smallest eigenvalue {eig.min():.3g})"
            )

    def correlation_matrix(self):
        """Correlation matrix in (Z, W, X) order."""
        return np.array(
            [
                [1.0, self.rho_zw, self.rho_zx],
                [self.rho_zw, 1.0, self.rho_wx],
                [self.rho_zx, self.rho_wx, 1.0],
            ]
        )


def predict_spurious_slope(inp: SpuriousSlopeInput) -> float:
    """Population ZX slope in ``Y ~ X + Z + ZX`` when W is the true moderator.

    Evaluates ``beta_wx * (sigma_w / sigma_z) * (rho_zw + rho_wx*rho_zx) / (1 + rho_zx**2)``.

    For jointly normal, mean-zero X, Z, W the product ZX is uncorrelated with
    X and Z, so the slope is ``beta_wx * Cov(WX, ZX) / Var(ZX)`` with
    ``Cov(WX, ZX) = rho_zw + rho_wx*rho_zx`` and ``Var(ZX) = 1 + rho_zx**2``
    in standardised units. :func:`medmod.simulate.slope_oracle` gives an
    independent large-sample estimate.
    """
    return (
        inp.beta_wx
        * (inp.sigma_w / inp.sigma_z)
        * (inp.rho_zw + inp.rho_wx * inp.rho_zx)
        / (1.0 + inp.rho_zx**2)
    )

