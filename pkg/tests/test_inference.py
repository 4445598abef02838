import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medmod.errors import MissingTerm, NonPSDCorrelation, RankDeficient
from medmod.inference import (
    InferenceConfig,
    MediationConclusion,
    SpuriousSlopeInput,
    TreeConclusion,
    assess_current_memo,
    assess_mediated_moderation,
    assess_mediation,
    assess_moderation,
    predict_spurious_slope,
    simple_slope,
    step_answers,
    tree_conclusion,
)
from medmod.regress import DataTable, fit_ols
from medmod.simulate import (
    Condition,
    CorrelationSpec,
    GeneratingModel,
    condition_pvalues,
    replication_dataset,
)


def _rng(seed):
    return np.random.default_rng(seed)


def chain(seed, n=2000, a=0.8, b=0.8, direct=0.0):
    rng = _rng(seed)
    x = rng.normal(size=n)
    m = a * x + rng.normal(size=n)
    y = b * m + direct * x + rng.normal(size=n)
    return DataTable({"x": x, "m": m, "y": y})


def test_mediation_noise_mediator():
    out = []
    for s in range(200):
        rng = _rng(s)
        x = rng.normal(size=1000)
        d = DataTable({"x": x, "m": rng.normal(size=1000), "y": 1.5 * x + rng.normal(size=1000)})
        out.append(assess_mediation(d, "x", "y", "m"))
    assert np.mean([r.conclusion == MediationConclusion.NO_MEDIATION for r in out]) >= 0.98
    assert np.mean([not r.conditions_met[1] for r in out]) > 0.9


def test_complete_mediation_chain():
    res = [assess_mediation(chain(s), "x", "y", "m").conclusion for s in range(200)]
    assert np.mean([r == MediationConclusion.COMPLETE for r in res]) > 0.9


def test_partial_mediation_with_direct_path():
    res = [assess_mediation(chain(s, direct=0.5), "x", "y", "m").conclusion for s in range(100)]
    assert np.mean([r == MediationConclusion.PARTIAL for r in res]) > 0.9


def test_mediation_condition_flags():
    for s in range(30):
        d = chain(s, n=60, a=0.3, b=0.3)
        for skip in (False, True):
            r = assess_mediation(d, "x", "y", "m", InferenceConfig(skip_bk_step1=skip))
            c1, c2, c3, c4 = r.conditions_met
            assert c4 == (abs(r.eq3["x"].estimate) < abs(r.eq1["x"].estimate))
            need = (c2, c3, c4) if skip else (c1, c2, c3, c4)
            if not all(need):
                assert r.conclusion == MediationConclusion.NO_MEDIATION
            elif r.eq3["x"].p < 0.05:
                assert r.conclusion == MediationConclusion.PARTIAL
            else:
                assert r.conclusion == MediationConclusion.COMPLETE


def test_moderation_type_one_rate():
    hits = 0
    for s in range(400):
        rng = _rng(s)
        x, z = rng.normal(size=(2, 1000))
        d = DataTable({"x": x, "z": z, "y": x + z + rng.normal(size=1000)})
        hits += assess_moderation(d, "x", "y", "z").moderated
    assert 0.02 <= hits / 400 <= 0.09


def test_deterministic_interaction():
    rng = _rng(3)
    x, z = rng.normal(size=(2, 50))
    r = assess_moderation(DataTable({"x": x, "z": z, "y": x * z}), "x", "y", "z")
    assert r.moderated and r.p < 1e-12


def test_moderation_rate_table2_cell():
    # reference step-1 rate at beta_wx=0.4, rho_zw=0.6, n=250 is 0.9693
    cond = Condition(250, GeneratingModel(beta_wx=0.4), CorrelationSpec(rho_zw=0.6), nrun=600, seed=77)
    rate = np.mean([assess_moderation(replication_dataset(cond, r), "x", "y", "z").moderated for r in range(600)])
    assert abs(rate - 0.9693) < 0.025


def test_centering_flag_does_not_change_interaction_test():
    rng = _rng(5)
    x = rng.normal(2, 1, 80)
    z = rng.normal(-3, 2, 80)
    d = DataTable({"x": x, "z": z, "y": x + 0.2 * x * z + rng.normal(size=80)})
    a = assess_moderation(d, "x", "y", "z", InferenceConfig(center_first=True))
    b = assess_moderation(d, "x", "y", "z", InferenceConfig(center_first=False))
    assert a.p == pytest.approx(b.p, rel=1e-10)
    assert a.eq4["x"].estimate != pytest.approx(b.eq4["x"].estimate)


def test_tree_conclusion_exhaustive():
    expected = {
        (False,): TreeConclusion.NO_INITIAL_MODERATION,
        (True, False): TreeConclusion.W_NOT_MODERATOR,
        (True, True, False): TreeConclusion.MULTIPLE_MODERATOR,
        (True, True, True, False): TreeConclusion.SPURIOUS,
        (True, True, True, True): TreeConclusion.MEDIATED_MODERATION,
    }
    for flags in itertools.product([False, True], repeat=4):
        prefix = flags[: (flags.index(False) + 1) if False in flags else 4]
        assert tree_conclusion(flags) == expected[prefix]


@given(
    st.lists(st.floats(0, 1), min_size=4, max_size=4),
    st.floats(0.001, 0.5),
    st.floats(0.0, 0.49),
)
def test_alpha_monotonicity(pvals, alpha, bump):
    lo = step_answers(pvals, alpha)
    hi = step_answers(pvals, min(alpha + bump, 0.999))
    for k in (0, 1, 3):
        assert hi[k] >= lo[k]
    assert hi[2] <= lo[2]


def test_tree_on_generated_data():
    cond = Condition(250, GeneratingModel(beta_wx=0.4), CorrelationSpec(rho_zw=0.6), nrun=400, seed=8)
    traces = [assess_mediated_moderation(replication_dataset(cond, r), "x", "y", "z", "w") for r in range(400)]
    rate = np.mean([t.conclusion == TreeConclusion.MEDIATED_MODERATION for t in traces])
    assert abs(rate - 0.9272) < 0.05
    for t in traces:
        assert t.step_yes == step_answers(t.step_p, 0.05)
        assert t.conclusion == tree_conclusion(t.step_yes)
        assert all(0 <= p <= 1 for p in t.step_p)


def test_tree_null_model():
    hits = 0
    for s in range(400):
        rng = _rng(1000 + s)
        d = DataTable({k: rng.normal(size=100) for k in "xyzw"})
        hits += assess_mediated_moderation(d, "x", "y", "z", "w").conclusion == TreeConclusion.NO_INITIAL_MODERATION
    assert 0.92 <= hits / 400 <= 0.98


def test_tree_without_true_moderation():
    cond = Condition(100, GeneratingModel(beta_wx=0.0), CorrelationSpec(rho_zw=0.6), nrun=3000, seed=4)
    p = condition_pvalues(cond)
    memo = np.mean((p[:, 0] < 0.05) & (p[:, 1] < 0.05) & (p[:, 2] >= 0.05) & (p[:, 3] < 0.05))
    assert memo <= 0.005


def test_tree_deterministic_and_all_pvalues_populated():
    rng = _rng(9)
    d = DataTable({k: rng.normal(size=100) for k in "xyzw"})
    a = assess_mediated_moderation(d, "x", "y", "z", "w")
    b = assess_mediated_moderation(d, "x", "y", "z", "w")
    assert a.step_p == b.step_p and a.conclusion == b.conclusion
    assert len(a.step_p) == 4 and all(np.isfinite(a.step_p))


def test_tree_roles_must_be_distinct():
    rng = _rng(1)
    d = DataTable({k: rng.normal(size=30) for k in "xyzw"})
    with pytest.raises(ValueError):
        assess_mediated_moderation(d, "x", "y", "z", "z")


def test_null_pvalues_are_uniform():
    from scipy.stats import kstest

    cond = Condition(
        100,
        GeneratingModel(beta_wx=0.0, beta_x=0.0, beta_z=0.0, beta_w=0.0),
        CorrelationSpec(rho_zw=0.0, rho_xw=0.0, rho_xz=0.0),
        nrun=5000,
        seed=31,
    )
    p = condition_pvalues(cond)
    crit = 1.63 / np.sqrt(5000)  # 1% two-sided KS critical value
    for k in (0, 1, 3):
        assert kstest(p[:, k], "uniform").statistic < crit


def test_current_memo_null():
    inferred = []
    for s in range(200):
        rng = _rng(s)
        x, z, m = rng.normal(size=(3, 200))
        y = 0.3 * x + 0.3 * z + 0.3 * x * z + rng.normal(size=200)
        r = assess_current_memo(DataTable({"x": x, "z": z, "m": m, "y": y}), "x", "y", "z", "m")
        assert r.inferred == (r.p5zx < 0.05 and abs(r.b6zx) < abs(r.b4zx))
        inferred.append(r.inferred)
    assert np.mean(inferred) < 0.1


def test_current_memo_collinear_mediator():
    rng = _rng(2)
    x, z = rng.normal(size=(2, 50))
    d = DataTable({"x": x, "z": z, "m": x * z, "y": x + rng.normal(size=50)})
    with pytest.raises(RankDeficient) as err:
        assess_current_memo(d, "x", "y", "z", "m")
    assert err.value.equation == "eq6"


def test_current_memo_first_stage_data():
    hits = 0
    for s in range(100):
        rng = _rng(s)
        x, z = rng.normal(size=(2, 2000))
        m = 0.5 * z * x + rng.normal(size=2000)
        y = 0.8 * m + rng.normal(size=2000)
        hits += assess_current_memo(DataTable({"x": x, "z": z, "m": m, "y": y}), "x", "y", "z", "m").inferred
    assert hits / 100 > 0.9


def _eq7_fit(bx, bzx, bwx):
    rng = _rng(0)
    x, z, w = rng.normal(size=(3, 40))
    y = 0.1 + bx * x + 0.2 * z - 0.1 * w + bzx * z * x + bwx * w * x
    return fit_ols(DataTable({"x": x, "z": z, "w": w, "y": y}), "y ~ x + z + z:x + w + w:x")


def test_simple_slope():
    fit = _eq7_fit(0.3, 0.1, -0.2)
    assert simple_slope(fit, 0.0, 0.0) == pytest.approx(0.3, abs=1e-10)
    assert simple_slope(fit, 2.0, 1.0) == pytest.approx(0.3, abs=1e-10)
    fit = _eq7_fit(0.3, 0.0, 0.2)
    assert simple_slope(fit, 0.0, 1.0) == pytest.approx(0.5, abs=1e-10)
    rng = _rng(1)
    d = DataTable({k: rng.normal(size=20) for k in "xyz"})
    with pytest.raises(MissingTerm):
        simple_slope(fit_ols(d, "y ~ x + z + z:x"), 0, 0)


def test_predict_spurious_slope_examples():
    assert predict_spurious_slope(SpuriousSlopeInput(0.0, 1, 1, 0.6, 0.4, 0.4)) == 0.0
    assert predict_spurious_slope(SpuriousSlopeInput(0.4, 1, 1, 0.0, 0.0, 0.4)) == 0.0
    v = predict_spurious_slope(SpuriousSlopeInput(0.4, 1, 1, 0.6, 0.4, 0.4))
    assert v == pytest.approx(0.4 * 0.76 / 1.16, abs=1e-12)
    assert v == pytest.approx(0.26207, abs=5e-6)


@given(
    st.floats(-2, 2),
    st.floats(0.1, 5),
    st.floats(0.1, 5),
    st.floats(0.5, 3),
)
def test_spurious_slope_odd_and_linear(beta, sw, sz, c):
    a = SpuriousSlopeInput(beta, sw, sz, 0.3, 0.4, 0.4)
    neg = SpuriousSlopeInput(-beta, sw, sz, 0.3, 0.4, 0.4)
    scaled = SpuriousSlopeInput(beta, sw * c, sz, 0.3, 0.4, 0.4)
    assert predict_spurious_slope(neg) == pytest.approx(-predict_spurious_slope(a), abs=1e-15)
    assert predict_spurious_slope(scaled) == pytest.approx(c * predict_spurious_slope(a), rel=1e-12, abs=1e-15)


def test_non_psd_correlations_rejected():
    with pytest.raises(NonPSDCorrelation):
        SpuriousSlopeInput(0.4, 1, 1, 0.9, -0.9, 0.9)
    with pytest.raises(NonPSDCorrelation):
        SpuriousSlopeInput(0.4, 1, 1, 1.2, 0.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(alpha=0.0)
    with pytest.raises(ValueError):
        InferenceConfig(alpha=1.0)
