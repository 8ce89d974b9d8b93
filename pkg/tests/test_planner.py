import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffscale.curves import ModelSpec, run_from_curve
from diffscale.planner import (
    CompletePRules,
    ExtrapolationWarning,
    HyperbolaFit,
    HyperbolaRegressor,
    PlannerLaws,
    anchored_law,
    anneal_adjust,
    anneal_interval,
    beta2_policy,
    completep_lrs,
    fit_batch_law,
    fit_hparam_laws,
    fit_hyperbola,
    fit_lr_law,
    iso_loss_points,
    load_published_laws,
    minimums_vs_loss,
    params_for_flops,
    plan_run,
    suggest_architecture,
    token_optimal,
    unanneal,
)
from diffscale.scaling import PowerLawFit
from diffscale.synthetic import hyperbola_points


def test_batch_and_lr_laws_exact():
    D = np.geomspace(1e8, 1e12, 10)
    f = fit_batch_law(D, 0.01 * D**0.82)
    assert abs(f.alpha - 0.82) < 1e-10 and f.A == pytest.approx(0.01, rel=1e-9)
    B = np.geomspace(1e4, 1e7, 8)
    g = fit_lr_law(B, 2e-3 * B**0.34)
    assert abs(g.alpha - 0.34) < 1e-10
    # unit rescaling (sequences vs tokens) leaves the exponent unchanged
    assert fit_lr_law(B / 2048, 2e-3 * B**0.34).alpha == pytest.approx(0.34, abs=1e-10)
    with pytest.raises(ValueError):
        fit_batch_law([1e9] * 3, [1, 2, 3])


def test_batch_law_noisy_median():
    rng = np.random.default_rng(0)
    D = np.geomspace(1e8, 1e12, 20)
    exps = [fit_batch_law(D, 0.01 * D**0.82 * np.exp(0.1 * rng.standard_normal(20))).alpha for _ in range(100)]
    assert abs(np.median(exps) - 0.82) <= 0.05


def test_law_intervals_bracket_estimate():
    rng = np.random.default_rng(1)
    D = np.geomspace(1e8, 1e12, 20)
    f = fit_batch_law(D, D**0.8 * np.exp(0.1 * rng.standard_normal(20)))
    lo, hi = f.ci["alpha"]
    assert lo < f.alpha < hi and f.ci_level == 0.99


def test_published_fixture_and_anchor():
    tables = load_published_laws()
    assert tables["hparams"]["batch"]["exponent"] == pytest.approx(0.82, abs=0.005)
    assert tables["hparams"]["lr"]["exponent"] == pytest.approx(0.34, abs=0.005)
    lr = anchored_law(0.34, 64 * 2048, 0.3)
    assert lr.predict(64 * 2048) == pytest.approx(0.3, rel=1e-14)
    laws = PlannerLaws.from_published("uniform")
    assert laws.lr.predict(64 * 2048) == pytest.approx(0.3, rel=1e-12)
    assert PlannerLaws.from_json(laws.to_json()).M == laws.M
    with pytest.raises(ValueError):
        PlannerLaws.from_published("gaussian")


def test_hyperbola_exact_recovery_and_token_optimal():
    B, S = hyperbola_points(500.0, 16.0, 0.15, 12)
    f = fit_hyperbola(B, S, target_loss=3.0)
    assert abs(f.S_min / 500 - 1) < 1e-6 and abs(f.B_min / 16 - 1) < 1e-6 and abs(f.alpha / 0.15 - 1) < 1e-6
    np.testing.assert_allclose(f.steps_for(B), S, rtol=1e-6)
    B_star, S_star, D_star = token_optimal(HyperbolaFit(500.0, 16.0, 0.2))
    assert B_star == pytest.approx(32 * 16) and S_star == pytest.approx(32 * 500)
    B1, S1, D1 = token_optimal(HyperbolaFit(7.0, 3.0, 1.0))
    assert (B1, S1, D1) == (6.0, 14.0, 84.0)
    assert B_star * S_star == D_star


def test_hyperbola_noisy_and_errors():
    rng = np.random.default_rng(2)
    errs = [abs(fit_hyperbola(*hyperbola_points(500.0, 16.0, 0.15, 12, noise=0.02, rng=rng)).B_min / 16 - 1)
            for _ in range(100)]
    assert np.median(errs) <= 0.05
    with pytest.raises(ValueError):
        fit_hyperbola([1, 2, 3], [3, 2, 1])
    with pytest.raises(ValueError):
        fit_hyperbola([1, 2, 3, -4], [4, 3, 2, 1])
    B, S = hyperbola_points(500.0, 16.0, 0.15, 24)
    with pytest.raises(ValueError, match="arm"):
        fit_hyperbola(B[:5], S[:5])


def test_hyperbola_regressor():
    B, S = hyperbola_points(200.0, 8.0, 0.12, 10)
    reg = HyperbolaRegressor().fit(B[:, None], S)
    np.testing.assert_allclose(reg.predict(B[:, None]), S, rtol=1e-6)
    assert np.isinf(reg.predict([[4.0]])[0])


def test_iso_loss_points_and_minimums():
    model = ModelSpec(2, 128, 2, 16, 1e5)
    runs = []
    for B in (8, 16, 32, 64):
        steps = np.arange(1, 10001)
        loss = 2.0 + 20.0 / (steps * B) ** 0.5
        runs.append(run_from_curve(model, 0.0, B, 0.3, steps, loss))
    bs, ss = iso_loss_points(runs, 2.1)
    np.testing.assert_array_equal(bs, [8, 16, 32, 64])
    np.testing.assert_allclose(ss * bs, 40000, rtol=1e-3)
    fits = [HyperbolaFit(100.0 * l, 4.0 / l, 0.15, target_loss=l) for l in (2.5, 3.0, 3.5)]
    with pytest.warns(ExtrapolationWarning):
        summary = minimums_vs_loss(fits)
    assert summary["S_min"].alpha == pytest.approx(1.0, abs=1e-10)
    assert summary["B_min"].alpha == pytest.approx(-1.0, abs=1e-10)


def test_fit_hparam_laws_from_runs():
    model = ModelSpec(2, 128, 2, 16, 1e5)
    runs = []
    for B in (4, 8, 16, 32, 64):
        for lr in (0.1, 0.3):
            steps = np.arange(1, 3001)
            tokens = steps * B * 16
            loss = 2.0 + 5 * (tokens / 1e5) ** -0.3 + 0.01 * B / 16 + abs(lr - 0.1 * (B / 8) ** 0.34)
            runs.append(run_from_curve(model, 0.0, B, lr, steps, loss))
    laws = fit_hparam_laws(runs, np.geomspace(2e4, 5e5, 6))
    assert np.isfinite(laws.batch.alpha) and np.isfinite(laws.lr.alpha)
    assert len(laws.points) == 6


@pytest.mark.parametrize("d,L", [(512, 8), (640, 10), (768, 12), (1024, 16), (1536, 20)])
def test_completep_rules(d, L):
    g = completep_lrs(CompletePRules(), d, L, 0.3)
    assert g["eta_bulk"] == pytest.approx(0.3 / d, rel=1e-15)
    assert g["eta_aux"] == pytest.approx(0.006, rel=1e-15)
    assert g["eps"] == pytest.approx(1e-8 / (d * L), rel=1e-15)
    assert g["sigma_bulk"] == pytest.approx(0.4 / math.sqrt(d), rel=1e-15)
    assert g["residual_multiplier"] == 4 / L and g["output_multiplier"] == 512 and g["sigma_aux"] == 0.02
    wide = completep_lrs(CompletePRules(), 4 * d, L, 0.3)
    assert wide["sigma_bulk"] == pytest.approx(g["sigma_bulk"] / 2) and wide["eta_bulk"] == pytest.approx(g["eta_bulk"] / 4)


def test_completep_example_values():
    g = completep_lrs(CompletePRules(), 512, 8, 0.3)
    assert g["eta_bulk"] == pytest.approx(5.859e-4, rel=1e-3)
    assert g["eps"] == pytest.approx(2.441e-12, rel=1e-3)
    assert g["sigma_bulk"] == pytest.approx(0.01768, rel=1e-3)
    assert g["residual_multiplier"] == 0.5
    with pytest.raises(ValueError):
        completep_lrs(CompletePRules(), 0, 8, 0.3)
    with pytest.raises(ValueError):
        CompletePRules(sigma_base=0.0)


@given(loss=st.floats(1e-3, 100))
def test_anneal_round_trip(loss):
    assert unanneal(anneal_adjust(loss)) == pytest.approx(loss, rel=1e-12)
    lo, hi = anneal_interval(loss)
    assert lo < anneal_adjust(loss) < hi


def test_anneal_and_beta2():
    assert anneal_adjust(1.0) == pytest.approx(0.9755, abs=1e-15)
    with pytest.raises(ValueError):
        anneal_adjust(0.0)
    assert beta2_policy(256) == 0.98 and beta2_policy(255.9) == 0.99


def test_params_inversion_and_architecture():
    P, L = params_for_flops(6 * 12 * 8 * 512**2 + 12 * 8 * 512 * 2048)
    assert L == pytest.approx(8, rel=1e-10) and P == pytest.approx(12 * 8 * 512**2, rel=1e-10)
    arch = suggest_architecture(1.6e9)
    assert arch["hidden"] == 64 * arch["layers"]
    with pytest.raises(ValueError):
        params_for_flops(-1.0)


def test_plan_example():
    plan = plan_run(1e21, PlannerLaws.from_published("uniform"))
    assert plan.M == pytest.approx(0.00618 * 1e21**0.58879, rel=1e-12)
    assert plan.M == pytest.approx(1.43e10, rel=0.01)
    assert plan.loss == pytest.approx(2.51, abs=0.01)
    assert plan.bpb == pytest.approx(0.34124 * plan.loss, rel=1e-15)
    assert plan.bpb == pytest.approx(0.855, abs=0.005)
    assert plan.M * plan.D == pytest.approx(1e21, rel=1e-9)
    assert plan.beta2 == (0.98 if plan.batch_seqs >= 256 else 0.99)
    assert plan.groups["eta_bulk"] == pytest.approx(plan.eta_base / plan.architecture["hidden"])
    with pytest.raises(ValueError):
        plan_run(-1.0, PlannerLaws.from_published("uniform"))


def test_plan_beta2_switch():
    laws = PlannerLaws(PowerLawFit(1.0, 0.5), PowerLawFit(30.0, -0.05), PowerLawFit(0.01, 1.0), PowerLawFit(1e-3, 0.3))
    small = plan_run(1e12, laws)
    big = plan_run(1e22, laws)
    assert small.batch_seqs < 256 and small.beta2 == 0.99
    assert big.batch_seqs >= 256 and big.beta2 == 0.98


@settings(max_examples=30)
@given(lc1=st.floats(15, 27), lc2=st.floats(15, 27))
def test_plan_monotone_in_budget(lc1, lc2):
    laws = PlannerLaws.from_published("masked")
    lo, hi = sorted([10**lc1, 10**lc2])
    a, b = plan_run(lo, laws), plan_run(hi, laws)
    assert a.M <= b.M and a.D <= b.D and a.loss >= b.loss
