import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffscale.curves import flops_per_token, load_runs
from diffscale.scaling import (
    ConvergenceError,
    LowQualityWarning,
    PowerLawFit,
    PowerLawRegressor,
    bootstrap_ci,
    common_flop_targets,
    compute_optimal_laws,
    crossing,
    extract_isoflop,
    fit_power_law,
    interior_flop_targets,
    parabola_optimum,
    params_from_flops,
    power_law_with_ci,
    value_at,
)
from diffscale.synthetic import ChinchillaSurface, chinchilla_runs, log_spaced_family


def test_value_at_knot_and_analytic_curve():
    C = np.geomspace(1e15, 1e20, 50)
    y = 3 * C**-0.05
    assert value_at(C, y, C[17]) == pytest.approx(y[17], rel=1e-12)
    for target in np.geomspace(2e15, 5e19, 9):
        assert value_at(C, y, target) == pytest.approx(3 * target**-0.05, rel=1e-4)
        assert value_at(C, y, target, space="linear") == pytest.approx(3 * target**-0.05, rel=1e-3)
    assert value_at(C, y, 1e14) is None and value_at(C, y, 1e21) is None


def test_value_at_window_one_warns():
    C = np.geomspace(1, 100, 10)
    with pytest.warns(LowQualityWarning):
        v = value_at(C, 1 / C, 11.0, window=1)
    assert v == pytest.approx(1 / C[np.argmin(np.abs(np.log(C) - np.log(11.0)))])


def test_crossing():
    x = np.geomspace(1, 1e4, 40)
    y = 10 * x**-0.2
    target = 10 * 300.0**-0.2
    assert crossing(x, y, target) == pytest.approx(300.0, rel=1e-9)
    assert crossing(x, y, 0.1) is None
    assert crossing(x, y, y[5]) == pytest.approx(x[5])


def test_parabola_examples():
    u = np.log(np.geomspace(1e8, 1e10, 6))
    u0, L0 = np.log(3e9), 2.7
    opt = parabola_optimum(np.exp(u), 0.05 * (u - u0) ** 2 + L0)
    assert abs(np.log(opt.M_opt) - u0) < 1e-10 and abs(opt.loss_opt - L0) < 1e-10 and not opt.fallback
    v = parabola_optimum([1e8, 1e9, 1e10], [3.0, 2.0, 3.0])
    assert v.M_opt == pytest.approx(1e9, rel=1e-12)


def test_parabola_fallbacks():
    with pytest.warns(LowQualityWarning):
        assert parabola_optimum([1e8, 1e9, 1e10], [2.0, 3.0, 2.1]).fallback
    with pytest.warns(LowQualityWarning):
        assert parabola_optimum([1e8, 1e8, 1e9], [2.0, 2.1, 2.2]).fallback
    with pytest.warns(LowQualityWarning):
        out = parabola_optimum([1e8, 1e9, 1e10, 1e11], [3.0, 2.9, 2.81, 2.73])
    assert out.fallback and out.M_opt == 1e11


def test_parabola_noisy_vertex():
    rng = np.random.default_rng(0)
    u = np.log(np.geomspace(1e8, 1e10, 5))
    u0 = np.log(1e9)
    errs = []
    for _ in range(100):
        y = 0.1 * (u - u0) ** 2 + 3.0 + rng.normal(0, 1e-3, u.size)
        errs.append(abs(parabola_optimum(np.exp(u), y).M_opt / 1e9 - 1))
    assert np.median(errs) <= 0.02


def test_power_law_exact_and_scale_equivariance():
    xs = np.geomspace(1, 1e6, 9)
    f = fit_power_law(xs, 2 * xs**0.5)
    assert abs(f.A - 2) < 1e-10 and abs(f.alpha - 0.5) < 1e-10 and abs(f.r_squared - 1) < 1e-10
    g = fit_power_law(7.0 * xs, 2 * xs**0.5)
    assert g.alpha == pytest.approx(f.alpha, abs=1e-10)
    assert g.A == pytest.approx(f.A * 7.0**-f.alpha, rel=1e-10)


def test_power_law_intercept_noisy_median():
    rng = np.random.default_rng(1)
    xs = np.geomspace(1, 1e4, 20)
    Es = []
    for _ in range(100):
        ys = (5 * xs**0.3 + 1.5) * (1 + 0.01 * rng.standard_normal(xs.size))
        Es.append(fit_power_law(xs, ys, with_intercept=True).E)
    assert abs(np.median(Es) / 1.5 - 1) <= 0.10


def test_power_law_errors():
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, -1, 2])
    with pytest.raises(ValueError):
        fit_power_law([1, 2], [1, 2])
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, 2, 3], with_intercept=True)
    with pytest.raises(ValueError):
        fit_power_law([2, 2, 2], [1, 2, 3])
    with pytest.raises(ConvergenceError):
        fit_power_law(np.geomspace(1, 1e4, 10), np.geomspace(1, 1e4, 10) ** 0.3 + 1, with_intercept=True, max_nfev=1)


def test_regressor_and_serialization():
    xs = np.geomspace(1, 100, 8)
    reg = PowerLawRegressor().fit(xs[:, None], 3 * xs**-0.2)
    np.testing.assert_allclose(reg.predict([[10.0]]), [3 * 10**-0.2], rtol=1e-12)
    assert reg.score(xs[:, None], 3 * xs**-0.2) == pytest.approx(1.0)
    f = power_law_with_ci(xs, 3 * xs**-0.2, n_resamples=20)
    assert PowerLawFit.from_json(f.to_json()) == f


def test_bootstrap_zero_noise_and_determinism():
    xs = np.geomspace(1, 1e3, 10)
    ys = 4 * xs**0.45
    f = power_law_with_ci(xs, ys, n_resamples=200, rng_seed=3)
    for k in ("A", "alpha"):
        lo, hi = f.ci[k]
        assert hi - lo <= 1e-8 and lo <= getattr(f, k) + 1e-12 and hi >= getattr(f, k) - 1e-12
    g = power_law_with_ci(xs, ys * (1 + 0.01 * np.sin(xs)), n_resamples=200, rng_seed=3)
    h = power_law_with_ci(xs, ys * (1 + 0.01 * np.sin(xs)), n_resamples=200, rng_seed=3)
    assert g.ci == h.ci
    with pytest.raises(ValueError):
        bootstrap_ci(lambda x, y: {}, [1, 1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        power_law_with_ci(xs, ys, level="90%")


def test_bootstrap_coverage():
    rng = np.random.default_rng(45)
    xs = np.geomspace(1, 1e4, 15)
    hits = 0
    for rep in range(100):
        ys = 2 * xs**0.45 * np.exp(0.05 * rng.standard_normal(xs.size))
        lo, hi = power_law_with_ci(xs, ys, n_resamples=300, rng_seed=rep).ci["alpha"]
        hits += lo <= 0.45 <= hi
    assert hits >= 90


def test_params_from_flops_interpolates_family():
    fam_M = np.array([1e8, 1e9, 1e10])
    fam_P = fam_M / 6
    np.testing.assert_allclose(params_from_flops([3e8, 1e11], fam_M, fam_P), [5e7, 1e11 / 6], rtol=1e-12)


@pytest.fixture(scope="module")
def chinchilla():
    surf = ChinchillaSurface()
    models = log_spaced_family(12)
    runs = chinchilla_runs(surf, models, "method1")
    return surf, models, runs


def test_extract_isoflop_keeps_best_configuration():
    surf = ChinchillaSurface()
    models = log_spaced_family(6)
    runs = chinchilla_runs(surf, models, "method1", lrs=(0.3, 0.5))
    M = sorted(flops_per_token(m, "method1") for m in models)
    target = M[-1] * 1e6
    pts = extract_isoflop(runs, [target])
    assert len({p.model for p in pts}) == len(pts)
    for p in pts:
        assert p.loss == min(value_at(r.flops(), r.loss, target) for r in runs if r.model.label == p.model
                             and value_at(r.flops(), r.loss, target) is not None)


def test_compute_optimal_laws_recovers_exponents(chinchilla):
    surf, models, runs = chinchilla
    targets = interior_flop_targets(runs, 6)
    for smoothing in ("raw", "sq-fit"):
        laws = compute_optimal_laws(runs, targets, "method1", smoothing)
        assert abs(laws.M.alpha - surf.alpha_M) <= 0.02 and abs(laws.D.alpha - surf.alpha_D) <= 0.02
        assert abs(laws.complementarity - 1) <= 0.01
        assert laws.L.alpha < 0
        assert all(p.params_P > 0 for p in laws.frontier)


def test_compute_optimal_laws_bootstrap(chinchilla):
    _, _, runs = chinchilla
    laws = compute_optimal_laws(runs, interior_flop_targets(runs, 6), n_bootstrap=50)
    lo, hi = laws.M.ci["alpha"]
    assert lo <= laws.M.alpha <= hi


def test_target_helpers(chinchilla):
    _, _, runs = chinchilla
    common = common_flop_targets(runs, 5)
    assert len(common) == 5 and np.all(np.diff(common) > 0)
    with pytest.raises(ValueError):
        compute_optimal_laws(runs, common[:3])
    with pytest.raises(ValueError):
        compute_optimal_laws(runs, common, smoothing="cubic")


def test_mixed_noise_rejected(chinchilla):
    _, _, runs = chinchilla
    other = chinchilla_runs(ChinchillaSurface(), log_spaced_family(3), "method1", noise_b=1000.0)
    with pytest.raises(ValueError, match="noise"):
        extract_isoflop(list(runs) + list(other), [1e18])


def test_bundled_synthetic_runs_fit():
    from importlib import resources

    path = resources.files("diffscale.fixtures").joinpath("synthetic_runs.jsonl")
    runs = load_runs(path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowQualityWarning)
        laws = compute_optimal_laws(runs, interior_flop_targets(runs, 8, "method1"), "method1")
    assert abs(laws.M.alpha - 0.5) <= 0.02
