import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffscale.denoisers import BayesOracleDenoiser, EnumerableDataset, TabularDenoiser
from diffscale.elbo import (
    DivergenceError,
    LambdaDistribution,
    dataset_nelbo,
    endpoint_terms,
    is_divergence,
    kl_divergence,
    nats_to_bpb,
    nelbo_integrand,
    nelbo_monte_carlo,
    nelbo_quadrature,
    pointwise_loss,
    surrogate_loss,
)
from diffscale.noise import MixingSchedule, Vocab, elbo_coefficient, forward_marginal, mixing_dist


class OneHot:
    """Denoiser that always predicts a fixed sequence."""

    def __init__(self, seq, vocab):
        self.seq, self.vocab = np.asarray(seq), vocab

    def predict_proba(self, z, lam):
        z = np.atleast_2d(z)
        out = np.zeros(z.shape + (self.vocab.size,))
        out[..., np.arange(len(self.seq)), self.seq] = 1.0
        return out


V4 = Vocab.with_mask_last(3)


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0
    assert kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    assert kl_divergence([0.75, 0.25], [0.25, 0.75]) == pytest.approx(0.5 * math.log(3), abs=1e-12)
    with pytest.raises(DivergenceError):
        kl_divergence([0.5, 0.5], [1, 0])


def test_is_divergence_examples():
    assert is_divergence(1.7, 1.7) == 0
    assert is_divergence(2, 1) == pytest.approx(1 - math.log(2), abs=1e-15)
    assert is_divergence(1, 2) == pytest.approx(math.log(2) - 0.5, abs=1e-15)
    with pytest.raises(DivergenceError):
        is_divergence(0.0, 1.0)


@given(p=st.floats(1e-6, 1e3), q=st.floats(1e-6, 1e3))
def test_is_divergence_non_negative(p, q):
    assert is_divergence(p, q) >= 0


def test_pointwise_loss_perfect_prediction_is_zero():
    for b in (-1000, 0, 1000):
        sched = MixingSchedule(b=b)
        for lam in (-5.0, 0.0, 5.0):
            for z in range(4):
                if forward_marginal(sched, V4, 1, lam)[z] > 0:
                    assert pointwise_loss(sched, V4, 1, z, lam, np.eye(4)[1]) == pytest.approx(0, abs=1e-15)


def test_pointwise_loss_hand_evaluation():
    # b=0, lam=0, x=0, z=1, uniform prediction over clean tokens
    sched = MixingSchedule()
    xhat = np.array([1 / 3, 1 / 3, 1 / 3, 0])
    pi = np.array([1 / 6, 1 / 6, 1 / 6, 1 / 2])
    q_x = 0.5 * np.eye(4)[0] + 0.5 * pi
    q_hat = 0.5 * xhat + 0.5 * pi
    kl = sum(p * math.log(p / q) for p, q in zip(q_x, q_hat))
    r = q_x[1] / q_hat[1]
    weight = 0.5 * (pi[1] - 0.25 / 3) / q_x[1]
    want = weight * (kl + r - math.log(r) - 1)
    assert pointwise_loss(sched, V4, 0, 1, 0.0, xhat) == pytest.approx(want, rel=1e-12)


def test_monte_carlo_and_quadrature_zero_for_perfect_denoiser():
    sched = MixingSchedule()
    seq = np.array([0, 2, 1])
    den = OneHot(seq, V4)
    est = nelbo_monte_carlo(seq, den, sched, V4, LambdaDistribution(), 2000, 3)
    assert est.value == pytest.approx(0, abs=1e-12) and est.std_error == pytest.approx(0, abs=1e-12)
    assert nelbo_quadrature(seq, den, sched, V4).value == pytest.approx(0, abs=1e-12)
    assert surrogate_loss(seq, den, sched, V4, np.zeros(3), rng=np.random.default_rng(0)) == pytest.approx(0, abs=1e-12)


def test_monte_carlo_is_deterministic_and_chunk_independent():
    sched = MixingSchedule(b=-2)
    data = EnumerableDataset(np.array([[0], [1]]), np.array([0.75, 0.25]))
    oracle = BayesOracleDenoiser(sched, V4).fit(data)
    a = nelbo_monte_carlo([0], oracle, sched, V4, LambdaDistribution(), 5000, 7)
    b = nelbo_monte_carlo([0], oracle, sched, V4, LambdaDistribution(), 5000, 7)
    assert a == b


def test_single_token_bound_and_agreement():
    # uniform noise over three clean tokens, p_data = (0.75, 0.25, 0)
    vocab = Vocab.with_mask_last(3)
    sched = MixingSchedule(b=1000)
    data = EnumerableDataset(np.array([[0], [1]]), np.array([0.75, 0.25]))
    oracle = BayesOracleDenoiser(sched, vocab, mode="leave-one-out").fit(data)
    H = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    quad = dataset_nelbo(data, oracle, sched, vocab, include_endpoints=True)
    assert H <= quad < H + 0.05
    mc = [nelbo_monte_carlo([x], oracle, sched, vocab, LambdaDistribution(), 20000, 5 + x) for x in (0, 1)]
    for x, est in enumerate(mc):
        q = nelbo_quadrature([x], oracle, sched, vocab).value
        assert abs(est.value - q) <= 3 * est.std_error


def test_quadrature_grid_convergence():
    sched = MixingSchedule()
    data = EnumerableDataset(np.array([[0, 1], [1, 1]]), np.array([0.6, 0.4]))
    oracle = BayesOracleDenoiser(sched, V4, mode="leave-one-out").fit(data)
    a = nelbo_quadrature([0, 1], oracle, sched, V4, 512).value
    b = nelbo_quadrature([0, 1], oracle, sched, V4, 1024).value
    assert abs(a - b) < 1e-8


def test_quadrature_weights_exact_for_quadratics():
    from diffscale.elbo import quadrature_weights

    grid = np.linspace(-9, 9, 512)
    assert quadrature_weights(grid).sum() == pytest.approx(18, rel=1e-14)
    assert quadrature_weights(grid) @ grid**2 == pytest.approx(2 * 9**3 / 3, rel=1e-12)


def test_surrogate_equals_integrand_at_given_levels():
    sched = MixingSchedule(b=2)
    data = EnumerableDataset(np.array([[0, 1], [2, 1]]), np.array([0.5, 0.5]))
    oracle = BayesOracleDenoiser(sched, V4, mode="leave-one-out").fit(data)
    lam = np.array([0.3, 0.3])
    x = np.array([0, 1])
    rng = np.random.default_rng(0)
    # average the sampled surrogate over z and compare with the exact integrand
    vals = [surrogate_loss(x, oracle, sched, V4, lam, rng=rng) for _ in range(20000)]
    exact = nelbo_integrand(x, oracle, sched, V4, np.array([0.3]))[0]
    assert np.mean(vals) == pytest.approx(exact, abs=4 * np.std(vals) / math.sqrt(len(vals)))


def test_surrogate_matches_tabular_loss():
    sched = MixingSchedule()
    rng = np.random.default_rng(3)
    model = TabularDenoiser(sched, V4, 4).init_params(rng.normal(size=(4, 4, 4)))
    x = np.array([[0, 2, 1]])
    lam = np.array([[-1.0, 0.5, 3.0]])
    z = np.array([[3, 2, 0]])
    loss, _ = model.loss_and_grad(x, z, lam)
    assert surrogate_loss(x[0], model, sched, V4, lam[0], z=z[0]) == pytest.approx(loss, rel=1e-12)


def test_endpoint_terms_vanish_for_masking_reconstruction():
    sched = MixingSchedule(b=-1000)
    val = endpoint_terms([0, 1], sched, V4)
    assert val >= 0 and np.isfinite(val)


def test_lambda_distribution_pdf_integrates_to_one():
    for kind in ("linear", "uniform"):
        d = LambdaDistribution(kind)
        grid = np.linspace(-9, 9, 20001)
        assert np.trapezoid(d.pdf(grid), grid) == pytest.approx(1, abs=1e-6)
        s = d.sample(np.random.default_rng(0), 1000)
        assert s.min() >= -9 and s.max() <= 9
    with pytest.raises(ValueError):
        LambdaDistribution("unit").sample(np.random.default_rng(0), 3)


def test_nats_to_bpb():
    assert nats_to_bpb(1.0) == 0.34124
    assert nats_to_bpb(0.0) == 0
    assert nats_to_bpb(2.506) == pytest.approx(0.8552, abs=1e-4)
    with pytest.raises(ValueError):
        nats_to_bpb(-1)


@settings(max_examples=30)
@given(lam=st.floats(-9, 9), b=st.sampled_from([-1000.0, -2.0, 0.0, 2.0, 1000.0]))
def test_coefficient_non_negative_on_support(lam, b):
    sched = MixingSchedule(b=b)
    coef = elbo_coefficient(sched, V4, lam)
    pi = mixing_dist(sched, V4, lam)
    assert np.all(coef[pi > 0] >= -1e-15)
