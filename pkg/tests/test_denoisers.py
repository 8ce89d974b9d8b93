import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffscale.denoisers import (
    BayesOracleDenoiser,
    EnumerableDataset,
    InconsistentObservationError,
    LaProp,
    MarginalDenoiser,
    OptimizerConfig,
    TabularDenoiser,
    UniformDenoiser,
    baseline_denoiser,
    prompt_length,
    train_tabular,
    training_batch,
)
from diffscale.elbo import dataset_nelbo, sample_forward
from diffscale.noise import MixingSchedule, Vocab

MASKED, UNIFORM = MixingSchedule(b=-1000), MixingSchedule(b=1000)
V3 = Vocab.with_mask_last(2)  # tokens A, B and the mask
V4 = Vocab.with_mask_last(3)


def test_oracle_masking_examples():
    data = EnumerableDataset.uniform([[0], [1]])
    oracle = BayesOracleDenoiser(MASKED, V3).fit(data)
    np.testing.assert_allclose(oracle.predict_proba([V3.mask_id], [0.0])[0], [0.5, 0.5, 0], atol=1e-15)
    np.testing.assert_allclose(oracle.predict_proba([0], [0.0])[0], [1, 0, 0], atol=1e-15)


def test_oracle_uniform_noise_example():
    data = EnumerableDataset([[0], [1]], [0.75, 0.25])
    oracle = BayesOracleDenoiser(UNIFORM, V3).fit(data)
    assert oracle.predict_proba([0], [0.0])[0, 0] == pytest.approx(0.9, abs=1e-12)
    # the leave-one-out posterior of a single token is the data marginal
    loo = BayesOracleDenoiser(UNIFORM, V3, mode="leave-one-out").fit(data)
    np.testing.assert_allclose(loo.predict_proba([0], [0.0])[0], [0.75, 0.25, 0], atol=1e-15)


def test_oracle_inconsistent_observation():
    data = EnumerableDataset.uniform([[0]])
    with pytest.raises(InconsistentObservationError):
        BayesOracleDenoiser(MASKED, V3).fit(data).predict_proba([1], [0.0])
    fallback = BayesOracleDenoiser(MASKED, V3, on_inconsistent="factorize").fit(data)
    np.testing.assert_allclose(fallback.predict_proba([1], [0.0])[0], [1, 0, 0])
    assert fallback.n_inconsistent_ == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), b=st.sampled_from([-1000.0, -2.0, 0.0, 2.0, 1000.0]))
def test_oracle_outputs_are_distributions(seed, b):
    rng = np.random.default_rng(seed)
    data = EnumerableDataset.random(rng, 3, 3, 6)
    sched = MixingSchedule(b=b)
    oracle = BayesOracleDenoiser(sched, V4, mode="leave-one-out").fit(data)
    lam = rng.uniform(-9, 9, 3)
    z = sample_forward(sched, V4, data.sample(rng, 1)[0], lam, rng)
    out = oracle.predict_proba(z, lam)
    assert np.all(out[:, V4.mask_id] == 0)
    np.testing.assert_allclose(out.sum(-1), 1, atol=1e-12)


def test_oracle_unmasked_position_is_one_hot_under_masking():
    data = EnumerableDataset.uniform([[0, 1], [1, 2], [2, 0]])
    oracle = BayesOracleDenoiser(MASKED, V4).fit(data)
    out = oracle.predict_proba([1, V4.mask_id], [0.0, 0.0])
    np.testing.assert_allclose(out[0], np.eye(4)[1])
    np.testing.assert_allclose(out[1], np.eye(4)[2])


def test_tabular_predictions():
    model = TabularDenoiser(UNIFORM, V4, 8).init_params()
    out = model.predict_proba([0, 1, 3], [-9.0, 0.0, 9.0])
    np.testing.assert_allclose(out, np.tile([1 / 3, 1 / 3, 1 / 3, 0], (3, 1)), atol=1e-15)
    logits = np.zeros((8, 4, 4))
    logits[:, np.arange(4), np.arange(4)] = 10.0
    model.init_params(logits)
    out = model.predict_proba([0, 1, 2], [0.0, 0.0, 0.0])
    assert np.all(out[np.arange(3), [0, 1, 2]] >= 0.999)
    assert model.bucket(-9.0) == 0 and model.bucket(9.0) == 7
    assert model.n_params == 8 * 4 * 3


def test_tabular_rejects_out_of_range_levels():
    from diffscale.noise import RangeError

    with pytest.raises(RangeError):
        TabularDenoiser(UNIFORM, V4, 4).init_params().predict_proba([0], [10.0])


def test_baselines():
    np.testing.assert_allclose(UniformDenoiser(V4).fit().predict_proba([0, 3], [0, 0]), [[1 / 3, 1 / 3, 1 / 3, 0]] * 2)
    data = EnumerableDataset.uniform([[0, 0], [0, 1]])
    out = MarginalDenoiser(V4).fit(data).predict_proba([3, 3], [0, 0])
    np.testing.assert_allclose(out, [[1, 0, 0, 0], [0.5, 0.5, 0, 0]])
    assert isinstance(baseline_denoiser("product-of-marginals", data, V4), MarginalDenoiser)
    with pytest.raises(ValueError):
        baseline_denoiser("bigram", data, V4)


def test_oracle_beats_tabular_and_baselines():
    rng = np.random.default_rng(0)
    for _ in range(3):
        data = EnumerableDataset.random(rng, 3, 2, 5)
        sched = MixingSchedule(b=float(rng.choice([-1000, 0, 1000])))
        oracle = BayesOracleDenoiser(sched, V4, mode="leave-one-out").fit(data)
        tab = TabularDenoiser(sched, V4, 4).init_params(rng.normal(size=(4, 4, 4)))
        o = dataset_nelbo(data, oracle, sched, V4, 128)
        for other in (tab, MarginalDenoiser(V4).fit(data), UniformDenoiser(V4).fit()):
            assert o <= dataset_nelbo(data, other, sched, V4, 128) + 1e-12


def test_optimizer_config_defaults_and_validation():
    cfg = OptimizerConfig()
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.warmup_steps) == (0.9, 0.99, 1e-8, 2000)
    assert OptimizerConfig.beta2_for_batch(256) == 0.98 and OptimizerConfig.beta2_for_batch(255) == 0.99
    assert cfg.lr_at(1000) == pytest.approx(0.05) and cfg.lr_at(5000) == 0.1
    for bad in ({"beta1": 1.0}, {"eps": 0.0}, {"learning_rate": -1.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            OptimizerConfig(**bad)


def test_laprop_first_step_is_sign_sized():
    opt = LaProp((3,), 0.9, 0.99, 0.0)
    theta = np.zeros(3)
    opt.step(theta, np.array([2.0, -0.5, 1e-3]), 0.1)
    np.testing.assert_allclose(theta, [-0.1, 0.1, -0.1])


def test_zero_learning_rate_keeps_logits():
    data = EnumerableDataset.uniform([[0, 1], [2, 2]])
    init = np.random.default_rng(1).normal(size=(4, 4, 4))
    cfg = OptimizerConfig(learning_rate=0.0, batch_size=8, warmup_steps=0)
    model, curve = train_tabular(data, UNIFORM, V4, cfg, n_steps=20, n_buckets=4, init_logits=init, eval_every=5)
    np.testing.assert_array_equal(model.logits_, init.reshape(model.logits_.shape))
    assert len(set(curve.eval_nelbo)) == 1


def test_training_is_deterministic_and_approaches_oracle():
    data = EnumerableDataset([[0], [1], [2]], [0.6, 0.3, 0.1])
    sched = MixingSchedule(b=0)
    cfg = OptimizerConfig(learning_rate=0.005, batch_size=256, warmup_steps=50)
    kw = dict(cfg=cfg, n_steps=3000, n_buckets=8, rng_seed=3, eval_steps=[3000], prompt_fraction=0.0)
    m1, c1 = train_tabular(data, sched, V4, **kw)
    m2, c2 = train_tabular(data, sched, V4, **kw)
    assert c1.surrogate == c2.surrogate
    np.testing.assert_array_equal(m1.logits_, m2.logits_)
    oracle = BayesOracleDenoiser(sched, V4, mode="leave-one-out").fit(data)
    ref = dataset_nelbo(data, oracle, sched, V4, 128)
    assert c1.eval_nelbo[-1] <= 1.05 * ref


def test_prompted_tokens_carry_no_loss():
    data = EnumerableDataset.uniform([[0, 1, 2], [2, 1, 0]])
    rng = np.random.default_rng(0)
    batch = training_batch(rng, data, UNIFORM, V4, 200, prompt_fraction=1.0)
    assert np.all(batch.loss_mask == ~batch.prompt_mask)
    assert np.all(batch.z[batch.prompt_mask] == batch.x[batch.prompt_mask])
    model = TabularDenoiser(UNIFORM, V4, 4).init_params(rng.normal(size=(4, 4, 4)))
    only_prompt = batch.prompt_mask.astype(float)
    loss, _ = model.loss_and_grad(batch.x, batch.z, batch.lam, np.zeros_like(only_prompt))
    assert loss == 0.0


def test_prompt_length_rule():
    np.testing.assert_array_equal(prompt_length(np.array([1.0, 0.0, -1.0]), 10), [0, 9, 9])


def test_empty_token_padding():
    vocab = Vocab(size=5, mask_id=3, empty_id=4)
    data = EnumerableDataset.uniform([[0, 1, 2, 0, 1]])
    batch = training_batch(np.random.default_rng(0), data, UNIFORM, vocab, 50, empty_fraction_max=0.4)
    assert batch.x.shape == (50, 7)
    assert np.all(batch.x[:, 5:] == 4)
    with pytest.raises(ValueError):
        training_batch(np.random.default_rng(0), data, UNIFORM, V4, 5, empty_fraction_max=0.4)
    with pytest.raises(ValueError):
        training_batch(np.random.default_rng(0), data, UNIFORM, vocab, 5, forcing_fraction=1.5)


def test_checkpoint_round_trip(tmp_path):
    data = EnumerableDataset.uniform([[0, 1], [1, 0]])
    model, _ = train_tabular(data, UNIFORM, V4, OptimizerConfig(batch_size=4, warmup_steps=0), n_steps=5, n_buckets=4)
    path = tmp_path / "ckpt.json"
    model.save(path)
    back = TabularDenoiser.load(path)
    np.testing.assert_array_equal(back.logits_, model.logits_)
    assert back.optimizer_.t == 5
    np.testing.assert_array_equal(back.optimizer_.v, model.optimizer_.v)
    rec = json.loads(path.read_text())
    rec["version"] = 99
    path.write_text(json.dumps(rec))
    with pytest.raises(ValueError):
        TabularDenoiser.load(path)


def test_dataset_validation():
    with pytest.raises(ValueError):
        EnumerableDataset([[0]], [0.5])
    with pytest.raises(ValueError):
        EnumerableDataset(np.zeros((0, 2)), [])
    d = EnumerableDataset.iid([0.5, 0.5], 2)
    assert len(d.sequences) == 4 and d.entropy() == pytest.approx(2 * np.log(2))
    assert EnumerableDataset.from_json(d.to_json()).weights.tolist() == d.weights.tolist()
