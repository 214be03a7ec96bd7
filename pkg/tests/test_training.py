import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vdanlg import autodiff as ad
from vdanlg.corpus import build_vocab
from vdanlg.generator import Gaussian, Model
from vdanlg.synthetic import RESTAURANT, make_corpus
from vdanlg.training import (AdamState, NonFiniteGradient, TrainConfig, Trainer, _run_epochs,
                             adam_step, adapt, adapt_iteration, grl_lambda, kl_anneal_weight,
                             kl_gaussians, lr_at_epoch, model_kwargs, vae_loss)


def G(mu, lv):
    return Gaussian(ad.constant(np.asarray(mu, float)), ad.constant(np.asarray(lv, float)))


def mc_kl(q_mu, q_lv, p_mu, p_lv, n, rng):
    """Monte-Carlo mean and standard error of log q(z) - log p(z), z ~ q."""
    q_mu, q_lv, p_mu, p_lv = map(np.asarray, (q_mu, q_lv, p_mu, p_lv))
    z = q_mu + np.exp(0.5 * q_lv) * rng.standard_normal((n, q_mu.size))

    def logpdf(z, mu, lv):
        return -0.5 * (np.log(2 * np.pi) + lv + (z - mu) ** 2 / np.exp(lv)).sum(axis=1)

    d = logpdf(z, q_mu, q_lv) - logpdf(z, p_mu, p_lv)
    return d.mean(), d.std(ddof=1) / math.sqrt(n)


@pytest.mark.parametrize("q,p,expected", [
    (([1.0], [0.0]), ([0.0], [0.0]), 0.5),
    (([0.0], [math.log(4)]), ([0.0], [0.0]), 0.5 * (-math.log(4) + 4 - 1)),
])
def test_kl_examples_against_monte_carlo(q, p, expected):
    kl = float(kl_gaussians(G(*q), G(*p)).value)
    assert kl == pytest.approx(expected, abs=1e-12)
    est, se = mc_kl(*q, *p, 100_000, np.random.default_rng(0))
    assert abs(kl - est) < 3 * se


def test_kl_identical_is_zero_and_rejects_mismatch():
    g = G([0.3, -1.2], [0.1, 0.7])
    assert float(kl_gaussians(g, g).value) == 0.0
    assert round(0.5 * (-math.log(4) + 3), 4) == 0.8069
    with pytest.raises(ad.ShapeError):
        kl_gaussians(G([0.0], [0.0]), G([0.0, 0.0], [0.0, 0.0]))


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_kl_nonnegative(xs):
    assert float(kl_gaussians(G(xs[:1] + xs[1:2], xs[2:]), G([0.0, 0.0], [0.0, 0.0])).value) >= -1e-12


def test_schedule_examples():
    assert grl_lambda(0, 8600) == 0.0
    assert grl_lambda(8600, 8600) == pytest.approx(0.999909, abs=1e-6)
    assert grl_lambda(4300, 8600) == pytest.approx(0.986614, abs=1e-6)
    assert kl_anneal_weight(0, 2000) == 0.0
    assert kl_anneal_weight(1000, 2000) == 0.5
    assert kl_anneal_weight(2000, 2000) == kl_anneal_weight(10**6, 2000) == 1.0


@given(st.integers(0, 20000), st.integers(0, 20000))
def test_schedules_monotone_and_bounded(a, b):
    a, b = sorted((a, b))
    for f, n in ((grl_lambda, 8600), (kl_anneal_weight, 2000)):
        assert 0.0 <= f(a, n) <= f(b, n) <= 1.0


def test_lr_decay_example():
    cfg = TrainConfig()
    assert lr_at_epoch(cfg, cfg.decay_start_epochs + 2) == pytest.approx(0.001 * 0.95 ** 2,
                                                                         rel=1e-15)
    assert lr_at_epoch(cfg, 0) == lr_at_epoch(cfg, cfg.decay_start_epochs) == 0.001


def test_adam_zero_gradient_leaves_params():
    p = {"w": ad.parameter(np.array([0.5, -1.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert p["w"].value.tolist() == [0.5, -1.0]


def test_adam_first_and_second_step_trace():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": ad.parameter(np.zeros(3))}
    st_ = AdamState()
    adam_step(p, {"w": g}, st_, 0.01)
    step1 = p["w"].value.copy()
    # bias-corrected first moment is g, second is g^2
    np.testing.assert_allclose(step1, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert np.all(np.sign(step1) == -np.sign(g)) and np.all(np.abs(step1) <= 0.01)
    adam_step(p, {"w": g}, st_, 0.01)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g * g + 0.001 * g * g
    step2 = -0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"].value - step1, step2, rtol=1e-12)
    # a smaller gradient after a large one takes a smaller step than it would alone
    p = {"w": ad.parameter(np.zeros(1))}
    st_ = AdamState()
    adam_step(p, {"w": np.array([1.0])}, st_, 0.01)
    before = p["w"].value.copy()
    adam_step(p, {"w": np.array([0.1])}, st_, 0.01)
    assert abs(p["w"].value - before)[0] < 0.01


def test_adam_rejects_nan_naming_parameter():
    p = {"enc.emb": ad.parameter(np.zeros(2))}
    with pytest.raises(NonFiniteGradient, match="enc.emb"):
        adam_step(p, {"enc.emb": np.array([np.nan, 0.0])}, AdamState(), 0.1)


@pytest.fixture(scope="module")
def toy():
    data = make_corpus(RESTAURANT, 10, seed=0, domain="source")
    return data, build_vocab(data)


def small_cfg(**kw):
    base = dict(d_h=8, d_z=4, keep_dropout=1.0, lr=0.003, beam_width=3, K=4, k=3, max_len=20,
                max_epochs=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_vae_loss_examples(toy):
    data, vocab = toy
    cfg = small_cfg()
    m = Model.create(vocab, 0, **model_kwargs(cfg))
    ex = data[0]
    ids = vocab.ids(ex.tokens)
    eps = np.zeros(cfg.d_z)
    out = vae_loss(m, ex.da, ids, 0, cfg, eps=eps, train=False)
    assert out.kl_weight == 0.0 and float(out.total.value) == float(out.recon.value)
    # posterior wired to ignore h_Y and copy the prior
    p = m.params
    h = cfg.d_h
    p["post.Wz"].value = np.concatenate([p["prior.Wz"].value, np.zeros((cfg.d_z, h))], axis=1)
    for a in ("bz", "Wmu", "bmu", "Wsig", "bsig"):
        p[f"post.{a}"].value = p[f"prior.{a}"].value.copy()
    out = vae_loss(m, ex.da, ids, 5000, cfg, eps=eps, train=False)
    assert float(out.kl.value) == 0.0
    assert float(out.total.value) == float(out.recon.value)
    p["dec.Wout"].value[:] = 0
    p["dec.bout"].value[:] = 0
    out = vae_loss(m, ex.da, ids, 5000, cfg, eps=eps, train=False)
    assert float(out.recon.value) == pytest.approx((len(ids) + 1) * math.log(len(vocab)), rel=1e-12)


def test_pretraining_loss_decreases(toy):
    data, vocab = toy
    cfg = small_cfg()
    m = Model.create(vocab, 0, **model_kwargs(cfg))
    tr = Trainer(m, cfg)

    def corpus_loss():
        eps = np.zeros(cfg.d_z)
        with ad.no_grad():
            return sum(float(vae_loss(m, ex.da, vocab.ids(ex.tokens), 0, cfg, eps=eps,
                                      train=False).total.value) for ex in data)

    start = corpus_loss()
    losses = [tr.generator_step(data[i % len(data)], cfg.lr, "pretrain") for i in range(50)]
    assert corpus_loss() < start
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_early_stopping_halts_after_patience(toy):
    data, vocab = toy
    cfg = small_cfg(max_epochs=20, patience=3)
    m = Model.create(vocab, 0, **model_kwargs(cfg))
    tr = Trainer(m, cfg)
    _run_epochs(tr, data[:2], data[:2], lambda ex, lr: None, 5)
    assert sum(r["kind"] == "V" for r in tr.log.records) == 1 + cfg.patience


def test_adapt_iteration_trace(toy):
    data, vocab = toy
    cfg = small_cfg(K=10, k=3)
    m = Model.create(vocab, 0, **model_kwargs(cfg))
    tr = Trainer(m, cfg)
    adapt_iteration(tr, data[0], data[1:], cfg.lr)
    assert tr.dc_seen == {"source": 1, "target": 1, "generated": 3}
    kinds = [r["kind"] for r in tr.log.records]
    assert kinds == ["D", "G", "S", "D", "S", "D", "S", "D", "S"]


def test_adapt_with_empty_target_returns_params_unchanged(toy):
    data, vocab = toy
    cfg = small_cfg()
    m = Model.create(vocab, 0, **model_kwargs(cfg))
    before = {n: p.value.copy() for n, p in m.params.items()}
    out = adapt(m, data, [], [], cfg)
    assert all(np.array_equal(before[n], p.value) for n, p in out.params.items())
    with pytest.raises(ValueError):
        adapt(None, data, data, [], cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(keep_dropout=0.0)
    with pytest.raises(ValueError):
        TrainConfig(d_h=0)
