import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from erpdiff.autodiff import Adam
from erpdiff.dataio import generate_synthetic
from erpdiff.diffusion import (SampleConfig, SamplerDivergence, TrainConfig, VpSchedule, guided_eps, load_model,
                               pc_sample, sample_matched, time_grid, train, train_step, validation_loss)
from erpdiff.epochs import ConditionKey, EpochSet
from erpdiff.model import ModelConfig, ScoreNet

from oracles import GaussianDenoiser, ancestral_reference
from conftest import make_set, small_spec

SCHED = VpSchedule()


class TestSchedule:
    def test_endpoints(self):
        m0, s0 = SCHED.marginal(0.0)
        assert (m0, s0) == (1.0, 0.0)
        m1, s1 = SCHED.marginal(1.0)
        assert abs(m1 - math.exp(-5.025)) < 1e-6
        assert m1 == pytest.approx(6.56e-3, rel=2e-3) and s1 == pytest.approx(0.99998, abs=1e-5)

    def test_variance_ode(self):
        """dv/dt = beta(t) (1 - v) with v(0) = 0 integrates to sigma(t)^2."""
        ts = np.linspace(0, 1, 11)
        sol = solve_ivp(lambda t, v: SCHED.beta(t) * (1 - v), (0, 1), [0.0], t_eval=ts, rtol=1e-10, atol=1e-12)
        _, sigma = SCHED.marginal(ts)
        np.testing.assert_allclose(sol.y[0], sigma ** 2, atol=1e-4)
        # the mean coefficient obeys dm/dt = -beta m / 2
        solm = solve_ivp(lambda t, m: -0.5 * SCHED.beta(t) * m, (0, 1), [1.0], t_eval=ts, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(solm.y[0], SCHED.marginal(ts)[0], atol=1e-4)

    def test_monotone(self):
        m, _ = SCHED.marginal(np.linspace(0, 1, 1000))
        assert np.all(np.diff(m) < 0)

    def test_errors(self):
        with pytest.raises(ValueError):
            SCHED.marginal(1.01)
        with pytest.raises(ValueError):
            VpSchedule(beta_min=5, beta_max=1)

    @pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
    def test_perturbation_variance(self, t):
        rng = np.random.default_rng(0)
        x0 = np.full((10_000, 1), 2.5)
        xt = SCHED.perturb(x0, t, rng.standard_normal(x0.shape))
        _, sigma = SCHED.marginal(t)
        assert xt.var() / sigma ** 2 == pytest.approx(1.0, abs=0.02)

    @pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
    def test_variance_preserving(self, t):
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((10_000, 1))
        xt = SCHED.perturb(x0, t, rng.standard_normal(x0.shape))
        assert xt.std() == pytest.approx(1.0, abs=0.02)


class TestGuidance:
    class Const:
        def __init__(self, a, b):
            self.a, self.b = a, b

        def __call__(self, x, t, idx):
            return np.full(x.shape, self.b if idx[0, 0] < 0 else self.a)

        def null_indices(self, n):
            return np.full((n, 3), -1)

    x = np.zeros((2, 3))
    cond = np.zeros((2, 3), dtype=int)

    def test_w_zero_identity(self):
        den = self.Const(0.37, 11.0)
        assert np.array_equal(guided_eps(den, self.x, 0.5, self.cond, 0.0), den(self.x, 0.5, self.cond))

    def test_w_one(self):
        out = guided_eps(self.Const(1.5, -0.25), self.x, 0.5, self.cond, 1.0)
        assert np.all(out == 2 * 1.5 + 0.25)

    def test_equal_branches(self):
        for w in (0.0, 0.5, 3.0, 7.25):
            assert np.all(guided_eps(self.Const(0.3, 0.3), self.x, 0.5, self.cond, w) == 0.3)

    def test_affine_interpolation(self):
        # dyadic inputs keep every product and difference exact
        a = np.array([[0.5, -1.25, 3.0], [2.0, 0.75, -0.125]])
        b = np.array([[1.5, 0.25, -2.0], [0.5, 0.5, 4.0]])

        class Den(self.Const):
            def __call__(s, x, t, idx):
                return b if idx[0, 0] < 0 else a

        den = Den(0, 0)
        e0, e1 = (guided_eps(den, self.x, 0.5, self.cond, w) for w in (0.0, 1.0))
        for w in (0.0, 1.0, 2.0, 4.0, 0.5):
            assert np.array_equal(guided_eps(den, self.x, 0.5, self.cond, w), e0 + w * (e1 - e0))

    def test_w_zero_skips_unconditional_pass(self):
        calls = []

        class Den(self.Const):
            def __call__(s, x, t, idx):
                calls.append(idx[0, 0])
                return np.zeros(x.shape)

        guided_eps(Den(0, 0), self.x, 0.5, self.cond, 0.0)
        assert calls == [0]


class TestSampler:
    def test_gaussian_oracle(self):
        den = GaussianDenoiser()
        cfg = SampleConfig(n_steps=1000, guidance_scale=0.0, corrector_snr=0.16, seed=0)
        x = pc_sample(den, np.zeros((10_000, 3), int), (1,), cfg, rng=np.random.default_rng(0))
        assert x.mean() == pytest.approx(3.0, abs=0.05)
        assert x.std() == pytest.approx(0.5, abs=0.05)

    def test_predictor_only_matches_reference(self):
        den = GaussianDenoiser()
        cfg = SampleConfig(n_steps=200, guidance_scale=0.0, corrector_steps=0, predictor="ancestral")
        ours = pc_sample(den, np.zeros((500, 3), int), (1, 1), cfg, rng=np.random.default_rng(7))
        ref = ancestral_reference(den, 500, 200, seed=7)
        np.testing.assert_allclose(ours, ref, rtol=1e-4, atol=1e-4)

    def test_reverse_diffusion_close_to_reference(self):
        den = GaussianDenoiser()
        cfg = SampleConfig(n_steps=1000, guidance_scale=0.0, corrector_steps=0)
        ours = pc_sample(den, np.zeros((500, 3), int), (1, 1), cfg, rng=np.random.default_rng(7))
        ref = ancestral_reference(den, 500, 1000, seed=7)
        assert np.max(np.abs(ours - ref)) < 0.02

    @pytest.mark.parametrize("predictor", ["reverse_diffusion", "ancestral", "euler_maruyama"])
    def test_predictors_recover_gaussian(self, predictor):
        cfg = SampleConfig(n_steps=500, guidance_scale=0.0, predictor=predictor)
        x = pc_sample(GaussianDenoiser(), np.zeros((4000, 3), int), (1,), cfg, rng=np.random.default_rng(3))
        assert x.mean() == pytest.approx(3.0, abs=0.06) and x.std() == pytest.approx(0.5, abs=0.06)

    def test_seeded_determinism(self):
        cfg = SampleConfig(n_steps=50, guidance_scale=0.0)
        a = pc_sample(GaussianDenoiser(), np.zeros((20, 3), int), (2, 3), cfg)
        b = pc_sample(GaussianDenoiser(), np.zeros((20, 3), int), (2, 3), cfg)
        assert a.tobytes() == b.tobytes()

    def test_too_few_steps_rejected(self):
        with pytest.raises(ValueError, match="n_steps"):
            pc_sample(GaussianDenoiser(), np.zeros((2, 3), int), (1,), SampleConfig(n_steps=10, guidance_scale=0))

    def test_divergence_guard(self):
        class Exploding(GaussianDenoiser):
            def __call__(self, x, t, idx):
                return -1e9 * np.ones_like(x)

        with pytest.raises(SamplerDivergence, match="step 1/"):
            pc_sample(Exploding(), np.zeros((2, 3), int), (1,), SampleConfig(n_steps=30, guidance_scale=0))

    def test_time_grid(self):
        ts, dt = time_grid(4)
        assert ts[0] == 1.0 and ts[-1] == 1e-5 and dt == 0.25 and np.all(np.diff(ts) < 0)

    @pytest.mark.parametrize("kw", [dict(n_steps=0), dict(guidance_scale=-1), dict(corrector_snr=0),
                                    dict(corrector_steps=-1), dict(predictor="ode")])
    def test_config_invalid(self, kw):
        with pytest.raises(ValueError):
            SampleConfig(**kw)


def tiny_config(real):
    return ModelConfig(n_channels=real.n_channels, n_samples=real.epoch_len, n_blocks=2, residual_channels=8,
                       skip_channels=8, time_embed_dim=8, cond_embed_dim=8, subject_ids=real.subject_ids,
                       session_ids=real.session_ids)


@pytest.fixture(scope="module")
def toy():
    real = generate_synthetic(small_spec(epochs_per_condition=12, epoch_len=32, fs=64.0, p300_latency=0.25,
                                         session_shift=(0.8, 1 / 64)))
    return real, tiny_config(real)


class TestTraining:
    def test_initial_loss_is_one(self, toy):
        real, mc = toy
        net = ScoreNet(mc)
        store = net.init_params(np.random.default_rng(0))
        big = generate_synthetic(small_spec(epochs_per_condition=100, epoch_len=32))
        assert validation_loss(net, store.raw, big, SCHED, seed=0) == pytest.approx(1.0, abs=0.05)
        cond = net.condition_indices([big.condition_of(i) for i in range(len(big))])
        loss = train_step(net, store, Adam(1e-3), big.data, cond, SCHED, 0.1, np.random.default_rng(0))
        assert loss == pytest.approx(1.0, abs=0.05)

    def test_null_rows_untouched_without_dropout(self, toy):
        real, mc = toy
        net = ScoreNet(mc)
        store = net.init_params(np.random.default_rng(0))
        store.raw["head.w2"][:] = 0.05  # let gradients reach the embeddings from the first step
        before = {k: store.raw[k][-1].copy() for k in ("cond.subject", "cond.session", "cond.class")}
        cond = net.condition_indices([real.condition_of(i) for i in range(len(real))])
        opt, rng = Adam(1e-2), np.random.default_rng(0)
        for _ in range(3):
            train_step(net, store, opt, real.data[:16], cond[:16], SCHED, 0.0, rng)
        for k, row in before.items():
            assert store.raw[k][-1].tobytes() == row.tobytes()
            assert not np.array_equal(store.raw[k][0], net.init_params(np.random.default_rng(0)).raw[k][0])
        for _ in range(3):
            train_step(net, store, opt, real.data[:16], cond[:16], SCHED, 0.9, rng)
        assert any(store.raw[k][-1].tobytes() != row.tobytes() for k, row in before.items())

    @pytest.mark.slow
    def test_loss_halves_within_2000_steps(self):
        real = generate_synthetic(small_spec(ar_coef=0.8, p300_amp=8.0))
        mc = ModelConfig(n_channels=4, n_samples=64, n_blocks=2, residual_channels=16, skip_channels=16,
                         time_embed_dim=16, cond_embed_dim=16, subject_ids=(1, 2), session_ids=(1, 2))
        net = ScoreNet(mc)
        store = net.init_params(np.random.default_rng(0))
        cond = net.condition_indices([real.condition_of(i) for i in range(len(real))])
        opt, rng = Adam(1e-3), np.random.default_rng(0)
        losses = []
        for _ in range(2000):
            idx = rng.integers(0, len(real), 32)
            losses.append(train_step(net, store, opt, real.data[idx], cond[idx], SCHED, 0.1, rng, 0.999))
        assert np.mean(losses[-200:]) <= 0.5 * np.mean(losses[:20])

    def test_train_checkpoints_and_determinism(self, toy, tmp_path):
        real, mc = toy
        cfg = TrainConfig(steps=6, batch_size=8, lr=1e-3, eval_every=3, seed=4)
        a = train(real, mc, cfg, out_dir=tmp_path / "a", val_set=real, meta={"data": {"fs": 64.0}})
        b = train(real, mc, cfg, out_dir=tmp_path / "b")
        assert [p.name for p in a.checkpoints] == ["ckpt_00000003.erpd", "ckpt_00000006.erpd"]
        assert (tmp_path / "a" / "ckpt_00000006.erpd").read_bytes()[100:] != b""
        for k in a.store.raw:
            assert a.store.raw[k].tobytes() == b.store.raw[k].tobytes()
        net, store, sched, header = load_model(a.checkpoints[-1])
        assert header["step"] == 6 and header["data"] == {"fs": 64.0} and header["train"]["seed"] == 4
        assert net.config == mc and sched == SCHED
        log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,val_loss,wall_time" and len(log) == 3

    @pytest.mark.parametrize("kw", [dict(p_uncond=1.0), dict(steps=10, eval_every=3), dict(lr=0),
                                    dict(ema_decay=1.0)])
    def test_config_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSampleMatched:
    def setup_net(self, subjects=(1,), sessions=(1, 2)):
        mc = ModelConfig(n_channels=2, n_samples=8, n_blocks=1, residual_channels=4, skip_channels=4,
                         time_embed_dim=4, cond_embed_dim=4, subject_ids=subjects, session_ids=sessions)
        net = ScoreNet(mc)
        store = net.init_params(np.random.default_rng(0))
        return net, store

    cfg = SampleConfig(n_steps=21, guidance_scale=1.0, batch_size=1000)

    def test_large_imbalanced_counts(self):
        net, store = self.setup_net()
        real = make_set(np.zeros((1, 2, 8)), [1], [1], [1], names=("a", "b"))
        counts = {ConditionKey(1, 1, 1): 522, ConditionKey(1, 1, 0): 2875}
        gen = sample_matched(real, net, store.ema, self.cfg, counts=counts)
        assert gen.counts() == counts and len(gen) == 3397

    def test_counts_follow_real_and_batch_size(self):
        net, store = self.setup_net()
        rng = np.random.default_rng(0)
        n = 23
        real = make_set(rng.normal(size=(n, 2, 8)), [1] * n, rng.integers(1, 3, n), rng.integers(0, 2, n),
                        names=("a", "b"))
        for bs in (1, 4, 50):
            cfg = SampleConfig(n_steps=21, batch_size=bs)
            assert sample_matched(real, net, store.ema, cfg).counts() == real.counts()

    def test_empty(self):
        net, store = self.setup_net()
        empty = EpochSet.empty(make_set(np.zeros((1, 2, 8)), [1], [1], [0], names=("a", "b")).layout, 8, 64.0)
        gen = sample_matched(empty, net, store.ema, self.cfg)
        assert len(gen) == 0

    def test_unknown_condition(self):
        net, store = self.setup_net()
        real = make_set(np.zeros((1, 2, 8)), [7], [1], [0], names=("a", "b"))
        with pytest.raises(ValueError, match="embedding ranges"):
            sample_matched(real, net, store.ema, self.cfg)

    def test_ema_only(self):
        net, store = self.setup_net()
        rng = np.random.default_rng(1)
        for k in store.raw:
            store.ema[k] = rng.normal(size=store.ema[k].shape).astype(np.float32) * 0.3
        real = make_set(np.zeros((3, 2, 8)), [1] * 3, [1, 2, 2], [0, 1, 1], names=("a", "b"))
        a = sample_matched(real, net, store.ema, self.cfg)
        for k in store.raw:
            store.raw[k][:] = np.nan
        b = sample_matched(real, net, store.ema, self.cfg)
        assert a.data.tobytes() == b.data.tobytes() and np.all(np.isfinite(a.data))
