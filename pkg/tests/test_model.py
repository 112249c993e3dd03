import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erpdiff import autodiff as ad
from erpdiff.autodiff import Adam, Tensor
from erpdiff.diffusion import VpSchedule, train_step
from erpdiff.epochs import UNCONDITIONAL, ConditionKey
from erpdiff.model import ModelConfig, NetworkDenoiser, ScoreNet, positional_channels, sinusoidal_time

from gradcheck import tiny_net_config


def small_net(**kw):
    base = dict(n_channels=4, n_samples=16, n_blocks=2, residual_channels=8, skip_channels=6, time_embed_dim=8,
                cond_embed_dim=5, subject_ids=(1, 2, 3), session_ids=(1, 2))
    base.update(kw)
    return ScoreNet(ModelConfig(**base))


class TestTimeEmbedding:
    def test_zero_time(self):
        e = sinusoidal_time(0.0, 16)
        np.testing.assert_array_equal(e[0, :8], 0.0)
        np.testing.assert_array_equal(e[0, 8:], 1.0)

    def test_deterministic(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        a = net.embed_time(store.raw, 0.3).data
        b = net.embed_time(store.raw, 0.3).data
        assert a.tobytes() == b.tobytes()

    def test_lipschitz_on_grid(self):
        """|e(t+h) - e(t)| <= scale * h * |f|, the bound implied by differentiating sin and cos."""
        dim, scale, h = 128, 1000.0, 1e-6
        freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
        bound = scale * h * np.linalg.norm(freqs)
        for t in np.linspace(0.0, 1.0 - h, 57):
            d = np.linalg.norm(sinusoidal_time(t + h, dim) - sinusoidal_time(t, dim))
            assert d <= bound * (1 + 1e-6)
        assert bound < 2.5e-3

    def test_injective_on_sampling_grid(self):
        emb = sinusoidal_time(np.linspace(1.0, 1e-5, 1000), 128)
        gaps = np.linalg.norm(emb[1:] - emb[:-1], axis=1)
        assert gaps.min() > 1e-3

    def test_range(self):
        with pytest.raises(ValueError):
            sinusoidal_time(1.5, 8)
        with pytest.raises(ValueError):
            sinusoidal_time(-0.1, 8)


class TestConditionEmbedding:
    def test_unconditional_uses_dedicated_rows(self):
        net = small_net()
        idx = net.condition_indices([UNCONDITIONAL, ConditionKey(3, 2, 1)])
        assert idx[0].tolist() == [3, 2, 2]
        assert idx[1].tolist() == [2, 1, 1]

    def test_same_key_same_vector(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        idx = net.condition_indices([ConditionKey(1, 1, 0)] * 2)
        e = net.embed_condition(store.raw, idx).data
        assert e[0].tobytes() == e[1].tobytes()

    def test_unconditional_independent_of_real_rows(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        null = net.null_indices(1)
        before = net.embed_condition(store.raw, null).data.copy()
        for name in ("cond.subject", "cond.session", "cond.class"):
            store.raw[name][:-1] += 10.0
        np.testing.assert_array_equal(net.embed_condition(store.raw, null).data, before)

    def test_gradient_only_in_looked_up_rows(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0), dtype=np.float64)
        params = store.tensors("raw", requires_grad=True)
        idx = net.condition_indices([ConditionKey(2, 1, 1)])
        ad.backward(ad.sum(ad.mul(net.embed_condition(params, idx), Tensor(np.arange(5.0) + 1))))
        for name, row in (("cond.subject", 1), ("cond.session", 0), ("cond.class", 1)):
            g = params[name].grad
            nonzero = np.flatnonzero(np.any(g != 0, axis=1)).tolist()
            assert nonzero == [row]
            np.testing.assert_array_equal(g[row], np.arange(5.0) + 1)

    def test_out_of_range(self):
        net = small_net()
        with pytest.raises(ValueError):
            net.condition_indices([ConditionKey(9, 1, 0)])
        with pytest.raises(ValueError):
            net.condition_indices([ConditionKey(1, 3, 0)])


class TestForward:
    @settings(max_examples=10, deadline=None)
    @given(blocks=st.integers(1, 3), r=st.integers(1, 6), c=st.integers(1, 5), t=st.integers(4, 20),
           k=st.sampled_from([1, 3, 5]), b=st.integers(1, 3))
    def test_output_shape(self, blocks, r, c, t, k, b):
        net = small_net(n_blocks=blocks, residual_channels=r, n_channels=c, n_samples=t, kernel_size=k)
        store = net.init_params(np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(b, c, t)).astype(np.float32)
        out = net.forward(store.raw, x, 0.5, net.null_indices(b))
        assert out.shape == x.shape

    def test_zero_at_init(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(3, 4, 16)).astype(np.float32)
        out = net.forward(store.raw, x, np.array([0.1, 0.5, 0.9]), net.null_indices(3))
        assert np.all(out.data == 0)

    def test_deterministic(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        store.raw["head.w2"][:] = 0.1
        x = np.random.default_rng(1).normal(size=(2, 4, 16)).astype(np.float32)
        den = NetworkDenoiser(net, store.raw)
        idx = net.null_indices(2)
        assert den(x, 0.4, idx).tobytes() == den(x, 0.4, idx).tobytes()

    def test_class_changes_output_after_one_step(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(8, 4, 16)).astype(np.float32)
        cond = net.condition_indices([ConditionKey(1, 1, i % 2) for i in range(8)])
        train_step(net, store, Adam(lr=1e-3), x0, cond, VpSchedule(), 0.0, rng)
        x = x0[:1]
        a = net.forward(store.raw, x, 0.5, net.condition_indices([ConditionKey(1, 1, 0)])).data
        b = net.forward(store.raw, x, 0.5, net.condition_indices([ConditionKey(1, 1, 1)])).data
        assert np.max(np.abs(a - b)) > 0

    def test_shape_mismatch(self):
        net = small_net()
        store = net.init_params(np.random.default_rng(0))
        with pytest.raises(ValueError, match="expected input"):
            net.forward(store.raw, np.zeros((1, 4, 15), np.float32), 0.5, net.null_indices(1))

    def test_dilation_cycle(self):
        cfg = ModelConfig(n_blocks=10)
        assert [cfg.dilation(i) for i in range(10)] == [1, 2, 4, 8, 1, 2, 4, 8, 1, 2]


class TestParameterCount:
    @settings(max_examples=20, deadline=None)
    @given(blocks=st.integers(1, 4), r=st.integers(1, 9), s=st.integers(1, 9), k=st.sampled_from([1, 3, 5]),
           dt=st.sampled_from([2, 4, 8]), dc=st.integers(1, 6), n_subj=st.integers(1, 4))
    def test_closed_form_matches_init(self, blocks, r, s, k, dt, dc, n_subj):
        cfg = ModelConfig(n_channels=3, n_samples=8, n_blocks=blocks, residual_channels=r, skip_channels=s,
                          kernel_size=k, time_embed_dim=dt, cond_embed_dim=dc, subject_ids=tuple(range(n_subj)))
        store = ScoreNet(cfg).init_params(np.random.default_rng(0))
        assert store.n_parameters() == cfg.parameter_count()

    def test_desk_default(self):
        assert ModelConfig().parameter_count() == ScoreNet(ModelConfig()).init_params(
            np.random.default_rng(0)).n_parameters()

    def test_config_round_trip(self):
        cfg = tiny_net_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"blocks": 2})

    @pytest.mark.parametrize("kw", [dict(kernel_size=2), dict(time_embed_dim=7), dict(dilation_cycle=(0,)),
                                    dict(subject_ids=(1, 1)), dict(n_blocks=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)


def test_positional_channels_orthogonal():
    p = positional_channels(8, 64)
    gram = p @ p.T
    np.testing.assert_allclose(gram, 32 * np.eye(8), atol=1e-9)
