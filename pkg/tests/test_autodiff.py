import math

import numpy as np
import pytest

from erpdiff import autodiff as ad
from erpdiff.autodiff import Adam, ParamStore, Tensor, adam_step, ema_update
from erpdiff.checkpoint import (CheckpointError, MAGIC, dumps_checkpoint, load_checkpoint, loads_checkpoint,
                                save_checkpoint)

from gradcheck import grad_errors, op_cases, score_net_grad_errors

TOL = 1e-4


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def assert_grads(loss_fn, arrays):
    errors = grad_errors(loss_fn, arrays)
    assert max(errors.values()) < TOL, errors


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(op_cases()))
    def test_op(self, name):
        loss_fn, arrays = op_cases()[name]
        assert_grads(loss_fn, arrays)

    def test_composed_score_network(self):
        errors = score_net_grad_errors()
        assert len(errors) == 9 + 2 * 7 + 4
        assert max(errors.values()) < TOL, {k: v for k, v in errors.items() if v >= TOL}


class TestOpValues:
    def test_conv_same_length(self):
        y = ad.conv1d(Tensor(rand(1, 2, 128)), Tensor(rand(3, 2, 3)), dilation=4)
        assert y.shape == (1, 3, 128)

    def test_conv_matches_direct_sum(self):
        x, w = rand(1, 2, 9), rand(3, 2, 3, seed=1)
        d = 2
        padded = np.pad(x, ((0, 0), (0, 0), (d, d)))
        ref = np.zeros((1, 3, 9))
        for o in range(3):
            for n in range(9):
                ref[0, o, n] = sum(w[o, c, j] * padded[0, c, n + j * d] for c in range(2) for j in range(3))
        np.testing.assert_allclose(ad.conv1d(Tensor(x), Tensor(w), d).data, ref, atol=1e-12)

    def test_silu_zero_and_identity_matmul(self):
        assert ad.silu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]
        x = rand(4, 3)
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(4)), Tensor(x)).data, x)

    def test_sum_gradient_is_ones(self):
        x = Tensor(rand(3, 4), requires_grad=True)
        ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_mse_self_zero_gradient(self):
        x = rand(3, 4)
        a = Tensor(x, requires_grad=True)
        loss = ad.mse_loss(a, Tensor(x.copy()))
        ad.backward(loss)
        assert loss.item() == 0.0 and np.all(a.grad == 0)

    def test_embedding_gradient_sparse(self):
        table = Tensor(rand(5, 2), requires_grad=True)
        ad.backward(ad.sum(ad.embedding(table, np.array([1, 1, 3]))))
        np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding(Tensor(rand(3, 2)), np.array([3]))

    def test_non_scalar_backward(self):
        with pytest.raises(ValueError):
            ad.backward(ad.mul(Tensor(rand(3), requires_grad=True), 2.0))

    def test_non_finite_loss(self):
        x = Tensor(np.array([np.nan, 1.0]), requires_grad=True)
        with pytest.raises(FloatingPointError):
            ad.backward(ad.sum(x))

    def test_independent_graphs(self):
        a = Tensor(rand(3), requires_grad=True)
        b = Tensor(rand(3, seed=1), requires_grad=True)
        la, lb = ad.sum(ad.mul(a, a)), ad.sum(ad.mul(b, 3.0))
        ad.backward(la)
        assert b.grad is None
        ad.backward(lb)
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 3.0)

    def test_constant_loss_has_no_gradients(self):
        assert ad.backward(ad.sum(Tensor(rand(3)))) == {}


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = rand(5)
        before = p.copy()
        opt = Adam(lr=0.1)
        for _ in range(3):
            opt.step({"p": p}, {"p": np.zeros(5)})
        np.testing.assert_array_equal(p, before)

    def test_first_step_moves_by_lr(self):
        p, g = np.zeros(4), np.array([0.3, -2.0, 5.0, -1e-3])
        adam_step(p, g, np.zeros(4), np.zeros(4), lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, step=1)
        np.testing.assert_allclose(p, -1e-3 * np.sign(g), rtol=1e-4)

    def test_reference_sequence(self):
        """Two-step bias-corrected updates written out by hand."""
        p = np.array([1.0])
        opt = Adam(lr=0.1)
        g1, g2 = 2.0, -1.0
        opt.step({"p": p}, {"p": np.array([g1])})
        opt.step({"p": p}, {"p": np.array([g2])})
        m = 0.9 * (0.1 * g1) + 0.1 * g2
        v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2
        step2 = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p[0] == pytest.approx(1.0 - 0.1 - step2, rel=1e-9)

    def test_descends_quadratic(self):
        p = np.array([3.0, -4.0])
        opt = Adam(lr=0.05)
        for _ in range(500):
            opt.step({"p": p}, {"p": 2 * p})
        assert np.linalg.norm(p) < 0.05

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            Adam(lr=0.0)

    def test_unknown_gradient(self):
        with pytest.raises(KeyError):
            Adam(lr=0.1).step({"a": np.zeros(1)}, {"b": np.zeros(1)})


class TestEma:
    def test_decay_zero_copies(self):
        store = ParamStore({"w": np.zeros(3)})
        store.raw["w"][:] = 5.0
        ema_update(store, 0.0)
        np.testing.assert_array_equal(store.ema["w"], 5.0)

    def test_geometric_gap(self):
        store = ParamStore({"w": np.zeros(2)})
        store.raw["w"][:] = 1.0
        for _ in range(1000):
            store.ema_update(0.999)
        gap = 1.0 - store.ema["w"]
        np.testing.assert_allclose(gap, 0.999 ** 1000, rtol=1e-9)
        assert gap[0] == pytest.approx(math.exp(-1), abs=1e-3)

    def test_decay_range(self):
        with pytest.raises(ValueError):
            ema_update(ParamStore({"w": np.zeros(1)}), 1.0)

    def test_raw_and_shadow_are_separate(self):
        store = ParamStore({"w": np.ones(2)})
        store.raw["w"] += 1
        assert store.ema["w"].tolist() == [1.0, 1.0]

    def test_unknown_name(self):
        with pytest.raises(KeyError, match="unknown parameter"):
            ParamStore({"w": np.ones(1)})["v"]


class TestCheckpoint:
    def store(self):
        s = ParamStore({"a": rand(2, 3).astype(np.float32), "b": np.arange(4, dtype=np.float32)})
        s.ema["a"] += 1
        return s

    def test_round_trip(self, tmp_path):
        s = self.store()
        save_checkpoint(tmp_path / "c.erpd", {"kind": "x", "n": 3}, s)
        cfg, back = load_checkpoint(tmp_path / "c.erpd")
        assert cfg == {"kind": "x", "n": 3}
        for k in s.raw:
            assert back.raw[k].tobytes() == s.raw[k].tobytes() and back.ema[k].tobytes() == s.ema[k].tobytes()

    def test_header(self):
        blob = dumps_checkpoint({}, self.store())
        assert blob[:4] == MAGIC == b"ERPD"
        assert int.from_bytes(blob[4:8], "little") == 1

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:],
                                        lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
                                        lambda b: b[:-3]])
    def test_corrupt(self, mutate):
        with pytest.raises(CheckpointError):
            loads_checkpoint(mutate(dumps_checkpoint({}, self.store())))

    def test_missing_shadow(self):
        blob = dumps_checkpoint({}, self.store())
        last_entry = 2 + len("b.ema") + 1 + 4 + 4 * 4
        with pytest.raises(CheckpointError, match="b"):
            loads_checkpoint(blob[:-last_entry])
