import numpy as np
import pytest

from condiff.neural import (
    AdamW,
    EmbeddingTable,
    Mlp,
    ParamVector,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from condiff.sde import ConfigurationError


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = np.maximum(np.abs(b), floor)
    return np.max(np.abs(a - b) / denom)


def fd_param_grads(loss_fn, pv, h=1e-5):
    """Central finite differences of a scalar loss over all parameters."""
    base = pv.flatten()
    out = np.empty_like(base)
    for i in range(len(base)):
        p = base.copy()
        p[i] = base[i] + h
        pv.assign(p)
        up = loss_fn()
        p[i] = base[i] - h
        pv.assign(p)
        dn = loss_fn()
        out[i] = (up - dn) / (2 * h)
    pv.assign(base)
    return out


class TestMlp:
    def test_linear_layer_hand_gradient(self):
        # scalar loss 0.5 ||y||^2 with y = W x: dW = y x^T (here stored as x^T y)
        rng = np.random.default_rng(0)
        net = Mlp([3, 2], rng)
        x = rng.standard_normal((1, 3))
        y, cache = net.forward(x)
        _, grads = net.backward(cache, y)  # d(0.5||y||^2)/dy = y
        assert np.allclose(grads[0][0], x.T @ y, atol=1e-12)
        assert np.allclose(grads[0][1], y[0], atol=1e-12)

    def test_zero_final_layer_is_zero_map(self):
        rng = np.random.default_rng(1)
        net = Mlp([4, 8, 2], rng, zero_final=True)
        x = rng.standard_normal((5, 4))
        y, cache = net.forward(x)
        assert np.all(y == 0.0)
        dx, _ = net.backward(cache, rng.standard_normal((5, 2)))
        assert np.all(dx == 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        net = Mlp([2, 16, 16, 1], rng)
        pv = ParamVector(list(net.param_items("net")))
        xs = rng.standard_normal((10, 2))

        def loss():
            y, _ = net.forward(xs)
            return 0.5 * float(np.sum(y**2))

        y, cache = net.forward(xs)
        _, grads = net.backward(cache, y)
        flat = pv.pack({name: g for name, g in zip(pv.names(), [g for pair in grads for g in pair])})
        fd = fd_param_grads(loss, pv, h=1e-4)
        assert rel_err(flat, fd) <= 1e-5

    def test_input_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        net = Mlp([3, 12, 2], rng, activation="softplus")
        x = rng.standard_normal((4, 3))
        y, cache = net.forward(x)
        dx, _ = net.backward(cache, np.ones_like(y))
        h = 1e-6
        for j in range(3):
            e = np.zeros_like(x)
            e[:, j] = h
            fd = (net(x + e).sum(axis=1) - net(x - e).sum(axis=1)) / (2 * h)
            assert np.allclose(dx[:, j], fd, atol=1e-6)

    def test_input_jacobian(self):
        rng = np.random.default_rng(4)
        net = Mlp([2, 8, 3], rng)
        x = rng.standard_normal((3, 2))
        jac = net.input_jacobian(x)
        h = 1e-6
        for j in range(2):
            e = np.zeros_like(x)
            e[:, j] = h
            fd = (net(x + e) - net(x - e)) / (2 * h)
            assert np.allclose(jac[:, :, j], fd, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        net = Mlp([2, 4, 1], rng)
        _, cache = net.forward(rng.standard_normal((3, 2)))
        with pytest.raises(ConfigurationError):
            net.backward(cache, np.zeros((3, 4)))


class TestEmbeddingTable:
    def test_null_row_frozen_zero(self):
        table = EmbeddingTable(n_real=3, dim=2)
        table.trainable[:] = np.arange(6).reshape(3, 2)
        ids = np.array([0, -1, 2, 3])
        vecs = table.lookup(ids)
        assert np.all(vecs[1] == 0.0) and np.all(vecs[3] == 0.0)
        grad = table.backward(ids, np.ones((4, 2)))
        assert grad.shape == (3, 2)
        assert np.all(grad[1] == 0.0)  # id 1 never looked up
        assert np.all(grad[0] == 1.0) and np.all(grad[2] == 1.0)

    def test_duplicate_ids_accumulate(self):
        table = EmbeddingTable(n_real=2, dim=1)
        grad = table.backward(np.array([0, 0, 1]), np.array([[1.0], [2.0], [5.0]]))
        assert np.allclose(grad, [[3.0], [5.0]])


class TestParamVector:
    def test_roundtrip_and_groups(self):
        a = np.zeros((2, 2))
        b = np.zeros(3)
        pv = ParamVector([("embed.ctx", a), ("net.w0", b)])
        vec = np.arange(7.0)
        pv.assign(vec)
        assert np.allclose(a, [[0, 1], [2, 3]])
        assert np.allclose(b, [4, 5, 6])
        assert np.allclose(pv.flatten(), vec)
        assert pv.group_mask("embed").sum() == 4
        assert pv.group_mask("net").sum() == 3

    def test_pack_validates_names_and_shapes(self):
        pv = ParamVector([("w", np.zeros(2))])
        with pytest.raises(ConfigurationError):
            pv.pack({"nope": np.zeros(2)})
        with pytest.raises(ConfigurationError):
            pv.pack({"w": np.zeros(3)})


class TestAdamW:
    def test_zero_grad_zero_decay_keeps_params(self):
        p = np.array([1.0, -2.0])
        opt = AdamW(ParamVector([("p", p)]), lr=0.1, weight_decay=0.0)
        opt.step(np.zeros(2))
        assert np.allclose(p, [1.0, -2.0])

    def test_first_step_scalar_hand_computation(self):
        # g=1 from zero moments: mhat=1, vhat=1, update = -lr / (1 + eps)
        p = np.array([0.5])
        lr, eps = 1e-2, 1e-8
        opt = AdamW(ParamVector([("p", p)]), lr=lr, eps=eps, weight_decay=0.0)
        opt.step(np.array([1.0]))
        assert np.allclose(p, 0.5 - lr * 1.0 / (1.0 + eps), rtol=1e-12)

    def test_pure_decay_shrinks_by_factor(self):
        p = np.array([2.0])
        opt = AdamW(ParamVector([("p", p)]), lr=1e-2, weight_decay=0.1)
        opt.step(np.zeros(1))
        assert np.allclose(p, 2.0 * (1 - 1e-3), rtol=1e-12)

    def test_decay_decoupled_from_moments(self):
        p = np.array([3.0])
        opt = AdamW(ParamVector([("p", p)]), lr=1e-2, weight_decay=0.1)
        opt.step(np.zeros(1))
        assert np.all(opt.state.m == 0.0) and np.all(opt.state.v == 0.0)

    def test_nonfinite_gradient_skips_step(self):
        p = np.array([1.0])
        opt = AdamW(ParamVector([("p", p)]), lr=0.1)
        with pytest.warns(RuntimeWarning):
            ok = opt.step(np.array([np.nan]))
        assert not ok and p[0] == 1.0 and opt.state.step == 0

    def test_group_overrides(self):
        a, b = np.array([1.0]), np.array([1.0])
        opt = AdamW(ParamVector([("embed.x", a), ("net.y", b)]), lr=1e-3, groups={"embed": {"lr": 1e-1}})
        opt.step(np.array([1.0, 1.0]))
        assert abs(1.0 - a[0]) > abs(1.0 - b[0])
        with pytest.raises(ConfigurationError):
            AdamW(ParamVector([("p", np.zeros(1))]), groups={"ghost": {"lr": 1.0}})


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        net = Mlp([3, 8, 2], rng)
        pv = ParamVector(list(net.param_items("net")))
        opt = AdamW(pv, lr=1e-3)
        opt.step(rng.standard_normal(pv.size))
        params_before = pv.flatten()
        state_before = opt.export_state()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, pv, optimizer=opt, rng_state={"s": 1}, meta={"tag": "test"})

        pv.assign(np.zeros(pv.size))
        opt.import_state({"m": np.zeros(pv.size), "v": np.zeros(pv.size), "step": 0})
        ckpt = load_checkpoint(path)
        restore_into(pv, ckpt, optimizer=opt)
        assert np.array_equal(pv.flatten(), params_before)
        assert np.array_equal(opt.state.m, state_before["m"])
        assert np.array_equal(opt.state.v, state_before["v"])
        assert opt.state.step == state_before["step"]
        assert ckpt["header"]["meta"]["tag"] == "test"
        assert ckpt["rng_state"] == {"s": 1}

    def test_layout_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(8)
        pv1 = ParamVector(list(Mlp([2, 2], rng).param_items("net")))
        pv2 = ParamVector(list(Mlp([2, 3], rng).param_items("net")))
        path = tmp_path / "c.npz"
        save_checkpoint(path, pv1)
        with pytest.raises(ConfigurationError):
            restore_into(pv2, load_checkpoint(path))
