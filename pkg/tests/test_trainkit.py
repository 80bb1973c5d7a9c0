import json
import math

import numpy as np
import pytest

import fxprec.trainkit as tk
from fxprec.assigner import uniform_config
from fxprec.errors import ConfigurationError, DomainError, NumericError
from fxprec.fxnum import QuantizerSpec
from fxprec.trainkit import (
    DenseNetwork,
    TrainSettings,
    layer_forward,
    load_csv_dataset,
    make_blobs,
    mismatch_probability,
    train,
)

SMALL = TrainSettings(epochs=4, batch_size=128, lr_max=0.5, lr_min=0.05)


@pytest.fixture(scope="module")
def small_data():
    return make_blobs(seed=0, dim=8, n_train=600, n_val=200, n_test=500)


class TestForward:
    def test_zero_input_gives_zero_output(self):
        cfg = uniform_config(2, 8, 1e-3)
        net = DenseNetwork.init([5, 7, 3], seed=0, config=cfg)
        np.testing.assert_array_equal(net.forward(np.zeros((4, 5))).outputs, 0.0)

    def test_activation_saturates_below_clip_level(self):
        spec = QuantizerSpec.from_bits(4, 1.0, signed=False)
        z, a = layer_forward(np.array([[1.0]]), np.array([[5.0]]), spec)
        assert z[0, 0] == 5.0
        assert a[0, 0] == 2.0 - spec.delta

    def test_last_layer_is_linear(self):
        z, a = layer_forward(np.array([[1.0]]), np.array([[-3.0]]), None, last=True)
        assert a[0, 0] == -3.0

    def test_wide_format_matches_float(self):
        cfg = uniform_config(1, 32, 1e-3)
        w = np.array([[0.3]])
        x = np.linspace(0, 1, 11)[:, None]
        fx = DenseNetwork([1, 1], [w], cfg).forward(x).outputs
        d_w, d_a = cfg.layers[0].weight.delta, cfg.layers[0].activation.delta
        np.testing.assert_allclose(fx, x * 0.3, rtol=0, atol=d_w / 2 + 0.3 * d_a / 2)

    def test_non_finite_input(self):
        net = DenseNetwork.init([2, 2], seed=0)
        with pytest.raises(NumericError):
            net.forward(np.array([[np.nan, 0.0]]))

    def test_row_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            DenseNetwork.init([4, 4, 4], seed=0, config=uniform_config(3, 8, 1e-3))


def loss_of(net, x, y):
    return tk._cross_entropy(net.forward(x).outputs, y)


class TestBackward:
    def test_finite_differences(self):
        rng = np.random.default_rng(7)
        net = DenseNetwork.init([6, 10, 3], seed=3)
        x = rng.uniform(0, 1, (20, 6))
        y = rng.integers(0, 3, 20)
        cache = net.forward(x)
        grads = net.backward(cache, y).weight_grads
        h = 1e-6
        # kinks of the clipped rectifier make the loss non-smooth; skip probes near them
        z = cache.pre[0]
        checked = 0
        for _ in range(100):
            layer = int(rng.integers(0, 2))
            i = int(rng.integers(0, net.sizes[layer]))
            j = int(rng.integers(0, net.sizes[layer + 1]))
            if layer == 0:
                dz = h * np.abs(x[:, i]).max() * 2
                near = np.minimum(np.abs(z[:, j]), np.abs(z[:, j] - 2.0))
                if np.any(near < dz):
                    continue
            plus, minus = net.copy(), net.copy()
            plus.w[layer][i, j] += h
            minus.w[layer][i, j] -= h
            fd = (loss_of(plus, x, y) - loss_of(minus, x, y)) / (2 * h)
            g = grads[layer][i, j]
            assert abs(fd - g) <= 1e-4 * max(abs(g), 1e-3), (layer, i, j, fd, g)
            checked += 1
        assert checked > 60

    def test_zero_upstream_gradient(self):
        cfg = uniform_config(2, 8, 1e-3)
        net = DenseNetwork.init([4, 5, 3], seed=0, config=cfg)
        cache = net.forward(np.random.default_rng(0).uniform(0, 1, (6, 4)))
        res = net.backward_from(cache, np.zeros((6, 3)))
        for gw in res.weight_grads:
            np.testing.assert_array_equal(gw, 0.0)

    def test_gradient_saturation_counted(self):
        cfg = uniform_config(2, 6, 1e-3, grad_range=0.25)
        net = DenseNetwork.init([4, 5, 3], seed=0, config=cfg)
        cache = net.forward(np.full((2, 4), 0.5))
        spec = cfg.layers[1].act_grad
        res = net.backward_from(cache, np.full((2, 3), 10 * spec.r))
        np.testing.assert_array_equal(res.act_grads[1], spec.hi)
        assert res.clip_counts["ga2"] == (6, 6)


class TestSgd:
    def net(self, bits=8):
        cfg = uniform_config(1, bits, 1e-3)
        return DenseNetwork([2, 2], [np.array([[0.5, -0.25], [0.0, 0.125]])], cfg)

    def test_zero_gradient_is_noop(self):
        net = self.net()
        before = net.w_acc[0].copy()
        net.sgd_update(0, 0.1, np.zeros((2, 2)))
        np.testing.assert_array_equal(net.w_acc[0], before)

    @pytest.mark.parametrize("k", [1, 3, -5])
    def test_exact_steps(self, k):
        net = self.net()
        d = net.acc_specs[0].delta
        before = net.w_acc[0].copy()
        net.sgd_update(0, 0.5, np.full((2, 2), -2 * k * d))
        np.testing.assert_array_equal(net.w_acc[0] - before, k * d)

    def test_wide_format_tracks_plain_sgd(self):
        rng = np.random.default_rng(2)
        w0 = rng.uniform(-0.5, 0.5, (3, 4))
        net = DenseNetwork([3, 4], [w0], uniform_config(1, 32, 1e-3))
        ref = w0.copy()
        for _ in range(100):
            g = rng.normal(scale=0.01, size=(3, 4))
            net.sgd_update(0, 0.1, g)
            ref = np.clip(ref - 0.1 * g, -1, 1)
        np.testing.assert_allclose(net.w_acc[0], ref, atol=1e-6)
        np.testing.assert_allclose(net.w[0], ref, atol=1e-6)

    def test_learning_rate_below_gamma_min(self, small_data):
        cfg = uniform_config(2, 8, gamma_min=0.1)
        with pytest.raises(ConfigurationError, match="gamma_min"):
            train([8, 16, 4], small_data, cfg, settings=SMALL)


@pytest.fixture(scope="module")
def fx_run(small_data):
    cfg = uniform_config(2, 8, 0.05, grad_range=0.5)
    return train([8, 16, 4], small_data, cfg, seed=1, settings=SMALL)


class TestFxTraining:
    def test_weights_on_grids(self, fx_run):
        net = fx_run.network
        for i in range(net.num_layers):
            ws, acc = net.w_specs[i], net.acc_specs[i]
            for arr, spec in ((net.w[i], ws), (net.w_acc[i], acc)):
                k = (arr - spec.lo) / spec.delta
                np.testing.assert_array_equal(k, np.round(k))
                assert arr.min() >= spec.lo and arr.max() <= spec.hi
            assert np.max(np.abs(net.w[i] - net.w_acc[i])) <= ws.delta / 2

    def test_clip_rates_logged(self, fx_run):
        beta = fx_run.records[-1].beta
        assert set(beta) == {"gw1", "gw2", "ga1", "ga2"}
        assert all(0.0 <= v <= 1.0 for v in beta.values())


class TestMismatch:
    def test_self_and_opposite(self):
        rng = np.random.default_rng(0)
        w = rng.uniform(-1, 1, (4, 2))
        x = rng.uniform(0, 1, (50, 4))
        a = DenseNetwork([4, 2], [w])
        b = DenseNetwork([4, 2], [-w])
        assert mismatch_probability(a, a, x) == 0.0
        ties = np.sum(x @ w[:, 0] == x @ w[:, 1])
        assert ties == 0
        assert mismatch_probability(a, b, x) == 1.0

    def test_empty(self):
        net = DenseNetwork.init([2, 2], seed=0)
        with pytest.raises(DomainError):
            mismatch_probability(net, net, np.zeros((0, 2)))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(-1, 1, (4, 3))
        x = rng.uniform(0, 1, (40, 4))
        a = DenseNetwork([4, 3], [w])
        b = DenseNetwork([4, 3], [w], output_scale=16.0)
        assert mismatch_probability(a, b, x) == 0.0

    def test_sixteen_bit_copy(self, small_data):
        fl = train([8, 16, 4], small_data, seed=0, settings=SMALL).network
        fx = fl.quantized_copy([16, 16], [16, 16])
        assert mismatch_probability(fl, fx, small_data.x_test) < 0.01


class TestTrainingRuns:
    def test_float_run_is_deterministic(self, small_data):
        a = train([8, 16, 4], small_data, seed=5, settings=SMALL)
        b = train([8, 16, 4], small_data, seed=5, settings=SMALL)
        assert a.to_jsonl() == b.to_jsonl()
        assert len(a.records) == SMALL.epochs
        assert a.stats is not None and len(a.stats.layers) == 2
        assert a.stats.layers[0].n_w == 8 * 16

    def test_wide_fixed_point_matches_float(self, small_data):
        fl = train([8, 16, 4], small_data, seed=2, settings=SMALL)
        fx = train([8, 16, 4], small_data, uniform_config(2, 32, SMALL.lr_min), seed=2, settings=SMALL, reference=fl)
        assert abs(fx.final_test_error - fl.final_test_error) * 100 <= 0.1
        assert fx.records[-1].pm < 0.01

    def test_divergence_keeps_log(self, small_data, monkeypatch):
        calls = {"n": 0}
        real = tk._cross_entropy
        per_epoch = math.ceil(600 / SMALL.batch_size)

        def flaky(z, y):
            calls["n"] += 1
            return math.nan if calls["n"] > 2 * per_epoch else real(z, y)

        monkeypatch.setattr(tk, "_cross_entropy", flaky)
        log = train([8, 16, 4], small_data, seed=0, settings=SMALL)
        assert len(log.records) == 2
        assert "epoch 3" in log.aborted
        lines = [json.loads(s) for s in log.to_jsonl().splitlines()]
        assert [r.get("epoch") for r in lines[:2]] == [1, 2]
        assert "aborted" in lines[-1]

    def test_size_mismatch(self, small_data):
        with pytest.raises(ConfigurationError):
            train([5, 4], small_data, settings=SMALL)

    def test_schedule_endpoints(self):
        s = TrainSettings(epochs=5, lr_max=0.4, lr_min=0.004)
        assert s.lr(0) == pytest.approx(0.4)
        assert s.lr(4) == pytest.approx(0.004)


class TestCsv:
    def test_split(self, tmp_path):
        p = tmp_path / "d.csv"
        rows = [f"{i / 100:.2f},{1 - i / 100:.2f},{i % 3}" for i in range(100)]
        p.write_text("# x0,x1,label\n" + "\n".join(rows) + "\n")
        d = load_csv_dataset(p, seed=0)
        assert (len(d.y_train), len(d.y_val), len(d.y_test)) == (65, 15, 20)
        assert d.num_classes == 3 and d.dim == 2
        all_x = np.concatenate([d.x_train, d.x_val, d.x_test])
        assert sorted(all_x[:, 0].tolist()) == [i / 100 for i in range(100)]

    def test_malformed(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("0.1,0.2,0\n0.3,x,1\n")
        with pytest.raises(DomainError, match="d.csv:2"):
            load_csv_dataset(p)

    def test_negative_features(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("-0.1,0.2,0\n")
        with pytest.raises(DomainError, match="non-negative"):
            load_csv_dataset(p)
