"""Network forward/backward, projection, Adam, and parameter serialization."""

import math

import numpy as np
import pytest

from isacfl.channel import RngStream
from isacfl.metrics import Scenario
from isacfl.nn import (
    AdamState,
    ModelParams,
    NetConfig,
    PowerConstraintError,
    adam_step,
    check_power,
    comm_features,
    forward,
    init_params,
    layer_dims,
    load_adam,
    load_params,
    loss_and_grad,
    param_count,
    project_power,
    save_adam,
    save_params,
    sens_channel,
    sens_features,
    unpack,
)
from oracles import make_sample

TINY_SCN = Scenario(n_cells=2, n_t=3, n_r=3, k_per_cell=(2, 2), rho_per_cell=(0.4, 0.7))
TINY_CFG = NetConfig(n_t=3, k_max=2, hidden=4)


def tiny_batch(seed, n=3, m=0, scn=TINY_SCN):
    return [make_sample(scn, m, RngStream(seed).child(i)) for i in range(n)]


def tiny_peers(seed, n=3, scn=TINY_SCN, m=0):
    gen = np.random.default_rng(seed)
    peers = {}
    for i in range(scn.n_cells):
        if i == m:
            continue
        w = gen.standard_normal((n, scn.n_t, scn.k_per_cell[i])) + 1j * gen.standard_normal(
            (n, scn.n_t, scn.k_per_cell[i])
        )
        norms = np.linalg.norm(w, axis=(1, 2), keepdims=True)
        peers[i] = w * (math.sqrt(scn.p_t) / norms)
    return peers


def finite_difference_grad(params, cfg, scn, batch, m, peers, h=1e-5):
    fd = np.zeros_like(params.data)
    for i in range(fd.size):
        plus = params.copy()
        plus.data[i] += h
        minus = params.copy()
        minus.data[i] -= h
        l_plus, _ = loss_and_grad(plus, cfg, scn, batch, m, peers)
        l_minus, _ = loss_and_grad(minus, cfg, scn, batch, m, peers)
        fd[i] = (l_plus - l_minus) / (2 * h)
    return fd


class TestForward:
    def test_zero_params_give_zero_beamformer(self):
        params = ModelParams(np.zeros(param_count(TINY_CFG)), TINY_CFG)
        sample = tiny_batch(1)[0]
        w = forward(params, TINY_CFG, TINY_SCN, sample, k_m=2, p_t=1.0)
        np.testing.assert_array_equal(w, np.zeros((3, 2), dtype=complex))
        loss, grad = loss_and_grad(params, TINY_CFG, TINY_SCN, tiny_batch(1), 0, tiny_peers(2))
        assert loss == 0.0  # both rates vanish at W = 0

    def test_output_is_on_power_sphere(self):
        params = init_params(TINY_CFG, RngStream(3))
        for i, sample in enumerate(tiny_batch(4, n=8)):
            w = forward(params, TINY_CFG, TINY_SCN, sample, k_m=2, p_t=0.7)
            assert abs(np.linalg.norm(w) ** 2 - 0.7) < 1e-9

    def test_against_scalar_reimplementation(self):
        """Independent forward pass with explicit Python loops."""
        params = init_params(TINY_CFG, RngStream(5))
        sample = tiny_batch(6)[0]
        got = forward(params, TINY_CFG, TINY_SCN, sample, k_m=2, p_t=1.0)

        layers = unpack(params)

        def dense(x, name, relu):
            w, b = layers[name]
            out = []
            for j in range(w.shape[1]):
                acc = float(b[j])
                for i in range(len(x)):
                    acc += x[i] * float(w[i, j])
                out.append(max(acc, 0.0) if relu else acc)
            return out

        # comm features: (n_t, k_max, 2) tensor, zero-padded user axis
        xc = []
        for n in range(TINY_CFG.n_t):
            for k in range(TINY_CFG.k_max):
                h = sample.comm_direct[k][n] if k < sample.comm_direct.shape[0] else 0.0
                xc.extend([complex(h).real, complex(h).imag])
        u = sens_channel(sample.target_theta, sample.target_beta, TINY_SCN)
        xs = []
        for n in range(TINY_CFG.n_t):
            xs.extend([complex(u[n]).real, complex(u[n]).imag])

        hc = dense(xc, "comm", relu=True)
        hs = dense(xs, "sens", relu=True)
        f = dense(hc + hs, "fusion", relu=True)
        y = dense(f, "out", relu=False)
        w_raw = [[complex(y[(n * TINY_CFG.k_max + k) * 2], y[(n * TINY_CFG.k_max + k) * 2 + 1]) for k in range(2)] for n in range(3)]
        norm = math.sqrt(sum(abs(w_raw[n][k]) ** 2 for n in range(3) for k in range(2)))
        expected = np.array(w_raw) * (1.0 / norm)
        np.testing.assert_allclose(got, expected, atol=1e-10)


class TestProjection:
    def test_zero_matrix_unchanged(self):
        w = np.zeros((3, 2), dtype=complex)
        np.testing.assert_array_equal(project_power(w, 1.0), w)

    def test_rescales_to_budget(self):
        gen = np.random.default_rng(0)
        w = gen.standard_normal((4, 3)) + 1j * gen.standard_normal((4, 3))
        w *= 2.0 / np.linalg.norm(w)  # norm^2 = 4
        out = project_power(w, 1.0)
        assert abs(np.linalg.norm(out) ** 2 - 1.0) < 1e-12

    def test_always_rescale_variant(self):
        gen = np.random.default_rng(1)
        w = gen.standard_normal((4, 2)) + 1j * gen.standard_normal((4, 2))
        w *= 0.1 / np.linalg.norm(w)  # well inside the budget
        out = project_power(w, 1.0)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_check_power_raises(self):
        w = np.ones((2, 2), dtype=complex)
        with pytest.raises(PowerConstraintError):
            check_power(w, 1.0)


def grad_mismatch(grad, fd, rtol=1e-4, atol=1e-8):
    """Worst violation of |g - fd| <= atol + rtol * max(|g|, |fd|); <= 0 passes."""
    return float(np.max(np.abs(grad - fd) - atol - rtol * np.maximum(np.abs(grad), np.abs(fd))))


class TestGradient:
    def test_matches_finite_differences(self):
        for seed in (0, 1, 2):
            params = init_params(TINY_CFG, RngStream(100 + seed))
            batch = tiny_batch(200 + seed, n=2)
            peers = tiny_peers(300 + seed, n=2)
            _, grad = loss_and_grad(params, TINY_CFG, TINY_SCN, batch, 0, peers)
            fd = finite_difference_grad(params, TINY_CFG, TINY_SCN, batch, 0, peers)
            assert grad_mismatch(grad, fd) <= 0.0

    def test_no_peers_single_cell(self):
        scn = Scenario(n_cells=1, n_t=3, n_r=3, k_per_cell=(2,), rho_per_cell=(0.5,))
        params = init_params(TINY_CFG, RngStream(7))
        batch = [make_sample(scn, 0, RngStream(8).child(i)) for i in range(2)]
        _, grad = loss_and_grad(params, TINY_CFG, scn, batch, 0, {})
        fd = finite_difference_grad(params, TINY_CFG, scn, batch, 0, {})
        assert grad_mismatch(grad, fd) <= 0.0

    def test_deterministic(self):
        params = init_params(TINY_CFG, RngStream(9))
        batch = tiny_batch(10)
        peers = tiny_peers(11)
        l1, g1 = loss_and_grad(params, TINY_CFG, TINY_SCN, batch, 0, peers)
        l2, g2 = loss_and_grad(params, TINY_CFG, TINY_SCN, batch, 0, peers)
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)

    def test_empty_batch_rejected(self):
        params = init_params(TINY_CFG, RngStream(12))
        with pytest.raises(ValueError):
            loss_and_grad(params, TINY_CFG, TINY_SCN, [], 0, {})

    def test_padding_neutrality(self):
        """Zeroing output-layer rows of truncated columns changes nothing."""
        scn = Scenario(n_cells=1, n_t=3, n_r=3, k_per_cell=(1,), rho_per_cell=(0.6,))
        cfg = NetConfig(n_t=3, k_max=2, hidden=4)  # k_m = 1 < k_max = 2
        params = init_params(cfg, RngStream(13))
        batch = [make_sample(scn, 0, RngStream(14).child(i)) for i in range(3)]
        base_loss, base_grad = loss_and_grad(params, cfg, scn, batch, 0, {})

        zeroed = params.copy()
        w_out, b_out = unpack(zeroed)["out"]
        for n in range(cfg.n_t):
            for k in range(1, cfg.k_max):  # truncated user columns
                for part in range(2):
                    unit = (n * cfg.k_max + k) * 2 + part
                    w_out[:, unit] = 0.0
                    b_out[unit] = 0.0
        loss2, grad2 = loss_and_grad(zeroed, cfg, scn, batch, 0, {})
        assert loss2 == base_loss
        # gradients on surviving parameters are unchanged; zeroed ones had zero grad
        mask = zeroed.data != params.data
        np.testing.assert_array_equal(grad2[~mask], base_grad[~mask])
        np.testing.assert_array_equal(base_grad[mask], np.zeros(mask.sum()))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        params = init_params(TINY_CFG, RngStream(15))
        state = AdamState.fresh(params.data.size, lr=1e-3)
        new_params, new_state = adam_step(params, np.zeros_like(params.data), state)
        np.testing.assert_array_equal(new_params.data, params.data)
        assert new_state.step == 1

    def test_first_step_hand_computed(self):
        cfg = NetConfig(n_t=1, k_max=1, hidden=1)  # not used by the math below
        p = ModelParams(np.zeros(param_count(cfg)), cfg)
        p.data[:3] = [1.0, 2.0, 3.0]
        grad = np.zeros_like(p.data)
        grad[:3] = [0.1, -0.2, 0.0]
        state = AdamState.fresh(p.data.size, lr=1e-4)
        new_p, _ = adam_step(p, grad, state)
        # bias-corrected first step: p - lr * g / (|g| + eps)
        lr, eps = 1e-4, 1e-8
        expected = [
            1.0 - lr * 0.1 / (abs(0.1) + eps),
            2.0 - lr * (-0.2) / (abs(-0.2) + eps),
            3.0,
        ]
        np.testing.assert_allclose(new_p.data[:3], expected, rtol=0, atol=1e-15)

    def test_bitwise_deterministic(self):
        params = init_params(TINY_CFG, RngStream(16))
        grad = RngStream(17).generator().standard_normal(params.data.size)
        state = AdamState.fresh(params.data.size)
        a1, s1 = adam_step(params, grad, state)
        a2, s2 = adam_step(params, grad, state)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(s1.m, s2.m)
        np.testing.assert_array_equal(s1.v, s2.v)

    def test_shape_mismatch(self):
        params = init_params(TINY_CFG, RngStream(18))
        with pytest.raises(ValueError):
            adam_step(params, np.zeros(3), AdamState.fresh(params.data.size))


class TestInit:
    def test_biases_zero_and_weights_bounded(self):
        cfg = NetConfig(n_t=4, k_max=3, hidden=16)
        params = init_params(cfg, RngStream(19))
        offset = 0
        for name, (fi, fo) in layer_dims(cfg).items():
            w = params.data[offset : offset + fi * fo]
            offset += fi * fo
            b = params.data[offset : offset + fo]
            offset += fo
            bound = np.sqrt(6.0 / (fi + fo))
            assert np.max(np.abs(w)) <= bound
            np.testing.assert_array_equal(b, np.zeros(fo))

    def test_reproducible(self):
        cfg = NetConfig(n_t=4, k_max=3, hidden=16)
        a = init_params(cfg, RngStream(20, 4))
        b = init_params(cfg, RngStream(20, 4))
        np.testing.assert_array_equal(a.data, b.data)


class TestSerialization:
    def test_params_round_trip(self, tmp_path):
        params = init_params(NetConfig(3, 2, 5), RngStream(21))
        path = tmp_path / "p.bin"
        save_params(path, params)
        loaded = load_params(path)
        assert loaded.cfg == params.cfg
        np.testing.assert_array_equal(loaded.data, params.data)

    def test_adam_round_trip(self, tmp_path):
        state = AdamState.fresh(10, lr=3e-4)
        state.m[:] = np.arange(10)
        state.v[:] = np.arange(10) ** 2
        state.step = 7
        path = tmp_path / "a.bin"
        save_adam(path, state)
        loaded = load_adam(path)
        assert loaded.step == 7 and loaded.lr == 3e-4
        np.testing.assert_array_equal(loaded.m, state.m)
        np.testing.assert_array_equal(loaded.v, state.v)

    def test_wrong_magic(self, tmp_path):
        params = init_params(NetConfig(3, 2, 5), RngStream(22))
        path = tmp_path / "p.bin"
        save_params(path, params)
        with pytest.raises(ValueError):
            load_adam(path)


class TestFeatures:
    def test_comm_padding_layout(self):
        cfg = NetConfig(n_t=2, k_max=3, hidden=2)
        h = np.array([[[1 + 2j, 3 + 4j]]])  # one sample, one user, n_t = 2
        feats = comm_features(h, cfg)
        tensor = feats.reshape(1, 2, 3, 2)
        assert tensor[0, 0, 0, 0] == 1.0 and tensor[0, 0, 0, 1] == 2.0
        assert tensor[0, 1, 0, 0] == 3.0 and tensor[0, 1, 0, 1] == 4.0
        np.testing.assert_array_equal(tensor[:, :, 1:, :], np.zeros((1, 2, 2, 2)))

    def test_sens_channel_matches_combined_response(self):
        # u^H w must reproduce v^H G w for the own-cell target channel
        from isacfl.channel import target_response
        from isacfl.metrics import mrc_combiner

        scn = TINY_SCN
        theta, beta = 0.42, 0.8 - 0.3j
        u = sens_channel(theta, beta, scn)
        g = target_response(beta, theta, scn.rx_steering(), scn.tx_steering())
        v = mrc_combiner(theta, scn.rx_steering())
        gen = np.random.default_rng(23)
        w = gen.standard_normal((scn.n_t, 2)) + 1j * gen.standard_normal((scn.n_t, 2))
        lhs = np.abs(u.conj() @ w) ** 2
        rhs = np.abs((v.conj() @ g) @ w) ** 2
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_dimension_mismatch(self):
        cfg = NetConfig(n_t=2, k_max=2, hidden=2)
        with pytest.raises(ValueError):
            comm_features(np.zeros((1, 1, 3), dtype=complex), cfg)
        with pytest.raises(ValueError):
            sens_features(np.zeros((1, 3), dtype=complex), cfg)
