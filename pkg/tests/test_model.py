import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uttlid import tensor as T
from uttlid.errors import InputTooShortError, ShapeError
from uttlid.gradcheck import model_checks
from uttlid.model import (
    MIN_FRAMES,
    ModelConfig,
    PRESETS,
    SequenceRepresentation,
    blstm_forward,
    forward_frontend,
    height_pool_squeeze,
    init_parameters,
    lstm_direction,
    output_width,
    parameter_count,
    preset,
    resnet_forward,
)
from uttlid.tensor import Tensor


def ceil_chain(n):
    return math.ceil(math.ceil(math.ceil(n / 2) / 2) / 2)


def closed_form_count(cfg: ModelConfig) -> int:
    """Independent tally: weights + bias + (gamma, beta) per conv, LSTM gates, heads."""
    conv = lambda cin, cout, k: cout * cin * k * k + 3 * cout
    total = conv(1, cfg.channels[0], 3)
    cin = cfg.channels[0]
    for stage in range(4):
        cout = cfg.channels[stage]
        for block in range(cfg.blocks[stage]):
            total += conv(cin, cout, 3) + conv(cout, cout, 3)
            if block == 0 and (stage > 0 or cin != cout):
                total += conv(cin, cout, 1)
            cin = cout
    r, feat = cfg.blstm_hidden, cfg.channels[-1]
    for _ in range(cfg.blstm_layers):
        total += 2 * 4 * r * (feat + r + 1)
        feat = 2 * r
    e = 2 * r
    if cfg.head == "sap":
        total += e * e + 2 * e
    return total + (e * e + e) + cfg.num_classes * (e + 1)


@pytest.fixture(scope="module")
def paper_params():
    return init_parameters(preset("paper"), seed=0)


class TestConfig:
    def test_paper_preset_plan(self):
        cfg = PRESETS["paper"]
        assert cfg.channels == (16, 32, 64, 128) and cfg.blocks == (3, 4, 6, 3)
        assert cfg.embedding_dim == 256 and cfg.num_classes == 14

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(head="max")
        with pytest.raises(ValueError):
            ModelConfig(input_dim=60)
        with pytest.raises(ValueError):
            preset("huge")

    def test_paper_count_by_hand(self):
        # CNN 1,335,168; BLSTM 263,168 + 394,240; SAP 66,048; FC 65,792; output 3,598
        assert parameter_count(preset("paper")) == 2_128_014

    @pytest.mark.parametrize("cfg", [preset("paper"), preset("paper", head="tap"), preset("tiny"),
                                     preset("paper", channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1),
                                            blstm_hidden=32, num_classes=4)])
    def test_count_matches_closed_form(self, cfg):
        params = init_parameters(cfg)
        assert params.count() == parameter_count(cfg) == closed_form_count(cfg)

    def test_names_unique_and_init_deterministic(self):
        a, b = init_parameters(preset("tiny"), 5), init_parameters(preset("tiny"), 5)
        assert len(set(a.tensors)) == len(a.tensors)
        for name in a:
            assert a[name].data.tobytes() == b[name].data.tobytes()
            assert a[name].name == name

    def test_forget_bias_one(self):
        p = init_parameters(preset("tiny", blstm_hidden=3))
        bias = p["blstm.l0.fwd.bias"].data
        np.testing.assert_array_equal(bias, [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


class TestResnet:
    def test_l800(self, paper_params):
        x = np.random.default_rng(0).standard_normal((64, 800))
        assert resnet_forward(x, paper_params, mode="infer").shape == (1, 128, 8, 100)

    def test_l207_width(self):
        p = init_parameters(preset("tiny"))
        x = np.random.default_rng(1).standard_normal((2, 64, 207))
        assert resnet_forward(x, p, update_stats=False).shape == (2, 2, 8, 26)
        assert output_width(207) == 26

    def test_too_short(self):
        p = init_parameters(preset("tiny"))
        with pytest.raises(InputTooShortError):
            resnet_forward(np.zeros((64, MIN_FRAMES - 1)), p)
        with pytest.raises(ValueError):
            resnet_forward(np.zeros((64, 3)), p)

    def test_wrong_dim(self):
        with pytest.raises(ShapeError):
            resnet_forward(np.zeros((40, 100)), init_parameters(preset("tiny")))

    @pytest.mark.parametrize("n", list(range(8, 1001)))
    def test_width_formula(self, n):
        assert output_width(n) == ceil_chain(n)


class TestHeightPool:
    def test_constant(self):
        seq = height_pool_squeeze(Tensor(np.full((128, 8, 13), 2.5)), 8)
        assert seq.values.shape == (1, 128, 13)
        np.testing.assert_array_equal(seq.values.data, 2.5)

    def test_column_mean(self):
        block = np.tile(np.arange(1.0, 9.0).reshape(1, 1, 8, 1), (1, 3, 1, 4))
        np.testing.assert_array_equal(height_pool_squeeze(Tensor(block)).values.data, 4.5)

    def test_random_direct_oracle(self):
        block = np.random.default_rng(2).standard_normal((2, 5, 8, 7))
        out = height_pool_squeeze(Tensor(block), 8).values.data
        direct = np.array([[[sum(block[n, c, :, w]) / 8 for w in range(7)] for c in range(5)] for n in range(2)])
        np.testing.assert_allclose(out, direct, atol=1e-12)

    def test_height_mismatch(self):
        with pytest.raises(ShapeError):
            height_pool_squeeze(Tensor(np.zeros((1, 4, 7, 3))), 8)


def zero_blstm_params(r=128, feat=128):
    p = init_parameters(preset("paper", blstm_hidden=r, channels=(16, 32, 64, feat)))
    for name in p:
        if name.startswith("blstm."):
            p[name].data[:] = 0.0
    return p


class TestBlstm:
    def test_shape(self, paper_params):
        x = np.random.default_rng(3).standard_normal((1, 128, 100))
        out = blstm_forward(SequenceRepresentation(Tensor(x), [100]), paper_params)
        assert out.values.shape == (1, 256, 100)

    def test_zero_weights_zero_output(self):
        p = zero_blstm_params(r=4, feat=6)
        x = np.random.default_rng(4).standard_normal((2, 6, 9))
        out = blstm_forward(SequenceRepresentation(Tensor(x), [9, 9]), p)
        np.testing.assert_array_equal(out.values.data, 0.0)

    def test_single_step_hand_gates(self):
        # one step, R=1, F=1: gates = w_ih * x + b (h0 = 0 so w_hh is irrelevant)
        x = 0.5
        w_ih = np.array([[0.2], [-0.4], [1.5], [0.3]])
        bias = np.array([0.1, 1.0, -0.2, 0.05])
        out = lstm_direction(Tensor(np.full((1, 1, 1), x)), Tensor(w_ih), Tensor(np.full((4, 1), 7.0)),
                             Tensor(bias)).data
        sig = lambda v: 1.0 / (1.0 + math.exp(-v))
        i = sig(0.2 * x + 0.1)
        g = math.tanh(1.5 * x - 0.2)
        o = sig(0.3 * x + 0.05)
        c = i * g  # forget gate multiplies c0 = 0
        assert abs(out[0, 0, 0] - o * math.tanh(c)) < 1e-12

    def test_two_step_hand_recurrence(self):
        w_ih = np.array([[0.3], [0.1], [-0.7], [0.9]])
        w_hh = np.array([[0.5], [-0.2], [0.4], [0.6]])
        bias = np.array([0.0, 1.0, 0.1, -0.1])
        xs = [0.8, -1.1]
        out = lstm_direction(Tensor(np.array(xs).reshape(1, 2, 1)), Tensor(w_ih), Tensor(w_hh), Tensor(bias)).data
        sig = lambda v: 1.0 / (1.0 + math.exp(-v))
        h = c = 0.0
        for t, x in enumerate(xs):
            z = [w_ih[k, 0] * x + w_hh[k, 0] * h + bias[k] for k in range(4)]
            c = sig(z[1]) * c + sig(z[0]) * math.tanh(z[2])
            h = sig(z[3]) * math.tanh(c)
            assert abs(out[0, t, 0] - h) < 1e-12

    def test_time_reversal_symmetry(self):
        r, feat = 3, 4
        p = init_parameters(preset("tiny", channels=(2, 2, 2, feat), blstm_hidden=r), seed=7)
        swapped = p.copy()
        for layer in range(2):
            a, b = f"blstm.l{layer}.fwd", f"blstm.l{layer}.bwd"
            for part in ("w_ih", "w_hh", "bias"):
                fa, fb = p[f"{a}.{part}"].data.copy(), p[f"{b}.{part}"].data.copy()
                if layer > 0 and part == "w_ih":
                    # the layer input is [fwd; bwd], whose halves trade places too
                    fa, fb = np.roll(fa, r, axis=1), np.roll(fb, r, axis=1)
                swapped[f"{a}.{part}"].data[...] = fb
                swapped[f"{b}.{part}"].data[...] = fa
        x = np.random.default_rng(5).standard_normal((2, feat, 11))
        out = blstm_forward(SequenceRepresentation(Tensor(x), [11, 11]), p).values.data
        rev = blstm_forward(SequenceRepresentation(Tensor(x[:, :, ::-1].copy()), [11, 11]), swapped).values.data
        expected = np.concatenate([out[:, r:], out[:, :r]], axis=1)[:, :, ::-1]
        np.testing.assert_allclose(rev, expected, atol=1e-12)


class TestFrontend:
    def test_l800(self, paper_params):
        x = np.random.default_rng(6).standard_normal((64, 800))
        assert forward_frontend(x, paper_params, mode="infer").values.shape == (1, 256, 100)

    def test_l200(self, paper_params):
        x = np.random.default_rng(7).standard_normal((64, 200))
        assert forward_frontend(x, paper_params, mode="infer").values.shape == (1, 256, 25)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(8, 1000))
    def test_width_any_length(self, n):
        p = init_parameters(preset("tiny", blstm_hidden=128))
        out = forward_frontend(np.ones((64, n)), p, mode="infer")
        assert out.values.shape == (1, 256, ceil_chain(n))

    def test_train_mode_updates_running_stats_infer_does_not(self):
        p = init_parameters(preset("tiny"))
        x = np.random.default_rng(8).standard_normal((3, 64, 24))
        before = p.norm["cnn.conv1.bn"].running_mean.data.copy()
        forward_frontend(x, p, mode="infer")
        np.testing.assert_array_equal(p.norm["cnn.conv1.bn"].running_mean.data, before)
        forward_frontend(x, p, mode="train")
        assert not np.array_equal(p.norm["cnn.conv1.bn"].running_mean.data, before)

    def test_frontend_readout_gradient(self):
        from uttlid.gradcheck import MODEL_STEPS, check
        p = init_parameters(preset("tiny"), seed=3)
        x = np.random.default_rng(9).standard_normal((2, 64, 16))
        proj = np.random.default_rng(10).standard_normal((2, 4, 2))
        build = lambda: (forward_frontend(x, p, update_stats=False).values * proj).sum()
        names = ["cnn.conv1.weight", "cnn.res2.0.shortcut.weight", "blstm.l1.bwd.w_hh", "blstm.l0.fwd.bias"]
        errs = check(build, [p[n] for n in names], MODEL_STEPS)
        assert max(errs.values()) < 1e-4, errs

    def test_tiny_model_gradcheck(self):
        results = model_checks(seed=0)
        assert len(results) == 2
        for r in results:
            assert r.passed, (r.name, r.error)
