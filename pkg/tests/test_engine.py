import logging
from fractions import Fraction

import numpy as np
import pytest

from qsnn import convert, engine, synthetic
from qsnn.convert import SnnModel, scale_aware_map
from qsnn.engine import (
    NeuronState, RateAccumulator, Session, encode_input, fewdif_step, if_step, run_continuous,
    run_integer, run_windowed, simulate_neuron,
)


def exact_if(us, th, bounds=None):
    """Rational-arithmetic IF/FewdIF reference over the exact values of the float inputs."""
    v, th, out = Fraction(0), Fraction(th), []
    lo, hi = (Fraction(bounds[0]), Fraction(bounds[1])) if bounds else (None, None)
    for u in us:
        v += Fraction(float(u))
        fire = v >= th
        if fire:
            v -= th
        if bounds:
            v = min(max(v, lo), hi)
        out.append(int(fire))
    return out


def identity_model(neuron="if", n_max=2.0, n_min=-1.0):
    layer = scale_aware_map(np.ones((1, 1, 1, 1)), np.zeros(1), 1.0, neuron=neuron, n_max=n_max, n_min=n_min)
    return SnnModel([layer], v_th=1.0)


class TestIfStep:
    def test_worked_example(self):
        state = NeuronState.zeros((1,), 1.0)
        spikes = [int(if_step(state, [0.4])[0]) for _ in range(10)]
        assert [t + 1 for t, s in enumerate(spikes) if s] == [3, 5, 8, 10]
        assert spikes == exact_if([0.4] * 10, 1.0)

    def test_zero_drive(self):
        state = NeuronState.zeros((3,), 1.0)
        state.v[:] = [0.2, -0.5, 0.9]
        for _ in range(20):
            assert not if_step(state, np.zeros(3)).any()
        np.testing.assert_array_equal(state.potential(), [0.2, -0.5, 0.9])

    def test_drive_equal_threshold(self):
        state = NeuronState.zeros((4,), 0.7)
        for _ in range(15):
            assert if_step(state, np.full(4, 0.7)).all()
            assert not state.potential().any()

    def test_matches_rational_oracle(self, rng, each_backend):
        for _ in range(30):
            th = float(rng.uniform(0.1, 3.0))
            us = rng.uniform(-0.5 * th, 1.5 * th, 300)
            got = simulate_neuron(us[:, None], th)[:, 0]
            assert got.tolist() == exact_if(us, th)

    def test_below_threshold_after_step(self, rng):
        state = NeuronState.zeros((200,), 1.0)
        for _ in range(200):
            if_step(state, rng.uniform(0, 1, 200))
            assert state.potential().max() < 1.0

    def test_integer_state(self):
        state = NeuronState.zeros((1,), 10, integer=True)
        spikes = [int(if_step(state, np.array([4]))[0]) for _ in range(10)]
        assert spikes == exact_if([4] * 10, 10)
        assert state.v.dtype == np.int64

    def test_integer_overflow(self):
        state = NeuronState.zeros((2,), 10, integer=True)
        state.v[:] = 2**31 - 5
        with pytest.raises(OverflowError):
            if_step(state, np.array([10, 0]))


class TestFewdIF:
    def test_upper_clamp(self):
        state = NeuronState.zeros((1,), 1.0, kind="fewdif", n_max=0.5, n_min=-1.0)
        state.v[:] = 0.5
        assert not fewdif_step(state, [0.3])[0]
        assert state.potential()[0] == 0.5

    def test_lower_clamp(self):
        state = NeuronState.zeros((1,), 1.0, kind="fewdif")
        state.v[:] = -1.0
        fewdif_step(state, [-0.7])
        assert state.potential()[0] == -1.0

    def test_matches_rational_oracle(self, rng, each_backend):
        for _ in range(30):
            th = float(rng.uniform(0.1, 3.0))
            us = rng.uniform(-1.5 * th, 1.5 * th, 300)
            got = simulate_neuron(us[:, None], th, kind="fewdif", n_max=1.3, n_min=-0.8)[:, 0]
            assert got.tolist() == exact_if(us, th, (-0.8 * th, 1.3 * th))

    def test_unreachable_bounds_equal_if(self, rng):
        us = rng.uniform(-1, 1.5, (500, 50))
        a = simulate_neuron(us, 1.0)
        b = simulate_neuron(us, 1.0, kind="fewdif", n_max=1e12, n_min=-1e12)
        np.testing.assert_array_equal(a, b)

    def test_requires_fewdif_state(self):
        with pytest.raises(ValueError):
            fewdif_step(NeuronState.zeros((1,), 1.0), [0.1])

    def test_integer_bounds_inward(self):
        state = NeuronState.zeros((1,), 3, kind="fewdif", n_max=1.5, n_min=-0.5, integer=True)
        assert state.bounds == (-1, 4)


class TestScaledEquivalence:
    def test_scale_ten(self, rng):
        us = rng.uniform(-0.3, 1.2, (1000, 16))
        np.testing.assert_array_equal(simulate_neuron(us, 1.0), simulate_neuron(us, 1.0, scale=10.0))

    def test_scale_one(self, rng):
        us = rng.uniform(0, 1, (100, 4))
        np.testing.assert_array_equal(simulate_neuron(us, 1.0), simulate_neuron(us, 1.0, scale=1.0))

    def test_scaling_threshold_alone_changes_spikes(self):
        us = np.full((10, 1), 0.4)
        assert not np.array_equal(simulate_neuron(us, 1.0), simulate_neuron(us, 2.0))

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            simulate_neuron(np.zeros((2, 1)), 1.0, scale=0.0)


class TestEncoding:
    def test_bernoulli_extremes(self):
        enc = encode_input(np.array([[[1.0, 0.0]]]), "bernoulli", seed=1)
        frames = np.stack([enc.frame() for _ in range(100)])
        assert frames[..., 0].all() and not frames[..., 1].any()

    def test_bernoulli_rate(self):
        enc = encode_input(np.full((1, 1, 1), 0.3), "bernoulli", seed=7)
        rate = np.mean([enc.frame().item() for _ in range(10000)])
        assert abs(rate - 0.3) <= 0.02

    def test_bernoulli_reproducible(self, rng):
        img = rng.random((2, 4, 4))
        a, b = encode_input(img, "bernoulli", 3), encode_input(img, "bernoulli", 3)
        for _ in range(10):
            np.testing.assert_array_equal(a.frame(), b.frame())

    def test_analog_is_the_image(self, rng):
        img = rng.random((2, 4, 4))
        np.testing.assert_array_equal(encode_input(img).frame()[0], img)

    @pytest.mark.parametrize("bad", [1.5, -0.1, np.nan])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            encode_input(np.full((1, 2, 2), bad))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            encode_input(np.zeros((1, 2, 2)), "poisson")


class TestRateAccumulator:
    def test_window(self):
        acc = RateAccumulator(window=3)
        for s in [1, 1, 0, 0, 1]:
            acc.add(np.array([s]))
        assert acc.rate()[0] == 3 / 5
        assert acc.window_rate()[0] == 1 / 3


class TestWindowed:
    def test_identity_layer(self):
        r = run_windowed(identity_model(), np.full((1, 1, 1), 0.4), 10)
        assert r.output.item() == pytest.approx(0.4)

    def test_zero_input(self):
        g = synthetic.random_qann(0, channels=(2, 3, 2), bias_scale=0.0)
        model, _ = convert.convert_model(g, np.random.default_rng(0).random((2, 2, 16, 16)))
        for layer in model.layers:
            layer.bias[:] = 0.0
            layer.int_bias[:] = 0
        r = run_windowed(model, np.zeros((2, 16, 16)), 50)
        assert not r.output.any()

    def test_reset_and_determinism(self, rng):
        g = synthetic.random_qann(5, channels=(2, 4, 3))
        img = rng.random((2, 16, 16))
        model, _ = convert.convert_model(g, img[None])
        a = run_windowed(model, img, 64, encoding="bernoulli", seed=9, record=True)
        b = run_windowed(model, img, 64, encoding="bernoulli", seed=9, record=True)
        for x, y in zip(a.spikes, b.spikes):
            np.testing.assert_array_equal(x, y)
            assert set(np.unique(x)) <= {0, 1}
        assert all(0.0 <= r.min() and r.max() <= 1.0 for r in a.rates)

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            run_windowed(identity_model(), np.zeros((1, 1, 1)), 0)

    def test_backends_agree(self, rng):
        from qsnn import backend

        if len(backend.available()) < 2:
            pytest.skip("compiled backend not built")
        g = synthetic.random_qann(11, channels=(3, 6, 6, 4), kinds=["conv", "strided_conv", "transpose_conv"])
        img = rng.random((3, 16, 16))
        model, _ = convert.convert_model(g, img[None], neuron="fewdif")
        runs = {}
        for name in backend.available():
            previous = backend.use(name)
            try:
                runs[name] = [run_windowed(model, img, 50, datapath=d, encoding="bernoulli", seed=1, record=True)
                              for d in ("real", "int")]
            finally:
                backend.use(previous)
        for a, b in zip(runs["python"], runs["cython"]):
            for x, y in zip(a.spikes, b.spikes):
                np.testing.assert_array_equal(x, y)


class TestInteger:
    def test_worked_weights(self, rng):
        first = scale_aware_map(np.eye(4).reshape(4, 4, 1, 1), np.zeros(4), 1.0)
        second = scale_aware_map(np.array([0.3, 0.1, -0.2, 0.2]).reshape(1, 4, 1, 1), np.zeros(1), 1.0)
        assert second.int_weights.ravel().tolist() == [3, 1, -2, 2] and second.int_threshold == 10
        model = SnnModel([first, second])
        img = rng.random((4, 3, 3))
        a = run_windowed(model, img, 200, datapath="rounded", record=True)
        b = run_integer(model, img, 200, record=True)
        for x, y in zip(a.spikes, b.spikes):
            np.testing.assert_array_equal(x, y)

    def test_zero_weights(self, rng):
        layer = scale_aware_map(np.zeros((2, 1, 3, 3)), np.zeros(2))
        r = run_integer(SnnModel([layer]), rng.random((1, 5, 5)), 30)
        assert not r.output.any()

    def test_overflow_names_layer(self):
        big = scale_aware_map(np.array([1.0, 2.0**-25]).reshape(2, 1, 1, 1), np.zeros(2), 1.0)
        nxt = scale_aware_map(np.full((1, 2, 1, 1), 1.0), np.zeros(1), 1.0)
        nxt.int_weights[:] = 2**30
        with pytest.raises(OverflowError, match="layer 1"):
            run_integer(SnnModel([big, nxt]), np.ones((1, 1, 1)), 8)

    def test_int_state_dtype(self):
        session = Session(identity_model(), "int")
        session.step(np.ones((1, 1, 1), dtype=np.uint8))
        assert session.states[0].integer

    def test_mixed_frames_rejected(self):
        session = Session(identity_model(), "real")
        session.step(np.ones((1, 1, 1)))
        with pytest.raises(ValueError):
            session.step(np.ones((1, 1, 1), dtype=np.uint8))

    def test_unknown_datapath(self):
        with pytest.raises(ValueError):
            Session(identity_model(), "fixed")


class TestContinuous:
    def test_short_stream(self):
        res = run_continuous(identity_model("fewdif"), [np.full((1, 1, 1), 0.5)] * 3, warmup=5)
        assert res.outputs == [] and res.network_steps == 3

    def test_one_step_per_output(self):
        frames = [np.full((1, 1, 1), 0.25)] * 30
        res = run_continuous(identity_model("fewdif"), frames, warmup=10)
        assert len(res.outputs) == 21
        assert res.steps_per_output == 1.0

    def test_if_layers_flagged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="qsnn.engine"):
            res = run_continuous(identity_model("if"), [np.zeros((1, 1, 1))] * 2, warmup=1)
        assert res.if_layers == [0]
        assert "FewdIF" in caplog.text

    def test_no_reset_between_frames(self):
        frames = [np.full((1, 1, 1), 0.5)] * 4
        res = run_continuous(identity_model("fewdif"), frames, warmup=1, window=1)
        assert [o.item() for o in res.outputs] == [0.0, 1.0, 0.0, 1.0]

    def test_bad_warmup(self):
        with pytest.raises(ValueError):
            run_continuous(identity_model(), [], warmup=0)
