import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgestereo.errors import CapacityError, ValidationError
from edgestereo.model import ConvLayer, FloatModel, ImageBuf, binarize, conv_forward, random_layer
from edgestereo.quant import (
    CalibrationSet,
    QuantConfig,
    QuantizedLayer,
    QuantizedModel,
    descriptor_flip_rate,
    fit_multiply_shift,
    forward_quantized,
    integer_conv,
    quant_act,
    quant_conv,
    quant_distance,
    quantize_model,
    quantize_weights,
    requant,
    round_half_away,
)
from oracles import conv_direct, loss_direct, multiply_shift_direct, threshold_search_direct


def _layer(w, b=None, act="none"):
    w = np.asarray(w, dtype=float)
    return ConvLayer(w, np.zeros(w.shape[0]) if b is None else np.asarray(b, float), act)


# ------------------------------------------------------------ quantize_weights

def test_full_range_maps_to_tau():
    q, qb, scale = quantize_weights(_layer([[[[0.5]]]]), 0, 0.5)
    assert q.item() == 127 and qb == 0 and scale == pytest.approx(254.0)


def test_zero_weight_fixed_point():
    for s in (0.01, 0.5, 3.0):
        assert quantize_weights(_layer([[[[0.0]]]]), 0, s)[0].item() == 0


def test_arithmetic_example():
    assert quantize_weights(_layer([[[[0.30]]]]), 0, 0.5)[0].item() == 76


def test_weights_clip_to_int8():
    q, _, _ = quantize_weights(_layer([[[[1.0]], [[-1.0]], [[0.1]]]]), 0, 0.2)
    assert q.ravel().tolist() == [127, -128, 64]


def test_bias_is_scaled_not_clamped():
    _, qb, _ = quantize_weights(_layer([[[[0.5]]]], [10.0]), 0, 0.5)
    assert qb == 2540


def test_rejects_nonpositive_threshold():
    with pytest.raises(ValidationError):
        quantize_weights(_layer([[[[0.5]]]]), 0, 0.0)


def test_round_half_away():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, -0.5, -2.5, 2.4]), [1, 2, -1, -3, 2])


# --------------------------------------------------------------- quant_distance

@pytest.mark.parametrize("mode", ["kl", "rms", "l1", "hd"])
def test_self_distance_is_zero(mode, rng):
    a = rng.normal(size=50)
    assert quant_distance(mode, a, a) == pytest.approx(0.0, abs=1e-12)


def test_hd_counts_sign_flips():
    assert quant_distance("hd", [1, -1], [1, 1]) == 1


def test_rms_and_l1_examples():
    assert quant_distance("rms", [0, 2, 4], [1, 2, 3]) == pytest.approx(2 / 3)
    assert quant_distance("l1", [0, 2, 4], [1, 2, 3]) == pytest.approx(2 / 3)


@given(st.integers(0, 2 ** 16), st.integers(2, 300))
def test_kl_matches_histogram_oracle(seed, bins):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 20, 200)
    b = np.round(a + rng.normal(0, 3, 200))
    assert quant_distance("kl", a, b, bins) == pytest.approx(loss_direct("kl", a, b, bins), abs=1e-9)


@given(st.integers(0, 2 ** 16))
def test_kl_values_on_bin_edges_match_oracle(seed):
    # Affine images of 0..255 with 255 bins put every value on an edge up to rounding.
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, 60)
    x[:2] = 0, 255
    gain, offset = rng.uniform(-5000, 5000), rng.uniform(-1e4, 1e4)
    a = x * gain + offset
    b = np.round(x * gain * 0.9) + np.round(offset)
    assert quant_distance("kl", a, b) == pytest.approx(loss_direct("kl", a, b), abs=1e-9)


def test_unknown_mode():
    with pytest.raises(ValidationError):
        quant_distance("l2", [1], [1])
    with pytest.raises(ValidationError):
        QuantConfig(mode="l2")


# ------------------------------------------------------------------ quant_conv

def _calib(rng, n=2, shape=(6, 7)):
    imgs = [rng.integers(0, 256, shape).astype(float) for _ in range(n)]
    return [i[:, :, None] for i in imgs], [i[:, :, None].astype(np.int64) for i in imgs]


def test_exactly_representable_weights_zero_loss(rng):
    w = rng.choice([-0.5, 0.0, 0.5], size=(3, 1, 3, 3))
    w[:, 0, 0, 0] = 0.5  # every channel reaches max |w| = 0.5
    layer = _layer(w, [0.5, -0.5, 0.0])
    xs, xdots = _calib(rng)
    qlayer, report = quant_conv(layer, xs, xdots, QuantConfig(mode="l1", steps=100))
    assert all(r["loss"] == 0 and r["s"] == 0.5 for r in report)
    for x, xd in zip(xs, xdots):
        float_out = conv_direct(x, layer.weights, layer.biases)
        int_out = integer_conv(xd, qlayer)
        np.testing.assert_array_equal(float_out * qlayer.channel_scales, int_out)


def _check_optimal(layer, xs, xdots, mode, steps):
    qlayer, report = quant_conv(layer, xs, xdots, QuantConfig(mode=mode, steps=steps))
    brute = threshold_search_direct(layer.weights, layer.biases, xs, xdots, mode, steps)
    for entry, (grid, losses) in zip(report, brute):
        best = min(losses)
        assert entry["loss"] == pytest.approx(best, abs=1e-9)
        winners = [s for s, l in zip(grid, losses) if l <= best + 1e-12]
        # Ties go to the largest threshold.
        assert entry["s"] == winners[-1]


def test_one_by_one_layer_matches_exhaustive_search():
    layer = _layer([[[[0.3]]]])
    xs = [np.ones((1, 1, 1))]
    _check_optimal(layer, xs, [x.astype(np.int64) for x in xs], "l1", 1000)


@pytest.mark.parametrize("mode", ["hd", "l1", "rms", "kl"])
@pytest.mark.parametrize("k", [1, 3])
def test_search_returns_grid_minimum(mode, k):
    rng = np.random.default_rng([k, ["hd", "l1", "rms", "kl"].index(mode)])
    layer = _layer(rng.normal(0, 0.3, (3, 1, k, k)), rng.normal(0, 2, 3))
    xs, xdots = _calib(rng, 2, (5, 6))
    _check_optimal(layer, xs, xdots, mode, 40)


def test_all_zero_channel_is_degenerate(rng):
    w = np.zeros((2, 1, 3, 3))
    w[1, 0, 1, 1] = 0.25
    layer = _layer(w, [0.7, 0.0])
    xs, xdots = _calib(rng)
    qlayer, report = quant_conv(layer, xs, xdots, QuantConfig(mode="kl", steps=10))
    assert report[0]["degenerate"] and np.isfinite(report[0]["loss"])
    assert qlayer.channel_scales[0] == 1.0 and qlayer.q_biases[0] == 1
    assert not report[1]["degenerate"]


def test_requantized_reference_option(rng):
    layer = random_layer(rng, 1, 2, 3)
    xs, xdots = _calib(rng)
    a = quant_conv(layer, xs, xdots, QuantConfig(steps=20))[1]
    b = quant_conv(layer, xs, xdots, QuantConfig(steps=20, reference="requantized"))[1]
    # Integer calibration images make the two references coincide on the first layer.
    assert [r["s"] for r in a] == [r["s"] for r in b]


# ------------------------------------------------------------------- quant_act

def _qlayer(scale, out=1):
    return QuantizedLayer(np.zeros((out, 1, 1, 1), np.int8), np.zeros(out, np.int32),
                          np.full(out, float(scale)), np.ones(out, np.int64), np.zeros(out, np.int64))


def test_unit_scale_identity():
    acc = np.arange(-50, 50)
    assert fit_multiply_shift(acc, 1.0) == (1, 0, 0)


def test_scale_32_example_against_enumeration():
    acc = np.array([64, 96, 127])
    m, h, q = fit_multiply_shift(acc, 32.0)
    assert (m, h, q) == multiply_shift_direct(acc, 32.0, 8)
    assert q <= 1


@given(st.integers(0, 2 ** 16), st.integers(2, 5), st.floats(0.3, 400))
def test_fit_is_lattice_minimum(seed, z, scale):
    rng = np.random.default_rng(seed)
    acc = rng.integers(-2000, 2000, int(rng.integers(1, 25)))
    assert fit_multiply_shift(acc, scale, z) == multiply_shift_direct(acc, scale, z)


@given(st.integers(1, 255), st.integers(0, 20))
def test_zero_error_for_representable_scale(m, h):
    v = np.arange(128)
    v = v[(v << h) % m == 0]
    acc = (v << h) // m
    scale = 2 ** h / m
    assert fit_multiply_shift(acc, scale)[2] == 0


def test_quant_act_per_channel():
    acc = np.stack([np.arange(0, 100), np.arange(0, 200, 2)], axis=1).reshape(10, 10, 2)
    mul, shift, losses = quant_act(_qlayer(2.0, 2), [acc])
    assert losses[0] == fit_multiply_shift(acc[..., 0], 2.0)[2]
    assert (mul <= 255).all() and (shift <= 31).all()


# --------------------------------------------------------------------- requant

def test_requant_examples():
    assert requant(3000, 3, 5) == 127
    assert requant(-64, 1, 6) == -1
    assert requant(-3000, 3, 5) == -128
    for m in range(0, 256, 17):
        for h in range(0, 32, 5):
            assert requant(0, m, h) == 0


@given(st.integers(0, 255), st.integers(0, 31), st.integers(-10 ** 9, 10 ** 9), st.integers(0, 10 ** 6))
def test_requant_monotone(mul, shift, a, delta):
    assert requant(a, mul, shift) <= requant(a + delta, mul, shift)


# ------------------------------------------------------------- quantized model

def test_identity_network_activations_equal_rounded_input(rng):
    delta = np.zeros((1, 1, 3, 3), np.int8)
    delta[0, 0, 1, 1] = 1
    ones = np.ones(1, np.int64)
    l1 = QuantizedLayer(delta, np.zeros(1, np.int32), np.ones(1), ones, 0 * ones)
    l2 = QuantizedLayer(delta, np.zeros(1, np.int32), np.ones(1), ones, 0 * ones)
    img = rng.uniform(0, 127, (8, 9))
    fwd = forward_quantized(ImageBuf(img), QuantizedModel((l1, l2)))
    np.testing.assert_array_equal(fwd.activations[0][..., 0], round_half_away(img)[1:-1, 1:-1])


def test_negative_bias_gives_zero_descriptors():
    layer = QuantizedLayer(np.zeros((8, 1, 3, 3), np.int8), -np.ones(8, np.int32), np.ones(8),
                           np.ones(8, np.int64), np.zeros(8, np.int64))
    fwd = forward_quantized(ImageBuf(np.full((6, 6), 200.0)), QuantizedModel((layer,)))
    assert not fwd.descriptors.descriptors.any()


def _random_qlayer(rng, cin, cout, k, act="none"):
    return QuantizedLayer(rng.integers(-128, 128, (cout, cin, k, k)).astype(np.int8),
                          rng.integers(-5000, 5000, cout).astype(np.int32),
                          rng.uniform(1, 100, cout), rng.integers(1, 256, cout),
                          rng.integers(0, 16, cout), act)


@pytest.mark.parametrize("seed", range(5))
def test_accumulators_match_integer_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = _random_qlayer(rng, 1, 4, 3)
    img = rng.integers(0, 256, (9, 8)).astype(float)
    fwd = forward_quantized(ImageBuf(img), QuantizedModel((layer,)))
    want = conv_direct(img.astype(np.int64)[:, :, None], layer.q_weights.astype(np.int64),
                       layer.q_biases.astype(np.int64))
    np.testing.assert_array_equal(fwd.accumulators, want)
    bits = fwd.descriptors.interior()
    for c in range(4):
        np.testing.assert_array_equal((bits >> np.uint64(c)) & np.uint64(1), want[..., c] > 0)


def test_two_layer_chain_feeds_requantized_activations(rng):
    l1 = _random_qlayer(rng, 1, 4, 3, "relu")
    l2 = _random_qlayer(rng, 4, 4, 3)
    img = rng.integers(0, 256, (10, 10)).astype(float)
    fwd = forward_quantized(ImageBuf(img), QuantizedModel((l1, l2)))
    acc1 = conv_direct(img.astype(np.int64)[:, :, None], l1.q_weights.astype(np.int64),
                       l1.q_biases.astype(np.int64))
    act1 = np.maximum(requant(acc1, l1.mul, l1.shift), 0)
    np.testing.assert_array_equal(fwd.activations[0], act1)
    acc2 = conv_direct(act1, l2.q_weights.astype(np.int64), l2.q_biases.astype(np.int64))
    np.testing.assert_array_equal(fwd.accumulators, acc2)


def test_integer_inference_is_deterministic(rng):
    q = QuantizedModel((_random_qlayer(rng, 1, 8, 3, "relu"), _random_qlayer(rng, 8, 8, 3)))
    img = ImageBuf(rng.uniform(0, 255, (12, 12)))
    a, b = forward_quantized(img, q), forward_quantized(img, q)
    np.testing.assert_array_equal(a.descriptors.descriptors, b.descriptors.descriptors)


def test_accumulator_overflow_is_reported():
    layer = QuantizedLayer(np.full((1, 1, 3, 3), 127, np.int8), np.array([2 ** 31 - 10], np.int32),
                           np.ones(1), np.ones(1, np.int64), np.zeros(1, np.int64))
    with pytest.raises(CapacityError):
        forward_quantized(ImageBuf(np.full((5, 5), 255.0)), QuantizedModel((layer,)))


def test_quantized_layer_validation():
    ok = dict(q_weights=np.zeros((1, 1, 3, 3)), q_biases=np.zeros(1), channel_scales=np.ones(1),
              mul=np.ones(1), shift=np.zeros(1))
    QuantizedLayer(**ok)
    for key, bad in [("q_weights", np.full((1, 1, 3, 3), 200)), ("channel_scales", np.zeros(1)),
                     ("mul", np.array([256])), ("shift", np.array([32])),
                     ("q_biases", np.array([2 ** 31]))]:
        with pytest.raises(ValidationError):
            QuantizedLayer(**{**ok, key: bad})


def test_exact_model_reproduces_float_descriptors(rng):
    w = rng.choice([-0.5, 0.0, 0.5], size=(8, 1, 3, 3))
    w[:, 0, 1, 1] = 0.5
    model = FloatModel((_layer(w, rng.choice([-0.5, 0.5], 8)),))
    imgs = [ImageBuf(rng.integers(0, 256, (12, 12)).astype(float)) for _ in range(2)]
    qmodel, report = quantize_model(model, CalibrationSet(imgs), QuantConfig(mode="hd", steps=50))
    assert all(r["loss"] == 0 for r in report[0])
    for img in imgs:
        np.testing.assert_array_equal(binarize(conv_forward(img, model)).descriptors,
                                      forward_quantized(img, qmodel).descriptors.descriptors)


def test_random_single_layer_flip_rate(rng):
    model = FloatModel((random_layer(rng, 1, 8, 9),))
    imgs = [ImageBuf(rng.uniform(0, 255, (32, 32))) for _ in range(4)]
    qmodel, report = quantize_model(model, CalibrationSet(imgs), QuantConfig(mode="hd", steps=200))
    assert descriptor_flip_rate(model, qmodel, imgs) <= 0.02
    assert all({"s", "loss", "mode", "m", "h"} <= set(r) for r in report[0])


def test_two_layer_toy_chain_rms_drift_fixture():
    from edgestereo.io.synthetic import generate_synthetic_pair, plane_scene

    seed = 9
    rng = np.random.default_rng(seed)
    model = FloatModel((random_layer(rng, 1, 4, 3, "relu"), random_layer(rng, 4, 4, 3)))
    scene = lambda s: generate_synthetic_pair(plane_scene(24, 24, 0, seed=100 * seed + s))[0]
    calib = [scene(s) for s in range(4)]
    held_out = [scene(s) for s in (50, 51)]

    def drift(images):
        qmodel, _ = quantize_model(model, CalibrationSet(images), QuantConfig(mode="rms", steps=100))
        # First layer: the quantized activations are requant of the integer accumulators.
        fwd = forward_quantized(held_out[0], qmodel)
        acc1 = integer_conv(np.rint(held_out[0].pixels).astype(np.int64)[:, :, None], qmodel.layers[0])
        np.testing.assert_array_equal(
            fwd.activations[0], np.maximum(requant(acc1, qmodel.layers[0].mul, qmodel.layers[0].shift), 0))
        scales = qmodel.layers[-1].channel_scales
        return float(np.mean([np.abs(conv_forward(t, model).values
                                     - forward_quantized(t, qmodel).accumulators / scales).mean()
                              for t in held_out]))

    one, four = drift(calib[:1]), drift(calib)
    # Measured regression values for this seed; the ordering is not a theorem.
    assert one == pytest.approx(0.32486157, abs=1e-6)
    assert four == pytest.approx(0.29916993, abs=1e-6)
    assert four <= one
