import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgestereo.errors import CapacityError, DimensionError, ValidationError
from edgestereo.model import (
    Activation,
    ConvLayer,
    DescriptorMap,
    FeatureMap,
    FloatModel,
    ImageBuf,
    binarize,
    census_transform,
    conv_forward,
    mccnn_preset,
    model_stats,
    pack_bits,
    random_layer,
    receptive_field,
    single_layer_preset,
)
from oracles import census_direct, forward_direct


def test_averaging_kernel_on_constant_image():
    layer = ConvLayer(np.full((1, 1, 9, 9), 1 / 81), np.zeros(1))
    fm = conv_forward(ImageBuf(np.ones((10, 10))), FloatModel((layer,)))
    # A 10x10 frame gives a 2x2 map; every value is the mean of ones.
    assert fm.values.shape == (2, 2, 1)
    np.testing.assert_allclose(fm.values, 1.0, rtol=1e-12)


def test_delta_kernel_plus_bias():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    img = np.arange(16, dtype=float).reshape(4, 4)
    fm = conv_forward(ImageBuf(img), FloatModel((ConvLayer(w, np.array([0.5])),)))
    np.testing.assert_array_equal(fm.values[..., 0], img[1:3, 1:3] + 0.5)
    assert fm.margin == 1


def test_frame_must_exceed_receptive_field():
    model = FloatModel((ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1)),))
    with pytest.raises(DimensionError):
        conv_forward(ImageBuf(np.ones((3, 3))), model)


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_forward_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 255, (12, 16))
    l1 = random_layer(rng, 1, 4, 3, "relu")
    l2 = random_layer(rng, 4, 3, 3)
    got = conv_forward(ImageBuf(img), FloatModel((l1, l2))).values
    want = forward_direct(img, [(l1.weights, l1.biases, "relu"), (l2.weights, l2.biases, "none")])
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-9)


def test_output_dims_and_margin():
    model = mccnn_preset(0)
    fm = conv_forward(ImageBuf(np.zeros((20, 30))), model)
    assert fm.values.shape == (20 - 8, 30 - 8, 32)
    assert fm.margin == 4 and fm.frame_shape() == (20, 30)
    dm = binarize(fm)
    assert dm.descriptors.shape == (20, 30) and dm.margin == 4 and dm.interior().shape == (12, 22)


def test_binarize_sign_rule_example():
    fm = FeatureMap(np.array([[[0.3, -0.1, 0.0, 5.0]]]))
    assert int(binarize(fm).descriptors[0, 0]) == 9


def test_binarize_zero_map():
    assert not binarize(FeatureMap(np.zeros((3, 4, 8)))).descriptors.any()


def test_binarize_exhaustive_predicate(rng):
    vals = rng.normal(size=(5, 6, 32))
    vals[0, 0, 3] = 0.0
    words = binarize(FeatureMap(vals)).descriptors
    for y in range(5):
        for x in range(6):
            for c in range(32):
                assert bool((int(words[y, x]) >> c) & 1) == (vals[y, x, c] > 0)


def test_binarize_capacity():
    with pytest.raises(CapacityError):
        binarize(FeatureMap(np.ones((2, 2, 65))))


@given(st.integers(0, 2 ** 16), st.lists(st.floats(0.01, 100), min_size=4, max_size=4))
def test_binarize_invariant_under_positive_channel_scaling(seed, factors):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 1, 4, 3)
    img = ImageBuf(rng.uniform(0, 255, (8, 9)))
    f = np.array(factors)
    scaled = ConvLayer(layer.weights * f[:, None, None, None], layer.biases * f)
    a = binarize(conv_forward(img, FloatModel((layer,)))).descriptors
    b = binarize(conv_forward(img, FloatModel((scaled,)))).descriptors
    np.testing.assert_array_equal(a, b)


def test_census_constant_image_is_zero():
    assert not census_transform(ImageBuf(np.full((7, 7), 42.0)), 5).descriptors.any()


def test_census_three_by_three_example():
    img = ImageBuf(np.arange(1, 10, dtype=float).reshape(3, 3))
    word = int(census_transform(img, 3).descriptors[1, 1])
    # Neighbours 1,2,3,4,6,7,8,9 in row-major order; only those above 5 set.
    assert [(word >> b) & 1 for b in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


@pytest.mark.parametrize("seed", range(5))
def test_census_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 6, (10, 10)).astype(float)  # many ties
    np.testing.assert_array_equal(census_transform(ImageBuf(img), 5).descriptors,
                                  census_direct(img, 5))


@given(st.integers(0, 2 ** 16), st.sampled_from([3, 5, 7]))
def test_census_invariant_under_monotone_remap(seed, window):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 50, (9, 11)).astype(float)
    remapped = np.sqrt(img) * 30.0 + 7.0
    a = census_transform(ImageBuf(img), window)
    b = census_transform(ImageBuf(remapped), window)
    np.testing.assert_array_equal(a.descriptors, b.descriptors)
    assert a.margin == window // 2 and a.bits == window * window - 1


def test_census_rejects_bad_window():
    for w in (1, 4, 9):
        with pytest.raises(ValidationError):
            census_transform(ImageBuf(np.zeros((12, 12))), w)


def test_model_stats_presets():
    mc = model_stats(mccnn_preset(), 1280, 720)
    assert mc.weight_count == 27_936 and mc.bias_count == 128 and mc.receptive_field == 9
    assert mc.flops == 27_936 * 1280 * 720
    single = model_stats(single_layer_preset(), 1280, 720)
    assert single.weight_count == 2_592
    assert single.flops == 2_388_787_200
    assert single.descriptor_bytes_per_frame == 3_686_400
    assert single.float_feature_bytes_per_frame == 117_964_800
    assert single.receptive_field == 9


def test_receptive_field_formula():
    layers = [random_layer(np.random.default_rng(0), 1, 2, k) for k in (3, 5, 7)]
    assert receptive_field(layers) == 1 + 2 + 4 + 6


def test_layer_validation():
    with pytest.raises(ValidationError):
        ConvLayer(np.ones((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ValidationError):
        ConvLayer(np.ones((2, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ValidationError):
        ConvLayer(np.full((1, 1, 3, 3), np.nan), np.zeros(1))
    with pytest.raises(ValidationError):
        FloatModel((random_layer(np.random.default_rng(0), 1, 4, 3),
                    random_layer(np.random.default_rng(0), 3, 4, 3)))


def test_image_validation():
    for bad in (np.full((2, 2), 256.0), np.full((2, 2), -1.0), np.array([[np.nan]]), np.zeros(4)):
        with pytest.raises(ValidationError):
            ImageBuf(bad)


def test_activation_parse_and_apply():
    assert str(Activation.parse("relu_clamped:127")) == "relu_clamped:127"
    x = np.array([-5, 3, 200])
    np.testing.assert_array_equal(Activation.parse("relu_clamped:127").apply(x), [0, 3, 127])
    np.testing.assert_array_equal(Activation.parse("relu").apply(x), [0, 3, 200])
    for bad in ("tanh", "relu_clamped", "relu_clamped:0", "relu:3"):
        with pytest.raises(ValidationError):
            Activation.parse(bad)


def test_descriptor_map_rejects_high_bits():
    with pytest.raises(ValidationError):
        DescriptorMap(np.array([[1 << 8]], dtype=np.uint64), bits=8)


def test_pack_bits_order():
    bits = np.zeros((1, 40), dtype=bool)
    bits[0, [0, 39]] = True
    assert int(pack_bits(bits)[0]) == 1 + (1 << 39)


def test_presets_are_seeded():
    a, b = single_layer_preset(3), single_layer_preset(3)
    np.testing.assert_array_equal(a.layers[0].weights, b.layers[0].weights)
    assert not np.array_equal(a.layers[0].weights, single_layer_preset(4).layers[0].weights)
    assert [str(l.activation) for l in mccnn_preset().layers] == ["relu", "relu", "relu", "none"]
    assert math.isclose(a.layers[0].weights[0].mean(), 0.0, abs_tol=1e-12)
