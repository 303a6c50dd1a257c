"""Convolutional descriptor networks, census baseline and model accounting.

Networks are chains of valid (unpadded) convolutions over a single-channel
intensity image. Descriptor maps keep the full frame layout and record the
border ``margin`` where no descriptor is defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DimensionError, ValidationError

ACTIVATION_KINDS = ("none", "relu", "relu_clamped")


@dataclass(frozen=True)
class Activation:
    kind: str = "none"
    limit: int | None = None

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValidationError(f"unknown activation {self.kind!r}")
        if self.kind == "relu_clamped":
            if self.limit is None or int(self.limit) != self.limit or self.limit <= 0:
                raise ValidationError("relu_clamped needs a positive integer limit")
        elif self.limit is not None:
            raise ValidationError(f"activation {self.kind!r} takes no limit")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``none``, ``relu`` or ``relu_clamped:<limit>``."""
        if isinstance(text, Activation):
            return text
        kind, _, limit = str(text).partition(":")
        if kind == "relu_clamped":
            try:
                return cls(kind, int(limit))
            except ValueError:
                raise ValidationError(f"bad clamp limit in activation {text!r}") from None
        if limit:
            raise ValidationError(f"activation {kind!r} takes no limit")
        return cls(kind)

    def __str__(self):
        return f"{self.kind}:{self.limit}" if self.kind == "relu_clamped" else self.kind

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return x
        if self.kind == "relu":
            return np.maximum(x, 0)
        return np.clip(x, 0, self.limit)


@dataclass(frozen=True)
class ConvLayer:
    weights: np.ndarray  # [out, in, k, k]
    biases: np.ndarray  # [out]
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValidationError(f"weights must be [out, in, k, k], got shape {w.shape}")
        if min(w.shape) < 1:
            raise ValidationError("layer dimensions must be positive")
        if w.shape[2] % 2 == 0:
            raise ValidationError(f"kernel size must be odd, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise ValidationError(f"expected {w.shape[0]} biases, got shape {b.shape}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("non-finite weight or bias")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation.parse(self.activation))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class FloatModel:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("model needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_channels != b.in_channels:
                raise ValidationError(
                    f"layer {i} has {a.out_channels} outputs but layer {i + 1} "
                    f"expects {b.in_channels} inputs"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.layers)

    @property
    def descriptor_bits(self) -> int:
        return self.layers[-1].out_channels


def receptive_field(layers) -> int:
    return 1 + sum(layer.kernel - 1 for layer in layers)


@dataclass(frozen=True)
class ImageBuf:
    """Grayscale raster, ``pixels[y, x]`` in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise ValidationError(f"image must be a non-empty 2-D array, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise ValidationError("image contains non-finite pixels")
        if p.min() < 0 or p.max() > 255:
            raise ValidationError("pixel values must lie in [0, 255]")
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class FeatureMap:
    """Real feature tensor ``values[y, x, c]`` cropped to the valid region.

    ``margin`` is the offset of the map inside the source frame on every side.
    """

    values: np.ndarray
    margin: int = 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def frame_shape(self) -> tuple[int, int]:
        return self.height + 2 * self.margin, self.width + 2 * self.margin


@dataclass(frozen=True)
class DescriptorMap:
    """Per-pixel binary signatures in full-frame layout.

    Words inside the ``margin`` border are zero and must not be matched.
    """

    descriptors: np.ndarray  # uint64 [height, width]
    bits: int
    margin: int = 0

    def __post_init__(self):
        d = np.asarray(self.descriptors)
        if d.ndim != 2:
            raise ValidationError("descriptor array must be 2-D")
        if not 1 <= self.bits <= 64:
            raise CapacityError(f"bits_per_descriptor must be in [1, 64], got {self.bits}")
        d = d.astype(np.uint64, copy=False)
        if self.bits < 64 and (d >> np.uint64(self.bits)).any():
            raise ValidationError(f"descriptor words carry bits above bit {self.bits - 1}")
        object.__setattr__(self, "descriptors", d)

    @property
    def width(self) -> int:
        return self.descriptors.shape[1]

    @property
    def height(self) -> int:
        return self.descriptors.shape[0]

    def interior(self) -> np.ndarray:
        m = self.margin
        return self.descriptors[m:self.height - m, m:self.width - m]


@dataclass(frozen=True)
class ModelStats:
    weight_count: int
    bias_count: int
    flops: int
    receptive_field: int
    descriptor_bytes_per_frame: int
    float_feature_bytes_per_frame: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def conv2d_valid(x: np.ndarray, weights: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of ``x[h, w, c_in]`` with ``weights[o, c_in, k, k]``.

    Accumulates channel-major, then kernel row, then kernel column, which keeps
    float outputs bit-reproducible. Integer inputs accumulate in int64.
    """
    h, w, cin = x.shape
    out_c, w_cin, k, _ = weights.shape
    if w_cin != cin:
        raise DimensionError(f"input has {cin} channels, layer expects {w_cin}")
    oh, ow = h - k + 1, w - k + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {w}x{h} is smaller than the {k}x{k} kernel")
    integer = np.issubdtype(x.dtype, np.integer)
    acc_dtype = np.int64 if integer else np.float64
    x = x.astype(acc_dtype, copy=False)
    wts = weights.astype(acc_dtype, copy=False)
    out = np.zeros((oh, ow, out_c), dtype=acc_dtype)
    for c in range(cin):
        for ky in range(k):
            for kx in range(k):
                out += x[ky:ky + oh, kx:kx + ow, c, None] * wts[:, c, ky, kx]
    out += biases.astype(acc_dtype, copy=False)
    return out


def _check_frame(image: ImageBuf, rf: int):
    if image.width <= rf or image.height <= rf:
        raise DimensionError(
            f"image {image.width}x{image.height} must be larger than the receptive field {rf}"
        )


def conv_forward(image: ImageBuf, model: FloatModel) -> FeatureMap:
    _check_frame(image, model.receptive_field)
    x = image.pixels[:, :, None]
    for layer in model.layers:
        x = layer.activation.apply(conv2d_valid(x, layer.weights, layer.biases))
    return FeatureMap(x, margin=(model.receptive_field - 1) // 2)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean ``[..., n]`` array into uint64 words, channel c -> bit c."""
    n = bits.shape[-1]
    if n > 64:
        raise CapacityError(f"{n} channels do not fit into a 64-bit descriptor")
    words = np.zeros(bits.shape[:-1], dtype=np.uint64)
    for c in range(n):
        words |= bits[..., c].astype(np.uint64) << np.uint64(c)
    return words


def binarize(features: FeatureMap) -> DescriptorMap:
    if features.channels > 64:
        raise CapacityError(f"{features.channels} channels do not fit into a 64-bit descriptor")
    words = pack_bits(features.values > 0)
    m = features.margin
    full = np.zeros(features.frame_shape(), dtype=np.uint64)
    full[m:m + features.height, m:m + features.width] = words
    return DescriptorMap(full, bits=features.channels, margin=m)


def census_transform(image: ImageBuf, window: int = 5) -> DescriptorMap:
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"census window must be odd and positive, got {window}")
    if window * window - 1 > 64:
        raise ValidationError(f"census window {window} needs more than 64 bits")
    if window == 1:
        raise ValidationError("census window 1 has no neighbours")
    r = window // 2
    p = image.pixels
    h, w = p.shape
    if h < window or w < window:
        raise DimensionError(f"image {w}x{h} is smaller than the census window {window}")
    center = p[r:h - r, r:w - r]
    words = np.zeros(center.shape, dtype=np.uint64)
    bit = 0
    for dy in range(window):
        for dx in range(window):
            if dy == r and dx == r:
                continue
            neighbour = p[dy:dy + h - 2 * r, dx:dx + w - 2 * r]
            words |= (neighbour > center).astype(np.uint64) << np.uint64(bit)
            bit += 1
    full = np.zeros((h, w), dtype=np.uint64)
    full[r:h - r, r:w - r] = words
    return DescriptorMap(full, bits=window * window - 1, margin=r)


def model_stats(model: FloatModel, frame_width: int, frame_height: int) -> ModelStats:
    weights = sum(l.in_channels * l.out_channels * l.kernel ** 2 for l in model.layers)
    bits = model.descriptor_bits
    return ModelStats(
        weight_count=weights,
        bias_count=sum(l.out_channels for l in model.layers),
        flops=weights * frame_width * frame_height,
        receptive_field=model.receptive_field,
        descriptor_bytes_per_frame=frame_width * frame_height * math.ceil(bits / 8),
        float_feature_bytes_per_frame=frame_width * frame_height * bits * 4,
    )


def random_layer(rng: np.random.Generator, cin: int, cout: int, k: int,
                 activation="none", bias_scale: float = 1.0) -> ConvLayer:
    """Zero-mean Gaussian kernels, so descriptors respond to texture rather than brightness."""
    w = rng.normal(0.0, 1.0 / math.sqrt(cin * k * k), size=(cout, cin, k, k))
    w -= w.mean(axis=(1, 2, 3), keepdims=True)
    b = rng.normal(0.0, bias_scale, size=cout)
    return ConvLayer(w, b, Activation.parse(activation))


def single_layer_preset(seed: int = 0, channels: int = 32, kernel: int = 9) -> FloatModel:
    """One 9x9 convolution, 1 -> 32 channels, no activation."""
    rng = np.random.default_rng(seed)
    return FloatModel((random_layer(rng, 1, channels, kernel),))


def mccnn_preset(seed: int = 0) -> FloatModel:
    """Four 3x3 convolutions, 1 -> 32 -> 32 -> 32 -> 32; ReLU on all but the last."""
    rng = np.random.default_rng(seed)
    layers = [random_layer(rng, 1, 32, 3, "relu")]
    layers += [random_layer(rng, 32, 32, 3, "relu") for _ in range(2)]
    layers.append(random_layer(rng, 32, 32, 3, "none"))
    return FloatModel(tuple(layers))


PRESETS = {"single": single_layer_preset, "mccnn": mccnn_preset}
