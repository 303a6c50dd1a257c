"""Post-training int8 quantization of descriptor networks.

Weights are mapped channel-wise with a clip threshold ``s``: the effective
multiplier is ``tau / s`` and ``q = clamp(round(w * tau / s), -128, 127)``.
Thresholds are found by exhaustive grid search against a quantization loss,
and accumulators are brought back to the float domain of the next layer by a
per-channel integer multiply followed by an arithmetic right shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CapacityError, DimensionError, ValidationError
from .model import (
    Activation,
    ConvLayer,
    DescriptorMap,
    FloatModel,
    ImageBuf,
    binarize,
    conv2d_valid,
    conv_forward,
    pack_bits,
    receptive_field,
)

LOSS_MODES = ("kl", "rms", "l1", "hd")
INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1
# Upper bound on elements materialised per candidate block during the search.
_BLOCK_ELEMENTS = 1 << 22
KL_EDGE_TOL = 1e-9  # in bin widths


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantConfig:
    mode: str = "hd"
    steps: int = 1000
    bins: int = 255
    z_bits: int = 8
    tau: int = 127
    # "float": compare against the float network fed with float activations.
    # "requantized": compare against the float layer fed with the quantized activations.
    reference: str = "float"

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValidationError(f"unknown loss mode {self.mode!r}; choose from {LOSS_MODES}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.bins < 1:
            raise ValidationError("bins must be >= 1")
        if not 1 <= self.z_bits <= 16:
            raise ValidationError("z_bits must be in [1, 16]")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.reference not in ("float", "requantized"):
            raise ValidationError(f"unknown reference {self.reference!r}")

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class QuantizedLayer:
    q_weights: np.ndarray  # int8 [out, in, k, k]
    q_biases: np.ndarray  # int32 [out]
    channel_scales: np.ndarray  # float64 [out], multiplier tau / s
    mul: np.ndarray  # int64 [out]
    shift: np.ndarray  # int64 [out]
    activation: Activation = field(default_factory=Activation)
    z_bits: int = 8

    def __post_init__(self):
        w = np.asarray(self.q_weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ValidationError(f"q_weights must be [out, in, k, k] with odd k, got {w.shape}")
        if w.size and (w.min() < INT8_MIN or w.max() > INT8_MAX):
            raise ValidationError("q_weights outside [-128, 127]")
        out = w.shape[0]
        b = np.asarray(self.q_biases)
        if b.shape != (out,):
            raise ValidationError(f"expected {out} biases, got shape {b.shape}")
        if b.min() < INT32_MIN or b.max() > INT32_MAX:
            raise ValidationError("q_biases outside int32 range")
        s = np.asarray(self.channel_scales, dtype=np.float64)
        if s.shape != (out,) or not np.isfinite(s).all() or (s <= 0).any():
            raise ValidationError("channel scales must be finite and > 0, one per output channel")
        mul = np.asarray(self.mul, dtype=np.int64)
        shift = np.asarray(self.shift, dtype=np.int64)
        if mul.shape != (out,) or shift.shape != (out,):
            raise ValidationError("mul/shift need one entry per output channel")
        mmax, hmax = 2 ** self.z_bits - 1, min(2 ** self.z_bits - 1, 31)
        if mul.min() < 0 or mul.max() > mmax:
            raise ValidationError(f"mul outside [0, {mmax}]")
        if shift.min() < 0 or shift.max() > hmax:
            raise ValidationError(f"shift outside [0, {hmax}]")
        object.__setattr__(self, "q_weights", w.astype(np.int8))
        object.__setattr__(self, "q_biases", b.astype(np.int32))
        object.__setattr__(self, "channel_scales", s)
        object.__setattr__(self, "mul", mul)
        object.__setattr__(self, "shift", shift)
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation.parse(self.activation))

    @property
    def out_channels(self) -> int:
        return self.q_weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.q_weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.q_weights.shape[2]


@dataclass(frozen=True)
class QuantizedModel:
    layers: tuple
    tau: int = 127
    z_bits: int = 8

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("quantized model needs at least one layer")
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


@dataclass
class CalibrationSet:
    samples: list

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("calibration set is empty")
        self.samples = [s if isinstance(s, ImageBuf) else ImageBuf(s) for s in self.samples]

    @property
    def quantized_samples(self) -> list:
        return [round_half_away(s.pixels).astype(np.int64) for s in self.samples]


def quantize_weights(layer: ConvLayer, channel: int, s: float, tau: int = 127):
    """Quantize output channel ``channel`` with clip threshold ``s``.

    Returns ``(q_weights [in, k, k] int, q_bias int, scale)`` where ``scale`` is
    the multiplier ``tau / s`` relating float and integer outputs.
    """
    if not s > 0:
        raise ValidationError(f"clip threshold must be positive, got {s}")
    scale = tau / s
    q = np.clip(round_half_away(layer.weights[channel] * scale), INT8_MIN, INT8_MAX)
    qb = round_half_away(layer.biases[channel] * scale)
    if not INT32_MIN <= qb <= INT32_MAX:
        raise CapacityError(f"quantized bias {qb} of channel {channel} overflows int32")
    return q.astype(np.int64), int(qb), scale


def _histograms(ref, quant, bins):
    """Laplace-smoothed normalised histograms over the joint range, per column."""
    lo = np.minimum(ref.min(axis=0), quant.min(axis=0))
    hi = np.maximum(ref.max(axis=0), quant.max(axis=0))
    width = np.where(hi > lo, hi - lo, 1.0)
    m = ref.shape[1]
    offsets = np.arange(m) * bins

    def hist(v):
        # Values within KL_EDGE_TOL bins of an edge count as on it and go to the upper bin.
        # Calibration data often sits exactly on edges, where rounding noise would decide.
        idx = np.floor((v - lo) * bins / width + KL_EDGE_TOL).astype(np.int64)
        np.clip(idx, 0, bins - 1, out=idx)
        counts = np.bincount((idx + offsets).ravel(), minlength=m * bins).reshape(m, bins)
        counts = counts.astype(np.float64) + 1.0
        return counts / counts.sum(axis=1, keepdims=True)

    return hist(ref), hist(quant)


def batch_distance(mode: str, ref: np.ndarray, quant: np.ndarray, bins: int = 255) -> np.ndarray:
    """Loss of every column pair of ``ref[n, m]`` and ``quant[n, m]``."""
    if mode == "hd":
        return np.count_nonzero((ref > 0) != (quant > 0), axis=0).astype(np.float64)
    if mode in ("rms", "l1"):
        diff = ref - quant
        if mode == "rms":
            return np.sqrt(diff * diff).mean(axis=0)
        return np.abs(diff).mean(axis=0)
    if mode == "kl":
        h, hdot = _histograms(ref, quant, bins)
        return (np.log2(h / hdot) * h).sum(axis=1)
    raise ValidationError(f"unknown loss mode {mode!r}")


def quant_distance(mode: str, reference_outputs, quantized_outputs, bins: int = 255) -> float:
    a = np.asarray(reference_outputs, dtype=np.float64)
    b = np.asarray(quantized_outputs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if mode not in LOSS_MODES:
        raise ValidationError(f"unknown loss mode {mode!r}")
    if a.size == 0:
        return 0.0
    return float(batch_distance(mode, a.reshape(-1, 1), b.reshape(-1, 1), bins)[0])


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col rows ordered [channel][ky][kx], matching ``weights.reshape(out, -1)``."""
    win = sliding_window_view(x, (k, k), axis=(0, 1))  # [oh, ow, c, k, k]
    return win.reshape(-1, x.shape[2] * k * k)


def _as_hwc(arrays):
    return [a[:, :, None] if a.ndim == 2 else a for a in arrays]


def search_grid(wmax: float, steps: int) -> np.ndarray:
    return wmax * np.arange(1, steps + 1, dtype=np.float64) / steps


def quant_conv(layer: ConvLayer, x_prev, xdot_prev, config: QuantConfig = QuantConfig()):
    """Channel-wise exhaustive search of clip thresholds for one layer.

    ``x_prev`` are the float activations entering the layer, ``xdot_prev`` the
    integer activations produced by the already quantized prefix. Returns the
    quantized layer (mul/shift left at identity) and one report dict per channel.
    """
    x_prev, xdot_prev = _as_hwc(x_prev), _as_hwc(xdot_prev)
    if len(x_prev) != len(xdot_prev) or not x_prev:
        raise ValidationError("float and quantized calibration activations must pair up")
    k = layer.kernel
    if config.reference == "float":
        ref = np.concatenate(
            [conv2d_valid(x, layer.weights, layer.biases).reshape(-1, layer.out_channels)
             for x in x_prev])
    else:
        ref = np.concatenate(
            [conv2d_valid(x.astype(np.float64), layer.weights, layer.biases)
             .reshape(-1, layer.out_channels) for x in xdot_prev])
    patches = np.concatenate([_patches(x.astype(np.float64), k) for x in xdot_prev])
    if patches.shape[0] != ref.shape[0]:
        raise DimensionError("float and quantized calibration activations differ in shape")
    n = patches.shape[0]
    tau = config.tau
    block = max(1, min(config.steps, _BLOCK_ELEMENTS // max(n, 1)))

    q_weights = np.zeros(layer.weights.shape, dtype=np.int64)
    q_biases = np.zeros(layer.out_channels, dtype=np.int64)
    scales = np.ones(layer.out_channels)
    report = []
    for i in range(layer.out_channels):
        w_flat = layer.weights[i].ravel()
        wmax = float(np.abs(w_flat).max())
        if wmax == 0.0:
            qb = round_half_away(layer.biases[i])
            quant = patches @ np.zeros_like(w_flat) + qb
            loss = quant_distance(config.mode, ref[:, i], quant, config.bins)
            q_biases[i] = int(qb)
            report.append(dict(s=float(tau), loss=loss, mode=config.mode, degenerate=True))
            continue
        grid = search_grid(wmax, config.steps)
        best_loss, best_s = np.inf, grid[-1]
        for start in range(0, config.steps, block):
            s = grid[start:start + block]
            mult = tau / s
            qw = np.clip(round_half_away(w_flat[:, None] * mult), INT8_MIN, INT8_MAX)
            qb = round_half_away(layer.biases[i] * mult)
            quant = patches @ qw + qb
            losses = batch_distance(config.mode, ref[:, i, None] * mult, quant, config.bins)
            # Last occurrence of the minimum: ties go to the larger threshold.
            j = len(losses) - 1 - int(np.argmin(losses[::-1]))
            if losses[j] <= best_loss:
                best_loss, best_s = float(losses[j]), float(s[j])
        qw, qb, scale = quantize_weights(layer, i, best_s, tau)
        q_weights[i], q_biases[i], scales[i] = qw, qb, scale
        report.append(dict(s=best_s, loss=best_loss, mode=config.mode, degenerate=False))

    zeros = np.zeros(layer.out_channels, dtype=np.int64)
    qlayer = QuantizedLayer(q_weights, q_biases, scales, zeros + 1, zeros,
                            layer.activation, config.z_bits)
    return qlayer, report


def activation_loss(acc: np.ndarray, scale: float, mul: int, shift: int) -> int:
    """Q = sum |round(acc / scale) - ((acc * mul) >> shift)|."""
    acc = np.asarray(acc, dtype=np.int64)
    target = round_half_away(acc / scale).astype(np.int64)
    return int(np.abs(target - ((acc * mul) >> shift)).sum())


def fit_multiply_shift(acc: np.ndarray, scale: float, z_bits: int = 8):
    """Exhaustive (M, H) search; ties go to smaller H, then smaller M.

    Returns ``(mul, shift, Q)``.
    """
    values, counts = np.unique(np.asarray(acc, dtype=np.int64).ravel(), return_counts=True)
    target = round_half_away(values / scale).astype(np.int64)
    mmax = 2 ** z_bits - 1
    small = values.size == 0 or int(np.abs(values).max()) * mmax < 2 ** 31
    dtype = np.int32 if small and np.abs(target).max() < 2 ** 30 else np.int64
    values, target = values.astype(dtype), target.astype(dtype)
    weighted = bool((counts > 1).any())
    all_m = np.arange(mmax + 1, dtype=dtype)
    # For H >= 1, even M reproduces (M / 2, H - 1) exactly, which wins the tie.
    odd_m = all_m[1::2]
    prod_all = values[:, None] * all_m[None, :]
    prod_odd = prod_all[:, 1::2]
    best = (None, None, None)
    for h in range(min(mmax, 31) + 1):
        muls, prod = (all_m, prod_all) if h == 0 else (odd_m, prod_odd)
        err = np.abs(target[:, None] - (prod >> h))
        q = (err * counts[:, None]).sum(axis=0) if weighted else err.sum(axis=0, dtype=np.int64)
        j = int(np.argmin(q))
        if best[2] is None or q[j] < best[2]:
            best = (int(muls[j]), h, int(q[j]))
            if best[2] == 0:
                break
    return best


def quant_act(q_layer: QuantizedLayer, xdot_outputs, z_bits: int = 8):
    """Fit per-channel (mul, shift) on the integer accumulators ``xdot_outputs``.

    Returns ``(mul, shift, losses)`` arrays, one entry per output channel.
    """
    accs = [np.asarray(a, dtype=np.int64).reshape(-1, q_layer.out_channels)
            for a in xdot_outputs]
    acc = np.concatenate(accs)
    mul = np.zeros(q_layer.out_channels, dtype=np.int64)
    shift = np.zeros(q_layer.out_channels, dtype=np.int64)
    losses = np.zeros(q_layer.out_channels, dtype=np.int64)
    for i in range(q_layer.out_channels):
        mul[i], shift[i], losses[i] = fit_multiply_shift(acc[:, i], q_layer.channel_scales[i], z_bits)
    return mul, shift, losses


def requant(acc, mul, shift):
    """clamp((acc * mul) >> shift, -128, 127) with a 64-bit product."""
    acc = np.asarray(acc, dtype=np.int64)
    out = (acc * np.asarray(mul, dtype=np.int64)) >> np.asarray(shift, dtype=np.int64)
    return np.clip(out, INT8_MIN, INT8_MAX)


def integer_conv(x: np.ndarray, q_layer: QuantizedLayer) -> np.ndarray:
    """Integer accumulators ``W.x + B`` for int activations ``x[h, w, c]``."""
    acc = conv2d_valid(x.astype(np.int64), q_layer.q_weights.astype(np.int64),
                       q_layer.q_biases.astype(np.int64))
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise CapacityError("accumulator overflows int32")
    return acc


def _advance_quantized(acc, q_layer):
    return q_layer.activation.apply(requant(acc, q_layer.mul, q_layer.shift))


def with_multiply_shift(q_layer: QuantizedLayer, mul, shift) -> QuantizedLayer:
    return QuantizedLayer(q_layer.q_weights, q_layer.q_biases, q_layer.channel_scales,
                          mul, shift, q_layer.activation, q_layer.z_bits)


def quantize_model(model: FloatModel, calib: CalibrationSet, config: QuantConfig = QuantConfig()):
    """Quantize every layer in order, forwarding both the float and integer paths.

    Returns ``(QuantizedModel, report)`` where ``report[l][c]`` holds the winning
    threshold ``s``, its loss, the loss mode, ``m`` and ``h`` of channel ``c``.
    """
    xs = [s.pixels[:, :, None] for s in calib.samples]
    xdots = [q[:, :, None] for q in calib.quantized_samples]
    layers, report = [], []
    for layer in model.layers:
        qlayer, channels = quant_conv(layer, xs, xdots, config)
        accs = [integer_conv(x, qlayer) for x in xdots]
        mul, shift, act_losses = quant_act(qlayer, accs, config.z_bits)
        qlayer = with_multiply_shift(qlayer, mul, shift)
        for c, entry in enumerate(channels):
            entry.update(m=int(mul[c]), h=int(shift[c]), act_loss=int(act_losses[c]))
        layers.append(qlayer)
        report.append(channels)
        xs = [layer.activation.apply(conv2d_valid(x, layer.weights, layer.biases)) for x in xs]
        xdots = [_advance_quantized(acc, qlayer) for acc in accs]
    return QuantizedModel(tuple(layers), config.tau, config.z_bits), report


@dataclass(frozen=True)
class QuantizedForward:
    activations: list  # int8-range maps after each non-final layer
    accumulators: np.ndarray  # final-layer int32 accumulators [h, w, c]
    descriptors: DescriptorMap


def forward_quantized(image: ImageBuf, qmodel: QuantizedModel) -> QuantizedForward:
    rf = qmodel.receptive_field
    if image.width <= rf or image.height <= rf:
        raise DimensionError(
            f"image {image.width}x{image.height} must be larger than the receptive field {rf}"
        )
    x = round_half_away(image.pixels).astype(np.int64)[:, :, None]
    activations = []
    for q_layer in qmodel.layers[:-1]:
        x = _advance_quantized(integer_conv(x, q_layer), q_layer)
        activations.append(x.astype(np.int8))
    acc = integer_conv(x, qmodel.layers[-1]).astype(np.int32)
    m = (rf - 1) // 2
    words = pack_bits(acc > 0)
    full = np.zeros((image.height, image.width), dtype=np.uint64)
    full[m:m + words.shape[0], m:m + words.shape[1]] = words
    return QuantizedForward(activations, acc, DescriptorMap(full, qmodel.descriptor_bits, m))


def descriptor_flip_rate(model: FloatModel, qmodel: QuantizedModel, images) -> float:
    """Fraction of descriptor bits that differ between the float and quantized networks."""
    flipped = total = 0
    for image in images:
        image = image if isinstance(image, ImageBuf) else ImageBuf(image)
        a = binarize(conv_forward(image, model)).interior()
        b = forward_quantized(image, qmodel).descriptors.interior()
        flipped += int(np.bitwise_count(a ^ b).sum())
        total += a.size * qmodel.descriptor_bits
    return flipped / total if total else 0.0
