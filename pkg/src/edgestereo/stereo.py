"""Classical stereo back end: cost volume, aggregation, selection, refinement.

Volumes are ``costs[y, x, d]`` with the left image as reference: ``d`` pairs
left pixel ``x`` with right pixel ``x - d``. Integer (Hamming) volumes are
uint16 with ``INVALID_U16`` marking cells that cannot be evaluated; real
(cosine) volumes use ``+inf``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .model import DescriptorMap, FeatureMap, FloatModel, ImageBuf, binarize, census_transform, conv_forward
from .quant import QuantizedModel, forward_quantized, round_half_away

INVALID_U16 = np.iinfo(np.uint16).max
INVALID = np.inf

DIRECTIONS_4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
DIRECTIONS_8 = DIRECTIONS_4 + ((1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class CostVolume:
    costs: np.ndarray  # [height, width, n_disp]
    max_cost: float  # largest cost a valid cell can hold before aggregation

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    @property
    def n_disp(self) -> int:
        return self.costs.shape[2]

    @property
    def integer(self) -> bool:
        return np.issubdtype(self.costs.dtype, np.integer)

    @property
    def invalid_cost(self):
        return INVALID_U16 if self.integer else INVALID

    def invalid_mask(self) -> np.ndarray:
        return self.costs == self.invalid_cost


@dataclass(frozen=True)
class SgmParams:
    p1: float = 3
    p2: float = 24
    paths: int = 8

    def __post_init__(self):
        if not 0 < self.p1 < self.p2:
            raise ValidationError(f"SGM penalties need 0 < p1 < p2, got p1={self.p1}, p2={self.p2}")
        if self.paths not in (4, 8):
            raise ValidationError(f"SGM paths must be 4 or 8, got {self.paths}")

    @property
    def directions(self):
        return DIRECTIONS_8 if self.paths == 8 else DIRECTIONS_4


@dataclass(frozen=True)
class DisparityMap:
    values: np.ndarray  # float64 [height, width], +inf = invalid

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True)
class PipelineConfig:
    n_disp: int = 64
    box_radius: int = 2
    sgm: SgmParams = field(default_factory=SgmParams)
    lr_tolerance: float = 1.0
    subpixel: bool = True
    median_radius: int = 1
    cost_mode: str = "hamming"
    census_window: int = 5

    def __post_init__(self):
        if self.n_disp < 1:
            raise ValidationError("n_disp must be >= 1")
        if self.box_radius < 0 or self.median_radius < 0:
            raise ValidationError("filter radii must be non-negative")
        if not self.lr_tolerance >= 0:
            raise ValidationError("lr_tolerance must be non-negative")
        if self.cost_mode not in ("hamming", "cosine"):
            raise ValidationError(f"unknown cost mode {self.cost_mode!r}")
        if self.census_window % 2 == 0 or not 3 <= self.census_window <= 7:
            raise ValidationError("census window must be 3, 5 or 7")

    def validate_for(self, width: int, height: int, bits: int = 64):
        """Checks that need the frame size; run before any computation."""
        if self.n_disp > width:
            raise ValidationError(f"n_disp={self.n_disp} exceeds the image width {width}")
        if self.cost_mode == "hamming":
            check_sgm_range(bits, self.sgm)

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["sgm"] = dict(self.sgm.__dict__)
        return d


def check_sgm_range(max_cost: float, params: SgmParams, paths: int | None = None):
    # Each path cost is bounded by C + p2 because the previous minimum is subtracted.
    bound = (paths or params.paths) * (max_cost + params.p2)
    if bound >= INVALID_U16:
        raise ValidationError(
            f"SGM sum bound {bound} does not fit 16-bit costs; lower p2 or the descriptor width"
        )


def hamming(a, b):
    """Population count of ``a XOR b`` (scalars or arrays of uint64 words)."""
    return np.bitwise_count(np.bitwise_xor(np.asarray(a, dtype=np.uint64),
                                           np.asarray(b, dtype=np.uint64)))


def _frame_features(fm: FeatureMap) -> np.ndarray:
    h, w = fm.frame_shape()
    full = np.zeros((h, w, fm.channels))
    m = fm.margin
    full[m:m + fm.height, m:m + fm.width] = fm.values
    return full


def build_cost_volume(left, right, n_disp: int, mode: str = "hamming") -> CostVolume:
    """``cost[y, x, d] = dist(L(x, y), R(x - d, y))`` on the defined region."""
    if mode == "hamming":
        if not isinstance(left, DescriptorMap) or not isinstance(right, DescriptorMap):
            raise ValidationError("hamming volumes need DescriptorMap inputs")
        if left.descriptors.shape != right.descriptors.shape:
            raise ValidationError(
                f"descriptor maps differ in size: {left.descriptors.shape} vs {right.descriptors.shape}")
        if left.bits != right.bits or left.margin != right.margin:
            raise ValidationError("descriptor maps differ in bit width or margin")
        h, w = left.descriptors.shape
        L, R, m = left.descriptors, right.descriptors, left.margin
        costs = np.full((h, w, n_disp), INVALID_U16, dtype=np.uint16)
        max_cost = left.bits
    elif mode == "cosine":
        if not isinstance(left, FeatureMap) or not isinstance(right, FeatureMap):
            raise ValidationError("cosine volumes need FeatureMap inputs")
        if left.values.shape != right.values.shape or left.margin != right.margin:
            raise ValidationError("feature maps differ in shape or margin")
        L, R, m = _frame_features(left), _frame_features(right), left.margin
        L = _unit(L)
        R = _unit(R)
        h, w = L.shape[:2]
        costs = np.full((h, w, n_disp), INVALID)
        max_cost = 2.0
    else:
        raise ValidationError(f"unknown cost mode {mode!r}")
    if n_disp > w:
        raise ValidationError(f"n_disp={n_disp} exceeds the map width {w}")
    rows = slice(m, h - m)
    for d in range(n_disp):
        x0, x1 = m + d, w - m
        if x0 >= x1:
            break
        a, b = L[rows, x0:x1], R[rows, x0 - d:x1 - d]
        if mode == "hamming":
            costs[rows, x0:x1, d] = hamming(a, b)
        else:
            costs[rows, x0:x1, d] = np.maximum(1.0 - (a * b).sum(axis=-1), 0.0)
    return CostVolume(costs, max_cost)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    # Zero vectors get cosine 0 against everything.
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def derive_right_volume(left_volume: CostVolume) -> CostVolume:
    """Right-reference volume: ``cost_R(x, y, d) = cost_L(x + d, y, d)``."""
    c = left_volume.costs
    out = np.full_like(c, left_volume.invalid_cost)
    w = c.shape[1]
    for d in range(c.shape[2]):
        if d < w:
            out[:, :w - d, d] = c[:, d:, d]
    return CostVolume(out, left_volume.max_cost)


def derive_left_volume(right_volume: CostVolume) -> CostVolume:
    """Inverse of :func:`derive_right_volume`: ``cost_L(x, y, d) = cost_R(x - d, y, d)``."""
    c = right_volume.costs
    out = np.full_like(c, right_volume.invalid_cost)
    w = c.shape[1]
    for d in range(c.shape[2]):
        if d < w:
            out[:, d:, d] = c[:, :w - d, d]
    return CostVolume(out, right_volume.max_cost)


def _axis_window_sum(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    a = np.moveaxis(a, axis, 0)
    if r <= 4:
        # A few shifted in-place adds beat a running sum for small windows.
        out = a.copy()
        for k in range(1, min(r, n - 1) + 1):
            out[k:] += a[:-k]
            out[:-k] += a[k:]
    else:
        c = np.zeros((n + 1,) + a.shape[1:], dtype=a.dtype)
        np.cumsum(a, axis=0, out=c[1:])
        idx = np.arange(n)
        out = c[np.minimum(idx + r + 1, n)] - c[np.maximum(idx - r, 0)]
    return np.moveaxis(out, 0, axis)


def _window_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window clipped to the frame, for every [y, x, ...]."""
    return _axis_window_sum(_axis_window_sum(a, r, 0), r, 1)


def box_filter(volume: CostVolume, radius: int) -> CostVolume:
    """Mean of valid cells in each (2r+1)^2 window of every disparity slice."""
    if radius < 0:
        raise ValidationError("box radius must be non-negative")
    if radius == 0:
        return volume
    invalid = volume.invalid_mask()
    cells = (2 * radius + 1) ** 2
    # 32-bit sums are exact whenever the whole window fits.
    acc = np.int32 if 2 * (int(volume.max_cost) + 1) * cells < 2 ** 31 else np.int64
    valid = (~invalid).astype(acc)
    if volume.integer:
        vals = np.where(invalid, 0, volume.costs).astype(acc)
        total = _window_sum(vals, radius)
        count = _window_sum(valid, radius)
        safe = np.maximum(count, 1)
        # Costs are non-negative, so half-away rounding is floor(mean + 1/2).
        mean = (2 * total + safe) // (2 * safe)
        out = np.where(count > 0, mean, INVALID_U16).astype(np.uint16)
    else:
        vals = np.where(invalid, 0.0, volume.costs)
        total = _window_sum(vals, radius)
        count = _window_sum(valid, radius)
        out = np.where(count > 0, total / np.maximum(count, 1), INVALID)
    return CostVolume(out, volume.max_cost)


def aggregate_path(costs: np.ndarray, direction, p1, p2) -> np.ndarray:
    """Path costs ``L_r`` for one scan direction ``r = (dx, dy)``.

    ``costs`` must already hold finite values (invalid cells substituted).
    The predecessor of pixel ``p`` is ``p - r``; pixels without one start a path.
    """
    dx, dy = direction
    if np.issubdtype(costs.dtype, np.integer):
        # Path costs never exceed max(C) + p2, so 32 bits suffice when that fits.
        small = costs.size == 0 or int(costs.max()) + p2 < 2 ** 30
        dtype = np.int32 if small else np.int64
    else:
        dtype = np.float64
    # Scan along the leading axis; ``lateral`` shifts the predecessor along the second.
    if dx != 0:
        c = np.ascontiguousarray(costs.transpose(1, 0, 2), dtype=dtype)
        step, lateral = dx, dy
    else:
        c = np.ascontiguousarray(costs, dtype=dtype)
        step, lateral = dy, 0
    length = c.shape[0]
    out = np.empty_like(c)
    order = range(length) if step > 0 else range(length - 1, -1, -1)
    p1 = dtype(p1)
    p2 = dtype(p2)
    first = True
    for i in order:
        cur = c[i]
        if first:
            out[i] = cur
            first = False
            continue
        prev = out[i - step]
        if lateral > 0:
            prev = np.concatenate([prev[:1], prev[:-1]])
        elif lateral < 0:
            prev = np.concatenate([prev[1:], prev[-1:]])
        pmin = prev.min(axis=1, keepdims=True)
        best = np.minimum(prev, pmin + p2)
        np.minimum(best[:, 1:], prev[:, :-1] + p1, out=best[:, 1:])
        np.minimum(best[:, :-1], prev[:, 1:] + p1, out=best[:, :-1])
        best -= pmin
        best += cur
        # The row at the lateral edge has no predecessor and starts a new path.
        if lateral > 0:
            best[0] = cur[0]
        elif lateral < 0:
            best[-1] = cur[-1]
        out[i] = best
    return out.transpose(1, 0, 2) if dx != 0 else out


def sgm_aggregate(volume: CostVolume, params: SgmParams = SgmParams(), directions=None,
                  threads: int = 1) -> CostVolume:
    """Sum of scanline path costs over ``params.directions`` (or ``directions``).

    Invalid cells propagate as ``max_cost`` and are restored to invalid in the output.
    """
    directions = tuple(directions) if directions is not None else params.directions
    invalid = volume.invalid_mask()
    if volume.integer:
        check_sgm_range(volume.max_cost, params, len(directions))
        if params.p1 != int(params.p1) or params.p2 != int(params.p2):
            raise ValidationError("integer cost volumes need integral SGM penalties")
        c = np.where(invalid, int(volume.max_cost), volume.costs).astype(np.int64)
    else:
        c = np.where(invalid, float(volume.max_cost), volume.costs)

    def run(r):
        return aggregate_path(c, r, params.p1, params.p2)

    if threads > 1 and len(directions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, directions))
    else:
        parts = [run(r) for r in directions]
    total = parts[0].astype(np.int64 if volume.integer else np.float64)
    for part in parts[1:]:
        total += part
    if volume.integer:
        out = np.where(invalid, INVALID_U16, total).astype(np.uint16)
    else:
        out = np.where(invalid, INVALID, total)
    return CostVolume(out, len(directions) * (volume.max_cost + params.p2))


def select_disparity(volume: CostVolume, subpixel: bool = True) -> DisparityMap:
    """Winner-take-all with ties to the smallest disparity, plus parabola refinement."""
    c = np.where(volume.invalid_mask(), np.inf, volume.costs.astype(np.float64))
    d = np.argmin(c, axis=2)
    best = np.take_along_axis(c, d[..., None], axis=2)[..., 0]
    disp = d.astype(np.float64)
    n = volume.n_disp
    if subpixel and n >= 3:
        dm = np.clip(d - 1, 0, n - 1)
        dp = np.clip(d + 1, 0, n - 1)
        c0 = np.take_along_axis(c, dm[..., None], axis=2)[..., 0]
        c2 = np.take_along_axis(c, dp[..., None], axis=2)[..., 0]
        inner = (d > 0) & (d < n - 1) & np.isfinite(c0) & np.isfinite(c2) & np.isfinite(best)
        with np.errstate(invalid="ignore", divide="ignore"):
            denom = c0 - 2 * best + c2
            ok = inner & (denom > 0)
            offset = np.where(ok, (c0 - c2) / (2 * np.where(ok, denom, 1.0)), 0.0)
        disp += np.clip(offset, -0.5, 0.5)
    disp[~np.isfinite(best)] = INVALID
    return DisparityMap(disp)


def lr_consistency(d_left: DisparityMap, d_right: DisparityMap, tol: float) -> DisparityMap:
    """Keep left disparities whose right-image match points back within ``tol``."""
    if d_left.values.shape != d_right.values.shape:
        raise DimensionError("left and right disparity maps differ in size")
    dl = d_left.values
    h, w = dl.shape
    finite = np.isfinite(dl)
    xr = np.arange(w)[None, :] - np.where(finite, round_half_away(np.where(finite, dl, 0)), 0)
    xr = xr.astype(np.int64)
    inside = finite & (xr >= 0) & (xr < w)
    rows = np.broadcast_to(np.arange(h)[:, None], dl.shape)
    dr = d_right.values[rows, np.clip(xr, 0, w - 1)]
    with np.errstate(invalid="ignore"):
        keep = inside & (np.abs(dl - dr) <= tol)
    return DisparityMap(np.where(keep, dl, INVALID))


def median_filter(dmap: DisparityMap, radius: int) -> DisparityMap:
    """Median of valid neighbours; invalid pixels stay invalid; even counts take the lower middle."""
    if radius < 0:
        raise ValidationError("median radius must be non-negative")
    if radius == 0:
        return dmap
    v = dmap.values
    h, w = v.shape
    k = 2 * radius + 1
    padded = np.full((h + 2 * radius, w + 2 * radius), np.inf)
    padded[radius:radius + h, radius:radius + w] = v
    stack = np.empty((k * k, h, w))
    i = 0
    for dy in range(k):
        for dx in range(k):
            stack[i] = padded[dy:dy + h, dx:dx + w]
            i += 1
    stack.sort(axis=0)  # invalid (+inf) sorts last
    count = np.isfinite(stack).sum(axis=0)
    idx = np.maximum(count - 1, 0) // 2
    med = np.take_along_axis(stack, idx[None], axis=0)[0]
    return DisparityMap(np.where(np.isfinite(v), med, INVALID))


@dataclass
class PipelineResult:
    disparity: DisparityMap
    timings: dict
    left_raw: DisparityMap = None
    right_raw: DisparityMap = None


def _descriptors(image: ImageBuf, source, cfg: PipelineConfig):
    if isinstance(source, str):
        if source != "census":
            raise ValidationError(f"unknown descriptor source {source!r}")
        if cfg.cost_mode != "hamming":
            raise ValidationError("census descriptors only support hamming costs")
        return census_transform(image, cfg.census_window)
    if isinstance(source, FloatModel):
        fm = conv_forward(image, source)
        return fm if cfg.cost_mode == "cosine" else binarize(fm)
    if isinstance(source, QuantizedModel):
        if cfg.cost_mode != "hamming":
            raise ValidationError("quantized descriptors only support hamming costs")
        return forward_quantized(image, source).descriptors
    raise ValidationError(f"unsupported descriptor source {type(source).__name__}")


def _source_bits(source, cfg: PipelineConfig) -> int:
    if isinstance(source, (FloatModel, QuantizedModel)):
        return source.descriptor_bits
    return cfg.census_window ** 2 - 1


def sgm_params_for(volume: CostVolume, cfg: PipelineConfig, bits: int) -> SgmParams:
    """Penalties are given in Hamming units; cosine volumes rescale them to [0, 2]."""
    if volume.integer:
        return cfg.sgm
    k = volume.max_cost / bits
    return SgmParams(cfg.sgm.p1 * k, cfg.sgm.p2 * k, cfg.sgm.paths)


def run_pipeline(left: ImageBuf, right: ImageBuf, source="census",
                 cfg: PipelineConfig = PipelineConfig(), threads: int = 1) -> PipelineResult:
    if left.pixels.shape != right.pixels.shape:
        raise DimensionError("left and right images differ in size")
    bits = _source_bits(source, cfg)
    cfg.validate_for(left.width, left.height, bits)
    timings = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    dl = timed("descriptors", _descriptors, left, source, cfg)
    dr = timed("descriptors", _descriptors, right, source, cfg)
    vol_l = timed("cost_volume", build_cost_volume, dl, dr, cfg.n_disp, cfg.cost_mode)
    vol_r = timed("derive_right", derive_right_volume, vol_l)
    vol_l = timed("box_filter", box_filter, vol_l, cfg.box_radius)
    vol_r = timed("box_filter", box_filter, vol_r, cfg.box_radius)
    params = sgm_params_for(vol_l, cfg, bits)
    vol_l = timed("sgm", lambda v: sgm_aggregate(v, params, threads=threads), vol_l)
    vol_r = timed("sgm", lambda v: sgm_aggregate(v, params, threads=threads), vol_r)
    raw_l = timed("select", select_disparity, vol_l, cfg.subpixel)
    raw_r = timed("select", select_disparity, vol_r, cfg.subpixel)
    checked = timed("lr_check", lr_consistency, raw_l, raw_r, cfg.lr_tolerance)
    final = timed("median", median_filter, checked, cfg.median_radius)
    timings["total"] = sum(timings.values())
    return PipelineResult(final, timings, raw_l, raw_r)
