"""Synthetic rectified stereo pairs of fronto-parallel planes with exact ground truth.

Each plane owns a band-limited random texture indexed by left-image column.
The left view shows plane ``i`` on columns ``[x0, x1)``; the right view shows
the nearest (largest-disparity) plane whose extended span reaches it, with
the outermost planes extending past the frame edges. Where no plane reaches
a right-view column, the farthest plane is visible behind the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ValidationError
from ..metrics import MASK_NONOCC, MASK_OCCLUDED, GroundTruth
from ..model import ImageBuf


@dataclass(frozen=True)
class Plane:
    x0: int
    x1: int
    disparity: float


@dataclass(frozen=True)
class SyntheticSceneSpec:
    width: int
    height: int
    planes: tuple = field(default_factory=tuple)
    texture_seed: int = 0
    noise_sigma: float = 0.0
    blur_sigma: float = 1.0
    max_disparity: int | None = None

    def __post_init__(self):
        planes = tuple(p if isinstance(p, Plane) else Plane(*p) for p in self.planes)
        object.__setattr__(self, "planes", planes)
        if self.width < 1 or self.height < 1:
            raise ValidationError("scene dimensions must be positive")
        if not planes:
            raise ValidationError("scene needs at least one plane")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        ordered = sorted(planes, key=lambda p: p.x0)
        if ordered[0].x0 != 0 or ordered[-1].x1 != self.width:
            raise ValidationError(f"plane spans must cover [0, {self.width})")
        for a, b in zip(ordered, ordered[1:]):
            if b.x0 < a.x1:
                raise ValidationError(f"plane spans [{a.x0}, {a.x1}) and [{b.x0}, {b.x1}) overlap")
            if b.x0 > a.x1:
                raise ValidationError(f"gap between plane spans at [{a.x1}, {b.x0})")
        for p in planes:
            if p.x1 <= p.x0:
                raise ValidationError(f"empty plane span [{p.x0}, {p.x1})")
            if not (p.disparity >= 0 and math.isfinite(p.disparity)):
                raise ValidationError("plane disparities must be finite and non-negative")
            if self.max_disparity is not None and p.disparity >= self.max_disparity:
                raise ValidationError(
                    f"plane disparity {p.disparity} is not below the configured range {self.max_disparity}")
        object.__setattr__(self, "planes", tuple(ordered))


def _texture(rng, height, width, blur):
    t = gaussian_filter(rng.standard_normal((height, width)), blur, mode="reflect")
    t = (t - t.mean()) / (t.std() + 1e-12)
    return np.clip(128.0 + 45.0 * t, 0.0, 255.0)


def _extended_spans(planes):
    spans = [[float(p.x0), float(p.x1)] for p in planes]
    spans[0][0] = -math.inf
    spans[-1][1] = math.inf
    return spans


def _visible_plane(planes, spans, xr):
    """Index of the plane seen at right-view column(s) ``xr`` (float array)."""
    best = np.full(xr.shape, -1)
    best_d = np.full(xr.shape, -np.inf)
    for i, (p, (lo, hi)) in enumerate(zip(planes, spans)):
        u = xr + p.disparity
        hit = (u >= lo) & (u < hi) & (p.disparity > best_d)
        best[hit] = i
        best_d[hit] = p.disparity
    background = int(np.argmin([p.disparity for p in planes]))
    best[best < 0] = background
    return best


def _sample(tex, u):
    """Linear interpolation of every texture row at columns ``u``."""
    u0 = np.floor(u).astype(np.int64)
    frac = u - u0
    return tex[:, u0] * (1 - frac) + tex[:, u0 + 1] * frac


def generate_synthetic_pair(spec: SyntheticSceneSpec):
    """Return ``(left, right, ground_truth)``; deterministic given the seeds."""
    planes = spec.planes
    w, h = spec.width, spec.height
    dmax = max(p.disparity for p in planes)
    tex_w = w + int(math.ceil(dmax)) + 2
    rng = np.random.default_rng(spec.texture_seed)
    textures = [_texture(rng, h, tex_w, spec.blur_sigma) for _ in planes]
    spans = _extended_spans(planes)

    cols = np.arange(w)
    owner = np.zeros(w, dtype=np.int64)
    for i, p in enumerate(planes):
        owner[p.x0:p.x1] = i
    left = np.empty((h, w))
    for i in range(len(planes)):
        sel = owner == i
        left[:, sel] = textures[i][:, cols[sel]]

    xr = cols.astype(np.float64)
    seen = _visible_plane(planes, spans, xr)
    right = np.empty((h, w))
    for i, p in enumerate(planes):
        sel = seen == i
        if sel.any():
            right[:, sel] = _sample(textures[i], xr[sel] + p.disparity)

    disp = np.array([planes[i].disparity for i in owner], dtype=np.float64)
    target = cols - disp
    occluded = (target < 0) | (_visible_plane(planes, spans, target) != owner)
    mask = np.where(occluded, MASK_OCCLUDED, MASK_NONOCC).astype(np.uint8)

    if spec.noise_sigma > 0:
        noise_l = np.random.default_rng([spec.texture_seed, 1])
        noise_r = np.random.default_rng([spec.texture_seed, 2])
        left = left + noise_l.normal(0.0, spec.noise_sigma, left.shape)
        right = right + noise_r.normal(0.0, spec.noise_sigma, right.shape)
    left = np.clip(left, 0.0, 255.0)
    right = np.clip(right, 0.0, 255.0)
    gt = GroundTruth(np.broadcast_to(disp, (h, w)).copy(),
                     np.broadcast_to(mask, (h, w)).copy())
    return ImageBuf(left), ImageBuf(right), gt


def plane_scene(width, height, disparity, seed=0, noise_sigma=0.0) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(width, height, (Plane(0, width, disparity),), seed, noise_sigma)


def two_plane_scene(width, height, d_left, d_right, seed=0, noise_sigma=0.0, split=None):
    split = width // 2 if split is None else split
    return SyntheticSceneSpec(width, height,
                              (Plane(0, split, d_left), Plane(split, width, d_right)),
                              seed, noise_sigma)
