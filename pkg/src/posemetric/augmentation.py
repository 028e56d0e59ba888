"""Training-time robustness augmentations: IoU-bounded box noise and occluders.

Camera features are treated as a small ``rows x cols`` spatial grid laid over
the object's bounding box (feature ``d`` sits in cell ``divmod(d, cols)``).
That gives both augmentations a geometric meaning:

* a perturbed box re-crops the grid, i.e. bilinearly resamples it;
* an occluder rectangle blends the features of the cells it covers towards
  its own fill vector, in proportion to the covered cell area.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from posemetric.dataset import BBox, Sample

VOC_CATEGORIES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

LEVEL_EDGES = ((0.2, "L1"), (0.4, "L2"), (0.6, "L3"))
LEVEL_BINS = {"L0": (0.0, 0.0), "L1": (0.2, 0.4), "L2": (0.4, 0.6), "L3": (0.6, 0.8)}


@dataclass(frozen=True)
class BBoxNoiseConfig:
    beta_train: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.beta_train <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class OcclusionConfig:
    s_occ: float = 0.5
    min_occluders: int = 1
    max_occluders: int = 8
    excluded_category: str = "car"

    def __post_init__(self):
        if not 0.0 <= self.s_occ <= 1.0:
            raise ValueError("s_occ must lie in [0, 1]")
        if not 1 <= self.min_occluders <= self.max_occluders <= 8:
            raise ValueError("need 1 <= min_occluders <= max_occluders <= 8")


@dataclass(frozen=True)
class Occluder:
    """Rectangular occluder template.

    ``mask`` is (x0, y0, x1, y1) in coordinates normalized to the object box.
    """

    category: str
    mask: tuple
    fill: np.ndarray

    def __post_init__(self):
        x0, y0, x1, y1 = self.mask
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            raise ValueError("occluder mask must lie inside the unit square")

    @property
    def size(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.mask
        return x1 - x0, y1 - y0


def make_occluder_pool(seed: int, dim: int, per_category: int = 3, categories=VOC_CATEGORIES) -> list[Occluder]:
    """Deterministic template set, a few rectangles per category."""
    rng = np.random.default_rng(seed)
    pool = []
    for cat in categories:
        for _ in range(per_category):
            w, h = rng.uniform(0.3, 1.0, size=2)
            pool.append(Occluder(cat, (0.0, 0.0, float(w), float(h)), rng.normal(scale=0.8, size=dim)))
    return pool


# ---------------------------------------------------------------- bounding-box noise


def max_corner_deviation(w, h, beta: float):
    """Largest per-axis corner shift that keeps IoU >= 1 - beta.

    Solves (w - 2n)(h - 2n) / (w h) = 1 - beta for the smaller root.
    Accepts scalars or arrays for ``w`` and ``h``.
    """
    w, h = np.asarray(w, dtype=float), np.asarray(h, dtype=float)
    if not (np.all(w > 0) and np.all(h > 0)):
        raise ValueError("w and h must be positive")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    # (h+w)^2 >= 4wh >= 4wh*beta, so the root is real
    disc = (h + w) ** 2 - 4.0 * w * h * beta
    n = (h + w - np.sqrt(np.maximum(disc, 0.0))) / 4.0
    return float(n) if n.ndim == 0 else n


def iou_min(w: float, h: float, n: float) -> float:
    return (w - 2 * n) * (h - 2 * n) / (w * h)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of (..., 4) boxes in (x, y, w, h) form."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    ix = np.clip(np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ix * iy
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def perturb_boxes(boxes: np.ndarray, beta: float, rng) -> np.ndarray:
    """Vectorized :func:`perturb_bbox` over an (n, 4) array."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if beta == 0.0:
        return boxes.copy()
    w, h = boxes[:, 2], boxes[:, 3]
    n = max_corner_deviation(w, h, beta)
    shift = rng.uniform(-1.0, 1.0, size=(len(boxes), 4)) * n[:, None]
    x0 = boxes[:, 0] + shift[:, 0]
    y0 = boxes[:, 1] + shift[:, 1]
    x1 = boxes[:, 0] + w + shift[:, 2]
    y1 = boxes[:, 1] + h + shift[:, 3]
    # only reachable at beta = 1, where corners may meet or cross
    min_w, min_h = 1e-6 * w, 1e-6 * h
    x1 = np.maximum(x1, x0 + min_w)
    y1 = np.maximum(y1, y0 + min_h)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)


def perturb_bbox(b: BBox, beta: float, rng) -> BBox:
    """Move each corner uniformly within +-n on both axes."""
    if beta == 0.0:
        return b
    return BBox(*perturb_boxes(b.as_array(), beta, rng)[0])


# ---------------------------------------------------------------- feature grid


def grid_shape(dim: int) -> tuple[int, int]:
    rows = max(r for r in range(1, int(math.isqrt(dim)) + 1) if dim % r == 0)
    return rows, dim // rows


def cell_rects(dim: int) -> np.ndarray:
    """(dim, 4) normalized (x0, y0, x1, y1) footprint of every feature cell."""
    rows, cols = grid_shape(dim)
    r, c = np.divmod(np.arange(dim), cols)
    return np.stack([c / cols, r / rows, (c + 1) / cols, (r + 1) / rows], axis=1)


def resample_features(feats: np.ndarray, boxes: np.ndarray, new_boxes: np.ndarray) -> np.ndarray:
    """Re-crop the feature grids of ``boxes`` to ``new_boxes`` (bilinear, edge clamped)."""
    feats = np.atleast_2d(feats)
    boxes, new_boxes = np.atleast_2d(boxes), np.atleast_2d(new_boxes)
    n, dim = feats.shape
    rows, cols = grid_shape(dim)
    grid = feats.reshape(n, rows, cols)
    centers = cell_rects(dim)
    cu = 0.5 * (centers[:, 0] + centers[:, 2])
    cv = 0.5 * (centers[:, 1] + centers[:, 3])
    # cell centres of the new crop, expressed in the old box's normalized frame
    u = (new_boxes[:, None, 0] + cu[None] * new_boxes[:, None, 2] - boxes[:, None, 0]) / boxes[:, None, 2]
    v = (new_boxes[:, None, 1] + cv[None] * new_boxes[:, None, 3] - boxes[:, None, 1]) / boxes[:, None, 3]
    gx = np.clip(u * cols - 0.5, 0.0, cols - 1)
    gy = np.clip(v * rows - 0.5, 0.0, rows - 1)
    x0 = np.minimum(np.floor(gx).astype(int), cols - 1)
    y0 = np.minimum(np.floor(gy).astype(int), rows - 1)
    x1, y1 = np.minimum(x0 + 1, cols - 1), np.minimum(y0 + 1, rows - 1)
    tx, ty = gx - x0, gy - y0
    b = np.arange(n)[:, None]
    top = grid[b, y0, x0] * (1 - tx) + grid[b, y0, x1] * tx
    bottom = grid[b, y1, x0] * (1 - tx) + grid[b, y1, x1] * tx
    return top * (1 - ty) + bottom * ty


# ---------------------------------------------------------------- occlusion geometry


def union_area(rects) -> float:
    """Exact area of a union of axis-aligned (x0, y0, x1, y1) rectangles.

    Coordinate compression: every elementary cell between consecutive edges is
    either fully covered or not.
    """
    rects = np.asarray(rects, dtype=float).reshape(-1, 4)
    rects = rects[(rects[:, 2] > rects[:, 0]) & (rects[:, 3] > rects[:, 1])]
    if len(rects) == 0:
        return 0.0
    xs = np.unique(np.concatenate([rects[:, 0], rects[:, 2]]))
    ys = np.unique(np.concatenate([rects[:, 1], rects[:, 3]]))
    mx = 0.5 * (xs[:-1] + xs[1:])
    my = 0.5 * (ys[:-1] + ys[1:])
    inside_x = (rects[:, None, 0] <= mx[None]) & (mx[None] <= rects[:, None, 2])
    inside_y = (rects[:, None, 1] <= my[None]) & (my[None] <= rects[:, None, 3])
    covered = np.any(inside_y[:, :, None] & inside_x[:, None, :], axis=0)
    areas = np.outer(np.diff(ys), np.diff(xs))
    return float(areas[covered].sum())


def occlusion_level(ratio: float) -> str:
    """Bin a covered fraction; ratios between bins fall to the lower edge."""
    level = "L0"
    for edge, name in LEVEL_EDGES:
        if ratio >= edge:
            level = name
    return level


def occlude_features(feats: np.ndarray, rects: np.ndarray, fills: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    """Blend covered cells towards occluder fills, painting occluders in order.

    feats (n, d); rects (n, k, 4); fills (n, k, d); active (n, k) booleans.
    """
    feats = np.array(feats, dtype=float, copy=True)
    n, dim = feats.shape
    rects = np.asarray(rects, dtype=float).reshape(n, -1, 4)
    fills = np.asarray(fills, dtype=float).reshape(n, -1, dim)
    cells = cell_rects(dim)
    cell_area = (cells[:, 2] - cells[:, 0]) * (cells[:, 3] - cells[:, 1])
    ix = np.clip(np.minimum(rects[..., None, 2], cells[:, 2]) - np.maximum(rects[..., None, 0], cells[:, 0]), 0, None)
    iy = np.clip(np.minimum(rects[..., None, 3], cells[:, 3]) - np.maximum(rects[..., None, 1], cells[:, 1]), 0, None)
    cover = ix * iy / cell_area
    if active is not None:
        cover = cover * np.asarray(active, dtype=float)[..., None]
    for j in range(rects.shape[1]):
        c = cover[:, j]
        feats = (1.0 - c) * feats + c * fills[:, j]
    return feats


def occluder_resize_factor(s_occ: float, rng) -> tuple[float, float]:
    """f_x = f_y = s_occ * x with x ~ U[0, 1]."""
    if not 0.0 <= s_occ <= 1.0:
        raise ValueError("s_occ must lie in [0, 1]")
    f = s_occ * rng.uniform(0.0, 1.0)
    return f, f


def place_occluder(template: Occluder, scale: tuple[float, float], rng) -> Occluder:
    """Resize a template and drop its centre uniformly on the unit box (clipped)."""
    tw, th = template.size
    w, h = tw * scale[0], th * scale[1]
    cx, cy = rng.uniform(0.0, 1.0, size=2)
    mask = (
        float(np.clip(cx - w / 2, 0, 1)),
        float(np.clip(cy - h / 2, 0, 1)),
        float(np.clip(cx + w / 2, 0, 1)),
        float(np.clip(cy + h / 2, 0, 1)),
    )
    return Occluder(template.category, mask, template.fill)


def _eligible(pool: list[Occluder], excluded: str | None) -> list[Occluder]:
    usable = [o for o in pool if o.category != excluded]
    if not usable:
        raise ValueError("occluder pool is empty after excluding the object category")
    return usable


def _with_occluders(sample: Sample, placed: list[Occluder]) -> tuple[Sample, float]:
    ratio = union_area([o.mask for o in placed])
    feats = sample.camera_feat
    if placed:
        rects = np.array([[o.mask for o in placed]])
        fills = np.array([[o.fill for o in placed]])
        feats = occlude_features(sample.camera_feat[None], rects, fills)[0]
    out = dataclasses.replace(
        sample, camera_feat=feats, occlusion_ratio=ratio, occlusion_level=occlusion_level(ratio)
    )
    return out, ratio


def apply_occlusions(sample: Sample, cfg: OcclusionConfig, occluder_pool: list[Occluder], rng) -> tuple[Sample, float]:
    usable = _eligible(occluder_pool, cfg.excluded_category)
    k = int(rng.integers(cfg.min_occluders, cfg.max_occluders + 1))
    placed = []
    for idx in rng.integers(len(usable), size=k):
        placed.append(place_occluder(usable[idx], occluder_resize_factor(cfg.s_occ, rng), rng))
    return _with_occluders(sample, placed)


def occlude_to_level(
    sample: Sample, level: str, occluder_pool: list[Occluder], rng, excluded: str | None = None, max_tries: int = 1000
) -> tuple[Sample, float]:
    """Occlude a sample until its covered fraction falls in ``level``'s bin.

    Used to build evaluation sets; occluders are added one at a time at full
    template scale and the draw restarts whenever it overshoots the bin.
    """
    if level == "L0":
        return dataclasses.replace(sample, occlusion_level="L0", occlusion_ratio=0.0), 0.0
    lo, hi = LEVEL_BINS[level]
    usable = _eligible(occluder_pool, excluded)
    for _ in range(max_tries):
        placed: list[Occluder] = []
        ratio = 0.0
        while ratio < lo and len(placed) < 8:
            template = usable[rng.integers(len(usable))]
            f = rng.uniform(0.4, 1.0)
            placed.append(place_occluder(template, (f, f), rng))
            ratio = union_area([o.mask for o in placed])
        if lo <= ratio < hi:
            return _with_occluders(sample, placed)
    raise RuntimeError(f"could not reach occlusion level {level} in {max_tries} tries")


# ---------------------------------------------------------------- batched training path


@dataclass
class OccluderBank:
    """Array form of an occluder pool for vectorized sampling."""

    sizes: np.ndarray
    fills: np.ndarray

    @classmethod
    def from_pool(cls, pool: list[Occluder], excluded: str | None) -> "OccluderBank":
        usable = _eligible(pool, excluded)
        return cls(np.array([o.size for o in usable]), np.stack([o.fill for o in usable]))


def occlude_batch(feats: np.ndarray, bank: OccluderBank, cfg: OcclusionConfig, rng) -> np.ndarray:
    """Random occluders for a whole batch, same law as :func:`apply_occlusions`."""
    n = len(feats)
    kmax = cfg.max_occluders
    counts = rng.integers(cfg.min_occluders, cfg.max_occluders + 1, size=n)
    active = np.arange(kmax)[None, :] < counts[:, None]
    pick = rng.integers(len(bank.sizes), size=(n, kmax))
    f = cfg.s_occ * rng.uniform(0.0, 1.0, size=(n, kmax))
    wh = bank.sizes[pick] * f[..., None]
    centers = rng.uniform(0.0, 1.0, size=(n, kmax, 2))
    rects = np.clip(np.concatenate([centers - wh / 2, centers + wh / 2], axis=-1), 0.0, 1.0)
    return occlude_features(feats, rects, bank.fills[pick], active)
