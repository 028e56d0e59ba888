"""Deterministic synthetic stand-in for a category-level viewpoint dataset.

Poses are drawn over a viewing sphere and lifted to two feature vectors:

* ``render_feat = H(pose)``: noiseless and subcategory free, like a CAD rendering.
* ``camera_feat = G(pose, subcategory) + noise``: a different smooth map with a
  per-subcategory offset, standing in for a real camera crop.

Both maps are built from the rotation matrix of the pose (injective on SO(3))
plus a few harmonics.  Half of the lifted functions are even and half are odd
under the horizontal-flip mirror ``(az, el, ip) -> (-az, el, -ip)``, and the
maps keep the two halves in separate output coordinates.  A horizontal flip is
therefore the fixed sign pattern :func:`flip_signs` on the feature vector.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from posemetric.pose_math import EulerPose, euler_to_matrix_array, euler_to_quat_array

OCCLUSION_LEVELS = ("L0", "L1", "L2", "L3")
FEATURE_MAP_SEED = 7_2023
LIFT_HALF = 8


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("bounding box width and height must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])


@dataclass
class Sample:
    id: int
    category: str
    subcategory: str
    pose: EulerPose
    bbox: BBox
    camera_feat: np.ndarray
    render_feat: np.ndarray
    occlusion_level: str = "L0"
    occlusion_ratio: float = 0.0
    channel: str = "normals"

    def __post_init__(self):
        self.camera_feat = np.asarray(self.camera_feat, dtype=float)
        self.render_feat = np.asarray(self.render_feat, dtype=float)
        if self.camera_feat.shape != self.render_feat.shape:
            raise ValueError("camera_feat and render_feat must have the same dimension")
        if self.occlusion_level not in OCCLUSION_LEVELS:
            raise ValueError(f"unknown occlusion level {self.occlusion_level!r}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "subcategory": self.subcategory,
            "pose": {
                "azimuth": self.pose.azimuth,
                "elevation": self.pose.elevation,
                "inplane": self.pose.inplane,
            },
            "bbox": {"x": self.bbox.x, "y": self.bbox.y, "w": self.bbox.w, "h": self.bbox.h},
            "camera_feat": self.camera_feat.tolist(),
            "render_feat": self.render_feat.tolist(),
            "occlusion_level": self.occlusion_level,
            "occlusion_ratio": self.occlusion_ratio,
            "channel": self.channel,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "Sample":
        pose = raw["pose"]
        return cls(
            id=int(raw["id"]),
            category=raw["category"],
            subcategory=raw["subcategory"],
            pose=EulerPose(pose["azimuth"], pose["elevation"], pose["inplane"]),
            bbox=BBox(**raw["bbox"]),
            camera_feat=np.array(raw["camera_feat"], dtype=float),
            render_feat=np.array(raw["render_feat"], dtype=float),
            occlusion_level=raw.get("occlusion_level", "L0"),
            occlusion_ratio=float(raw.get("occlusion_ratio", 0.0)),
            channel=raw.get("channel", "normals"),
        )


@dataclass(frozen=True)
class ViewingSphere:
    """Pose ranges and grid steps, all in degrees (closed intervals)."""

    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-30.0, 60.0)
    inplane_range: tuple = (-30.0, 30.0)
    azimuth_step: float = 5.0
    elevation_step: float = 5.0
    inplane_step: float = 5.0

    def __post_init__(self):
        for rng_ in (self.azimuth_range, self.elevation_range, self.inplane_range):
            if rng_[1] < rng_[0]:
                raise ValueError(f"inverted range {rng_}")
        if self.azimuth_range[1] - self.azimuth_range[0] > 360.0:
            raise ValueError("azimuth range wider than a full turn")

    @property
    def ranges(self) -> tuple:
        return (self.azimuth_range, self.elevation_range, self.inplane_range)

    @property
    def is_degenerate(self) -> bool:
        return all(hi == lo for lo, hi in self.ranges)

    def contains(self, pose: EulerPose, tol: float = 1e-9) -> bool:
        az, el, ip = pose.degrees()
        (alo, ahi), (elo, ehi), (ilo, ihi) = self.ranges
        in_az = ahi - alo >= 360.0 or alo - tol <= az <= ahi + tol
        return in_az and elo - tol <= el <= ehi + tol and ilo - tol <= ip <= ihi + tol


DESIGN_STEPS = {
    "CoarseDB": (5.0, 5.0, 5.0),
    "FineDB": (1.0, 5.0, 5.0),
}


@dataclass(frozen=True)
class ReferenceSetDesign:
    kind: str = "TrainDB"

    def __post_init__(self):
        if self.kind not in ("TrainDB", "CoarseDB", "FineDB"):
            raise ValueError(f"unknown reference set design {self.kind!r}")

    @property
    def steps(self) -> tuple | None:
        return DESIGN_STEPS.get(self.kind)


# ---------------------------------------------------------------- feature maps


def lift(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip-even and flip-odd pose functions, each (n, 8)."""
    angles = np.atleast_2d(np.asarray(angles, dtype=float))
    a, b, c = angles[:, 0], angles[:, 1], angles[:, 2]
    R = euler_to_matrix_array(angles)
    even = np.stack(
        [R[:, 0, 0], R[:, 1, 1], R[:, 1, 2], R[:, 2, 1], R[:, 2, 2],
         np.cos(2 * a), np.cos(2 * c), np.sin(b) * np.cos(a)],
        axis=1,
    )
    odd = np.stack(
        [R[:, 0, 1], R[:, 0, 2], R[:, 1, 0], R[:, 2, 0],
         np.sin(2 * a), np.sin(2 * c), np.sin(b) * np.sin(a), np.cos(b) * np.sin(c)],
        axis=1,
    )
    return even, odd


def _rowwise_matmul(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    # x @ a.T without BLAS so each row's result is independent of the batch
    return (x[:, None, :] * a[None, :, :]).sum(axis=-1)


@dataclass
class FeatureMaps:
    """Fixed smooth maps from pose to camera / rendering features."""

    dim: int = 16
    shared: bool = False
    cam_even: np.ndarray = field(init=False, repr=False)
    cam_odd: np.ndarray = field(init=False, repr=False)
    cam_bias: np.ndarray = field(init=False, repr=False)
    ren_even: np.ndarray = field(init=False, repr=False)
    ren_odd: np.ndarray = field(init=False, repr=False)
    ren_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError("feature dimension must be a positive even number")
        half = self.dim // 2
        rng = np.random.default_rng(FEATURE_MAP_SEED)
        scale = 1.2 / math.sqrt(LIFT_HALF)
        self.ren_even = rng.normal(scale=scale, size=(half, LIFT_HALF))
        self.ren_odd = rng.normal(scale=scale, size=(half, LIFT_HALF))
        self.ren_bias = rng.normal(scale=0.2, size=half)
        if self.shared:
            self.cam_even, self.cam_odd, self.cam_bias = self.ren_even, self.ren_odd, self.ren_bias
        else:
            self.cam_even = rng.normal(scale=scale, size=(half, LIFT_HALF))
            self.cam_odd = rng.normal(scale=scale, size=(half, LIFT_HALF))
            self.cam_bias = rng.normal(scale=0.2, size=half)

    def render(self, angles: np.ndarray) -> np.ndarray:
        even, odd = lift(angles)
        return np.concatenate([np.tanh(_rowwise_matmul(even, self.ren_even) + self.ren_bias), np.tanh(_rowwise_matmul(odd, self.ren_odd))], axis=1)

    def camera(self, angles: np.ndarray, offsets: np.ndarray | None = None) -> np.ndarray:
        even, odd = lift(angles)
        e = np.tanh(_rowwise_matmul(even, self.cam_even) + self.cam_bias)
        if offsets is not None:
            e = e + offsets
        return np.concatenate([e, np.tanh(_rowwise_matmul(odd, self.cam_odd))], axis=1)

    def offset(self, name: str, scale: float = 0.3) -> np.ndarray:
        """Deterministic flip-even offset for a category or subcategory name."""
        if self.shared:
            return np.zeros(self.dim // 2)
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        return rng.normal(scale=scale, size=self.dim // 2)


def flip_signs(dim: int) -> np.ndarray:
    """Sign pattern that maps features of a pose to those of its mirror image."""
    half = dim // 2
    return np.concatenate([np.ones(half), -np.ones(half)])


# ---------------------------------------------------------------- generation


def _truncated_normal(rng, mean, sd, lo, hi, n):
    if hi == lo:
        return np.full(n, float(lo))
    out = rng.normal(mean, sd, size=n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sd, size=int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def sample_pose_angles(rng, n: int, sphere: ViewingSphere, prior: str = "natural") -> np.ndarray:
    """(n, 3) angles in radians drawn over the sphere.

    ``natural`` mimics typical object photographs: uniform azimuth, elevations
    clustered slightly above the horizon and near-upright in-plane rotation.
    """
    (alo, ahi), (elo, ehi), (ilo, ihi) = sphere.ranges
    az = rng.uniform(alo, ahi, size=n) if ahi > alo else np.full(n, float(alo))
    if prior == "uniform":
        el = rng.uniform(elo, ehi, size=n)
        ip = rng.uniform(ilo, ihi, size=n)
    elif prior == "natural":
        el = _truncated_normal(rng, 10.0, 15.0, elo, ehi, n)
        ip = _truncated_normal(rng, 0.0, 7.0, ilo, ihi, n)
    else:
        raise ValueError(f"unknown pose prior {prior!r}")
    deg = np.stack([np.mod(az, 360.0), el, ip], axis=1)
    return np.radians(deg)


def generate_dataset(
    seed: int,
    n_samples: int,
    categories,
    subcategory_mix: dict,
    sphere: ViewingSphere | None = None,
    noise_sigma: float = 0.02,
    feature_dim: int = 16,
    pose_prior: str = "natural",
    shared_maps: bool = False,
    first_id: int = 0,
) -> list[Sample]:
    sphere = sphere or ViewingSphere()
    categories = list(categories)
    if not categories:
        raise ValueError("at least one category is required")
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if sphere.is_degenerate:
        raise ValueError("viewing sphere has zero measure")
    names = list(subcategory_mix)
    weights = np.array([subcategory_mix[k] for k in names], dtype=float)
    if not names or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("subcategory_mix weights must be nonnegative with positive sum")

    rng = np.random.default_rng(seed)
    maps = FeatureMaps(feature_dim, shared=shared_maps)
    angles = sample_pose_angles(rng, n_samples, sphere, pose_prior)
    cat_idx = rng.integers(len(categories), size=n_samples)
    sub_idx = rng.choice(len(names), size=n_samples, p=weights / weights.sum())
    widths = rng.uniform(60.0, 240.0, size=n_samples)
    heights = widths * rng.uniform(0.5, 1.0, size=n_samples)
    corners = rng.uniform(0.0, 100.0, size=(n_samples, 2))
    noise = rng.normal(scale=noise_sigma, size=(n_samples, feature_dim)) if noise_sigma > 0 else 0.0

    poses = [EulerPose(*row) for row in angles]
    # features from the normalized pose so equal poses give identical renders
    norm_angles = np.array([p.as_array() for p in poses])
    offsets = np.stack(
        [maps.offset(categories[c]) + maps.offset(names[s]) for c, s in zip(cat_idx, sub_idx)]
    )
    camera = maps.camera(norm_angles, offsets) + noise
    render = maps.render(norm_angles)

    return [
        Sample(
            id=first_id + i,
            category=categories[cat_idx[i]],
            subcategory=names[sub_idx[i]],
            pose=poses[i],
            bbox=BBox(corners[i, 0], corners[i, 1], widths[i], heights[i]),
            camera_feat=camera[i],
            render_feat=render[i],
        )
        for i in range(n_samples)
    ]


# ---------------------------------------------------------------- reference sets


def _axis_values(lo: float, hi: float, step: float, periodic: bool) -> np.ndarray:
    span = hi - lo
    if span == 0:
        return np.array([float(lo)])
    count = span / step
    if abs(count - round(count)) > 1e-9:
        raise ValueError(f"step {step} does not divide range [{lo}, {hi}]")
    count = int(round(count))
    if periodic:
        return lo + step * np.arange(count)
    return lo + step * np.arange(count + 1)


def grid_axes(steps: tuple, sphere: ViewingSphere) -> list[np.ndarray]:
    """Per-axis degree values; azimuth drops its endpoint when it spans a full turn."""
    axes = []
    for axis, ((lo, hi), step) in enumerate(zip(sphere.ranges, steps)):
        periodic = axis == 0 and hi - lo == 360.0
        axes.append(_axis_values(lo, hi, step, periodic))
    return axes


def grid_size(design: ReferenceSetDesign, sphere: ViewingSphere, n_models: int = 1) -> int:
    """Closed-form number of renderings for a grid design.

    ``n_models`` counts CAD models rendered per pose; the synthetic renderer
    is model free, so built sets use one.
    """
    if design.steps is None:
        raise ValueError("TrainDB has no closed-form size")
    count = n_models
    for axis, ((lo, hi), step) in enumerate(zip(sphere.ranges, design.steps)):
        span = hi - lo
        n = round(span / step)
        count *= n if (axis == 0 and span == 360.0) else n + 1
    return count


def reference_arrays(
    design: ReferenceSetDesign,
    train: list[Sample] | None,
    sphere: ViewingSphere | None = None,
    feature_dim: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`build_reference_poses`: (angles rad, render feats, source ids)."""
    sphere = sphere or ViewingSphere()
    if design.kind == "TrainDB":
        if not train:
            raise ValueError("TrainDB requires a nonempty training set")
        angles = np.array([s.pose.as_array() for s in train])
        feats = np.stack([s.render_feat for s in train])
        ids = np.array([s.id for s in train], dtype=np.int64)
        return angles, feats, ids
    if feature_dim is None:
        feature_dim = train[0].render_feat.shape[0] if train else 16
    az, el, ip = grid_axes(design.steps, sphere)
    mesh = np.stack(np.meshgrid(az, el, ip, indexing="ij"), axis=-1).reshape(-1, 3)
    angles = np.radians(mesh)
    angles[:, 0] = np.mod(angles[:, 0], 2 * math.pi)
    feats = FeatureMaps(feature_dim).render(angles)
    return angles, feats, np.arange(len(angles), dtype=np.int64)


def build_reference_poses(
    design: ReferenceSetDesign,
    train: list[Sample] | None,
    sphere: ViewingSphere | None = None,
    feature_dim: int | None = None,
) -> list[tuple[EulerPose, np.ndarray]]:
    angles, feats, _ = reference_arrays(design, train, sphere, feature_dim)
    return [(EulerPose(*a), f) for a, f in zip(angles, feats)]


# ---------------------------------------------------------------- arrays and I/O


@dataclass
class SampleArrays:
    """Column view of a sample list used by the vectorized training code."""

    angles: np.ndarray
    quats: np.ndarray
    camera: np.ndarray
    render: np.ndarray
    bboxes: np.ndarray
    subcategories: np.ndarray
    categories: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.ids)


def stack_samples(samples: list[Sample]) -> SampleArrays:
    angles = np.array([s.pose.as_array() for s in samples], dtype=float).reshape(-1, 3)
    return SampleArrays(
        angles=angles,
        quats=euler_to_quat_array(angles),
        camera=np.stack([s.camera_feat for s in samples]),
        render=np.stack([s.render_feat for s in samples]),
        bboxes=np.array([s.bbox.as_array() for s in samples]),
        subcategories=np.array([s.subcategory for s in samples]),
        categories=np.array([s.category for s in samples]),
        ids=np.array([s.id for s in samples], dtype=np.int64),
    )


def save_jsonl(samples: list[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def load_jsonl(path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [Sample.from_json(json.loads(line)) for line in fh if line.strip()]
