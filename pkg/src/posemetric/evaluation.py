"""Pose-accuracy metrics, per-category reports, and the experiment driver."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from posemetric.augmentation import make_occluder_pool, occlude_to_level, perturb_boxes, resample_features
from posemetric.config import DataConfig, EvalConfig, TrainConfig, to_dict
from posemetric.dataset import (
    OCCLUSION_LEVELS,
    ReferenceSetDesign,
    Sample,
    ViewingSphere,
    generate_dataset,
    reference_arrays,
)
from posemetric.encoder import EncoderPair
from posemetric.pose_math import EulerPose, euler_to_quat, euler_to_quat_array, geodesic_distance, geodesic_distance_array
from posemetric.retrieval import ReferenceIndex, build_index
from posemetric.training import TEST_OCCLUDER_SEED, TrainingDiverged, train

ACC_PI6_DEG = 30.0
ACC_PI18_DEG = 10.0
CSV_COLUMNS = (
    "axis", "value", "category", "occlusion_level", "beta_test", "reference_design",
    "n", "acc_pi6", "acc_pi18", "med_err",
)
GRID_AXES = ("s_occ", "beta_train", "beta_test", "loss_variant", "reference_design")


@dataclass(frozen=True)
class Metrics:
    acc_pi6: float
    acc_pi18: float
    med_err: float


def pose_error(pred: EulerPose, gt: EulerPose) -> float:
    """Geodesic angle between two poses, in degrees."""
    return math.degrees(geodesic_distance(euler_to_quat(pred), euler_to_quat(gt)))


def pose_errors(pred_angles: np.ndarray, gt_angles: np.ndarray) -> np.ndarray:
    return np.degrees(geodesic_distance_array(euler_to_quat_array(pred_angles), euler_to_quat_array(gt_angles)))


def compute_metrics(errors) -> Metrics:
    """Fractions strictly below 30 and 10 degrees, and the median error."""
    err = np.asarray(errors, dtype=float)
    if err.size == 0:
        raise ValueError("no errors to summarize")
    # np.median averages the two middle values for even lengths
    return Metrics(float((err < ACC_PI6_DEG).mean()), float((err < ACC_PI18_DEG).mean()), float(np.median(err)))


def weighted_average(per_category: dict) -> Metrics:
    """Sample-count weighted mean of every metric, per-category medians included."""
    if not per_category:
        raise ValueError("no categories to average")
    metrics = [m for m, _ in per_category.values()]
    w = np.array([n for _, n in per_category.values()], dtype=float)
    w = w / w.sum()
    return Metrics(
        float(np.dot(w, [m.acc_pi6 for m in metrics])),
        float(np.dot(w, [m.acc_pi18 for m in metrics])),
        float(np.dot(w, [m.med_err for m in metrics])),
    )


@dataclass
class ReportRow:
    category: str
    occlusion_level: str
    beta_test: float
    n: int
    acc_pi6: float
    acc_pi18: float
    med_err: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def get(self, category: str = "ALL", level: str = "L0", beta_test: float = 0.0) -> ReportRow:
        for r in self.rows:
            if r.category == category and r.occlusion_level == level and r.beta_test == beta_test:
                return r
        raise KeyError((category, level, beta_test))


# ---------------------------------------------------------------- query sets


def make_query_set(samples: list[Sample], level: str = "L0", beta_test: float = 0.0, seed: int = 0,
                   occluder_pool=None, excluded: str | None = None) -> list[Sample]:
    """Corrupt held-out samples with test-time box noise and occlusion at ``level``."""
    if level not in OCCLUSION_LEVELS:
        raise ValueError(f"unknown occlusion level {level!r}")
    rng = np.random.default_rng([seed, OCCLUSION_LEVELS.index(level), int(round(beta_test * 1000))])
    out = list(samples)
    if beta_test > 0:
        boxes = np.array([s.bbox.as_array() for s in out])
        feats = resample_features(np.stack([s.camera_feat for s in out]), boxes, perturb_boxes(boxes, beta_test, rng))
        out = [dataclasses.replace(s, camera_feat=f) for s, f in zip(out, feats)]
    if level != "L0":
        dim = out[0].camera_feat.shape[0]
        pool = occluder_pool if occluder_pool is not None else make_occluder_pool(TEST_OCCLUDER_SEED, dim)
        out = [occlude_to_level(s, level, pool, rng, excluded=excluded or s.category)[0] for s in out]
    return out


def evaluate_queries(encoders: EncoderPair, index: ReferenceIndex, queries: list[Sample]) -> np.ndarray:
    """Geodesic error (degrees) of nearest-neighbour retrieval for every query."""
    emb = encoders.camera.forward(np.stack([s.camera_feat for s in queries]))
    rows, _ = index.search_many(emb)
    gt = np.array([s.pose.as_array() for s in queries])
    return pose_errors(index.angles[rows], gt)


def report_rows(queries: list[Sample], errors: np.ndarray, level: str, beta_test: float) -> list[ReportRow]:
    cats = np.array([s.category for s in queries])
    rows, per_cat = [], {}
    for cat in sorted(set(cats.tolist())):
        err = errors[cats == cat]
        m = compute_metrics(err)
        per_cat[cat] = (m, len(err))
        rows.append(ReportRow(cat, level, beta_test, len(err), m.acc_pi6, m.acc_pi18, m.med_err))
    w = weighted_average(per_cat)
    rows.append(ReportRow("ALL", level, beta_test, len(errors), w.acc_pi6, w.acc_pi18, w.med_err))
    return rows


def evaluate(encoders: EncoderPair, index: ReferenceIndex, test: list[Sample], levels=("L0",),
             beta_tests=(0.0,), seed: int = 0) -> EvalReport:
    report = EvalReport()
    for level in levels:
        for beta in beta_tests:
            queries = make_query_set(test, level, beta, seed)
            report.rows += report_rows(queries, evaluate_queries(encoders, index, queries), level, beta)
    return report


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentGrid:
    axis: str
    values: list

    def __post_init__(self):
        if self.axis not in GRID_AXES:
            raise ValueError(f"unknown grid axis {self.axis!r}")
        if not self.values:
            raise ValueError("grid needs at least one value")
        self.values = list(self.values)


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentResult:
    grid: ExperimentGrid
    rows: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)
    query_seconds: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r[c] for c in CSV_COLUMNS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "axis": self.grid.axis,
            "values": [str(v) for v in self.grid.values],
            "final_loss": {k: h[-1] for k, h in self.histories.items()},
            "initial_loss": {k: h[0] for k, h in self.histories.items()},
            "query_seconds": self.query_seconds,
            "weighted": [r for r in self.rows if r["category"] == "ALL"],
        }

    def lookup(self, value, level="L0", beta_test=0.0, category="ALL") -> dict:
        for r in self.rows:
            if (r["value"] == str(value) and r["occlusion_level"] == level
                    and r["beta_test"] == beta_test and r["category"] == category):
                return r
        raise KeyError((value, level, beta_test, category))

    def write(self, out_dir, figures: bool = True) -> dict:
        """CSV and JSON summaries, plus PNG figures next to them."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        axis = self.grid.axis
        paths = {"csv": out / f"{axis}.csv", "json": out / f"{axis}.json"}
        paths["csv"].write_text(self.csv_text(), encoding="utf-8")
        paths["json"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True), encoding="utf-8")
        if figures:
            from posemetric.plotting import plot_experiment, plot_history

            paths["figure"] = plot_experiment(self.rows, axis, out / f"{axis}.png")
            if self.histories:
                paths["history"] = plot_history(self.histories, out / f"{axis}_loss.png")
        return paths


def report_dicts(report: EvalReport, axis: str, value: str, design: str) -> list[dict]:
    """Report rows as CSV-ready dicts keyed by ``CSV_COLUMNS``."""
    return [
        {
            "axis": axis, "value": value, "category": r.category,
            "occlusion_level": r.occlusion_level, "beta_test": r.beta_test,
            "reference_design": design, "n": r.n, "acc_pi6": r.acc_pi6,
            "acc_pi18": r.acc_pi18, "med_err": r.med_err,
        }
        for r in report.rows
    ]


def make_datasets(data: DataConfig, ev: EvalConfig) -> tuple[list[Sample], list[Sample]]:
    common = dict(
        categories=data.categories, subcategory_mix=data.subcategory_mix, noise_sigma=data.noise_sigma,
        feature_dim=data.feature_dim, pose_prior=data.pose_prior, shared_maps=data.shared_maps,
    )
    train_set = generate_dataset(data.seed, data.n_samples, **common)
    test_set = generate_dataset(ev.seed + 10_000, ev.n_queries, first_id=10**7, **common)
    return train_set, test_set


def _variant(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "loss_variant":
        return dataclasses.replace(base, loss=dataclasses.replace(base.loss, variant=value))
    if axis in ("s_occ", "beta_train"):
        return dataclasses.replace(base, **{axis: float(value)})
    return base


def run_experiment(grid: ExperimentGrid, base: TrainConfig, data: DataConfig | None = None,
                   ev: EvalConfig | None = None, sphere: ViewingSphere | None = None, progress=None) -> ExperimentResult:
    """Train and evaluate every grid point with a shared seed discipline."""
    data = data or DataConfig()
    ev = ev or EvalConfig()
    train_set, test_set = make_datasets(data, ev)
    result = ExperimentResult(grid)
    shared_model = grid.axis in ("beta_test", "reference_design")

    def fit(cfg: TrainConfig, label: str) -> EncoderPair:
        try:
            res = train(train_set, cfg)
        except (TrainingDiverged, ValueError) as exc:
            raise ExperimentError(f"grid point {grid.axis}={label}: {exc}") from exc
        result.histories[label] = res.history
        return res.encoders

    model = fit(base, "shared") if shared_model else None
    for value in grid.values:
        label = str(value)
        if progress:
            progress(f"{grid.axis}={label}")
        encoders = model if shared_model else fit(_variant(base, grid.axis, value), label)
        design = value if grid.axis == "reference_design" else ev.reference_design
        betas = (float(value),) if grid.axis == "beta_test" else ev.beta_tests
        refs = reference_arrays(ReferenceSetDesign(design), train_set, sphere, data.feature_dim)
        index = build_index(refs, encoders.render, ev.backend)
        t0 = time.perf_counter()
        report = evaluate(encoders, index, test_set, ev.levels, betas, ev.seed)
        n_queries = len(ev.levels) * len(betas) * len(test_set)
        result.query_seconds[label] = (time.perf_counter() - t0) / n_queries
        result.rows += report_dicts(report, grid.axis, label, design)
    return result
