"""Subcategory-balanced, pose-neighbour-enriched batches and margin-violation mining."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from posemetric.config import SamplerConfig
from posemetric.pose_math import EulerPose, euler_to_quat_array, geodesic_distance_array


def _subcategory_labels(samples) -> np.ndarray:
    if hasattr(samples, "subcategories"):
        return np.asarray(samples.subcategories)
    return np.array([s.subcategory if hasattr(s, "subcategory") else s for s in samples])


def subcategory_weights(samples) -> np.ndarray:
    """Per-sample weights proportional to 1 / (size of the sample's subcategory), summing to 1."""
    labels = _subcategory_labels(samples)
    if len(labels) == 0:
        raise ValueError("no samples")
    counts = Counter(labels.tolist())
    w = np.array([1.0 / counts[s] for s in labels.tolist()])
    return w / w.sum()


def as_quats(poses) -> np.ndarray:
    """Quaternion rows for Samples, EulerPoses, or an existing (n, 4) array."""
    if isinstance(poses, np.ndarray) and poses.ndim == 2 and poses.shape[1] == 4:
        return poses
    if hasattr(poses, "quats"):
        return poses.quats
    angles = [(p.pose if hasattr(p, "pose") else p).as_array() for p in poses]
    return euler_to_quat_array(np.array(angles, dtype=float).reshape(-1, 3))


def pairwise_pose_distance(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Geodesic distance matrix computed elementwise (no BLAS) for reproducible ties."""
    return geodesic_distance_array(np.asarray(qa)[:, None, :], np.asarray(qb)[None, :, :])


def neighbour_lists(quats: np.ndarray, threshold: float, chunk: int = 1024) -> list[np.ndarray]:
    """Indices of other samples strictly closer than ``threshold`` in pose."""
    # |q_i . q_j| > cos(t / 2)  <=>  dtheta < t
    cos_half = np.cos(threshold / 2.0)
    out = []
    for start in range(0, len(quats), chunk):
        dots = np.abs(quats[start:start + chunk] @ quats.T)
        for row, i in zip(dots, range(start, start + len(dots))):
            idx = np.flatnonzero(row > cos_half)
            out.append(idx[idx != i])
    return out


class BatchSampler:
    """Draws batches: weighted seeds, each followed by up to N pose neighbours."""

    def __init__(self, samples, cfg: SamplerConfig):
        self.cfg = cfg
        self.weights = subcategory_weights(samples)
        self.n = len(self.weights)
        if self.n < cfg.batch_size:
            raise ValueError("dataset is smaller than one batch")
        self.neighbours = neighbour_lists(as_quats(samples), cfg.neighbor_threshold)

    def draw(self, rng, return_seeds: bool = False):
        cfg = self.cfg
        # Efraimidis-Spirakis keys give a weighted order without replacement
        keys = np.log(rng.random(self.n)) / self.weights
        order = np.argsort(-keys, kind="stable")
        in_batch = np.zeros(self.n, dtype=bool)
        batch: list[int] = []
        seeds: list[int] = []
        for seed in order:
            if len(batch) >= cfg.batch_size:
                break
            if in_batch[seed]:
                continue
            batch.append(int(seed))
            seeds.append(int(seed))
            in_batch[seed] = True
            neigh = self.neighbours[seed]
            if len(neigh) == 0:
                continue
            need = cfg.neighbor_count - int(in_batch[neigh].sum())
            free = neigh[~in_batch[neigh]]
            if need <= 0 or len(free) == 0:
                continue
            take = min(need, len(free), cfg.batch_size - len(batch))
            for j in rng.permutation(free)[:take]:
                batch.append(int(j))
                in_batch[j] = True
        return (batch, seeds) if return_seeds else batch


def draw_batch(samples, cfg: SamplerConfig, rng) -> list[int]:
    return BatchSampler(samples, cfg).draw(rng)


@dataclass
class MinedPairs:
    """Ordered cross-modal (camera i, render j) pairs that violate the margin."""

    positives: np.ndarray
    negatives: np.ndarray
    delta_theta: np.ndarray | None = None

    def as_sets(self) -> tuple[set, set]:
        return set(map(tuple, self.positives.tolist())), set(map(tuple, self.negatives.tolist()))

    def __len__(self):
        return len(self.positives) + len(self.negatives)


def _sq_dist_matrix(emb_c: np.ndarray, emb_r: np.ndarray) -> np.ndarray:
    diff = emb_c[:, None, :] - emb_r[None, :, :]
    return (diff * diff).sum(axis=-1)


def candidate_pairs(poses, threshold: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ordered pairs split by pose threshold, before violation filtering."""
    q = as_quats(poses)
    theta = pairwise_pose_distance(q, q)
    pos = np.argwhere(theta < threshold)
    neg = np.argwhere(theta >= threshold)
    return pos, neg, theta


def mine_pairs(poses, emb_c, emb_r, threshold: float, margin: float) -> MinedPairs:
    """Keep positives with d2 > m*dtheta and negatives with d2 < m*dtheta."""
    emb_c, emb_r = np.asarray(emb_c, dtype=float), np.asarray(emb_r, dtype=float)
    if emb_c.shape != emb_r.shape or emb_c.ndim != 2:
        raise ValueError("camera and render embeddings must be aligned (B, D) arrays")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    q = as_quats(poses)
    if len(q) != len(emb_c):
        raise ValueError("one pose per batch element is required")
    theta = pairwise_pose_distance(q, q)
    d2 = _sq_dist_matrix(emb_c, emb_r)
    bound = margin * theta
    is_pos = theta < threshold
    pos = np.argwhere(is_pos & (d2 > bound))
    neg = np.argwhere(~is_pos & (d2 < bound))
    return MinedPairs(pos, neg, theta)


def mine_fixed_pairs(poses, emb_c, emb_r, threshold: float, margin: float) -> MinedPairs:
    """Violators of the constant-margin loss: positives with d2 > 0, negatives with d2 < m."""
    q = as_quats(poses)
    theta = pairwise_pose_distance(q, q)
    d2 = _sq_dist_matrix(np.asarray(emb_c, float), np.asarray(emb_r, float))
    is_pos = theta < threshold
    return MinedPairs(np.argwhere(is_pos & (d2 > 0)), np.argwhere(~is_pos & (d2 < margin)), theta)


def mine_triplets(poses, emb_c, emb_r, threshold: float, margin: float) -> np.ndarray:
    """(anchor i, positive render j, negative render k) rows with a positive hinge."""
    q = as_quats(poses)
    theta = pairwise_pose_distance(q, q)
    d2 = _sq_dist_matrix(np.asarray(emb_c, float), np.asarray(emb_r, float))
    is_pos = theta < threshold
    # hinge[i, j, k] = d2[i, j] - d2[i, k] + m * theta[i, k]
    hinge = d2[:, :, None] - d2[:, None, :] + margin * theta[:, None, :]
    valid = is_pos[:, :, None] & ~is_pos[:, None, :] & (hinge > 0)
    return np.argwhere(valid)
