"""Contrastive pose loss with a pose-proportional margin, plus ablation variants.

All distances are squared L2.  Positives (pose distance below the threshold)
are pulled in until ``d2 <= m * dtheta``; negatives are pushed out until
``d2 >= m * dtheta``.  Gradients use the zero subgradient at hinge kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from posemetric.config import LossConfig


@dataclass
class PairBatch:
    """Aligned camera/render embedding pairs with their pose distances."""

    fc: np.ndarray
    fr: np.ndarray
    delta_theta: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        self.fc = np.atleast_2d(np.asarray(self.fc, dtype=float))
        self.fr = np.atleast_2d(np.asarray(self.fr, dtype=float))
        self.delta_theta = np.atleast_1d(np.asarray(self.delta_theta, dtype=float))
        self.positive = np.atleast_1d(np.asarray(self.positive, dtype=bool))
        if self.fc.shape != self.fr.shape:
            raise ValueError("camera and render embeddings must have the same shape")
        n = len(self.fc)
        if len(self.delta_theta) != n or len(self.positive) != n:
            raise ValueError("pair fields must have equal length")

    def __len__(self):
        return len(self.fc)

    @property
    def sq_dist(self) -> np.ndarray:
        diff = self.fc - self.fr
        return np.einsum("ij,ij->i", diff, diff)


def _check_nonempty(batch: PairBatch):
    if len(batch) == 0:
        raise ValueError("empty pair batch")


def _pose_hinges(batch: PairBatch, cfg: LossConfig) -> np.ndarray:
    margin = cfg.margin * batch.delta_theta
    d2 = batch.sq_dist
    return np.where(batch.positive, d2 - margin, margin - d2)


def contrastive_pose_loss(batch: PairBatch, cfg: LossConfig) -> float:
    _check_nonempty(batch)
    return float(np.maximum(_pose_hinges(batch, cfg), 0.0).sum() / (2 * len(batch)))


def contrastive_pose_grad(batch: PairBatch, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gradients with respect to every ``fc`` row and every ``fr`` row."""
    _check_nonempty(batch)
    active = _pose_hinges(batch, cfg) > 0.0
    # d(d2)/d(fc) = 2 (fc - fr); the 1/(2N) prefactor leaves 1/N
    sign = np.where(batch.positive, 1.0, -1.0) * active
    g_fc = (sign / len(batch))[:, None] * (batch.fc - batch.fr)
    return g_fc, -g_fc


def _fixed_hinges(batch: PairBatch, cfg: LossConfig) -> np.ndarray:
    d2 = batch.sq_dist
    return np.where(batch.positive, d2, cfg.margin - d2)


def fixed_contrastive_loss(batch: PairBatch, cfg: LossConfig) -> float:
    """Classic contrastive loss with a constant margin (positives pulled to zero)."""
    _check_nonempty(batch)
    return float(np.maximum(_fixed_hinges(batch, cfg), 0.0).sum() / (2 * len(batch)))


def fixed_contrastive_grad(batch: PairBatch, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    _check_nonempty(batch)
    active = _fixed_hinges(batch, cfg) > 0.0
    sign = np.where(batch.positive, 1.0, -1.0) * active
    g_fc = (sign / len(batch))[:, None] * (batch.fc - batch.fr)
    return g_fc, -g_fc


def pair_loss_and_grad(batch: PairBatch, cfg: LossConfig):
    if cfg.variant == "ContrastivePose":
        return contrastive_pose_loss(batch, cfg), *contrastive_pose_grad(batch, cfg)
    if cfg.variant == "FixedContrastive":
        return fixed_contrastive_loss(batch, cfg), *fixed_contrastive_grad(batch, cfg)
    raise ValueError(f"{cfg.variant} is not a pair loss")


def _triplet_terms(anchors, positives, negatives, neg_delta_theta, cfg):
    a = np.atleast_2d(np.asarray(anchors, dtype=float))
    p = np.atleast_2d(np.asarray(positives, dtype=float))
    n = np.atleast_2d(np.asarray(negatives, dtype=float))
    dt = np.atleast_1d(np.asarray(neg_delta_theta, dtype=float))
    if not (a.shape == p.shape == n.shape) or len(dt) != len(a):
        raise ValueError("triplet inputs must be aligned")
    if len(a) == 0:
        raise ValueError("empty triplet batch")
    d_ap = np.einsum("ij,ij->i", a - p, a - p)
    d_an = np.einsum("ij,ij->i", a - n, a - n)
    return a, p, n, d_ap - d_an + cfg.margin * dt


def triplet_dynamic_loss(anchors, positives, negatives, neg_delta_theta, cfg: LossConfig) -> float:
    """mean of max(0, d2(a, p) - d2(a, n) + m * dtheta(a, n))."""
    *_, h = _triplet_terms(anchors, positives, negatives, neg_delta_theta, cfg)
    return float(np.maximum(h, 0.0).mean())


def triplet_dynamic_grad(anchors, positives, negatives, neg_delta_theta, cfg: LossConfig):
    a, p, n, h = _triplet_terms(anchors, positives, negatives, neg_delta_theta, cfg)
    w = (h > 0.0).astype(float)[:, None] * (2.0 / len(a))
    return w * (n - p), -w * (a - p), w * (a - n)
