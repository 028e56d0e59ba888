"""Joint training of the camera/render encoders.

Per step: draw a balanced batch, augment the camera side only (flip, box
noise, occluders, jitter), embed both sides, mine margin violators, and take
an Adam step on the mined loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from posemetric.augmentation import (
    OccluderBank,
    OcclusionConfig,
    make_occluder_pool,
    occlude_batch,
    perturb_boxes,
    resample_features,
)
from posemetric.config import LossConfig, TrainConfig
from posemetric.dataset import SampleArrays, flip_signs, stack_samples
from posemetric.encoder import Adam, EncoderPair
from posemetric.loss import PairBatch, pair_loss_and_grad, triplet_dynamic_grad, triplet_dynamic_loss
from posemetric.pose_math import euler_to_quat_array
from posemetric.sampling import BatchSampler, mine_fixed_pairs, mine_pairs, mine_triplets, pairwise_pose_distance

log = logging.getLogger(__name__)

TRAIN_OCCLUDER_SEED = 2012
TEST_OCCLUDER_SEED = 2014


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    encoders: EncoderPair
    history: list[float] = field(default_factory=list)
    config: TrainConfig | None = None


def augment_batch(data: SampleArrays, idx, cfg: TrainConfig, bank: OccluderBank | None, rng):
    """Camera features, render features and quaternions for one training batch."""
    idx = np.asarray(idx)
    cam = data.camera[idx].copy()
    ren = data.render[idx].copy()
    angles = data.angles[idx].copy()
    if cfg.flip_prob > 0:
        flip = rng.random(len(idx)) < cfg.flip_prob
        if flip.any():
            signs = flip_signs(cam.shape[1])
            cam[flip] *= signs
            ren[flip] *= signs
            angles[flip] *= np.array([-1.0, 1.0, -1.0])
    if cfg.beta_train > 0:
        boxes = data.bboxes[idx]
        cam = resample_features(cam, boxes, perturb_boxes(boxes, cfg.beta_train, rng))
    if cfg.s_occ > 0 and bank is not None:
        occ = OcclusionConfig(s_occ=cfg.s_occ, excluded_category=cfg.excluded_occluder)
        cam = occlude_batch(cam, bank, occ, rng)
    if cfg.jitter_sigma > 0:
        cam = cam + rng.normal(scale=cfg.jitter_sigma, size=cam.shape)
    return cam, ren, euler_to_quat_array(angles)


def mine(loss_cfg: LossConfig, quats, fc, fr):
    t, m = loss_cfg.pose_threshold, loss_cfg.margin
    if loss_cfg.variant == "ContrastivePose":
        return mine_pairs(quats, fc, fr, t, m)
    if loss_cfg.variant == "FixedContrastive":
        return mine_fixed_pairs(quats, fc, fr, t, m)
    return mine_triplets(quats, fc, fr, t, m)


def mined_loss_and_grad(loss_cfg: LossConfig, mined, fc, fr):
    """Loss and embedding gradients (dL/dfc, dL/dfr) for a fixed set of mined pairs."""
    g_c, g_r = np.zeros_like(fc), np.zeros_like(fr)
    if loss_cfg.variant == "TripletDynamic":
        rows, theta = mined
        if len(rows) == 0:
            return 0.0, g_c, g_r
        i, j, k = rows.T
        args = (fc[i], fr[j], fr[k], theta[i, k], loss_cfg)
        ga, gp, gn = triplet_dynamic_grad(*args)
        np.add.at(g_c, i, ga)
        np.add.at(g_r, j, gp)
        np.add.at(g_r, k, gn)
        return triplet_dynamic_loss(*args), g_c, g_r
    if len(mined) == 0:
        return 0.0, g_c, g_r
    pairs = np.concatenate([mined.positives, mined.negatives])
    i, j = pairs[:, 0], pairs[:, 1]
    positive = np.arange(len(pairs)) < len(mined.positives)
    batch = PairBatch(fc[i], fr[j], mined.delta_theta[i, j], positive)
    loss, gb_c, gb_r = pair_loss_and_grad(batch, loss_cfg)
    np.add.at(g_c, i, gb_c)
    np.add.at(g_r, j, gb_r)
    return loss, g_c, g_r


def batch_step(pair: EncoderPair, cam, ren, quats, loss_cfg: LossConfig, weight_decay: float = 0.0, mined=None):
    """Forward both encoders, mine (unless ``mined`` is given), return loss, param grads, mined."""
    fc, cache_c = pair.camera.forward_cached(cam)
    fr, cache_r = pair.render.forward_cached(ren)
    if mined is None:
        mined = mine(loss_cfg, quats, fc, fr)
        if loss_cfg.variant == "TripletDynamic":
            mined = (mined, pairwise_pose_distance(quats, quats))
    loss, g_c, g_r = mined_loss_and_grad(loss_cfg, mined, fc, fr)
    grads = pair.camera.backward(cache_c, g_c, weight_decay) + pair.render.backward(cache_r, g_r, weight_decay)
    return loss, grads, mined


def train(samples, cfg: TrainConfig, occluder_pool=None, init: EncoderPair | None = None, callback=None) -> TrainResult:
    """Train an encoder pair; deterministic given ``cfg.seed``."""
    data = samples if isinstance(samples, SampleArrays) else stack_samples(samples)
    if len(data) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    dim = data.camera.shape[1]
    init_pair = EncoderPair.init(dim, cfg.hidden, cfg.backbone_out, cfg.head_hidden, cfg.embed_dim, rng)
    pair = init.copy() if init is not None else init_pair
    if pair.camera.input_dim != dim:
        raise ValueError("encoder input dimension does not match the data")
    sampler = BatchSampler(data, cfg.sampler)
    bank = None
    if cfg.s_occ > 0:
        pool = occluder_pool if occluder_pool is not None else make_occluder_pool(TRAIN_OCCLUDER_SEED, dim)
        bank = OccluderBank.from_pool(pool, cfg.excluded_occluder)
    backbone, head = pair.parameter_groups()
    opt = Adam(pair.parameters(), [(backbone, cfg.lr_backbone), (head, cfg.lr_head)])
    steps = max(1, len(data) // cfg.batch_size)
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for step in range(steps):
            idx = sampler.draw(rng)
            cam, ren, quats = augment_batch(data, idx, cfg, bank, rng)
            loss, grads, _ = batch_step(pair, cam, ren, quats, cfg.loss, cfg.weight_decay)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, step {step} (loss={loss})")
            opt.step(grads)
            total += loss
        history.append(total / steps)
        if callback is not None:
            callback(epoch, history[-1])
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return TrainResult(pair, history, cfg)
