"""Loss terms for the mask-gated multi-head adversarial objective.

The adversarial head is trained branch-by-branch: each of the K+1 output maps
is gated by its mask, the masked per-pixel loss is normalized by the mask
mass (pixel count for binary masks), and the coarse full-image branch gets
the same total weight as all fine branches combined:

    L_a = L_a0 + (1/K) * sum_k L_ak

The semantic head is scored with cross-entropy against the conditioning maps
(softmax over classes in scene mode, per-channel binary in keypoint mode),
the reconstruction head with an upsampled L1, and trunk activations feed a
feature-matching term.  A frozen random feature net stands in for a
pretrained perceptual network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADV_FORMS = ("bce", "hinge")
ROLES = ("disc_real", "disc_fake", "gen_fake")
PHASES = ("warmup", "full")


@dataclass
class LossWeights:
    lambda_s: float = 1.0
    lambda_r: float = 1.0
    lambda_fm: float = 10.0
    lambda_perc: float = 10.0

    def validate(self):
        for name in ("lambda_s", "lambda_r", "lambda_fm", "lambda_perc"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def _raw_adv(d_map, role, form):
    """Per-element adversarial loss before any gating."""
    if form == "hinge":
        if role == "disc_real":
            return ad.relu(ad.sub(1.0, d_map))
        if role == "disc_fake":
            return ad.relu(ad.add(1.0, d_map))
        return ad.mul(d_map, -1.0)
    if form == "bce":
        if role == "disc_real":
            return ad.softplus(ad.mul(d_map, -1.0))  # -log sigmoid(d)
        if role == "disc_fake":
            return ad.softplus(d_map)                # -log(1 - sigmoid(d))
        return ad.softplus(ad.mul(d_map, -1.0))
    raise ValueError(f"unknown adversarial form '{form}'")


def branch_adv_loss(d_map, mask, role, form):
    """Mask-gated adversarial loss for one branch.

    Returns (scalar, void) where the loss is sum(raw * mask) / sum(mask) and
    void marks an all-zero mask (loss 0, nothing to train on this branch).
    """
    if role not in ROLES:
        raise ValueError(f"unknown role '{role}'")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    d = d_map if isinstance(d_map, Tensor) else Tensor(d_map)
    if m.shape != d.data.shape:
        raise ad.ShapeError(f"branch_adv_loss: map shape {d.shape} != mask shape {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("branch_adv_loss: mask values must lie in [0, 1]")
    mass = float(m.sum())
    if mass == 0.0:
        return Tensor(0.0), True
    raw = _raw_adv(d, role, form)
    return ad.mul(ad.tsum(ad.mul(raw, Tensor(m))), 1.0 / mass), False


def coarse_to_fine_adv(adv_maps, masks, role, form):
    """Aggregate the K+1 gated branch losses with equal coarse/fine weight.

    adv_maps: (N, K+1, h, w) tensor; masks: (N, K+1, h, w) array.  K=0
    degenerates to the plain full-map loss. Void branches contribute zero.
    """
    m = masks.data if isinstance(masks, Tensor) else np.asarray(masks, dtype=np.float64)
    if m.shape != adv_maps.data.shape:
        raise ad.ShapeError(
            f"coarse_to_fine_adv: maps {adv_maps.shape} misaligned with masks {m.shape}"
        )
    k = adv_maps.data.shape[1] - 1
    coarse, _ = branch_adv_loss(ad.slice_channels(adv_maps, 0, 1), m[:, 0:1], role, form)
    if k == 0:
        return coarse
    fine = []
    for i in range(1, k + 1):
        li, void = branch_adv_loss(ad.slice_channels(adv_maps, i, i + 1), m[:, i : i + 1], role, form)
        if not void:
            fine.append(li)
    if not fine:
        return coarse
    total = fine[0]
    for li in fine[1:]:
        total = ad.add(total, li)
    return ad.add(coarse, ad.mul(total, 1.0 / k))


def multi_map_coarse_loss(adv_maps, role, form):
    """All channels treated as ungated coarse maps (widened-baseline head):
    the mean of per-channel full-mask branch losses."""
    n, c, h, w = adv_maps.data.shape
    ones = np.ones((n, 1, h, w))
    total = None
    for i in range(c):
        li, _ = branch_adv_loss(ad.slice_channels(adv_maps, i, i + 1), ones, role, form)
        total = li if total is None else ad.add(total, li)
    return ad.mul(total, 1.0 / c)


def semantic_matching_loss(sem_logits, semantics, mode):
    """Cross-entropy of the upsampled semantic head against the conditioning.

    Scene mode treats the K channels as class logits (softmax CE against the
    one-hot argmax); keypoint mode scores per-channel binary cross-entropy
    against the heatmaps. Mean over all pixels (and channels for keypoints).
    """
    s = semantics.data if isinstance(semantics, Tensor) else np.asarray(semantics, dtype=np.float64)
    if s.ndim != 4 or sem_logits.data.ndim != 4 or s.shape[1] != sem_logits.data.shape[1]:
        raise ad.ShapeError(
            f"semantic_matching_loss: logits {sem_logits.shape} vs semantics {s.shape}"
        )
    h, w = s.shape[2], s.shape[3]
    lh, lw = sem_logits.data.shape[2], sem_logits.data.shape[3]
    if h % lh or w % lw or h // lh != w // lw:
        raise ad.ShapeError(f"semantic_matching_loss: cannot upsample {lh}x{lw} to {h}x{w}")
    up = ad.nearest_upsample(sem_logits, h // lh) if h != lh else sem_logits
    if mode == "scene":
        target = s.argmax(axis=1)
        return ad.tmean(ad.softmax_cross_entropy(up, target))
    if mode == "keypoint":
        # binary CE per channel: softplus(l) - l * t
        return ad.tmean(ad.sub(ad.softplus(up), ad.mul(up, Tensor(s))))
    raise ValueError(f"unknown semantic mode '{mode}'")


def reconstruction_loss(rec_maps, image):
    """Mean absolute error between the upsampled reconstruction and the image."""
    y = image if isinstance(image, Tensor) else Tensor(image)
    if rec_maps.data.shape[1] != 3 or y.data.shape[1] != 3:
        raise ad.ShapeError("reconstruction_loss: expected 3-channel maps")
    h, w = y.data.shape[2], y.data.shape[3]
    lh, lw = rec_maps.data.shape[2], rec_maps.data.shape[3]
    if h % lh or w % lw or h // lh != w // lw:
        raise ad.ShapeError(f"reconstruction_loss: cannot upsample {lh}x{lw} to {h}x{w}")
    up = ad.nearest_upsample(rec_maps, h // lh) if h != lh else rec_maps
    return ad.tmean(ad.absolute(ad.sub(up, y)))


def feature_matching_loss(fake_feats, real_feats):
    """Mean per-layer L1 between trunk activations; the real branch is
    treated as a constant (no gradient through it)."""
    if len(fake_feats) != len(real_feats):
        raise ad.ShapeError(
            f"feature_matching_loss: {len(fake_feats)} vs {len(real_feats)} layers"
        )
    total = None
    for f, r in zip(fake_feats, real_feats):
        rc = r.detach() if isinstance(r, Tensor) else Tensor(r)
        term = ad.tmean(ad.absolute(ad.sub(f, rc)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(fake_feats))


def perceptual_loss(fake, real, featnet):
    """Mean per-layer L1 distance in a frozen random feature space."""
    fake_feats = featnet.features(fake)
    with ad.no_grad():
        real_feats = featnet.features(real if isinstance(real, Tensor) else Tensor(real))
    return feature_matching_loss(fake_feats, real_feats)


def _term(x):
    return x if isinstance(x, Tensor) else Tensor(float(x))


def generator_total(adv_gen, sem, rec, fm, perc, weights, phase):
    """Total generator objective; the warmup phase gates out the semantic
    and reconstruction terms, matching losses are always applied if given."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase '{phase}'")
    weights.validate()
    total = _term(adv_gen)
    if phase == "full":
        if sem is not None and weights.lambda_s > 0:
            total = ad.add(total, ad.mul(_term(sem), weights.lambda_s))
        if rec is not None and weights.lambda_r > 0:
            total = ad.add(total, ad.mul(_term(rec), weights.lambda_r))
    if fm is not None and weights.lambda_fm > 0:
        total = ad.add(total, ad.mul(_term(fm), weights.lambda_fm))
    if perc is not None and weights.lambda_perc > 0:
        total = ad.add(total, ad.mul(_term(perc), weights.lambda_perc))
    return total


def discriminator_total(adv_disc, sem_real, rec_real, weights):
    """Total discriminator objective; semantic and reconstruction terms come
    from real images only."""
    weights.validate()
    total = _term(adv_disc)
    if sem_real is not None and weights.lambda_s > 0:
        total = ad.add(total, ad.mul(_term(sem_real), weights.lambda_s))
    if rec_real is not None and weights.lambda_r > 0:
        total = ad.add(total, ad.mul(_term(rec_real), weights.lambda_r))
    return total
