"""Training losses over rendered feature maps and child offsets.

Feature rendering is linear in the anchor features (F = W @ f with W the
pixel-by-anchor blend weight matrix), so the mask losses back-propagate to
anchor features through a single sparse transpose product. Masked mean
features are treated as constants inside the smoothing term; the contrastive
term differentiates through them.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput

EPS_NORM = 1e-12


class MaskSet:
    """Binary instance masks for one view.

    Masks that are entirely contained in another mask are dropped on
    construction, as are inputs with no set pixels rejected.
    """

    def __init__(self, masks, instance_ids=None):
        masks = [np.asarray(m, dtype=bool) for m in masks]
        if instance_ids is None:
            instance_ids = list(range(len(masks)))
        if any(m.sum() == 0 for m in masks):
            raise InvalidInput("empty instance mask")
        shapes = {m.shape for m in masks}
        if len(shapes) > 1:
            raise InvalidInput("masks must share one shape")
        keep = []
        for i, m in enumerate(masks):
            contained = any(
                j != i and np.array_equal(m & masks[j], m)
                and not np.array_equal(m, masks[j])
                for j in range(len(masks)))
            # among exact duplicates keep the first occurrence
            duplicate = any(np.array_equal(m, masks[j]) for j in range(i))
            if not contained and not duplicate:
                keep.append(i)
        self.masks = [masks[i] for i in keep]
        self.instance_ids = [instance_ids[i] for i in keep]

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def shape(self):
        return self.masks[0].shape if self.masks else None

    def stacked(self) -> np.ndarray:
        return np.stack(self.masks) if self.masks else np.zeros((0, 0, 0), dtype=bool)


def loss_local_constraint(offsets: np.ndarray):
    """Offset confinement penalty: mean over children of
    exp(relu(|o|^2 - 1)). Equals 1 while every offset stays inside the unit
    ball; the gradient is zero there and 2*exp(|o|^2-1)*o / N outside.
    """
    o = np.asarray(offsets, dtype=float).reshape(-1, 3)
    n = o.shape[0]
    if n == 0:
        return 1.0, np.zeros_like(offsets, dtype=float)
    sq = np.sum(o * o, axis=1)
    excess = np.maximum(sq - 1.0, 0.0)
    vals = np.exp(excess)
    loss = float(vals.mean())
    grad = np.zeros_like(o)
    out = sq > 1.0
    grad[out] = (2.0 * vals[out, None] * o[out]) / n
    return loss, grad.reshape(np.shape(offsets))


def loss_depth_distortion(records) -> float:
    """Mean over pixels of the pairwise blend-weighted squared depth spread
    sum_i sum_{j<i} w_i w_j (z_i - z_j)^2, computed with prefix sums."""
    npix = records.width * records.height
    if records.pixel.size == 0:
        return 0.0
    pix, w, z = records.pixel, records.omega, records.z
    # records are already grouped by pixel in depth order
    starts = np.concatenate([[0], np.flatnonzero(np.diff(pix)) + 1])
    lens = np.diff(np.concatenate([starts, [pix.size]]))

    def seg_exclusive_cumsum(x):
        cs = np.cumsum(x)
        excl = cs - x
        base = np.repeat(excl[starts], lens)
        return excl - base

    s_w = seg_exclusive_cumsum(w)
    s_wz = seg_exclusive_cumsum(w * z)
    s_wz2 = seg_exclusive_cumsum(w * z * z)
    per_entry = w * (z * z * s_w - 2.0 * z * s_wz + s_wz2)
    return float(per_entry.sum() / npix)


def loss_depth_distortion_bruteforce(records) -> float:
    """O(n^2) reference for the depth distortion term."""
    npix = records.width * records.height
    total = 0.0
    for p in np.unique(records.pixel):
        sel = records.pixel == p
        w = records.omega[sel]
        z = records.z[sel]
        for i in range(len(w)):
            for j in range(i):
                total += w[i] * w[j] * (z[i] - z[j]) ** 2
    return total / npix


def mean_mask_feature(feature_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Channelwise mean of the feature map over the mask."""
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum()
    if count == 0:
        raise InvalidInput("mean over an empty mask")
    return feature_map[mask].mean(axis=0)


def loss_intra_mask(feature_map: np.ndarray, maskset: MaskSet, means=None):
    """Smoothing term: sum over masks and masked pixels of the Euclidean
    residual |F_pixel - mean_j|.

    Returns (loss, pixel_gradient) with pixel_gradient shaped like the
    feature map. The mask means are constants for the gradient; pass `means`
    to evaluate against externally frozen values (finite-difference checks).
    """
    F = np.asarray(feature_map, dtype=float)
    if means is None:
        means = [mean_mask_feature(F, m) for m in maskset.masks]
    loss = 0.0
    grad = np.zeros_like(F)
    for mask, mean in zip(maskset.masks, means):
        resid = F[mask] - mean
        norms = np.linalg.norm(resid, axis=1)
        loss += float(norms.sum())
        safe = np.maximum(norms, EPS_NORM)
        grad[mask] += resid / safe[:, None]
    return loss, grad


def loss_inter_mask(means: np.ndarray):
    """Contrastive term over mask mean features:
    (1/(m(m-1))) * sum_{j != k} 1 / (|mean_j - mean_k| + 1).

    Returns (loss, gradient w.r.t. the means). Defined as 0 for fewer than
    two masks.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    m = means.shape[0]
    if m < 2:
        return 0.0, np.zeros_like(means)
    diff = means[:, None, :] - means[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    off = ~np.eye(m, dtype=bool)
    norm = 1.0 / (m * (m - 1))
    loss = float(norm * np.sum(1.0 / (dist[off] + 1.0)))
    # d/dmean_j of 1/(d+1) summed over ordered pairs: each unordered pair
    # appears twice
    safe = np.maximum(dist, EPS_NORM)
    coef = np.where(off, -2.0 / ((dist + 1.0) ** 2 * safe), 0.0)
    grad = norm * np.einsum("jk,jkc->jc", coef, diff)
    return loss, grad


def pixel_grad_to_anchor_grad(weight_matrix, pixel_grad: np.ndarray) -> np.ndarray:
    """Back-propagate a per-pixel feature gradient through the linear
    rendering map: grad_f = W^T @ g."""
    H, W_, C = pixel_grad.shape
    return weight_matrix.T @ pixel_grad.reshape(H * W_, C)


def masked_mean_pixel_grad(grad_means: np.ndarray, maskset: MaskSet,
                           shape) -> np.ndarray:
    """Distribute gradients w.r.t. mask means back onto pixels:
    each masked pixel receives grad_mean / |mask|."""
    out = np.zeros(shape)
    for mask, g in zip(maskset.masks, grad_means):
        out[mask] += g / mask.sum()
    return out
