"""Pure numpy implementations of the hot loops.

Every routine here has a compiled twin in ``_ckernels.pyx``. Both must
perform floating point accumulation in the same order so that the two
backends agree bit for bit.
"""
import numpy as np


def im2col3x3(xp, stride, out_h, out_w):
    """Patch matrix of a padded batch ``xp`` [n, c, hp, wp].

    Returns ``cols`` of shape [n, out_h, out_w, c * 9] with the column
    index ordered as (channel, kernel row, kernel col).
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, out_h, out_w, c, 3, 3), dtype=xp.dtype)
    for ki in range(3):
        for kj in range(3):
            patch = xp[:, :, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride]
            cols[:, :, :, :, ki, kj] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n, out_h, out_w, c * 9)


def col2im3x3(dcols, c, hp, wp, stride):
    """Adjoint of :func:`im2col3x3`: scatter-add patch gradients."""
    n, out_h, out_w = dcols.shape[:3]
    d = dcols.reshape(n, out_h, out_w, c, 3, 3)
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dx[:, :, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += (
                d[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    return dx


def sq_distances(points, centroids):
    """Squared euclidean distances [n, k], summed over dims in index order."""
    n, d = points.shape
    k = centroids.shape[0]
    out = np.zeros((n, k), dtype=np.float64)
    for j in range(d):
        diff = points[:, j, None] - centroids[None, :, j]
        out += diff * diff
    return out


def assign_nearest(points, centroids):
    """Nearest centroid per point (first index wins ties) and its distance."""
    dist = sq_distances(points, centroids)
    labels = np.argmin(dist, axis=1).astype(np.int64)
    return labels, dist[np.arange(points.shape[0]), labels]


def mine_masks(S, labels, eps):
    """Boolean positive / negative selection masks, strict inequalities.

    Anchors without a same-label partner or without a different-label
    point select nothing on either side.
    """
    n = S.shape[0]
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    has_pos = same.any(axis=1)
    has_neg = diff.any(axis=1)
    valid = has_pos & has_neg
    min_pos = np.where(same, S, np.inf).min(axis=1)
    max_neg = np.where(diff, S, -np.inf).max(axis=1)
    pos = same & (S < (max_neg + eps)[:, None])
    neg = diff & (S > (min_pos - eps)[:, None])
    pos &= valid[:, None]
    neg &= valid[:, None]
    return pos, neg
