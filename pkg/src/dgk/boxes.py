"""Box geometry on (cx, cy, w, h) boxes, vectorised over leading dims.

Functions take plain arrays or autodiff tensors; the pairwise helpers used
for cost matrices and NMS are numpy only.
"""

import numpy as np

from .autodiff import backend


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    return np.stack(_corners(b), axis=-1)


def _corners(b):
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def aligned_iou_giou(a, b):
    """IoU and GIoU of row-aligned boxes a[k], b[k]; works with tensors."""
    xp = backend(a, b)
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    iw = xp.clip(xp.minimum(ax1, bx1) - xp.maximum(ax0, bx0), 0.0, np.inf)
    ih = xp.clip(xp.minimum(ay1, by1) - xp.maximum(ay0, by0), 0.0, np.inf)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union
    hull = (xp.maximum(ax1, bx1) - xp.minimum(ax0, bx0)) * (xp.maximum(ay1, by1) - xp.minimum(ay0, by0))
    return iou, iou - (hull - union) / hull


def pairwise_iou(a, b):
    """(n, m) IoU matrix between numpy box arrays (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    a, b = np.broadcast_arrays(a, b)
    return aligned_iou_giou(a, b)[0]


def pairwise_giou(a, b):
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    a, b = np.broadcast_arrays(a, b)
    return aligned_iou_giou(a, b)[1]


def box_iou(a, b):
    """IoU of two single boxes given as length-4 sequences (plain floats, for hot loops)."""
    acx, acy, aw, ah = (float(v) for v in a)
    bcx, bcy, bw, bh = (float(v) for v in b)
    iw = min(acx + aw / 2, bcx + bw / 2) - max(acx - aw / 2, bcx - bw / 2)
    ih = min(acy + ah / 2, bcy + bh / 2) - max(acy - ah / 2, bcy - bh / 2)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0
