"""
Contour-distance weight maps and the weighted binary cross-entropy loss.
"""
import numpy as np
from scipy import ndimage

from .config import DEFAULT_SIGMA, DEFAULT_W0, PROB_CLAMP
from .errors import ShapeError, ValidationError
from .tensor import Tensor, record_op

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _as_binary(mask):
    arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    arr = np.squeeze(arr) if arr.ndim > 2 else arr
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("mask must be binary (values 0/1)")
    return arr.astype(bool)


def contour_mask(mask):
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    fg = _as_binary(mask)
    interior = ndimage.binary_erosion(fg, structure=FOUR_CONNECTED, border_value=0)
    return fg & ~interior


def extract_contour(mask):
    """Contour pixel coordinates as an (P, 2) int array of (row, col)."""
    return np.argwhere(contour_mask(mask))


def distance_transform(mask):
    """
    Euclidean distance (pixels) from each pixel to the nearest contour pixel.
    Returns all +inf when the mask has no contour.
    """
    contour = contour_mask(mask)
    if not contour.any():
        return np.full(contour.shape, np.inf)
    return ndimage.distance_transform_edt(~contour)


def weight_map(mask, w0=DEFAULT_W0, sigma=DEFAULT_SIGMA):
    if sigma <= 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    if w0 < 0:
        raise ValidationError(f"w0 must be >= 0, got {w0}")
    d = distance_transform(mask)
    return 1.0 + w0 * np.exp(-(d ** 2) / (2.0 * sigma ** 2))


def weight_maps(masks, w0=DEFAULT_W0, sigma=DEFAULT_SIGMA):
    """Weight maps for a (N, 1, H, W) mask stack."""
    masks = np.asarray(masks)
    if masks.ndim != 4 or masks.shape[1] != 1:
        raise ShapeError(f"expected (N, 1, H, W) masks, got {masks.shape}")
    out = np.empty(masks.shape, dtype=np.float64)
    for i in range(masks.shape[0]):
        out[i, 0] = weight_map(masks[i, 0], w0, sigma)
    return out


def weight_maps_for(record, structure, w0=DEFAULT_W0, sigma=DEFAULT_SIGMA):
    """Weight maps of one volume, computed once per (structure, w0, sigma)."""
    key = (structure, float(w0), float(sigma))
    cached = record.weight_cache.get(key)
    if cached is None:
        cached = weight_maps(record.masks[structure], w0, sigma)
        record.weight_cache[key] = cached
    return cached


def wce_loss(pred, target, weights, eps=PROB_CLAMP):
    """
    -(1/(N*H*W)) * sum W * [y ln p + (1 - y) ln(1 - p)] with p clamped to
    [eps, 1 - eps]. Differentiable with respect to ``pred``; the gradient is
    zero where the clamp is active.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    weights = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise ShapeError(f"wce_loss shape mismatch: pred {pred.shape}, target {target.shape}, weights {weights.shape}")
    if pred.ndim != 4 or pred.shape[1] != 1:
        raise ShapeError(f"wce_loss expects (N, 1, H, W) tensors, got {pred.shape}")

    p = pred.data
    pc = np.clip(p, eps, 1.0 - eps)
    count = p.shape[0] * p.shape[2] * p.shape[3]
    terms = weights * (target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
    result = Tensor(-terms.sum() / count)

    def backward_fn(g):
        inside = (p >= eps) & (p <= 1.0 - eps)
        dp = -weights * (target / pc - (1.0 - target) / (1.0 - pc)) / count
        return (np.asarray(g).item() * np.where(inside, dp, 0.0),)

    return record_op("wce_loss", (pred,), result, backward_fn)
