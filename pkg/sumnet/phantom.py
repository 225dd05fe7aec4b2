"""
Synthetic B-mode phantoms: piecewise-constant anatomy times Rayleigh speckle.

ring  concentric ellipses (lumen / vessel wall / surrounding tissue),
      masks "lumen" and "eel"
blob  one smooth closed region in a darker background, mask "thyroid"
"""
import os

import numpy as np
from scipy import ndimage

from .config import POOL_DIVISOR
from .data_access import ManifestEntry, write_manifest, write_volume
from .errors import ShapeError, ValidationError
from .utils import get_logger, to_uint8

logger = get_logger(__name__)

KINDS = ("ring", "blob")
PRIMARY_STRUCTURE = {"ring": "lumen", "blob": "thyroid"}

# mean echogenicity per region
RING_LEVELS = {"lumen": 0.15, "wall": 0.65, "tissue": 0.35}
BLOB_LEVELS = {"inside": 0.6, "outside": 0.25}
SPECKLE_CORRELATION_PX = 0.8


def _check_hw(hw):
    h, w = (int(v) for v in hw)
    if h <= 0 or w <= 0 or h % POOL_DIVISOR or w % POOL_DIVISOR:
        raise ShapeError(f"phantom size {h}x{w} must be positive multiples of {POOL_DIVISOR}")
    return h, w


def rayleigh_speckle(rng, shape, correlation=SPECKLE_CORRELATION_PX):
    """
    Unit-mean Rayleigh envelope of a smoothed complex Gaussian field. The
    filter keeps the field Gaussian, so the envelope stays Rayleigh.
    """
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    if correlation > 0:
        re = ndimage.gaussian_filter(re, correlation)
        im = ndimage.gaussian_filter(im, correlation)
    env = np.hypot(re, im)
    # Rayleigh mean = sqrt(pi/4 * E[r^2])
    return env / np.sqrt(np.pi / 4.0 * np.mean(env ** 2))


def _ellipse(h, w, cy, cx, ry, rx, angle=0.0, radial=None):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    r = np.hypot(u, v)
    if radial is not None:
        r = r / radial(np.arctan2(v, u))
    return r <= 1.0


def synth_structures(seed, hw, kind):
    """Speckled image (H, W) in [0, 1] plus the noiseless generating masks."""
    if kind not in KINDS:
        raise ValidationError(f"kind must be one of {KINDS}, got {kind!r}")
    h, w = _check_hw(hw)
    rng = np.random.default_rng(seed)

    if kind == "ring":
        cy = h * rng.uniform(0.42, 0.58)
        cx = w * rng.uniform(0.42, 0.58)
        ry = min(h, w) * rng.uniform(0.12, 0.18)
        rx = ry * rng.uniform(0.85, 1.25)
        grow = rng.uniform(1.5, 1.8)
        angle = rng.uniform(0, np.pi)
        lumen = _ellipse(h, w, cy, cx, ry, rx, angle)
        eel = _ellipse(h, w, cy, cx, ry * grow, rx * grow, angle)
        anatomy = np.full((h, w), RING_LEVELS["tissue"])
        anatomy[eel] = RING_LEVELS["wall"]
        anatomy[lumen] = RING_LEVELS["lumen"]
        masks = {"lumen": lumen, "eel": eel}
    else:
        cy = h * rng.uniform(0.4, 0.6)
        cx = w * rng.uniform(0.4, 0.6)
        ry = h * rng.uniform(0.2, 0.32)
        rx = w * rng.uniform(0.2, 0.32)
        a1, a2 = rng.uniform(0.0, 0.12, size=2)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)

        def radial(theta):
            return 1.0 + a1 * np.cos(theta + p1) + a2 * np.cos(2 * theta + p2)

        region = _ellipse(h, w, cy, cx, ry, rx, rng.uniform(0, np.pi), radial)
        anatomy = np.where(region, BLOB_LEVELS["inside"], BLOB_LEVELS["outside"])
        masks = {"thyroid": region}

    image = np.clip(anatomy * rayleigh_speckle(rng, (h, w)), 0.0, 1.0)
    return image, {name: m.astype(np.uint8) for name, m in masks.items()}


def synth_phantom(seed, hw, kind):
    """(image, mask) for the kind's primary structure (lumen for ring, thyroid for blob)."""
    image, masks = synth_structures(seed, hw, kind)
    return image, masks[PRIMARY_STRUCTURE[kind]]


def synth_dataset(out_dir, n, kind, hw, seed=0, frames=4, spacing=None):
    """
    Write ``n`` phantom patients (``frames`` frames each) as USVL volumes and
    a manifest. Returns the manifest path.
    """
    if n < 1 or frames < 1:
        raise ValidationError("n and frames must be >= 1")
    h, w = _check_hw(hw)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for p in range(n):
        pid = f"{kind}{p:03d}"
        images, stacks = [], {}
        for f in range(frames):
            image, masks = synth_structures(seed * 1_000_003 + p * 1000 + f, (h, w), kind)
            images.append(to_uint8(image))
            for name, m in masks.items():
                stacks.setdefault(name, []).append(m * 255)
        image_path = write_volume(os.path.join(out_dir, f"{pid}.usvl"), np.stack(images))
        mask_paths = {
            name: write_volume(os.path.join(out_dir, f"{pid}_{name}.usvl"), np.stack(s).astype(np.uint8))
            for name, s in stacks.items()
        }
        entries.append(ManifestEntry(pid, image_path, mask_paths, w, h, frames, spacing))
    manifest = write_manifest(entries, os.path.join(out_dir, "manifest.txt"))
    logger.info("wrote %d %s phantoms to %s", n, kind, out_dir)
    return manifest
