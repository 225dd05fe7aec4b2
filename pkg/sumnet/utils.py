import logging
import os
import sys
import time

import numpy as np
from PIL import Image

from .config import get_setting

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_logger(name):
    logger = logging.getLogger(name)
    root = logging.getLogger("sumnet")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(handler)
        root.setLevel(get_setting("LOG_LEVEL", "WARNING").upper())
        root.propagate = False
    return logger


class Stopwatch:
    """Wall and CPU time around a block."""

    def __enter__(self):
        self._wall = time.perf_counter()
        self._cpu = time.process_time()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self._wall
        self.cpu = time.process_time() - self._cpu
        return False


def ensure_dir(path):
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def to_uint8(image):
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def overlay_masks(image, gt=None, pred=None, alpha=0.45):
    """
    RGB overlay of a [0,1] frame: ground truth in green, prediction in red,
    agreement blends to yellow.
    """
    gray = to_uint8(image).astype(np.float64)
    rgb = np.stack([gray, gray, gray], axis=-1)
    if gt is not None:
        m = np.asarray(gt).astype(bool)
        rgb[m, 1] = (1 - alpha) * rgb[m, 1] + alpha * 255.0
    if pred is not None:
        m = np.asarray(pred).astype(bool)
        rgb[m, 0] = (1 - alpha) * rgb[m, 0] + alpha * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_png(array, path):
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path)
    return path


def apply_plotly_theme(fig):
    fig.update_layout(
        paper_bgcolor='rgba(0,0,0,0)',
        plot_bgcolor='rgba(0,0,0,0)',
        font_color='#E6E8EA',
        font_family='Inter',
        title_font_color='#3FD18A',
        xaxis=dict(
            gridcolor='rgba(255,255,255,0.05)',
            zerolinecolor='rgba(255,255,255,0.1)',
            tickfont=dict(color='#8B97A5'),
        ),
        yaxis=dict(
            gridcolor='rgba(255,255,255,0.05)',
            zerolinecolor='rgba(255,255,255,0.1)',
            tickfont=dict(color='#8B97A5'),
        ),
        margin=dict(l=20, r=20, t=40, b=20),
        legend=dict(bgcolor='rgba(0,0,0,0)'),
    )
    return fig
