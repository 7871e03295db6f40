"""Keypoints from score maps: non-maximum suppression and selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ghh import ScoreMap

DEFAULT_SCALE = 10.0
DEFAULT_NMS_RADIUS = 5


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    scale: float = DEFAULT_SCALE


def _sort_key(kp):
    # score descending, then row-major position
    return (-kp.score, kp.y, kp.x)


def nonmax_suppress(smap: ScoreMap, radius: int = DEFAULT_NMS_RADIUS, scale: float = DEFAULT_SCALE) -> list:
    """Pixels strictly greater than every other pixel of their ``(2r+1)^2`` window.

    Only the valid interior of the map is considered; pixels outside it never
    suppress or produce keypoints. Equal neighbours suppress each other.
    """
    if radius < 1:
        raise ValueError("NMS radius must be at least 1")
    scores = np.where(smap.interior_mask(), smap.scores, -np.inf)
    k = 2 * radius + 1
    footprint = np.ones((k, k), dtype=bool)
    footprint[radius, radius] = False
    neigh = ndimage.maximum_filter(scores, footprint=footprint, mode="constant", cval=-np.inf)
    peaks = (scores > neigh) & np.isfinite(scores)
    ys, xs = np.nonzero(peaks)
    kps = [Keypoint(float(x), float(y), float(smap.scores[y, x]), scale) for y, x in zip(ys, xs)]
    kps.sort(key=_sort_key)
    return kps


def select_keypoints(cands, budget: int = None, threshold: float = None) -> list:
    """Top ``budget`` candidates, or all with score above ``threshold``; order is kept."""
    if (budget is None) == (threshold is None):
        raise ValueError("give exactly one of budget or threshold")
    if budget is not None:
        if budget <= 0:
            raise ValueError("budget must be positive")
        return list(cands[:budget])
    return [kp for kp in cands if kp.score > threshold]


def detect(smap: ScoreMap, budget: int = None, threshold: float = None, radius: int = DEFAULT_NMS_RADIUS) -> list:
    cands = nonmax_suppress(smap, radius)
    if budget is None and threshold is None:
        return cands
    return select_keypoints(cands, budget, threshold)


def write_keypoints(path, kps) -> None:
    """Text file with one ``x y score scale`` line per keypoint."""
    with open(path, "w") as fh:
        for kp in kps:
            fh.write(f"{kp.x:g} {kp.y:g} {kp.score:.9g} {kp.scale:g}\n")


def read_keypoints(path) -> list:
    kps = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'x y [score [scale]]'")
            vals = [float(v) for v in parts[:4]]
            score = vals[2] if len(vals) > 2 else 0.0
            scale = vals[3] if len(vals) > 3 else DEFAULT_SCALE
            kps.append(Keypoint(vals[0], vals[1], score, scale))
    return kps
