"""Training-set construction from a stack of co-registered images.

Candidates are found independently in every image, merged into consensus
anchors, and positive patches are cut at each anchor from *every* image of the
stack. Negatives come from grid cells far away from all anchors; both kinds of
samples are grouped by location so that temporal constraints can use them.
"""

from __future__ import annotations

import io
import json
import logging
import warnings
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .imagekit import DimensionError, FeatureStack, fit_normalization, raw_features, rgb_to_luv

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1


@dataclass
class ImageStack:
    """Images of one scene seen from a fixed viewpoint."""

    images: list
    ids: list = None

    def __post_init__(self):
        if len(self.images) < 3:
            raise ValueError(f"a stack needs at least 3 images, got {len(self.images)}")
        shapes = {np.asarray(im).shape for im in self.images}
        if len(shapes) != 1:
            raise DimensionError(f"stack images differ in size: {sorted(shapes)}")
        if self.ids is None:
            self.ids = [f"{i:04d}" for i in range(len(self.images))]
        if len(self.ids) != len(self.images):
            raise ValueError("one id per image is required")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return np.asarray(self.images[0]).shape[:2]


@dataclass(frozen=True)
class Candidate:
    x: float
    y: float
    scale: float
    response: float
    image_id: int = 0


@dataclass(frozen=True)
class AnchorLocation:
    x: float
    y: float
    support: int
    scale: float
    response: float = 0.0


# ---------------------------------------------------------------------------
# Candidate detection
# ---------------------------------------------------------------------------


@dataclass
class DogConfig:
    sigma0: float = 1.6
    levels_per_octave: int = 3
    octaves: int = 2
    contrast_threshold: float = 0.01
    edge_ratio: float = 10.0
    border: int = 5


def detect_candidates(lum: np.ndarray, cfg: DogConfig = None, image_id: int = 0) -> list:
    """Difference-of-Gaussians extrema on a luminance channel in ``[0, 100]``.

    The scale space is built at full resolution; a candidate must beat all 26
    neighbours in space and scale, pass the contrast threshold and the
    principal-curvature (edge) test. Sorted by ``|response|`` descending.
    """
    cfg = cfg or DogConfig()
    lum = np.asarray(lum, dtype=np.float64)
    if lum.size == 0:
        return []
    img = lum / 100.0
    n_levels = cfg.octaves * cfg.levels_per_octave + 3
    k = 2.0 ** (1.0 / cfg.levels_per_octave)
    sigmas = [cfg.sigma0 * k**i for i in range(n_levels)]
    blurred = np.stack([ndimage.gaussian_filter(img, s, mode="nearest") for s in sigmas])
    dog = blurred[1:] - blurred[:-1]

    fp = np.ones((3, 3, 3), dtype=bool)
    fp[1, 1, 1] = False
    nb_max = ndimage.maximum_filter(dog, footprint=fp, mode="nearest")
    nb_min = ndimage.minimum_filter(dog, footprint=fp, mode="nearest")
    ext = ((dog > nb_max) | (dog < nb_min)) & (np.abs(dog) > cfg.contrast_threshold)
    ext[0] = ext[-1] = False
    b = cfg.border
    ext[:, :b] = ext[:, -b:] = False
    ext[:, :, :b] = ext[:, :, -b:] = False

    out = []
    thresh = (cfg.edge_ratio + 1.0) ** 2 / cfg.edge_ratio
    for s, y, x in zip(*np.nonzero(ext)):
        d = dog[s]
        dxx = d[y, x + 1] + d[y, x - 1] - 2 * d[y, x]
        dyy = d[y + 1, x] + d[y - 1, x] - 2 * d[y, x]
        dxy = 0.25 * (d[y + 1, x + 1] - d[y + 1, x - 1] - d[y - 1, x + 1] + d[y - 1, x - 1])
        tr, det = dxx + dyy, dxx * dyy - dxy * dxy
        if det <= 0 or tr * tr / det >= thresh:
            continue
        out.append(Candidate(float(x), float(y), float(sigmas[s]), float(d[y, x]), image_id))
    out.sort(key=lambda c: (-abs(c.response), c.y, c.x))
    return out


def detect_candidates_rgb(img: np.ndarray, cfg: DogConfig = None, image_id: int = 0) -> list:
    lum, _, _ = rgb_to_luv(img)
    return detect_candidates(lum, cfg, image_id)


def read_keypoint_file(path, image_id: int = 0) -> list:
    """Read ``x y scale response`` lines written by an external detector."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 'x y scale [response]'")
            x, y, s = (float(v) for v in parts[:3])
            r = float(parts[3]) if len(parts) > 3 else 0.0
            if s <= 0:
                raise ValueError(f"{path}:{lineno}: scale must be positive")
            out.append(Candidate(x, y, s, r, image_id))
    return out


def write_keypoint_file(path, cands) -> None:
    with open(path, "w") as fh:
        for c in cands:
            fh.write(f"{c.x:.6g} {c.y:.6g} {c.scale:.6g} {c.response:.9g}\n")


# ---------------------------------------------------------------------------
# Consensus
# ---------------------------------------------------------------------------


def consensus_keypoints(per_image, max_anchors: int = 100, min_support_fraction: float = 0.5, min_separation=None):
    """Merge per-image candidates into anchors detected in most of the stack.

    Candidates are visited smallest scale first; each unused seed collects, from
    every other image, the nearest unused candidate closer than the seed scale.
    Clusters seen in at least ``min_support_fraction`` of the images are ranked
    by support (then mean ``|response|``) and kept greedily while they stay
    ``min_separation`` apart (default: mean scale of the ranked clusters).
    """
    n_img = len(per_image)
    if n_img < 3:
        raise ValueError(f"consensus needs at least 3 candidate lists, got {n_img}")
    pool = []
    for i, cands in enumerate(per_image):
        for c in cands:
            pool.append((c.scale, i, c.x, c.y, abs(c.response)))
    if not pool:
        warnings.warn("no candidates to build consensus from", RuntimeWarning, stacklevel=2)
        return []
    arr = np.array(pool)
    order = np.lexsort((arr[:, 3], arr[:, 2], arr[:, 1], arr[:, 0]))
    arr = arr[order]
    used = np.zeros(len(arr), dtype=bool)
    img_of = arr[:, 1].astype(int)
    clusters = []
    for s in range(len(arr)):
        if used[s]:
            continue
        scale, _, sx, sy, _ = arr[s]
        members = [s]
        used[s] = True
        dist = np.hypot(arr[:, 2] - sx, arr[:, 3] - sy)
        for j in range(n_img):
            if j == img_of[s]:
                continue
            idx = np.nonzero((img_of == j) & ~used & (dist < scale))[0]
            if idx.size:
                best = idx[np.argmin(dist[idx])]
                members.append(best)
                used[best] = True
        pts = arr[members]
        clusters.append(
            (len(members), float(pts[:, 4].mean()), float(pts[:, 2].mean()), float(pts[:, 3].mean()), float(pts[:, 0].mean()))
        )

    need = min_support_fraction * n_img
    kept = [c for c in clusters if c[0] >= need]
    if not kept:
        warnings.warn("no location reaches the required support", RuntimeWarning, stacklevel=2)
        return []
    kept.sort(key=lambda c: (-c[0], -c[1], c[3], c[2]))
    if min_separation is None:
        min_separation = float(np.mean([c[4] for c in kept]))
    anchors = []
    for support, resp, x, y, scale in kept:
        if all(np.hypot(x - a.x, y - a.y) >= min_separation for a in anchors):
            anchors.append(AnchorLocation(x, y, int(support), scale, resp))
            if len(anchors) >= max_anchors:
                break
    return anchors


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class NegativeConfig:
    cell: int = None  # grid spacing, default patch radius
    min_dist: float = None  # default 2 * patch radius
    max_cells: int = 200


@dataclass
class TrainingSet:
    """Labelled feature patches with location groups.

    ``features`` is ``(K, C, P, P)``; ``group`` gives the location (anchor or
    negative cell) of each sample and ``image`` the stack index it came from.
    Samples sharing a group are each other's temporal neighbours.
    """

    features: np.ndarray
    labels: np.ndarray
    group: np.ndarray
    image: np.ndarray
    centers: np.ndarray = None
    normalization: np.ndarray = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[:, :, None, None]
        k = self.features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.group = np.asarray(self.group, dtype=np.int64) if self.group is not None else np.full(k, -1)
        self.image = np.asarray(self.image, dtype=np.int64) if self.image is not None else np.zeros(k, np.int64)
        for name in ("labels", "group", "image"):
            if getattr(self, name).shape != (k,):
                raise DimensionError(f"{name} must have one entry per sample")
        if not np.all(np.abs(self.labels) == 1):
            raise ValueError("labels must be -1 or +1")
        if self.normalization is None:
            self.normalization = np.tile([0.0, 1.0], (self.features.shape[1], 1))

    @property
    def K(self):
        return self.features.shape[0]

    @property
    def K_p(self):
        return int(np.sum(self.labels > 0))

    @property
    def patch_shape(self):
        return self.features.shape[1:]

    @property
    def flat(self):
        return self.features.reshape(self.K, -1)

    @property
    def groups(self):
        """Map group id -> sample indices (samples without a group are skipped)."""
        out = {}
        for i, g in enumerate(self.group):
            if g >= 0:
                out.setdefault(int(g), []).append(i)
        return {g: np.array(v) for g, v in out.items()}

    def subset(self, idx):
        idx = np.asarray(idx)
        return TrainingSet(
            self.features[idx],
            self.labels[idx],
            self.group[idx],
            self.image[idx],
            None if self.centers is None else self.centers[idx],
            self.normalization,
            self.seed,
            dict(self.meta),
        )

    def split_by_image(self, image_ids):
        """Samples whose stack image index is in ``image_ids``."""
        return self.subset(np.nonzero(np.isin(self.image, list(image_ids)))[0])


def _grid_cells(h, w, radius, cell, min_dist, anchors):
    ys = np.arange(radius, h - radius, cell)
    xs = np.arange(radius, w - radius, cell)
    cells = []
    apos = np.array([[round(a.x), round(a.y)] for a in anchors], dtype=float).reshape(-1, 2)
    for y in ys:
        for x in xs:
            if apos.size and np.min(np.hypot(apos[:, 0] - x, apos[:, 1] - y)) < min_dist:
                continue
            cells.append((int(x), int(y)))
    return cells


def extract_samples(stack: ImageStack, anchors, neg_cfg: NegativeConfig = None, patch_size: int = 21,
                    normalization=None, seed: int = 0) -> TrainingSet:
    """Cut positive and negative feature patches from every image of the stack."""
    if patch_size % 2 == 0:
        raise ValueError("patch_size must be odd")
    neg_cfg = neg_cfg or NegativeConfig()
    r = patch_size // 2
    cell = neg_cfg.cell or max(1, r)
    min_dist = neg_cfg.min_dist if neg_cfg.min_dist is not None else 2.0 * r
    h, w = stack.shape

    kept = []
    for a in anchors:
        cx, cy = int(round(a.x)), int(round(a.y))
        if cx - r < 0 or cy - r < 0 or cx + r >= w or cy + r >= h:
            log.info("dropping anchor at (%.1f, %.1f): too close to the border for radius %d", a.x, a.y, r)
            continue
        kept.append((cx, cy))

    raws = [raw_features(im) for im in stack.images]
    norm = fit_normalization(raws) if normalization is None else np.asarray(normalization, dtype=np.float64)
    stacks = [FeatureStack((f - norm[:, 0, None, None]) / norm[:, 1, None, None], norm) for f in raws]

    cells = _grid_cells(h, w, r, cell, min_dist, anchors)
    rng = np.random.default_rng(seed)
    if neg_cfg.max_cells is not None and len(cells) > neg_cfg.max_cells:
        pick = np.sort(rng.choice(len(cells), size=neg_cfg.max_cells, replace=False))
        cells = [cells[i] for i in pick]

    feats, labels, group, image, centers = [], [], [], [], []
    locations = [(c, +1.0) for c in kept] + [(c, -1.0) for c in cells]
    for gid, ((cx, cy), label) in enumerate(locations):
        for i, fs in enumerate(stacks):
            feats.append(fs.patch(cx, cy, r))
            labels.append(label)
            group.append(gid)
            image.append(i)
            centers.append((cx, cy))
    features = np.array(feats) if feats else np.zeros((0, 6, patch_size, patch_size))
    return TrainingSet(
        features, np.array(labels), np.array(group), np.array(image), np.array(centers, dtype=float).reshape(-1, 2),
        norm, seed,
        {"n_anchors": len(kept), "n_cells": len(cells), "patch_size": patch_size, "image_ids": list(stack.ids)},
    )


def build_training_set(stack: ImageStack, dog_cfg: DogConfig = None, max_anchors: int = 100,
                       min_support_fraction: float = 0.5, patch_size: int = 21, neg_cfg: NegativeConfig = None,
                       seed: int = 0, external=None):
    """Full pipeline: candidates (or ``external`` per-image lists), consensus, extraction."""
    if external is None:
        per_image = [detect_candidates_rgb(im, dog_cfg, i) for i, im in enumerate(stack.images)]
    else:
        per_image = external
    anchors = consensus_keypoints(per_image, max_anchors, min_support_fraction)
    ts = extract_samples(stack, anchors, neg_cfg, patch_size, seed=seed)
    ts.meta["anchors"] = [asdict(a) for a in anchors]
    return ts, anchors


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------


def _zip_write(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _array_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_training_set(ts: TrainingSet, path, config=None) -> None:
    """Write a deterministic zip archive (fixed timestamps, fixed member order)."""
    meta = {
        "version": ARCHIVE_VERSION,
        "seed": int(ts.seed),
        "K": ts.K,
        "K_p": ts.K_p,
        "normalization": ts.normalization.tolist(),
        "meta": ts.meta,
        "config": config or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1))
        arrays = {"features": ts.features, "labels": ts.labels, "group": ts.group, "image": ts.image}
        if ts.centers is not None:
            arrays["centers"] = ts.centers
        for name, arr in arrays.items():
            _zip_write(zf, f"{name}.npy", _array_bytes(arr))


def load_training_set(path) -> TrainingSet:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != ARCHIVE_VERSION:
            raise ValueError(f"unsupported training-set archive version {meta.get('version')}")
        arrays = {}
        for name in ("features", "labels", "group", "image", "centers"):
            if f"{name}.npy" in zf.namelist():
                arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
    ts = TrainingSet(
        arrays["features"], arrays["labels"], arrays["group"], arrays["image"], arrays.get("centers"),
        np.array(meta["normalization"]), meta["seed"], meta["meta"],
    )
    ts.meta["config"] = meta.get("config", {})
    return ts


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaBasis:
    """Row-orthonormal ``(d, D)`` basis and the data mean it was fitted around."""

    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray = None

    @property
    def d(self):
        return self.basis.shape[0]

    def project(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x.reshape(x.shape[0], -1) - self.mean) @ self.basis.T

    def reconstruct(self, z):
        return np.asarray(z) @ self.basis + self.mean


def fit_pca(data, d: int, rank_tol: float = 1e-10) -> PcaBasis:
    """Top-``d`` principal directions of the samples (a TrainingSet or a ``(K, D)`` array)."""
    x = data.flat if isinstance(data, TrainingSet) else np.asarray(data, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least two samples")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    rank = int(np.sum(sv > rank_tol * max(sv[0], 1e-300))) if sv.size else 0
    if d < 1 or d > rank:
        raise ValueError(f"requested {d} components but the centred data has rank {rank}")
    basis = vt[:d].copy()
    # deterministic orientation: largest-magnitude entry of each row positive
    lead = basis[np.arange(d), np.argmax(np.abs(basis), axis=1)]
    basis *= np.where(lead < 0, -1.0, 1.0)[:, None]
    return PcaBasis(mean, basis, sv[:d] ** 2 / (x.shape[0] - 1))


def data_rank(data, rank_tol: float = 1e-10) -> int:
    x = data.flat if isinstance(data, TrainingSet) else np.asarray(data, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    return int(np.sum(sv > rank_tol * max(sv[0], 1e-300))) if sv.size else 0


def project(ts: TrainingSet, basis: PcaBasis) -> np.ndarray:
    """Reduced ``(K, d)`` coordinates of the training samples."""
    return basis.project(ts.flat)
