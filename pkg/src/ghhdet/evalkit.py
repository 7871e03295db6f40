"""Repeatability of keypoint detectors.

Two measures are provided. The standard one counts keypoints of one image
that have a counterpart within ``threshold_px`` in the other. The one-to-one
variant matches greedily by increasing distance and uses every keypoint at
most once; with a keypoint budget chosen so that random detections score 2%,
it is the budget-normalised measure used for comparisons.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MODES = ("standard", "one_to_one")
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthTransform:
    """Identity or a 3x3 homography mapping image A coordinates to image B."""

    kind: str = "identity"
    matrix: np.ndarray = None

    def __post_init__(self):
        if self.kind == "identity":
            object.__setattr__(self, "matrix", np.eye(3))
        elif self.kind == "homography":
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.shape != (3, 3):
                raise ValueError(f"homography must be 3x3, got {m.shape}")
            if abs(np.linalg.det(m)) <= 1e-12:
                raise ValueError("homography is singular")
            object.__setattr__(self, "matrix", m)
        else:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def homography(cls, matrix):
        return cls("homography", matrix)

    @classmethod
    def from_file(cls, path):
        vals = np.loadtxt(path, dtype=np.float64).ravel()
        if vals.size != 9:
            raise ValueError(f"{path}: expected 9 numbers, found {vals.size}")
        return cls.homography(vals.reshape(3, 3))

    def inverse(self):
        if self.kind == "identity":
            return self
        return GroundTruthTransform.homography(np.linalg.inv(self.matrix))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if self.kind == "identity":
            return pts.copy()
        h = np.c_[pts, np.ones(len(pts))] @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def compose(self, other):
        """Transform applying ``self`` first, then ``other``."""
        if self.kind == "identity":
            return other
        if other.kind == "identity":
            return self
        return GroundTruthTransform.homography(other.matrix @ self.matrix)


@dataclass(frozen=True)
class RepeatabilityScore:
    matched: int
    evaluated: int
    score: float
    threshold_px: float
    budget: int
    mode: str = "one_to_one"


def _coords(kps):
    if isinstance(kps, np.ndarray):
        return np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2)


def _inside(pts, shape, margin):
    if shape is None:
        return np.ones(len(pts), dtype=bool)
    h, w = shape
    return (pts[:, 0] >= margin) & (pts[:, 0] <= w - 1 - margin) & (pts[:, 1] >= margin) & (pts[:, 1] <= h - 1 - margin)


def pair_distances(a, b, T: GroundTruthTransform):
    """Symmetric reprojection distance ``max(|T a - b|, |a - T^-1 b|)`` for all pairs."""
    ta = T.apply(a)
    tib = T.inverse().apply(b)
    d1 = np.hypot(ta[:, None, 0] - b[None, :, 0], ta[:, None, 1] - b[None, :, 1])
    d2 = np.hypot(a[:, None, 0] - tib[None, :, 0], a[:, None, 1] - tib[None, :, 1])
    return np.maximum(d1, d2)


def greedy_match(a, b, d, threshold):
    """Pairs ``(i, j)`` matched greedily by increasing distance, each point used once.

    Ties are broken by the coordinates of both points (order independent), so
    swapping the roles of the two sets yields the same matching.
    """
    ii, jj = np.nonzero(d < threshold)
    keys = [
        (d[i, j],) + tuple(sorted((tuple(a[i]), tuple(b[j]))))
        for i, j in zip(ii, jj)
    ]
    order = sorted(range(len(ii)), key=keys.__getitem__)
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return pairs


def repeatability(kps_a, kps_b, T: GroundTruthTransform = None, threshold_px: float = 5.0, mode: str = "one_to_one",
                  shape_a=None, shape_b=None, margin: float = 0.0) -> RepeatabilityScore:
    """Fraction of keypoints found again in the other image.

    Keypoints of A that fall outside B after projection (and vice versa) are
    dropped when image shapes ``(h, w)`` are given. The score is the number
    of matches over ``min(|A'|, |B'|)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    T = T or GroundTruthTransform.identity()
    a, b = _coords(kps_a), _coords(kps_b)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("both keypoint lists must be nonempty")
    shape_b = shape_a if shape_b is None else shape_b
    keep_a = _inside(a, shape_a, margin) & _inside(T.apply(a), shape_b, margin)
    keep_b = _inside(b, shape_b, margin) & _inside(T.inverse().apply(b), shape_a, margin)
    a, b = a[keep_a], b[keep_b]
    evaluated = min(len(a), len(b))
    budget = max(len(kps_a), len(kps_b))
    if evaluated == 0:
        return RepeatabilityScore(0, 0, 0.0, threshold_px, budget, mode)
    d = pair_distances(a, b, T)
    if mode == "standard":
        matched = min(int(np.sum(np.any(d < threshold_px, axis=1))), evaluated)
    else:
        matched = len(greedy_match(a, b, d, threshold_px))
    return RepeatabilityScore(matched, evaluated, matched / evaluated, threshold_px, budget, mode)


# ---------------------------------------------------------------------------
# Random baseline
# ---------------------------------------------------------------------------


def random_rate(width, height, threshold_px, budget, trials=10000, seed=0, chunk=500) -> float:
    """Mean one-to-one repeatability of two independent uniform random keypoint sets.

    Keypoints sit on integer pixel positions, like detector output.
    """
    rng = np.random.default_rng(seed)
    total = 0
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        a = np.stack([rng.integers(0, width, (t, budget)), rng.integers(0, height, (t, budget))], axis=-1).astype(np.int32)
        b = np.stack([rng.integers(0, width, (t, budget)), rng.integers(0, height, (t, budget))], axis=-1).astype(np.int32)
        dx = a[:, :, None, 0] - b[:, None, :, 0]
        dy = a[:, :, None, 1] - b[:, None, :, 1]
        close = dx * dx + dy * dy < threshold_px * threshold_px
        # without shared points every close pair is a match; only conflicts need the greedy pass
        conflict = (close.sum(axis=2) > 1).any(axis=1) | (close.sum(axis=1) > 1).any(axis=1)
        total += int(close[~conflict].sum())
        for k in np.nonzero(conflict)[0]:
            ak, bk = a[k].astype(float), b[k].astype(float)
            d = np.hypot(ak[:, None, 0] - bk[None, :, 0], ak[:, None, 1] - bk[None, :, 1])
            total += len(greedy_match(ak, bk, d, threshold_px))
        done += t
    return total / (trials * budget)


def budget_for_random_rate(width, height, threshold_px, target_rate=0.02, trials=10000, seed=0, tol=0.0025) -> int:
    """Smallest keypoint budget whose random one-to-one repeatability is within ``tol`` of ``target_rate``."""
    if not 0 < target_rate < 1:
        raise ValueError("target_rate must be in (0, 1)")
    if threshold_px <= 0:
        raise EvaluationError("threshold must be positive: random keypoints never match")
    cache = {}

    def rate(k):
        if k not in cache:
            cache[k] = random_rate(width, height, threshold_px, k, trials, seed)
        return cache[k]

    low_ok = target_rate - tol
    k_max = width * height
    hi = 1
    while rate(hi) < low_ok:
        if hi >= k_max:
            raise EvaluationError(f"rate {target_rate:.2%} unreachable: {rate(hi):.3%} at budget {hi}")
        hi = min(hi * 2, k_max)
    lo = hi // 2  # rate(lo) < low_ok, or lo == 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rate(mid) >= low_ok:
            hi = mid
        else:
            lo = mid
    if rate(hi) > target_rate + tol:
        raise EvaluationError(
            f"rate {target_rate:.2%} unreachable at {width}x{height}, {threshold_px}px: budget {hi} gives {rate(hi):.3%}"
        )
    log.info("budget %d gives random repeatability %.3f%%", hi, 100 * rate(hi))
    return hi


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    mode: str = "one_to_one"  # or "standard" or "both"
    threshold_px: float = 5.0
    budget: object = "2pct"  # int, "2pct" or None (all detections)
    pairs: str = "auto"  # "all", "reference" or "auto"
    kind: str = "auto"  # "stack", "homography" or "auto"
    nms_radius: int = 5
    separable: bool = False
    margin: float = 0.0
    trials: int = 10000
    seed: int = 0
    jobs: int = 1


@dataclass
class Report:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sequence", "pair", "mode", "score", "budget"])
            for r in self.rows:
                wr.writerow([r["sequence"], r["pair"], r["mode"], f"{r['score']:.6f}", r["budget"]])
        with open(out / "report.json", "w") as fh:
            json.dump({"config": self.config, "summary": self.summary, "pairs": self.rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _natural_key(p):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]


def list_images(directory):
    return sorted((p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)


def find_sequences(dataset_dir):
    """``{name: [image paths]}``; a directory holding images is itself one sequence."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise EvaluationError(f"{root} is not a directory")
    seqs = {}
    own = list_images(root)
    if own:
        seqs[root.name] = own
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        imgs = list_images(sub)
        if imgs:
            seqs[sub.name] = imgs
    if not seqs:
        raise EvaluationError(f"no images found under {root}")
    return seqs


def _homography_file(seq_dir, j):
    for name in (f"H1to{j}p", f"H1to{j}", f"H1to{j}p.txt", f"H1to{j}.txt"):
        p = Path(seq_dir) / name
        if p.exists():
            return p
    return None


def sequence_pairs(images, cfg: EvalConfig):
    """``[(i, j, T_ij)]`` for the sequence; Oxford-style ``H1tojp`` files define homographies."""
    seq_dir = images[0].parent
    has_h = any(_homography_file(seq_dir, j) for j in range(2, len(images) + 1))
    kind = cfg.kind if cfg.kind != "auto" else ("homography" if has_h else "stack")
    pairing = cfg.pairs if cfg.pairs != "auto" else ("reference" if kind == "homography" else "all")
    n = len(images)
    if pairing == "reference":
        idx = [(0, j) for j in range(1, n)]
    elif pairing == "all":
        idx = [(i, j) for i in range(n) for j in range(i + 1, n)]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    if kind == "stack":
        return [(i, j, GroundTruthTransform.identity()) for i, j in idx]
    # homographies from the first image
    from_ref = {0: GroundTruthTransform.identity()}
    out = []
    for i, j in idx:
        for k in (i, j):
            if k not in from_ref:
                path = _homography_file(seq_dir, k + 1)
                if path is None:
                    raise EvaluationError(f"missing transform for pair ({images[i].name}, {images[j].name}): no H1to{k + 1}p")
                from_ref[k] = GroundTruthTransform.from_file(path)
        out.append((i, j, from_ref[i].inverse().compose(from_ref[j])))
    return out


def _model_detector(model, cfg, budgets):
    from .detector import nonmax_suppress, select_keypoints
    from .ghh import score_map
    from .imagekit import compute_feature_stack, read_image
    from .sepfilters import score_map_separable

    def run(path):
        img = read_image(path)
        fs = compute_feature_stack(img, model.normalization)
        if cfg.separable and model.separable is not None:
            smap = score_map_separable(model, model.separable, fs, cfg.jobs)
        else:
            smap = score_map(model, fs, cfg.jobs)
        kps = nonmax_suppress(smap, cfg.nms_radius)
        budget = budgets(img.shape[1], img.shape[0])
        return (select_keypoints(kps, budget) if budget else kps), img.shape[:2]

    return run


def _keypoint_dir_detector(kp_dir, seq_name, cfg, budgets):
    from .detector import read_keypoints
    from .imagekit import read_image

    def run(path):
        base = Path(kp_dir)
        for cand in (base / seq_name / f"{path.stem}.txt", base / f"{path.stem}.txt", base / seq_name / f"{path.name}.txt"):
            if cand.exists():
                kps = sorted(read_keypoints(cand), key=lambda k: (-k.score, k.y, k.x))
                break
        else:
            raise EvaluationError(f"no keypoint file for {path.name} in {kp_dir}")
        shape = read_image(path).shape[:2]
        budget = budgets(shape[1], shape[0])
        return (kps[:budget] if budget else kps), shape

    return run


def evaluate_sequence(dataset_dir, detector, cfg: EvalConfig = None, out_dir=None) -> Report:
    """Detect on every image and score the image pairs of every sequence.

    ``detector`` is a :class:`GhhModel`, a directory of keypoint files
    (``<stem>.txt``, optionally inside a per-sequence folder), or a callable
    mapping an image path to ``(keypoints, (h, w))``.
    """
    from .ghh import GhhModel

    cfg = cfg or EvalConfig()
    modes = MODES if cfg.mode == "both" else (cfg.mode,)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    budget_cache = {}

    def budgets(w, h):
        if cfg.budget == "2pct":
            if (w, h) not in budget_cache:
                budget_cache[(w, h)] = budget_for_random_rate(w, h, cfg.threshold_px, trials=cfg.trials, seed=cfg.seed)
            return budget_cache[(w, h)]
        return None if cfg.budget is None else int(cfg.budget)

    report = Report(config={k: v for k, v in asdict(cfg).items()})
    for seq_name, images in find_sequences(dataset_dir).items():
        if isinstance(detector, GhhModel):
            run = _model_detector(detector, cfg, budgets)
        elif callable(detector):
            run = detector
        else:
            run = _keypoint_dir_detector(detector, seq_name, cfg, budgets)
        pairs = sequence_pairs(images, cfg)
        with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
            detections = list(pool.map(run, images))
        scores = {m: [] for m in modes}
        for i, j, T in pairs:
            (ka, sa), (kb, sb) = detections[i], detections[j]
            for m in modes:
                if len(ka) == 0 or len(kb) == 0:
                    rs = RepeatabilityScore(0, 0, 0.0, cfg.threshold_px, max(len(ka), len(kb)), m)
                else:
                    rs = repeatability(ka, kb, T, cfg.threshold_px, m, sa, sb, cfg.margin)
                scores[m].append(rs.score)
                report.rows.append({
                    "sequence": seq_name,
                    "pair": f"{images[i].stem}-{images[j].stem}",
                    "mode": m,
                    "score": rs.score,
                    "budget": max(len(ka), len(kb)),
                    "matched": rs.matched,
                    "evaluated": rs.evaluated,
                })
        report.summary[seq_name] = {
            m: {"mean": float(np.mean(v)) if v else math.nan, "std": float(np.std(v)) if v else math.nan, "pairs": len(v)}
            for m, v in scores.items()
        }
    if out_dir is not None:
        report.write(out_dir)
    return report
