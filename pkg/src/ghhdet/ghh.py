"""Generalized Hinging Hyperplanes regressor.

F(x) = sum_n delta_n * max_m (<w_nm, x> + b_nm)

Each w_nm is a bank of per-channel square filters, so dense evaluation over an
image is a set of correlations followed by pixelwise maxima.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .imagekit import DimensionError, FeatureStack, correlate_same, identity_normalization

MODEL_VERSION = 1


@dataclass(frozen=True)
class GhhModel:
    """N components of M hyperplanes over ``C``-channel ``P x P`` patches.

    ``weights`` has shape ``(N, M, C, P, P)``, ``biases`` ``(N, M)`` and
    ``delta`` ``(N,)`` with entries in {-1, +1}. ``separable`` optionally
    carries a :class:`~ghhdet.sepfilters.SeparableBank` built from this model.
    """

    weights: np.ndarray
    biases: np.ndarray
    delta: np.ndarray
    normalization: np.ndarray = None
    separable: object = field(default=None, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 5 or w.shape[3] != w.shape[4] or w.shape[3] % 2 == 0:
            raise DimensionError(f"weights must be (N, M, C, P, P) with odd P, got {w.shape}")
        n, m = w.shape[:2]
        if n < 1 or m < 1:
            raise ValueError("a model needs N >= 1 and M >= 1")
        b = np.array(self.biases, dtype=np.float64)
        if b.shape != (n, m):
            raise DimensionError(f"biases must be {(n, m)}, got {b.shape}")
        d = np.array(self.delta, dtype=np.float64)
        if d.shape != (n,) or not np.all(np.abs(d) == 1):
            raise ValueError(f"delta must hold {n} entries in {{-1, +1}}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        norm = identity_normalization(w.shape[2]) if self.normalization is None else self.normalization
        norm = np.array(norm, dtype=np.float64)
        if norm.shape != (w.shape[2], 2):
            raise DimensionError(f"normalization must be ({w.shape[2]}, 2), got {norm.shape}")
        for name, val in (("weights", w), ("biases", b), ("delta", d), ("normalization", norm)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def n_hyperplanes(self):
        return self.weights.shape[1]

    @property
    def n_channels(self):
        return self.weights.shape[2]

    @property
    def patch_size(self):
        return self.weights.shape[3]

    @property
    def radius(self):
        return self.patch_size // 2

    @property
    def n_filters(self):
        """Number of 2D spatial filters (N * M * C)."""
        return int(np.prod(self.weights.shape[:3]))

    def flat_weights(self):
        n, m = self.weights.shape[:2]
        return self.weights.reshape(n, m, -1)

    def fingerprint(self):
        """Hash of the stored parameters, used to tie derived artefacts to a model."""
        h = hashlib.sha256()
        for arr in (self.weights, self.biases, self.delta):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class ScoreMap:
    """Dense regressor responses; the outer ``border`` pixels are not valid."""

    scores: np.ndarray
    border: int

    @property
    def height(self):
        return self.scores.shape[0]

    @property
    def width(self):
        return self.scores.shape[1]

    def interior_mask(self):
        mask = np.zeros(self.scores.shape, dtype=bool)
        b = self.border
        mask[b : self.height - b, b : self.width - b] = True
        return mask


def _check_patch(model, patch):
    patch = np.asarray(patch, dtype=np.float64)
    expect = model.weights.shape[2:]
    if patch.shape != expect:
        raise DimensionError(f"patch shape {patch.shape} does not match model {expect}")
    return patch


def hyperplane_responses(model: GhhModel, patch) -> np.ndarray:
    """``(N, M)`` array of ``<w_nm, x> + b_nm``."""
    patch = _check_patch(model, patch)
    return model.flat_weights() @ patch.ravel() + model.biases


def score_patch(model: GhhModel, patch) -> float:
    resp = hyperplane_responses(model, patch)
    return float(np.dot(model.delta, resp.max(axis=1)))


def active_index(model: GhhModel, patch, n: int) -> int:
    """Index of the maximal hyperplane of component ``n``; ties go to the lowest index."""
    resp = hyperplane_responses(model, patch)
    return int(np.argmax(resp[n]))


def _score_rows(model, data, r0, r1):
    # rows [r0, r1) of the score map, computed from a slab with a margin
    rad = model.radius
    h = data.shape[1]
    s0, s1 = max(0, r0 - rad), min(h, r1 + rad)
    slab = data[:, s0:s1]
    n_comp, n_hyp, n_ch = model.weights.shape[:3]
    total = np.zeros((s1 - s0, data.shape[2]))
    for n in range(n_comp):
        best = None
        for m in range(n_hyp):
            resp = np.full(total.shape, model.biases[n, m])
            for c in range(n_ch):
                resp += correlate_same(slab[c], model.weights[n, m, c])
            best = resp if best is None else np.maximum(best, resp)
        total += model.delta[n] * best
    return total[r0 - s0 : r0 - s0 + (r1 - r0)]


def score_map(model: GhhModel, fs, jobs: int = 1) -> ScoreMap:
    """Dense evaluation by per-channel correlations and pixelwise maxima.

    Interior pixels equal :func:`score_patch` on the patch centred there; rows
    may be split across ``jobs`` threads without changing the result.
    """
    data = fs.data if isinstance(fs, FeatureStack) else np.asarray(fs, dtype=np.float64)
    if data.shape[0] != model.n_channels:
        raise DimensionError(f"feature stack has {data.shape[0]} channels, model expects {model.n_channels}")
    h, w = data.shape[1:]
    if h < model.patch_size or w < model.patch_size:
        raise DimensionError(f"{w}x{h} image is smaller than the {model.patch_size}px patch")
    blocks = _row_blocks(h, jobs)
    if len(blocks) == 1:
        scores = _score_rows(model, data, 0, h)
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(lambda b: _score_rows(model, data, *b), blocks))
        scores = np.concatenate(parts, axis=0)
    return ScoreMap(scores, model.radius)


def _row_blocks(h, jobs):
    jobs = max(1, min(int(jobs), h))
    edges = np.linspace(0, h, jobs + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def load_schema(name="model.schema.json"):
    return json.loads(resources.files("ghhdet.schemas").joinpath(name).read_text())


def model_to_dict(model: GhhModel, extra=None) -> dict:
    n, m, c = model.weights.shape[:3]
    doc = {
        "version": MODEL_VERSION,
        "N": n,
        "M": m,
        "patch_size": model.patch_size,
        "n_channels": c,
        "delta": [int(v) for v in model.delta],
        "normalization": [{"mean": float(a), "scale": float(s)} for a, s in model.normalization],
        "filters": [
            [
                {
                    "bias": float(model.biases[i, j]),
                    "channels": [model.weights[i, j, k].ravel().tolist() for k in range(c)],
                }
                for j in range(m)
            ]
            for i in range(n)
        ],
    }
    if model.separable is not None:
        doc["separable"] = model.separable.to_dict()
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc: dict, validate=True) -> GhhModel:
    if validate:
        import jsonschema

        jsonschema.validate(doc, load_schema())
    if doc["version"] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc['version']}")
    n, m, p = doc["N"], doc["M"], doc["patch_size"]
    c = doc.get("n_channels", 6)
    weights = np.empty((n, m, c, p, p))
    biases = np.empty((n, m))
    if len(doc["filters"]) != n or any(len(row) != m for row in doc["filters"]):
        raise DimensionError("filter table does not match N x M")
    for i, row in enumerate(doc["filters"]):
        for j, hp in enumerate(row):
            biases[i, j] = hp["bias"]
            if len(hp["channels"]) != c:
                raise DimensionError(f"hyperplane ({i}, {j}) has {len(hp['channels'])} channels, expected {c}")
            for k, taps in enumerate(hp["channels"]):
                if len(taps) != p * p:
                    raise DimensionError(f"hyperplane ({i}, {j}) channel {k} has {len(taps)} taps")
                weights[i, j, k] = np.asarray(taps, dtype=np.float64).reshape(p, p)
    norm = np.array([[e["mean"], e["scale"]] for e in doc["normalization"]], dtype=np.float64)
    model = GhhModel(weights, biases, np.asarray(doc["delta"], dtype=np.float64), norm)
    if "separable" in doc:
        from .sepfilters import SeparableBank

        model = replace(model, separable=SeparableBank.from_dict(doc["separable"]))
    return model


def save_model(model: GhhModel, path, extra=None) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, extra), fh)
        fh.write("\n")


def load_model(path) -> GhhModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
