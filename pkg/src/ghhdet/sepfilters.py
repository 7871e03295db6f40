"""Separable approximation of a learned filter bank.

Each channel gets its own shared dictionary of rank-1 filters ``col row^T``;
every original filter of that channel is a linear combination of them. Dense
scoring then needs only two 1D passes per dictionary atom.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .ghh import GhhModel, ScoreMap, _row_blocks
from .imagekit import DimensionError, FeatureStack

log = logging.getLogger(__name__)

MAX_ROUNDS = 100
ROUND_TOL = 1e-6


class BankMismatch(ValueError):
    """The separable bank was built from a different model."""


@dataclass
class SeparableBank:
    """Per-channel rank-1 dictionaries and mixing coefficients.

    ``rows[c]`` and ``cols[c]`` are ``(S_c, P)``; the atom ``s`` of channel
    ``c`` is ``outer(cols[c][s], rows[c][s])``. ``coefficients[c]`` is
    ``(N, M, S_c)``. ``errors`` holds the Frobenius reconstruction error of
    every original filter, shape ``(N, M, C)``.
    """

    S: int
    rows: list
    cols: list
    coefficients: list
    errors: np.ndarray
    model_fingerprint: str = None

    @property
    def n_channels(self):
        return len(self.rows)

    @property
    def total_error(self):
        return float(np.sqrt(np.sum(self.errors**2)))

    def atoms(self, c):
        return np.einsum("si,sj->sij", self.cols[c], self.rows[c])

    def reconstruct(self):
        """Approximated filters, shape ``(N, M, C, P, P)``."""
        return np.stack([np.tensordot(self.coefficients[c], self.atoms(c), axes=1) for c in range(self.n_channels)], axis=2)

    def to_dict(self):
        return {
            "S": self.S,
            "model_fingerprint": self.model_fingerprint,
            "per_channel": [
                {"filters": [{"row": r.tolist(), "col": k.tolist()} for r, k in zip(self.rows[c], self.cols[c])]}
                for c in range(self.n_channels)
            ],
            "coefficients": [self.coefficients[c].tolist() for c in range(self.n_channels)],
            "errors": self.errors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        rows, cols, coefs = [], [], []
        for c, ch in enumerate(doc["per_channel"]):
            rows.append(np.array([f["row"] for f in ch["filters"]], dtype=np.float64))
            cols.append(np.array([f["col"] for f in ch["filters"]], dtype=np.float64))
            coefs.append(np.array(doc["coefficients"][c], dtype=np.float64))
            if coefs[-1].shape[-1] != len(ch["filters"]):
                raise DimensionError(f"channel {c}: coefficient count does not match the number of atoms")
        return cls(int(doc["S"]), rows, cols, coefs, np.array(doc["errors"], dtype=np.float64), doc.get("model_fingerprint"))


def _numerical_rank(f, tol=1e-12):
    sv = np.linalg.svd(f, compute_uv=False)
    return int(np.sum(sv > tol * max(sv[0], 1e-300))) if sv.size else 0


def _exact_dictionary(filters):
    # every significant SVD term of every filter, each used by its own filter only
    cols, rows, owner, weight = [], [], [], []
    for l, f in enumerate(filters):
        u, s, vt = np.linalg.svd(f)
        keep = s > 1e-12 * max(s[0], 1e-300)
        for j in np.nonzero(keep)[0]:
            cols.append(u[:, j])
            rows.append(vt[j])
            owner.append(l)
            weight.append(s[j])
    S = len(cols)
    coef = np.zeros((len(filters), S))
    coef[owner, np.arange(S)] = weight
    p = filters.shape[-1]
    return np.array(cols).reshape(S, p), np.array(rows).reshape(S, p), coef


def _fit_coefficients(filters, cols, rows):
    atoms = np.einsum("si,sj->sij", cols, rows).reshape(len(cols), -1)
    coef, *_ = np.linalg.lstsq(atoms.T, filters.reshape(len(filters), -1).T, rcond=None)
    return coef.T


def _residual(filters, cols, rows, coef):
    return filters - np.tensordot(coef, np.einsum("si,sj->sij", cols, rows), axes=1)


def _sq_error(res):
    return math.fsum((res * res).ravel())


def _learn_dictionary(filters, S):
    """Grow a shared rank-1 dictionary atom by atom with alternating refinement."""
    L, p, _ = filters.shape
    cols = np.zeros((0, p))
    rows = np.zeros((0, p))
    coef = np.zeros((L, 0))
    res = filters.copy()
    for s in range(S):
        # new atom: leading singular vectors of the stacked residuals
        u = np.linalg.svd(np.concatenate(list(res), axis=1), full_matrices=False)[0][:, 0]
        v = np.linalg.svd(np.concatenate(list(res), axis=0), full_matrices=False)[2][0]
        cols = np.vstack([cols, u])
        rows = np.vstack([rows, v])
        coef = _fit_coefficients(filters, cols, rows)
        res = _residual(filters, cols, rows, coef)
        err = _sq_error(res)
        for _ in range(MAX_ROUNDS):
            for j in range(s + 1):
                a = coef[:, j]
                energy = a @ a
                if energy <= 0:
                    continue
                # residual without atom j, then the best rank-1 fit to its a-weighted sum
                res += a[:, None, None] * np.outer(cols[j], rows[j])
                uu, ss, vvt = np.linalg.svd(np.tensordot(a, res, axes=1))
                cols[j], rows[j] = uu[:, 0], vvt[0]
                coef[:, j] = a * (ss[0] / energy)
                res -= coef[:, j, None, None] * np.outer(cols[j], rows[j])
            coef = _fit_coefficients(filters, cols, rows)
            res = _residual(filters, cols, rows, coef)
            new_err = _sq_error(res)
            improved = err - new_err
            err = min(err, new_err)
            if improved <= ROUND_TOL * max(err, 1e-300):
                break
    return cols, rows, coef


def approximate_separable(model: GhhModel, S: int) -> SeparableBank:
    """Approximate every ``(n, m, c)`` filter with ``S`` shared separable filters per channel.

    When ``S`` reaches the total rank of a channel's filters the SVD terms
    are used directly and the reconstruction is exact.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    n, m, c, p, _ = model.weights.shape
    limit = p * n * m
    if S > limit:
        warnings.warn(f"S={S} exceeds patch_size*N*M={limit}; clamped", RuntimeWarning, stacklevel=2)
        S = limit
    rows, cols, coefs = [], [], []
    errors = np.zeros((n, m, c))
    for ch in range(c):
        filters = np.array(model.weights[:, :, ch]).reshape(n * m, p, p)
        total_rank = sum(_numerical_rank(f) for f in filters)
        if S >= total_rank:
            col, row, coef = _exact_dictionary(filters)
        else:
            col, row, coef = _learn_dictionary(filters, S)
        res = _residual(filters, col, row, coef)
        errors[:, :, ch] = np.sqrt(np.sum(res * res, axis=(1, 2))).reshape(n, m)
        rows.append(row)
        cols.append(col)
        coefs.append(coef.reshape(n, m, -1))
        log.debug("channel %d: %d atoms, error %.3g", ch, len(row), np.sqrt(_sq_error(res)))
    return SeparableBank(S, rows, cols, coefs, errors, model.fingerprint())


def _separable_basis(ch, rows, cols):
    """Replicate-border correlation of one channel with every atom ``cols[s] @ rows[s].T``.

    All column passes share one matrix product over the stacked row windows;
    each row pass is a single 1D correlation.
    """
    r = cols.shape[1] // 2
    h = ch.shape[0]
    padded = np.pad(ch, ((r, r), (0, 0)), mode="edge")
    windows = np.stack([padded[i : i + h] for i in range(cols.shape[1])])
    tmp = np.tensordot(cols, windows, axes=1)
    for s in range(len(rows)):
        tmp[s] = ndimage.correlate1d(tmp[s], rows[s], axis=1, mode="nearest")
    return tmp


def _separable_rows(model, bank, data, r0, r1):
    rad = model.radius
    h = data.shape[1]
    s0, s1 = max(0, r0 - rad), min(h, r1 + rad)
    slab = data[:, s0:s1]
    n, m = model.biases.shape
    resp = np.broadcast_to(model.biases[:, :, None, None], (n, m) + slab.shape[1:]).copy()
    for c in range(model.n_channels):
        if len(bank.rows[c]) == 0:
            continue
        basis = _separable_basis(slab[c], bank.rows[c], bank.cols[c])
        resp += np.tensordot(bank.coefficients[c], basis, axes=1)
    total = np.einsum("n,nhw->hw", model.delta, resp.max(axis=1))
    return total[r0 - s0 : r0 - s0 + (r1 - r0)]


def score_map_separable(model: GhhModel, bank: SeparableBank, fs, jobs: int = 1) -> ScoreMap:
    """Dense scoring with the separable approximation of the model's filters."""
    if bank.model_fingerprint is not None and bank.model_fingerprint != model.fingerprint():
        raise BankMismatch("separable bank was built from a different model")
    data = fs.data if isinstance(fs, FeatureStack) else np.asarray(fs, dtype=np.float64)
    if data.shape[0] != model.n_channels or bank.n_channels != model.n_channels:
        raise DimensionError(f"feature stack has {data.shape[0]} channels, model expects {model.n_channels}")
    h, w = data.shape[1:]
    if h < model.patch_size or w < model.patch_size:
        raise DimensionError(f"{w}x{h} image is smaller than the {model.patch_size}px patch")
    blocks = _row_blocks(h, jobs)
    if len(blocks) == 1:
        scores = _separable_rows(model, bank, data, 0, h)
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(lambda b: _separable_rows(model, bank, data, *b), blocks))
        scores = np.concatenate(parts, axis=0)
    return ScoreMap(scores, model.radius)
