"""Training the hinging-hyperplanes detector.

The objective is the sum of three terms:

* classification: ``gamma_c * sum ||w||^2 + 1/K * sum max(0, 1 - y F(x))^2``
* shape: for positives, the response map of every active hyperplane should be
  proportional to a peaked template ``h``; evaluated in the Fourier domain with
  a quadratic form averaged over the positives
* temporal: ``gamma_t / K * sum_i sum_{j in N_i} (F(x_i) - F(x_j))^2``

Training grows the model one hyperplane at a time and polishes each with a
trust-region Newton method, then runs refinement sweeps over all hyperplanes.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .ghh import GhhModel
from .trainset import TrainingSet, data_rank, fit_pca

log = logging.getLogger(__name__)


class Gradient(NamedTuple):
    weights: np.ndarray
    biases: np.ndarray


class StaleShapeQuadratic(RuntimeError):
    """The occupancy counts were computed for a different model."""


class NumericalFailure(FloatingPointError):
    """Objective or step became non-finite."""


# ---------------------------------------------------------------------------
# Shape template and real-DFT coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapeTemplate:
    """Peaked target ``h(x, y) = exp(alpha * (1 - r / beta)) - 1`` on a ``size x size`` grid.

    ``values`` is centred on the patch; ``H`` is the (unnormalised) 2D DFT of
    the template with its centre moved to index ``(0, 0)``.
    """

    alpha: float
    beta: float
    size: int
    values: np.ndarray
    H: np.ndarray

    @property
    def shifted(self):
        return np.fft.ifftshift(self.values)


def shape_template(alpha: float, beta: float, size: int) -> ShapeTemplate:
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    if size < 1 or size % 2 == 0:
        raise ValueError("template size must be odd")
    r = size // 2
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    vals = np.exp(alpha * (1.0 - np.sqrt(xx * xx + yy * yy) / beta)) - 1.0
    return ShapeTemplate(float(alpha), float(beta), size, vals, np.fft.fft2(np.fft.ifftshift(vals)))


class RealDft:
    """Orthogonal map between real ``P x P`` arrays and real-DFT coordinates.

    With ``V = conj(fft2(w)) / P`` (a unitary transform), the coordinates are
    the real self-conjugate coefficients followed by ``sqrt(2) * Re`` and
    ``sqrt(2) * Im`` of one representative of every conjugate pair.
    """

    def __init__(self, p: int):
        self.p = p
        n = p * p
        self.n = n
        ky, kx = np.divmod(np.arange(n), p)
        conj = ((-ky) % p) * p + ((-kx) % p)
        idx = np.arange(n)
        self.self_idx = idx[conj == idx]
        self.rep = idx[idx < conj]
        self.partner = conj[self.rep]
        ns, nr = len(self.self_idx), len(self.rep)
        # coordinate j -> V[i1] += c1 * om_j ; V[i2] += c2 * om_j
        s2 = 1.0 / math.sqrt(2.0)
        self.i1 = np.concatenate([self.self_idx, self.rep, self.rep])
        self.i2 = np.concatenate([self.self_idx, self.partner, self.partner])
        self.c1 = np.concatenate([np.ones(ns), np.full(nr, s2), np.full(nr, 1j * s2)]).astype(complex)
        self.c2 = np.concatenate([np.zeros(ns), np.full(nr, s2), np.full(nr, -1j * s2)]).astype(complex)

    def spectrum(self, w):
        """Unitary conjugate spectrum ``V`` with shape ``(..., n)``."""
        w = np.asarray(w, dtype=np.float64)
        return (np.conj(np.fft.fft2(w)) / self.p).reshape(*w.shape[:-2], self.n)

    def forward(self, w):
        v = self.spectrum(w)
        r2 = math.sqrt(2.0)
        return np.concatenate([v[..., self.self_idx].real, r2 * v[..., self.rep].real, r2 * v[..., self.rep].imag], axis=-1)

    def inverse(self, om):
        om = np.asarray(om, dtype=np.float64)
        ns, nr = len(self.self_idx), len(self.rep)
        v = np.zeros(om.shape[:-1] + (self.n,), dtype=complex)
        v[..., self.self_idx] = om[..., :ns]
        vr = (om[..., ns : ns + nr] + 1j * om[..., ns + nr :]) / math.sqrt(2.0)
        v[..., self.rep] = vr
        v[..., self.partner] = np.conj(vr)
        v = v.reshape(om.shape[:-1] + (self.p, self.p))
        return np.real(np.fft.ifft2(np.conj(v))) * self.p


def _multi_forward(rdft, w):
    # (..., C, P, P) -> (..., C * n)
    om = rdft.forward(w)
    return om.reshape(*om.shape[:-2], -1)


def _multi_inverse(rdft, om, n_channels):
    om = np.asarray(om)
    return rdft.inverse(om.reshape(*om.shape[:-1], n_channels, rdft.n))


# ---------------------------------------------------------------------------
# Shape quadratic
# ---------------------------------------------------------------------------


@dataclass
class ShapeQuadratic:
    """Mean over positives of ``S_i^T S_i`` in real-DFT coordinates.

    ``q`` is a ``(C*n, C*n)`` symmetric PSD matrix; coordinates are grouped by
    channel, so ``channel_block(c, c)`` is the per-channel part. ``occupancy``
    holds ``K_nm``, the number of positives whose active hyperplane in
    component ``n`` is ``m`` under the model with ``model_fingerprint``.
    """

    template: ShapeTemplate
    q: np.ndarray
    positives: np.ndarray
    spectra: np.ndarray
    occupancy: np.ndarray = None
    model_fingerprint: str = None
    version: int = 0

    @property
    def n_positives(self):
        return self.positives.shape[0]

    @property
    def n_channels(self):
        return self.positives.shape[1]

    @property
    def rdft(self):
        return RealDft(self.positives.shape[-1])

    def channel_block(self, c, c2=None):
        n = self.positives.shape[-1] ** 2
        c2 = c if c2 is None else c2
        return self.q[c * n : (c + 1) * n, c2 * n : (c2 + 1) * n]

    def refresh(self, model: GhhModel):
        """Recompute ``K_nm`` for ``model``; bumps ``version`` when the counts change."""
        occ = occupancy(model, self.positives)
        if self.occupancy is None or not np.array_equal(occ, self.occupancy):
            self.version += 1
        self.occupancy = occ
        self.model_fingerprint = model.fingerprint()
        return self


def occupancy(model: GhhModel, positives) -> np.ndarray:
    """``K_nm``: how many positive patches activate hyperplane ``m`` of component ``n``."""
    x = np.asarray(positives).reshape(len(positives), -1)
    resp = np.einsum("nmd,kd->knm", model.flat_weights(), x) + model.biases
    eta = np.argmax(resp, axis=2)
    occ = np.zeros(model.biases.shape, dtype=np.int64)
    for n in range(model.n_components):
        occ[n] = np.bincount(eta[:, n], minlength=model.n_hyperplanes)
    return occ


def _shape_projector_terms(tmpl):
    # G = G'^H G' with G' = I - H 1^T / n
    H = tmpl.H.ravel()
    n = H.size
    G = -H[:, None] / n - np.conj(H)[None, :] / n + np.vdot(H, H).real / n**2
    G[np.diag_indices(n)] += 1.0
    return G


def precompute_shape_quadratic(positives, tmpl: ShapeTemplate, model: GhhModel = None) -> ShapeQuadratic:
    """Average ``S_i^T S_i`` over the positive patches, in real-DFT coordinates.

    ``positives`` is ``(K_p, C, P, P)``. For each positive, ``S_i`` maps the
    conjugate filter spectrum to the spectrum of ``response - centre * h``;
    with ``G' = I - H 1^T / n`` that is ``G' [diag(X_1) ... diag(X_C)]``.
    """
    pos = np.asarray(positives, dtype=np.float64)
    if pos.ndim != 4 or pos.shape[2] != pos.shape[3]:
        raise ValueError(f"positives must be (K_p, C, P, P), got {pos.shape}")
    kp, c, p, _ = pos.shape
    if p != tmpl.size:
        raise ValueError(f"template size {tmpl.size} does not match patch size {p}")
    rdft = RealDft(p)
    n = p * p
    spectra = np.fft.fft2(pos).reshape(kp, c, n)
    if kp == 0:
        warnings.warn("no positive samples: shape quadratic is zero", RuntimeWarning, stacklevel=2)
        q = np.zeros((c * n, c * n))
    else:
        xf = spectra.reshape(kp, c * n)
        M = (np.conj(xf).T @ xf) / kp
        G = _shape_projector_terms(tmpl)
        A = M * np.tile(G, (c, c))
        del M
        i1 = (np.arange(c)[:, None] * n + rdft.i1[None, :]).ravel()
        i2 = (np.arange(c)[:, None] * n + rdft.i2[None, :]).ravel()
        c1 = np.tile(rdft.c1, c)
        c2 = np.tile(rdft.c2, c)
        AE = A[:, i1] * c1 + A[:, i2] * c2
        del A
        q = (np.conj(c1)[:, None] * AE[i1, :] + np.conj(c2)[:, None] * AE[i2, :]).real
        del AE
        q = 0.5 * (q + q.T)
    sq = ShapeQuadratic(tmpl, q, pos, spectra)
    if model is not None:
        sq.refresh(model)
    return sq


def working_shape_matrix(sq: ShapeQuadratic, basis=None) -> np.ndarray:
    """The shape quadratic expressed on spatial taps (``basis`` None) or on PCA coordinates.

    ``basis`` is a row-orthonormal ``(d, C*P*P)`` matrix; the filter is ``basis.T @ v``.
    """
    c, p = sq.positives.shape[1], sq.positives.shape[-1]
    rdft = RealDft(p)
    if basis is None:
        basis = np.eye(c * p * p)
    b_om = _multi_forward(rdft, np.asarray(basis).reshape(-1, c, p, p))
    out = b_om @ sq.q @ b_om.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# Problem / state in working coordinates
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    gamma_c: float = 1e-3
    gamma_s: float = 1e-2
    gamma_t: float = 1e-2
    N: int = 4
    M: int = 4
    alpha: float = 1.0
    beta: float = None  # default (patch_size - 1) / 4
    pca_dim: int = 1024
    newton_iters: int = 10
    newton_tol: float = 1e-6
    cg_tol: float = 1e-6
    cg_max_iter: int = 100
    tr_radius: float = 1.0
    refine_sweeps: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.gamma_c, self.gamma_s, self.gamma_t) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.N < 1 or self.M < 1:
            raise ValueError("N and M must be at least 1")

    def template_for(self, patch_size):
        beta = self.beta if self.beta is not None else max((patch_size - 1) / 4.0, 0.5)
        return shape_template(self.alpha, beta, patch_size)


class _Problem:
    """Samples in working coordinates plus everything the losses need."""

    def __init__(self, Z, y, group, gamma_c, gamma_s, gamma_t, Q=None):
        self.Z = np.ascontiguousarray(Z, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.K = len(self.y)
        if self.K == 0:
            raise ValueError("empty training set")
        self.gamma_c, self.gamma_s, self.gamma_t = gamma_c, gamma_s, gamma_t
        self.pos = np.nonzero(self.y > 0)[0]
        self.Q = Q if (Q is not None and gamma_s > 0 and len(self.pos)) else None
        g = np.asarray(group if group is not None else np.full(self.K, -1))
        uniq, inv = np.unique(g, return_inverse=True)
        inv = inv.astype(np.int64)
        # groups with id < 0 are "no group"
        has = uniq[inv] >= 0
        self.gidx = np.where(has, inv, -1)
        self.n_groups = len(uniq)
        self.gsize = np.bincount(inv[has], minlength=len(uniq)).astype(np.float64)

    def temporal_parts(self, F):
        """Per-sample deviations from the group mean and group sizes (0 for ungrouped)."""
        has = self.gidx >= 0
        sums = np.bincount(self.gidx[has], weights=F[has], minlength=self.n_groups).astype(np.float64)
        mean = np.divide(sums, self.gsize, out=np.zeros_like(sums), where=self.gsize > 0)
        dev = np.where(has, F - mean[np.maximum(self.gidx, 0)], 0.0)
        size = np.where(has, self.gsize[np.maximum(self.gidx, 0)], 0.0)
        return dev, size

    def group_apply(self, u):
        """``L u`` with ``L = 4 (s I - 1 1^T)`` inside each group (the temporal Hessian in F)."""
        has = self.gidx >= 0
        sums = np.bincount(self.gidx[has], weights=u[has], minlength=self.n_groups).astype(np.float64)
        size = np.where(has, self.gsize[np.maximum(self.gidx, 0)], 0.0)
        return np.where(has, 4.0 * (size * u - sums[np.maximum(self.gidx, 0)]), 0.0)


@dataclass
class _State:
    V: np.ndarray  # (N, M, D)
    c: np.ndarray  # (N, M)
    delta: np.ndarray  # (N,)
    present: np.ndarray  # (N, M) bool
    R: np.ndarray = None  # (K, N, M) responses, -inf where absent
    qv: np.ndarray = None  # (N, M) v^T Q v

    def copy(self):
        return _State(self.V.copy(), self.c.copy(), self.delta.copy(), self.present.copy(),
                      None if self.R is None else self.R.copy(), None if self.qv is None else self.qv.copy())


def _init_cache(prob, st):
    R = np.einsum("kd,nmd->knm", prob.Z, st.V) + st.c[None]
    st.R = np.where(st.present[None], R, -np.inf)
    if prob.Q is not None:
        st.qv = np.einsum("nmd,de,nme->nm", st.V, prob.Q, st.V)
    else:
        st.qv = np.zeros(st.c.shape)
    return st


def _set_hyperplane(prob, st, n, m, v, c):
    st.V[n, m] = v
    st.c[n, m] = c
    st.present[n, m] = True
    st.R[:, n, m] = prob.Z @ v + c
    st.qv[n, m] = v @ prob.Q @ v if prob.Q is not None else 0.0


def _forward(st):
    """``F`` per sample and the active index per component (-1 if empty)."""
    R = st.R
    any_present = st.present.any(axis=1)
    eta = np.argmax(R, axis=2)
    eta[:, ~any_present] = -1
    cmax = np.max(R, axis=2)
    cmax[:, ~any_present] = 0.0
    F = cmax @ st.delta
    return F, eta


def _terms(prob, st):
    F, eta = _forward(st)
    xi = np.maximum(0.0, 1.0 - prob.y * F)
    reg = math.fsum((st.V[st.present] ** 2).ravel())
    lc = prob.gamma_c * reg + math.fsum(xi * xi) / prob.K
    lt = 0.0
    if prob.gamma_t > 0:
        dev, size = prob.temporal_parts(F)
        lt = prob.gamma_t / prob.K * math.fsum(2.0 * size * dev * dev)
    ls = 0.0
    if prob.Q is not None:
        occ = _occupancy_from_eta(eta[prob.pos], st.c.shape)
        ls = prob.gamma_s / len(prob.pos) * math.fsum((occ * st.qv).ravel())
    total = lc + ls + lt
    if not math.isfinite(total):
        raise NumericalFailure(f"objective is not finite (classification={lc}, shape={ls}, temporal={lt})")
    return {"classification": lc, "shape": ls, "temporal": lt, "objective": total}, F, eta


def _occupancy_from_eta(eta_pos, shape):
    occ = np.zeros(shape)
    for n in range(shape[0]):
        e = eta_pos[:, n]
        e = e[e >= 0]
        occ[n] = np.bincount(e, minlength=shape[1])
    return occ


def _dF_to_params(prob, st, dF, eta):
    # chain rule through the active hyperplanes
    gV = np.zeros_like(st.V)
    gc = np.zeros_like(st.c)
    for n in range(st.V.shape[0]):
        for m in range(st.V.shape[1]):
            mask = eta[:, n] == m
            if mask.any():
                w = dF[mask] * st.delta[n]
                gV[n, m] = w @ prob.Z[mask]
                gc[n, m] = w.sum()
    return gV, gc


def _classification_grad(prob, st, F, eta):
    xi = np.maximum(0.0, 1.0 - prob.y * F)
    dF = -2.0 / prob.K * prob.y * xi
    gV, gc = _dF_to_params(prob, st, dF, eta)
    gV += 2.0 * prob.gamma_c * np.where(st.present[..., None], st.V, 0.0)
    return gV, gc


def _temporal_grad(prob, st, F, eta):
    dev, size = prob.temporal_parts(F)
    dF = prob.gamma_t / prob.K * 4.0 * size * dev
    return _dF_to_params(prob, st, dF, eta)


def _shape_grad(prob, st, eta):
    if prob.Q is None:
        return np.zeros_like(st.V), np.zeros_like(st.c)
    occ = _occupancy_from_eta(eta[prob.pos], st.c.shape)
    gV = 2.0 * prob.gamma_s / len(prob.pos) * occ[..., None] * np.einsum("de,nme->nmd", prob.Q, st.V)
    return gV, np.zeros_like(st.c)


# ---------------------------------------------------------------------------
# Public losses on full-resolution models
# ---------------------------------------------------------------------------


def _problem_for(model, ts, gamma_c=0.0, gamma_s=0.0, gamma_t=0.0, Q=None):
    if ts.K == 0:
        raise ValueError("empty training set")
    if ts.patch_shape != model.weights.shape[2:]:
        raise ValueError(f"sample shape {ts.patch_shape} does not match model {model.weights.shape[2:]}")
    return _Problem(ts.flat, ts.labels, ts.group, gamma_c, gamma_s, gamma_t, Q)


def _state_for(model, prob):
    n, m = model.biases.shape
    st = _State(model.flat_weights().copy(), model.biases.copy(), model.delta.copy(), np.ones((n, m), dtype=bool))
    return _init_cache(prob, st)


def _as_gradient(model, gV, gc):
    return Gradient(gV.reshape(model.weights.shape), gc)


def loss_classification(model: GhhModel, ts: TrainingSet, gamma_c: float):
    """Squared-hinge loss plus ``gamma_c * sum ||w_nm||^2`` (biases and signs excluded)."""
    prob = _problem_for(model, ts, gamma_c=gamma_c)
    st = _state_for(model, prob)
    terms, F, eta = _terms(prob, st)
    gV, gc = _classification_grad(prob, st, F, eta)
    return terms["classification"], _as_gradient(model, gV, gc)


def loss_temporal(model: GhhModel, ts: TrainingSet, gamma_t: float):
    """Squared response differences between samples of the same location group."""
    prob = _problem_for(model, ts, gamma_t=gamma_t)
    st = _state_for(model, prob)
    terms, F, eta = _terms(prob, st)
    gV, gc = _temporal_grad(prob, st, F, eta)
    return terms["temporal"], _as_gradient(model, gV, gc)


def _circular_response(w, x):
    # r[u] = sum_{c,q} w[c, q] * x[c, q + u], indices modulo P
    p = w.shape[-1]
    r = np.zeros((p, p))
    for uy in range(p):
        for ux in range(p):
            r[uy, ux] = np.sum(w * np.roll(x, shift=(-uy, -ux), axis=(1, 2)))
    return r


def loss_shape_spatial(model: GhhModel, positives, tmpl: ShapeTemplate, gamma_s: float) -> float:
    """Direct evaluation of the shape term with circular responses.

    For every positive and component, the response map of the active
    hyperplane over all circular shifts of the patch is compared with the
    template scaled by its centre value ``<w, x>`` (bias excluded).
    """
    pos = np.asarray(positives, dtype=np.float64)
    if len(pos) == 0:
        warnings.warn("no positive samples: shape loss is zero", RuntimeWarning, stacklevel=2)
        return 0.0
    h = tmpl.shifted
    total = []
    for x in pos:
        resp = model.flat_weights() @ x.ravel() + model.biases
        for n in range(model.n_components):
            m = int(np.argmax(resp[n]))
            w = model.weights[n, m]
            r = _circular_response(w, x)
            s = float(np.sum(w * x))
            total.append(float(np.sum((r - s * h) ** 2)))
    return gamma_s / len(pos) * math.fsum(total)


def loss_shape_fourier(model: GhhModel, sq: ShapeQuadratic, gamma_s: float, exact: bool = False):
    """Shape term through the Fourier-domain quadratic.

    By default uses the mean quadratic weighted by ``K_nm``; ``exact=True``
    evaluates each positive with its own ``S_i`` instead.
    """
    if sq.model_fingerprint != model.fingerprint():
        raise StaleShapeQuadratic("shape quadratic occupancy is stale; call sq.refresh(model)")
    kp = sq.n_positives
    shape = model.weights.shape
    if kp == 0:
        return 0.0, Gradient(np.zeros(shape), np.zeros(shape[:2]))
    rdft = RealDft(model.patch_size)
    c = model.n_channels
    if not exact:
        om = _multi_forward(rdft, model.weights)  # (N, M, C*n)
        qom = np.einsum("de,nme->nmd", sq.q, om)
        vals = np.einsum("nmd,nmd->nm", om, qom)
        value = gamma_s / kp * math.fsum((sq.occupancy * vals).ravel())
        g_om = 2.0 * gamma_s / kp * sq.occupancy[..., None] * qom
        gW = _multi_inverse(rdft, g_om, c)
        return value, Gradient(gW, np.zeros(shape[:2]))

    H = sq.template.H.ravel()
    n_freq = H.size
    V = rdft.spectrum(model.weights)  # (N, M, C, n)
    x = sq.positives.reshape(kp, -1)
    resp = np.einsum("nmd,kd->knm", model.flat_weights(), x) + model.biases
    eta = np.argmax(resp, axis=2)
    vals = []
    gW = np.zeros(shape)
    for i in range(kp):
        X = sq.spectra[i]  # (C, n)
        for n in range(model.n_components):
            m = eta[i, n]
            y = np.sum(X * V[n, m], axis=0)
            z = y - H * y.sum() / n_freq
            vals.append(float(np.vdot(z, z).real))
            gz = z - np.vdot(H, z) / n_freq
            g = np.conj(X) * gz[None, :]
            gW[n, m] += 2.0 * np.real(np.fft.fft2(g.reshape(c, rdft.p, rdft.p))) / rdft.p
    return gamma_s / kp * math.fsum(vals), Gradient(gamma_s / kp * gW, np.zeros(shape[:2]))


def objective_terms(model: GhhModel, ts: TrainingSet, tmpl: ShapeTemplate, cfg: TrainConfig, sq=None) -> dict:
    """All three terms and their sum for a full-resolution model."""
    lc, _ = loss_classification(model, ts, cfg.gamma_c)
    lt, _ = loss_temporal(model, ts, cfg.gamma_t)
    ls = 0.0
    if cfg.gamma_s > 0 and ts.K_p > 0 and model.patch_size > 1:
        if sq is None:
            sq = precompute_shape_quadratic(ts.features[ts.labels > 0], tmpl)
        sq.refresh(model)
        ls, _ = loss_shape_fourier(model, sq, cfg.gamma_s)
    return {"classification": lc, "shape": ls, "temporal": lt, "objective": lc + ls + lt}


def total_objective(model: GhhModel, ts: TrainingSet, tmpl: ShapeTemplate, cfg: TrainConfig, sq=None) -> float:
    return objective_terms(model, ts, tmpl, cfg, sq)["objective"]


# ---------------------------------------------------------------------------
# Trust-region Newton on one hyperplane
# ---------------------------------------------------------------------------


def _steihaug_cg(g, hv, radius, tol, max_iter):
    """Approximately minimise ``g.s + s.H.s/2`` inside ``||s|| <= radius``."""
    s = np.zeros_like(g)
    r = -g
    d = r.copy()
    rr = r @ r
    if math.sqrt(rr) <= tol:
        return s, False
    for _ in range(max_iter):
        hd = hv(d)
        dhd = d @ hd
        if dhd <= 1e-16 * (d @ d):
            return s + _to_boundary(s, d, radius) * d, True
        alpha = rr / dhd
        s_next = s + alpha * d
        if np.linalg.norm(s_next) >= radius:
            return s + _to_boundary(s, d, radius) * d, True
        s = s_next
        r = r - alpha * hd
        rr_next = r @ r
        if math.sqrt(rr_next) <= tol:
            return s, False
        d = r + (rr_next / rr) * d
        rr = rr_next
    return s, False


def _to_boundary(s, d, radius):
    # positive tau with ||s + tau d|| = radius
    a = d @ d
    b = 2.0 * (s @ d)
    c = s @ s - radius * radius
    return (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)


def _hyperplane_derivatives(prob, st, n, m, F, eta):
    """Gradient and Hessian-vector product in ``(v, c)`` with active sets frozen."""
    active = np.nonzero(eta[:, n] == m)[0]
    a = st.delta[n]
    Za = prob.Z[active]
    K = prob.K
    xi = np.maximum(0.0, 1.0 - prob.y * F)
    dF = -2.0 / K * prob.y * xi
    if prob.gamma_t > 0:
        dev, size = prob.temporal_parts(F)
        dF = dF + prob.gamma_t / K * 4.0 * size * dev
    v = st.V[n, m]
    wa = a * dF[active]
    gv = wa @ Za + 2.0 * prob.gamma_c * v
    gc = wa.sum()
    shape_coef = 0.0
    if prob.Q is not None:
        shape_coef = 2.0 * prob.gamma_s / len(prob.pos) * np.sum(eta[prob.pos, n] == m)
        gv = gv + shape_coef * (prob.Q @ v)
    hinge = (xi[active] > 0).astype(float)
    in_group = np.zeros(K, dtype=bool)
    in_group[active] = True

    def hv(s):
        sv, sc = s[:-1], s[-1]
        u = a * (Za @ sv + sc)  # change of F on active samples
        out_f = 2.0 / K * hinge * u * a
        if prob.gamma_t > 0:
            full = np.zeros(K)
            full[active] = u
            out_f = out_f + prob.gamma_t / K * prob.group_apply(full)[active] * a
        hv_v = out_f @ Za + 2.0 * prob.gamma_c * sv
        if shape_coef:
            hv_v = hv_v + shape_coef * (prob.Q @ sv)
        return np.append(hv_v, out_f.sum())

    return np.append(gv, gc), hv


def _refine_hyperplane(prob, st, n, m, cfg, f0=None):
    """Trust-region Newton on hyperplane ``(n, m)``; returns ``(state, objective, iterations)``."""
    terms, F, eta = _terms(prob, st)
    f = terms["objective"] if f0 is None else f0
    radius = cfg.tr_radius
    g0 = None
    it = 0
    for it in range(1, cfg.newton_iters + 1):
        g, hv = _hyperplane_derivatives(prob, st, n, m, F, eta)
        gn = np.linalg.norm(g)
        if g0 is None:
            g0 = gn
        if gn <= cfg.newton_tol * max(g0, 1.0) or gn == 0.0:
            break
        accepted = False
        while radius > 1e-10:
            s, _ = _steihaug_cg(g, hv, radius, cfg.cg_tol * gn, cfg.cg_max_iter)
            pred = -(g @ s + 0.5 * s @ hv(s))
            trial = st.copy()
            _set_hyperplane(prob, trial, n, m, st.V[n, m] + s[:-1], st.c[n, m] + s[-1])
            t_terms, t_F, t_eta = _terms(prob, trial)
            actual = f - t_terms["objective"]
            rho = actual / pred if pred > 0 else -1.0
            snorm = np.linalg.norm(s)
            if actual > 0 and rho > 1e-4:
                st, f, F, eta = trial, t_terms["objective"], t_F, t_eta
                if rho > 0.75 and snorm >= 0.99 * radius:
                    radius *= 2.0
                elif rho < 0.25:
                    radius *= 0.25
                accepted = True
                break
            radius = min(radius, snorm) * 0.25
        if not accepted:
            break
        if abs(actual) <= 1e-12 * max(abs(f), 1.0):
            break
    return st, f, it


def newton_refine(model: GhhModel, index, ts: TrainingSet, tmpl: ShapeTemplate, cfg: TrainConfig) -> GhhModel:
    """Polish hyperplane ``index = (n, m)`` and its bias, keeping all others fixed.

    Steps are accepted only when the true objective decreases.
    """
    n, m = index
    if not (0 <= n < model.n_components and 0 <= m < model.n_hyperplanes):
        raise IndexError(f"hyperplane index {index} out of range")
    Q = None
    if cfg.gamma_s > 0 and ts.K_p > 0 and model.patch_size > 1:
        sq = precompute_shape_quadratic(ts.features[ts.labels > 0], tmpl)
        Q = working_shape_matrix(sq)
    prob = _problem_for(model, ts, cfg.gamma_c, cfg.gamma_s, cfg.gamma_t, Q)
    st = _state_for(model, prob)
    st, _, _ = _refine_hyperplane(prob, st, n, m, cfg)
    return GhhModel(st.V.reshape(model.weights.shape), st.c, st.delta, model.normalization)


# ---------------------------------------------------------------------------
# Greedy training
# ---------------------------------------------------------------------------


def _ridge_residual_fit(prob, F, lam):
    """Regularised fit of ``r_i = y_i * max(0, 1 - y_i F_i)``; the offset is not penalised.

    Besides the ridge term ``lam``, the shape quadratic enters with weight
    ``gamma_s`` (its value if every positive activated the new hyperplane), so
    the fitted direction does not trade a small hinge gain for a large shape
    penalty.
    """
    r = prob.y * np.maximum(0.0, 1.0 - prob.y * F)
    K, D = prob.Z.shape
    A = np.empty((D + 1, D + 1))
    A[:D, :D] = prob.Z.T @ prob.Z / K
    colsum = prob.Z.sum(axis=0) / K
    A[:D, D] = A[D, :D] = colsum
    A[D, D] = 1.0
    A[np.arange(D), np.arange(D)] += lam
    if prob.Q is not None:
        A[:D, :D] += prob.gamma_s * prob.Q
    rhs = np.append(prob.Z.T @ r / K, r.mean())
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return sol[:-1], sol[-1]


_LADDER = tuple(2.0 ** -k for k in range(-1, 11))
_ACTIVE_FRACTIONS = (0.02, 0.05, 0.1, 0.2, 0.35, 0.5)


def _add_hyperplane(prob, st, n, m, cfg, f_now):
    """Insert hyperplane ``(n, m)`` from a residual fit; returns the best state and objective."""
    F, _ = _forward(st)
    u, cu = _ridge_residual_fit(prob, F, max(cfg.gamma_c, 1e-12))
    opening = not st.present[n].any()
    candidates = []
    if opening:
        for sign in (1.0, -1.0):
            best = None
            for s in _LADDER + (0.0,):
                trial = st.copy()
                trial.delta[n] = sign
                _set_hyperplane(prob, trial, n, m, sign * s * u, sign * s * cu)
                val = _terms(prob, trial)[0]["objective"]
                if best is None or val < best[1]:
                    best = (trial, val)
            trial, val = best
            trial, val, _ = _refine_hyperplane(prob, trial, n, m, cfg, val)
            candidates.append((val, sign, trial))
        # ties keep +1
        candidates.sort(key=lambda t: (t[0], -t[1]))
        return candidates[0][2], candidates[0][0]

    # a fresh plane along the residual fit, lifted so that it wins on a fraction q of the samples
    sign = st.delta[n]
    gain = sign * (prob.Z @ u + cu)
    current = np.max(np.where(st.present[n][None], st.R[:, n], -np.inf), axis=1)
    best = None
    for s in _LADDER:
        for q in _ACTIVE_FRACTIONS:
            lift = np.quantile(current - s * gain, 1.0 - q)
            trial = st.copy()
            _set_hyperplane(prob, trial, n, m, sign * s * u, sign * s * cu + lift)
            val = _terms(prob, trial)[0]["objective"]
            if best is None or val < best[1]:
                best = (trial, val)
    # an inactive hyperplane (below every sample) leaves the objective unchanged
    trial = st.copy()
    _set_hyperplane(prob, trial, n, m, np.zeros_like(u), np.min(current) - 1.0)
    val = _terms(prob, trial)[0]["objective"]
    if val < best[1]:
        best = (trial, val)
    trial, val = best
    trial, val, _ = _refine_hyperplane(prob, trial, n, m, cfg, val)
    if val >= f_now:
        log.warning("adding hyperplane (%d, %d) did not lower the objective", n, m)
    return trial, val


def train_greedy(ts: TrainingSet, cfg: TrainConfig = None, tmpl: ShapeTemplate = None, trace=None) -> GhhModel:
    """Grow ``N * M`` hyperplanes greedily, then refine them in random order.

    Hyperplanes are added component-first (all components receive their first
    hyperplane before any gets a second). Returns the full-resolution model.
    When ``trace`` is a list, one record per step (phase, hyperplane, term
    values, objective) is appended to it; the objective never increases.
    """
    cfg = cfg or TrainConfig()
    if ts.K == 0 or ts.K_p == 0 or ts.K_p == ts.K:
        raise ValueError("training needs both positive and negative samples")
    c, p = ts.patch_shape[0], ts.patch_shape[-1]
    X = ts.flat
    D = X.shape[1]

    basis = None
    if cfg.pca_dim is not None and D > 1:
        d = min(cfg.pca_dim, data_rank(X))
        basis = fit_pca(X, d)
        Z = basis.project(X)
        log.info("PCA: %d -> %d dimensions", D, d)
    else:
        Z = X

    Q = None
    if cfg.gamma_s > 0 and p > 1:
        tmpl = tmpl or cfg.template_for(p)
        sq = precompute_shape_quadratic(ts.features[ts.labels > 0], tmpl)
        Q = working_shape_matrix(sq, None if basis is None else basis.basis)

    prob = _Problem(Z, ts.labels, ts.group, cfg.gamma_c, cfg.gamma_s, cfg.gamma_t, Q)
    dim = Z.shape[1]
    st = _init_cache(
        prob, _State(np.zeros((cfg.N, cfg.M, dim)), np.zeros((cfg.N, cfg.M)), np.ones(cfg.N),
                     np.zeros((cfg.N, cfg.M), dtype=bool)),
    )
    trace = [] if trace is None else trace

    def record(phase, n, m):
        terms, _, _ = _terms(prob, st)
        trace.append({"step": len(trace), "phase": phase, "n": n, "m": m, **terms})
        return terms["objective"]

    f = record("init", None, None)
    for m in range(cfg.M):
        for n in range(cfg.N):
            st, f_new = _add_hyperplane(prob, st, n, m, cfg, f)
            f = record("add", n, m)
            log.debug("added (%d, %d): objective %.6g", n, m, f)

    rng = np.random.default_rng(cfg.seed)
    pairs = list(itertools.product(range(cfg.N), range(cfg.M)))
    for sweep in range(cfg.refine_sweeps):
        for k in rng.permutation(len(pairs)):
            n, m = pairs[k]
            st, _, _ = _refine_hyperplane(prob, st, n, m, cfg)
            f = record(f"refine{sweep}", n, m)

    return _fold_back(st, basis, (cfg.N, cfg.M) + tuple(ts.patch_shape), ts.normalization)


def _fold_back(st, basis, shape, normalization):
    if basis is None:
        W, b = st.V, st.c
    else:
        W = st.V @ basis.basis
        b = st.c - st.V @ (basis.basis @ basis.mean)
    norm = normalization if normalization is not None and len(normalization) == shape[2] else None
    return GhhModel(W.reshape(shape), b, st.delta, norm)


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------


def default_grid(points=5, low=1e-4, high=1e2):
    vals = np.logspace(np.log10(low), np.log10(high), points)
    return [tuple(float(v) for v in t) for t in itertools.product(vals, vals, vals)]


def validation_score(model: GhhModel, ts_val: TrainingSet) -> dict:
    """Classification accuracy minus relative within-group variance of the responses."""
    x = ts_val.flat
    resp = np.einsum("nmd,kd->knm", model.flat_weights(), x) + model.biases
    F = resp.max(axis=2) @ model.delta
    acc = float(np.mean(np.sign(F) == ts_val.labels))
    prob = _Problem(x, ts_val.labels, ts_val.group, 0, 0, 0)
    dev, size = prob.temporal_parts(F)
    grouped = size > 0
    spread = float(np.var(F)) + 1e-12
    tvar = float(np.mean(dev[grouped] ** 2)) / spread if grouped.any() else 0.0
    return {"accuracy": acc, "temporal_variance": tvar, "score": acc - tvar}


def cross_validate(ts_train: TrainingSet, ts_val: TrainingSet, grid, cfg: TrainConfig = None):
    """Train at every ``(gamma_c, gamma_s, gamma_t)`` of ``grid``; pick the best validation score.

    Returns ``(best_point, table)`` where ``table`` lists every distinct grid
    point once with its scores.
    """
    cfg = cfg or TrainConfig()
    points = []
    for pt in grid:
        pt = tuple(float(v) for v in pt)
        if pt not in points:
            points.append(pt)
    if not points:
        raise ValueError("empty hyperparameter grid")
    table = []
    for gc, gs, gt in points:
        run_cfg = TrainConfig(**{**asdict(cfg), "gamma_c": gc, "gamma_s": gs, "gamma_t": gt})
        model = train_greedy(ts_train, run_cfg)
        sc = validation_score(model, ts_val)
        table.append({"gamma_c": gc, "gamma_s": gs, "gamma_t": gt, **sc})
        log.info("cv %g %g %g -> %.4f", gc, gs, gt, sc["score"])
    best = max(range(len(table)), key=lambda i: (table[i]["score"], -i))
    row = table[best]
    return (row["gamma_c"], row["gamma_s"], row["gamma_t"]), table
