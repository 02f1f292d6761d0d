"""Per-view 2-D alignment of synthetic and data sonar images.

All 2-D motions follow one sign convention: synthetic minus data, in polar
image coordinates (meters). A model point must therefore move by ``-v`` to
reach the data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .geom import SonarGeometry, polar_project

logger = logging.getLogger(__name__)

LAMBDA_GATE = 0.01          # meters
ALPHA_D1 = 0.005            # meters
ALPHA_D2 = 0.02             # meters
FLAT_PCC = 0.1


class NoConvergence(RuntimeWarning):
    """ICP hit its iteration cap; the best transform so far is returned."""


class FlatRegion(ValueError):
    """Best correlation too weak to trust a block match."""


@dataclass
class ContourMatch:
    """Rigid 2-D transform taking synthetic points onto data points.

    ``src_index[j]`` and ``dst_index[j]`` name the ``j``-th matched pair;
    ``lam`` is the mean distance between the transformed source point and
    its match.
    """

    rotation: np.ndarray
    translation: np.ndarray
    src_index: np.ndarray
    dst_index: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    lam: float
    n_inliers: int
    iterations: int
    converged: bool

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def _kabsch2d(src, dst, w):
    w = w / w.sum()
    ms = w @ src
    md = w @ dst
    h = (src - ms).T @ ((dst - md) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    dmat = np.diag([1.0, np.sign(np.linalg.det(vt.T @ u.T)) or 1.0])
    rot = vt.T @ dmat @ u.T
    return rot, md - rot @ ms


def huber_weights(res, scale_factor: float = 1.5, floor: float = 1e-9):
    """Huber IRLS weights with threshold ``scale_factor * median(res)``."""
    k = max(scale_factor * float(np.median(res)), floor)
    w = np.ones_like(res)
    big = res > k
    w[big] = k / res[big]
    return w, k


def _line_normals(pts, k: int = 5) -> np.ndarray:
    """Unit normals from the local principal direction of ``k`` nearest neighbours."""
    k = min(k, len(pts))
    _, nb = cKDTree(pts).query(pts, k=k)
    d = pts[nb] - pts[nb].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", d, d)
    _, vec = np.linalg.eigh(cov)
    return vec[:, :, 0]


def _point_to_line_step(moved, dst, normals, w):
    """Small-angle rigid update minimising weighted point-to-line distances."""
    c = (w @ moved) / w.sum()
    q = moved - c
    a = np.column_stack([normals[:, 1] * q[:, 0] - normals[:, 0] * q[:, 1], normals])
    b = np.einsum("ij,ij->i", normals, dst - moved)
    ata = a.T @ (a * w[:, None])
    ata += 1e-12 * max(np.trace(ata), 1e-30) * np.eye(3)
    x = np.linalg.solve(ata, a.T @ (w * b))
    ca, sa = np.cos(x[0]), np.sin(x[0])
    d_rot = np.array([[ca, -sa], [sa, ca]])
    return d_rot, c - d_rot @ c + x[1:]


def icp_align(src, dst, max_iter: int = 100, tol: float = 1e-9, src_weights=None,
              huber_scale: float = 1.5, trim: float = 3.0) -> ContourMatch:
    """Robust ICP of 2-D ``src`` onto ``dst`` (unequal sizes allowed).

    Stages, each run to convergence: unweighted point-to-point, then Huber
    point-to-point, Huber point-to-line (lets the contour slide along itself
    past discrete-correspondence minima), Huber point-to-point again, and
    finally point-to-line and point-to-point with pairs beyond ``trim``
    Huber thresholds discarded.

    Args:
        src: Synthetic contour points, ``(N, 2)``.
        dst: Data contour points, ``(M, 2)``.
        max_iter: Iteration cap per stage.
        tol: Stop a stage once the update moves no point more than this.
        src_weights: Optional fixed per-point weights multiplied into IRLS weights.
        huber_scale: Huber threshold as a multiple of the median residual.
        trim: Rejection cutoff of the last stages, in Huber thresholds.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3 or len(dst) < 3:
        raise ValueError("ICP needs at least 3 points per set")
    base_w = np.ones(len(src)) if src_weights is None else np.asarray(src_weights, dtype=float)
    tree = cKDTree(dst)
    normals = _line_normals(dst)
    rot = np.eye(2)
    trans = np.zeros(2)
    converged = True
    total = 0
    stages = (("point", None), ("point", "huber"), ("line", "huber"), ("point", "huber"),
              ("line", "trim"), ("point", "trim"))
    for metric, weighting in stages:
        done = False
        for _ in range(max_iter):
            total += 1
            moved = src @ rot.T + trans
            res, idx = tree.query(moved)
            if metric == "line":
                res = np.abs(np.einsum("ij,ij->i", normals[idx], dst[idx] - moved))
            if weighting is None:
                w = base_w
            else:
                w, k = huber_weights(res, huber_scale)
                if weighting == "trim":
                    w = np.where(res <= trim * k, w, 0.0)
                w = w * base_w
            if w.sum() <= 0:
                break
            if metric == "line":
                d_rot, d_trans = _point_to_line_step(moved, dst[idx], normals[idx], w)
                new_rot, new_trans = d_rot @ rot, d_rot @ trans + d_trans
            else:
                new_rot, new_trans = _kabsch2d(src, dst[idx], w)
            step = np.abs(src @ (new_rot - rot).T + (new_trans - trans)).max()
            rot, trans = new_rot, new_trans
            if step < tol:
                done = True
                break
        converged = converged and done
    moved = src @ rot.T + trans
    res, idx = tree.query(moved)
    w, k = huber_weights(res, huber_scale)
    if not converged:
        logger.debug("ICP stopped after %d iterations without converging", total)
    return ContourMatch(rotation=rot, translation=trans, src_index=np.arange(len(src)),
                        dst_index=idx, residuals=res, weights=w, lam=float(res.mean()),
                        n_inliers=int(np.sum(res <= k)), iterations=total, converged=converged)


def contour_quality(match: ContourMatch) -> float:
    """Mean matched-pair distance ``lambda`` (meters)."""
    return float(np.mean(match.residuals))


def relevant(match: ContourMatch | None, gate: float = LAMBDA_GATE) -> bool:
    return match is not None and match.lam <= gate


def pcc(w1, w2) -> float:
    """Pearson correlation of two equal-size blocks; 0 if either is constant."""
    a = np.asarray(w1, dtype=float).ravel()
    b = np.asarray(w2, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("blocks differ in size")
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den <= 1e-15:
        return 0.0
    return float(a @ b) / den


def r_schedule(iteration: int, r0: float = 0.2, slope: float = 0.15, cap: float = 0.8) -> float:
    return min(cap, r0 + slope * iteration)


def regularized_score(c_pc, d_cm, iteration: int = 0, r: float | None = None):
    """``C_pc / (1 + r)^(1 + sqrt(d))`` with ``d`` in centimeters."""
    r = r_schedule(iteration) if r is None else r
    return np.asarray(c_pc) / (1.0 + r) ** (1.0 + np.sqrt(np.asarray(d_cm, dtype=float)))


@dataclass
class SearchConfig:
    block: tuple = (5, 7)           # beams x bins
    window: tuple = (11, 15)        # beams x bins
    flat_pcc: float = FLAT_PCC
    r0: float = 0.2
    r_slope: float = 0.15
    r_cap: float = 0.8

    def r(self, iteration: int) -> float:
        return r_schedule(iteration, self.r0, self.r_slope, self.r_cap)


@dataclass
class BlockMatch:
    beam: int
    bin: int
    motion: np.ndarray
    score: float
    c_pc: float


def _pixel_xy(g: SonarGeometry, b, bb):
    r = g.r_min + np.asarray(bb) * g.delta_r
    th = g.theta_min + np.asarray(b) * g.delta_theta
    return polar_project(r, th)


def _candidates(at, shape, cfg: SearchConfig):
    hb, hB = cfg.block[0] // 2, cfg.block[1] // 2
    wb, wB = cfg.window[0] // 2, cfg.window[1] // 2
    b0, B0 = at
    bs = np.arange(b0 - wb, b0 + wb + 1)
    Bs = np.arange(B0 - wB, B0 + wB + 1)
    bs = bs[(bs - hb >= 0) & (bs + hb < shape[0])]
    Bs = Bs[(Bs - hB >= 0) & (Bs + hB < shape[1])]
    cb, cB = np.meshgrid(bs, Bs, indexing="ij")
    return cb.ravel(), cB.ravel()


def _pick(score, d, cb, cB):
    # max score, then smallest d, then smallest bin, then smallest beam
    order = np.lexsort((cb, cB, d, -score))
    return order[0]


def correlation_search(synth, data, at, g: SonarGeometry, iteration: int = 0,
                       cfg: SearchConfig | None = None) -> BlockMatch:
    """Best regularized-PCC match in ``data`` for the block of ``synth`` at 0-based ``at``.

    Raises:
        FlatRegion: the winning candidate's raw PCC is below ``cfg.flat_pcc``.
    """
    cfg = cfg or SearchConfig()
    synth = np.asarray(synth, dtype=float)
    data = np.asarray(data, dtype=float)
    hb, hB = cfg.block[0] // 2, cfg.block[1] // 2
    b0, B0 = at
    if b0 - hb < 0 or B0 - hB < 0 or b0 + hb >= synth.shape[0] or B0 + hB >= synth.shape[1]:
        raise IndexError("correlation block leaves the image")
    ref = synth[b0 - hb:b0 + hb + 1, B0 - hB:B0 + hB + 1]
    cb, cB = _candidates(at, data.shape, cfg)
    c = np.array([pcc(ref, data[b - hb:b + hb + 1, B - hB:B + hB + 1]) for b, B in zip(cb, cB)])
    xy0 = _pixel_xy(g, b0, B0)
    mot = xy0 - _pixel_xy(g, cb, cB)
    d = np.linalg.norm(mot, axis=1) * 100.0
    score = regularized_score(c, d, iteration, cfg.r(iteration))
    k = _pick(score, d, cb, cB)
    if c[k] < cfg.flat_pcc:
        raise FlatRegion(f"best PCC {c[k]:.3f} below {cfg.flat_pcc}")
    return BlockMatch(int(cb[k]), int(cB[k]), mot[k], float(score[k]), float(c[k]))


def _block_stats(img, block):
    win = sliding_window_view(img, block)
    flat = win.reshape(win.shape[0], win.shape[1], -1)
    cen = flat - flat.mean(axis=2, keepdims=True)
    norm = np.sqrt((cen * cen).sum(axis=2))
    return cen, norm


def correlation_field(synth, data, pixels, g: SonarGeometry, iteration: int = 0,
                      cfg: SearchConfig | None = None):
    """Vectorized :func:`correlation_search` over many 0-based pixels.

    Returns:
        ``(motions (K, 2), scores (K,), c_pc (K,), ok (K,))``; ``ok`` is false
        where the block leaves the image or the region is flat.
    """
    cfg = cfg or SearchConfig()
    synth = np.asarray(synth, dtype=float)
    data = np.asarray(data, dtype=float)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    hb, hB = cfg.block[0] // 2, cfg.block[1] // 2
    wb, wB = cfg.window[0] // 2, cfg.window[1] // 2
    s_cen, s_norm = _block_stats(synth, cfg.block)
    d_cen, d_norm = _block_stats(data, cfg.block)
    nb, nB = s_norm.shape
    ob, oB = np.meshgrid(np.arange(-wb, wb + 1), np.arange(-wB, wB + 1), indexing="ij")
    ob, oB = ob.ravel(), oB.ravel()
    motions = np.zeros((len(pixels), 2))
    scores = np.full(len(pixels), -np.inf)
    cpcs = np.zeros(len(pixels))
    ok = np.zeros(len(pixels), dtype=bool)
    for k, (b0, B0) in enumerate(pixels):
        i0, j0 = b0 - hb, B0 - hB
        if i0 < 0 or j0 < 0 or i0 >= nb or j0 >= nB:
            continue
        ci, cj = i0 + ob, j0 + oB
        inb = (ci >= 0) & (cj >= 0) & (ci < nb) & (cj < nB)
        ci, cj = ci[inb], cj[inb]
        num = d_cen[ci, cj] @ s_cen[i0, j0]
        den = d_norm[ci, cj] * s_norm[i0, j0]
        c = np.where(den > 1e-15, num / np.where(den > 1e-15, den, 1.0), 0.0)
        cb, cB = ci + hb, cj + hB
        mot = _pixel_xy(g, b0, B0) - _pixel_xy(g, cb, cB)
        d = np.linalg.norm(mot, axis=1) * 100.0
        score = regularized_score(c, d, iteration, cfg.r(iteration))
        best = _pick(score, d, cb, cB)
        if c[best] < cfg.flat_pcc:
            continue
        motions[k] = mot[best]
        scores[k] = score[best]
        cpcs[k] = c[best]
        ok[k] = True
    return motions, scores, cpcs, ok


def alpha(d, d1: float = ALPHA_D1, d2: float = ALPHA_D2):
    """Contour weight: 1 up to ``d1``, then exponential decay reaching 0.01 at ``d2``."""
    d = np.asarray(d, dtype=float)
    k = math.log(100.0) / (d2 - d1)
    return np.where(d <= d1, 1.0, np.exp(-k * (d - d1)))


SOURCE_CONTOUR, SOURCE_CORRELATION, SOURCE_BLENDED = "contour", "correlation", "blended"


@dataclass
class MotionField2D:
    """Sparse per-pixel motion vectors (meters, synthetic minus data)."""

    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    score: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pixels)

    def as_dense(self, shape) -> tuple[np.ndarray, np.ndarray]:
        """``(vectors (Nb, NB, 2), has_vector (Nb, NB))``."""
        vec = np.zeros(tuple(shape) + (2,))
        has = np.zeros(shape, dtype=bool)
        if len(self):
            vec[self.pixels[:, 0], self.pixels[:, 1]] = self.vectors
            has[self.pixels[:, 0], self.pixels[:, 1]] = True
        return vec, has

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("b,B,vx,vy,alpha,score,source\n")
            for (b, bb), v, a, s, src in zip(self.pixels, self.vectors, self.alpha, self.score, self.source):
                fh.write(f"{b + 1},{bb + 1},{v[0]:.9g},{v[1]:.9g},{a:.6g},{s:.6g},{src}\n")


def blend_motions(pixels_xy, vc_points, vc_vectors, vi, vi_ok, d1: float = ALPHA_D1,
                  d2: float = ALPHA_D2):
    """Blend contour and correlation motions at each pixel.

    ``v^C`` at a pixel is that of the nearest frontal contour point. A pixel
    without a correlation vector keeps ``v^C`` only where ``alpha = 1``.

    Returns:
        ``(vectors, alpha, has_vector, source)``.
    """
    pixels_xy = np.asarray(pixels_xy, dtype=float).reshape(-1, 2)
    vi = np.asarray(vi, dtype=float).reshape(-1, 2)
    vi_ok = np.asarray(vi_ok, dtype=bool)
    n = len(pixels_xy)
    if len(vc_points) == 0:
        src = np.where(vi_ok, SOURCE_CORRELATION, "")
        return vi.copy(), np.zeros(n), vi_ok.copy(), list(src)
    dist, idx = cKDTree(np.asarray(vc_points, dtype=float)).query(pixels_xy)
    a = alpha(dist, d1, d2)
    vc = np.asarray(vc_vectors, dtype=float)[idx]
    out = np.where(vi_ok[:, None], a[:, None] * vc + (1 - a[:, None]) * vi, vc)
    has = vi_ok | (a >= 1.0)
    src = np.where(~vi_ok, SOURCE_CONTOUR,
                   np.where(a >= 1.0, SOURCE_CONTOUR,
                            np.where(a <= 0.0, SOURCE_CORRELATION, SOURCE_BLENDED)))
    src = np.where(has, src, "")
    return out, a, has, list(src)
