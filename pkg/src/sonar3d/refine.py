"""Iterative model refinement from multi-view 2-D image alignment.

Each iteration renders the current mesh at every pose, aligns the synthetic
images with the data, lifts the 2-D motions of visible patch centers to 3-D,
combines the views per patch in the reference frame, and moves the vertices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .forward import (EmptyMask, RenderConfig, extract_contour, largest_component, project_point,
                      visible_triangles)
from .geom import SonarGeometry, SonarPose, polar_project
from .mesh import TriangleMesh, apply_motions, build_connectivity, mad_outlier_replace, patch_centers, \
    solve_vertex_motions
from .metrics import ErrorReport, image_error, intensity_error, nve as nve_metric
from .multipath import Components, InterfaceState, render_components
from .register import (ALPHA_D1, ALPHA_D2, LAMBDA_GATE, ContourMatch, MotionField2D, SearchConfig,
                       blend_motions, correlation_field, icp_align)

logger = logging.getLogger(__name__)


class NotVisible(ValueError):
    """Patch center outside the field of view or on a corrupted pixel."""


class NoRelevantViews(RuntimeError):
    """Every view failed the contour-quality gate."""


@dataclass
class RefineConfig:
    max_iter: int = 6
    stop_tol: float = 0.005
    lambda_gate: float = LAMBDA_GATE
    seg_threshold: float = 0.2
    support_threshold: float = 0.2
    search: SearchConfig = field(default_factory=SearchConfig)
    d1: float = ALPHA_D1
    d2: float = ALPHA_D2
    ghost_masking: bool = True
    use_mirror: bool = True
    mirror_weight: float = 1.0
    min_frontal: int = 10
    min_views: int = 2
    inverse_distance: bool = False
    step: float = 0.5
    smooth: float = 1.0
    extend_unsupported: bool = True
    window_rule: bool = False
    render: RenderConfig = field(default_factory=RenderConfig)


@dataclass
class View:
    """One data image with its pose and the interface assumed when predicting multipath."""

    data: np.ndarray
    pose: SonarPose
    state: InterfaceState | None = field(default_factory=InterfaceState)
    name: str = ""


@dataclass
class LiftedMotion:
    """3-D patch motion ``a + W e`` in the reference frame, ``W`` unknown."""

    a: np.ndarray
    e: np.ndarray
    uv: np.ndarray


def lift_patch_motion(center, v, pose: SonarPose, g: SonarGeometry | None = None,
                      corrupted=None) -> LiftedMotion:
    """Parametrize the 3-D motion of a patch center from its 2-D image motion.

    ``v`` is synthetic minus data, so the sonar-frame motion is
    ``(U, V, W) = (-v_x, -v_y, W)`` under the small-elevation approximation.
    """
    v = np.asarray(v, dtype=float)
    if g is not None:
        b, bb, inside = project_point(np.asarray(center, dtype=float)[None], pose, g)
        if not inside[0]:
            raise NotVisible("patch center outside the field of view")
        if corrupted is not None and corrupted[b[0] - 1, bb[0] - 1]:
            raise NotVisible("patch center projects onto a corrupted pixel")
    uv = -v
    rot = pose.rotation
    return LiftedMotion(a=rot @ np.array([uv[0], uv[1], 0.0]), e=rot[:, 2].copy(), uv=uv)


@dataclass
class PatchSolve:
    motion: np.ndarray
    w: np.ndarray
    ok: bool
    rank: int


def solve_patch_center(a, e, min_views: int = 2) -> PatchSolve:
    """Least-squares common motion of one patch center from ``M`` lifted views.

    Minimizes ``sum_m |V - (a_m + W_m e_m)|^2`` over ``V`` and ``W``; ``V``
    is eliminated by centering, ``W`` comes from an SVD solve, and the
    final motion is the per-component median of the reconstructed vectors.
    Fewer than ``min_views`` views or a rank-deficient system give zero
    motion with ``ok=False``.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    e = np.asarray(e, dtype=float).reshape(-1, 3)
    m = len(a)
    if m < min_views:
        return PatchSolve(np.zeros(3), np.zeros(m), False, 0)
    cen = np.eye(m) - 1.0 / m
    # row (m, k) of the 3M x M system: sum_n cen[m, n] e_n[k] W_n
    big = np.einsum("mn,nk->mkn", cen, e).reshape(3 * m, m)
    rhs = -(cen @ a).reshape(-1)
    w, _, rank, _ = np.linalg.lstsq(big, rhs, rcond=None)
    if rank < m:
        # parallel elevation axes leave W undetermined
        return PatchSolve(np.zeros(3), np.zeros(m), False, int(rank))
    recon = a + w[:, None] * e
    return PatchSolve(np.median(recon, axis=0), w, True, int(rank))


def patch_objective(w, a, e) -> float:
    """``E_W`` at ``W`` with the optimal common motion substituted."""
    recon = np.asarray(a) + np.asarray(w)[:, None] * np.asarray(e)
    return float(((recon - recon.mean(axis=0)) ** 2).sum())


@dataclass
class ViewAnalysis:
    """Everything one iteration learns from one view."""

    components: Components
    synth_mask: np.ndarray
    data_mask: np.ndarray
    corrupted: np.ndarray
    omega: np.ndarray
    match: ContourMatch | None
    lam: float
    ie: float
    motion: MotionField2D
    visible: np.ndarray
    relevant: bool
    flags: list = field(default_factory=list)


def _mask_from_threshold(img, thr) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    peak = img.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=bool)
    return img >= thr * peak


def data_object_mask(data, cfg: RefineConfig) -> np.ndarray:
    """Largest thresholded blob of the data image, holes filled."""
    mask = _mask_from_threshold(data, cfg.seg_threshold)
    if not mask.any():
        return mask
    return ndimage.binary_fill_holes(largest_component(mask))


def _clean_blob(mask) -> np.ndarray:
    if not mask.any():
        return mask
    return ndimage.binary_fill_holes(largest_component(mask))


def _frontal(mask, g, cfg, drop=None):
    try:
        c = extract_contour(mask, g, cfg.window_rule)
    except EmptyMask:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2))
    keep = c.frontal.copy()
    if drop is not None:
        keep &= ~drop[c.pixels[:, 0], c.pixels[:, 1]]
    return c.pixels[keep], c.xy[keep]


def _observed_mirror(img, obj_mask, zone, cfg):
    obs = _mask_from_threshold(img, cfg.seg_threshold) & zone & ~ndimage.binary_dilation(obj_mask)
    return largest_component(obs) if obs.any() else obs


def _mirror_lower(mirror_support, synth, synth_mask, data, data_mask, g, cfg):
    """Near-range third of the mirror blobs seen in the synthetic and data images, if separable."""
    if not mirror_support.any():
        return None
    zone = ndimage.binary_dilation(mirror_support, iterations=3)
    syn = _observed_mirror(synth, synth_mask, zone, cfg)
    obs = _observed_mirror(data, data_mask, zone, cfg)
    if not syn.any() or not obs.any():
        return None
    _, syn_xy = _frontal(syn, g, cfg)
    _, dat_xy = _frontal(obs, g, cfg)
    if len(syn_xy) < cfg.min_frontal or len(dat_xy) < cfg.min_frontal:
        return None
    return syn_xy, dat_xy


def _pixel_xy(g: SonarGeometry, pix):
    pix = np.asarray(pix).reshape(-1, 2)
    r = g.r_min + pix[:, 1] * g.delta_r
    th = g.theta_min + pix[:, 0] * g.delta_theta
    return polar_project(r, th)


def analyze_view(mesh: TriangleMesh, view: View, g: SonarGeometry, cfg: RefineConfig,
                 iteration: int = 0) -> ViewAnalysis:
    """Render, segment, register and blend one view."""
    state = view.state if cfg.ghost_masking else None
    comps = render_components(mesh, view.pose, g, state, cfg.render, cfg.seg_threshold,
                              cfg.support_threshold)
    # predicted image including the modelled multipath; object-only without masking
    synth = comps.combined()
    data = np.asarray(view.data, dtype=float)
    flags = []
    synth_mask = comps.masks.object
    corrupted = comps.masks.corrupted if cfg.ghost_masking else np.zeros(g.shape, dtype=bool)
    omega = synth_mask & ~corrupted
    # both images go through the same segmentation
    s_seg = data_object_mask(synth, cfg)
    data_mask = data_object_mask(data, cfg)
    visible = visible_triangles(comps.hits, mesh.n_triangles)
    empty = MotionField2D()

    ie = float("nan")
    if omega.any():
        ie = intensity_error(synth, data, omega)

    if cfg.ghost_masking:
        multipath = corrupted | comps.masks.ghost | comps.masks.mirror
        # multipath-only pixels would stretch the blob's range extent
        outside = multipath & ~ndimage.binary_dilation(synth_mask, iterations=2)
        s_blob = _clean_blob(s_seg & ~outside)
        d_blob = _clean_blob(data_mask & ~outside)
        s_pix, s_xy = _frontal(s_blob, g, cfg, multipath)
        d_pix, d_xy = _frontal(d_blob, g, cfg, multipath)
    else:
        s_blob, d_blob = s_seg, data_mask
        s_pix, s_xy = _frontal(s_blob, g, cfg)
        d_pix, d_xy = _frontal(d_blob, g, cfg)
    if len(s_xy) < cfg.min_frontal or len(d_xy) < cfg.min_frontal:
        flags.append("too_few_frontal_points")
        return ViewAnalysis(comps, synth_mask, data_mask, corrupted, omega, None, float("inf"), ie,
                            empty, visible, False, flags)

    src, dst, wts = s_xy, d_xy, np.ones(len(s_xy))
    if cfg.use_mirror and cfg.ghost_masking and cfg.mirror_weight > 0:
        mir_only = comps.masks.mirror & ~ndimage.binary_dilation(synth_mask, iterations=2)
        pair = _mirror_lower(mir_only, synth, s_blob, data, d_blob, g, cfg)
        if pair is not None:
            src = np.vstack([src, pair[0]])
            dst = np.vstack([dst, pair[1]])
            wts = np.concatenate([wts, np.full(len(pair[0]), cfg.mirror_weight)])
            flags.append("mirror_contour")
    match = icp_align(src, dst, src_weights=wts)
    # lambda and v^C use object frontal pairs only
    moved = match.apply(s_xy)
    res, idx = cKDTree(d_xy).query(moved)
    lam = float(res.mean())
    relevant = lam <= cfg.lambda_gate
    if not relevant:
        flags.append("lambda_gate")
        return ViewAnalysis(comps, synth_mask, data_mask, corrupted, omega, match, lam, ie,
                            empty, visible, False, flags)

    keep = res <= cfg.lambda_gate
    vc_points = s_xy[keep]
    vc_vectors = s_xy[keep] - d_xy[idx[keep]]

    pix = np.argwhere(omega)
    vi, _, score, vi_ok = correlation_field(synth, data, pix, g, iteration, cfg.search)
    vec, a, has, source = blend_motions(_pixel_xy(g, pix), vc_points, vc_vectors, vi, vi_ok,
                                        cfg.d1, cfg.d2)
    motion = MotionField2D(pixels=pix[has], vectors=vec[has], alpha=a[has], score=score[has],
                           source=[s for s, h in zip(source, has) if h])
    return ViewAnalysis(comps, synth_mask, data_mask, corrupted, omega, match, lam, ie, motion,
                        visible, True, flags)


@dataclass
class IterationReport:
    k: int
    e_i: float
    naie: float
    nace: float
    aie: float
    ace: float
    ie: list
    ce: list
    n_relevant: int
    n_patches: int
    motion_mean: float
    motion_max: float
    n_outliers: int = 0
    nve: float | None = None
    flags: list = field(default_factory=list)

    def row(self) -> dict:
        return {"iteration": self.k, "E_I": self.e_i, "NAIE": self.naie, "NACE": self.nace,
                "AIE": self.aie, "ACE": self.ace, "relevant_views": self.n_relevant,
                "moved_patches": self.n_patches, "motion_mean": self.motion_mean,
                "motion_max": self.motion_max, "outliers": self.n_outliers,
                "NVE": "" if self.nve is None else self.nve}


@dataclass
class StepResult:
    mesh: TriangleMesh
    analyses: list
    aie: float
    ace: float
    n_relevant: int
    n_patches: int
    motions: np.ndarray
    n_outliers: int


def _aggregate(analyses):
    rel = [a for a in analyses if a.relevant]
    if not rel:
        return float("nan"), float("nan"), 0
    ies = [a.ie for a in rel if np.isfinite(a.ie)]
    aie = float(np.mean(ies)) if ies else float("nan")
    return aie, float(np.mean([a.lam for a in rel])), len(rel)


def patch_motions(mesh: TriangleMesh, views, analyses, g: SonarGeometry, cfg: RefineConfig):
    """Per-patch 3-D motions in the reference frame and their validity."""
    centers = patch_centers(mesh)
    n_t = mesh.n_triangles
    lifts_a = [[] for _ in range(n_t)]
    lifts_e = [[] for _ in range(n_t)]
    for view, an in zip(views, analyses):
        if not an.relevant or len(an.motion) == 0:
            continue
        vec, has = an.motion.as_dense(g.shape)
        b, bb, inside = project_point(centers, view.pose, g)
        cand = np.flatnonzero(an.visible & inside)
        pb, pB = b[cand] - 1, bb[cand] - 1
        ok = an.omega[pb, pB] & has[pb, pB]
        rot = view.pose.rotation
        for t, i, j in zip(cand[ok], pb[ok], pB[ok]):
            v = vec[i, j]
            lifts_a[t].append(rot @ np.array([-v[0], -v[1], 0.0]))
            lifts_e[t].append(rot[:, 2])
    out = np.zeros((n_t, 3))
    valid = np.zeros(n_t, dtype=bool)
    for t in range(n_t):
        if len(lifts_a[t]) < cfg.min_views:
            continue
        sol = solve_patch_center(lifts_a[t], lifts_e[t], cfg.min_views)
        out[t] = sol.motion
        valid[t] = sol.ok
    return out, valid


def update_mesh(mesh: TriangleMesh, views, analyses, g: SonarGeometry, cfg: RefineConfig):
    """Vertex motions from the analyses; returns ``(new_mesh, motions, n_patches, n_outliers)``."""
    pm, valid = patch_motions(mesh, views, analyses, g, cfg)
    if not valid.any():
        return mesh.copy(), np.zeros_like(mesh.vertices), 0, 0
    conn = build_connectivity(mesh)
    vs = solve_vertex_motions(conn, pm, valid, smooth=cfg.smooth)
    supported = np.ones(mesh.n_vertices, dtype=bool)
    supported[vs.unsupported] = False
    if not cfg.extend_unsupported:
        vs.motions[~supported] = 0.0
    motions, rep = mad_outlier_replace(vs.motions, mesh, inverse_distance=cfg.inverse_distance,
                                       active=supported)
    motions = motions * cfg.step
    n_out = len(rep.replaced) + len(rep.zeroed)
    return apply_motions(mesh, motions), motions, int(valid.sum()), n_out


def iterate(mesh: TriangleMesh, views, g: SonarGeometry, cfg: RefineConfig | None = None,
            iteration: int = 0, analyses=None) -> StepResult:
    """One refinement step from ``mesh``; ``analyses`` may be reused from a prior evaluation."""
    cfg = cfg or RefineConfig()
    if len(views) < 2:
        raise ValueError("refinement needs at least two views")
    if analyses is None:
        analyses = [analyze_view(mesh, v, g, cfg, iteration) for v in views]
    aie, ace, n_rel = _aggregate(analyses)
    if n_rel == 0:
        raise NoRelevantViews("no view passed the contour-quality gate")
    new, motions, n_patches, n_out = update_mesh(mesh, views, analyses, g, cfg)
    return StepResult(new, analyses, aie, ace, n_rel, n_patches, motions, n_out)


@dataclass
class RefineResult:
    mesh: TriangleMesh
    best_iteration: int
    reports: list
    meshes: list


def run(mesh0: TriangleMesh, views, g: SonarGeometry, cfg: RefineConfig | None = None,
        truth: TriangleMesh | None = None) -> RefineResult:
    """Refine ``mesh0`` for up to ``cfg.max_iter`` updates and return the best-E_I mesh.

    ``reports[0]`` describes the initial mesh (E_I = 1); ``reports[k]`` the
    mesh after ``k`` updates.
    """
    cfg = cfg or RefineConfig()
    meshes = [mesh0]
    reports = []
    analyses = [analyze_view(mesh0, v, g, cfg, 0) for v in views]
    aie0, ace0, _ = _aggregate(analyses)
    mesh = mesh0
    prev_e = None
    for k in range(cfg.max_iter + 1):
        aie, ace, n_rel = _aggregate(analyses)
        if n_rel == 0:
            raise NoRelevantViews(f"no view passed the contour-quality gate at iteration {k}")
        naie, nace, e_i, flags = image_error(aie, ace, aie0, ace0)
        rep = IterationReport(k=k, e_i=e_i, naie=naie, nace=nace, aie=aie, ace=ace,
                              ie=[a.ie for a in analyses], ce=[a.lam for a in analyses],
                              n_relevant=n_rel, n_patches=0, motion_mean=0.0, motion_max=0.0,
                              flags=flags)
        if truth is not None:
            rep.nve = nve_metric(mesh, truth, check=False)
        reports.append(rep)
        logger.info("iteration %d: E_I %.4f (NAIE %.4f NACE %.4f) relevant %d%s", k, e_i, naie, nace,
                    n_rel, "" if rep.nve is None else f" NVE {rep.nve:.4f}")
        if k == cfg.max_iter:
            break
        if prev_e is not None and abs(e_i - prev_e) < cfg.stop_tol:
            break
        prev_e = e_i
        step = iterate(mesh, views, g, cfg, k, analyses)
        mag = np.linalg.norm(step.motions, axis=1)
        rep.n_patches = step.n_patches
        rep.motion_mean = float(mag.mean())
        rep.motion_max = float(mag.max())
        rep.n_outliers = step.n_outliers
        mesh = step.mesh
        meshes.append(mesh)
        analyses = [analyze_view(mesh, v, g, cfg, k + 1) for v in views]
    best = int(np.argmin([r.e_i for r in reports]))
    return RefineResult(meshes[best], best, reports, meshes)


def error_report(result: RefineResult) -> ErrorReport:
    r = result.reports[result.best_iteration]
    return ErrorReport(ie=dict(enumerate(r.ie)), ce=dict(enumerate(r.ce)), aie=r.aie, ace=r.ace,
                       naie=r.naie, nace=r.nace, e_i=r.e_i, nve=r.nve, flags=list(r.flags))


def translation_error(a: TriangleMesh, b: TriangleMesh) -> float:
    """Mean per-vertex distance between meshes with shared topology."""
    return float(np.linalg.norm(a.vertices - b.vertices, axis=1).mean())

