"""Air-water interface multipath: surface reflection point, mirror and ghost components.

Vector conventions (world frame, interface normal ``n`` pointing up into air):

* ``R1 = Ps - S``: sonar to scatterer.
* ``R3 = S - P_W``: surface reflection point back to the sonar.
* ``R2 = -(R1 + R3)``: scatterer to surface point, closing the loop.

The mirror echo arrives from the direction of ``P_W`` at the apparent range
``|R_m| = (|R1| + |R2| + |R3|) / 2``; the ghost travels the same loop in
reverse and shows up along the direct beam at the same apparent range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .forward import BeamBinImage, RayHits, RenderConfig, accumulate, cast_rays, segment, EmptyMask
from .geom import SonarGeometry, SonarPose, cart_to_sph
from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

T_CAP = 1e3            # |t| beyond this is treated as impossible geometry
MIN_SURFACE_DEPTH = 0.005

BACKGROUND, OBJECT, MIRROR, GHOST, CORRUPTED = 0, 1, 2, 3, 4


class DegenerateGeometry(ValueError):
    """No specular surface path (scatterer at or above the interface)."""


@dataclass
class InterfaceModel:
    """Flat or Gaussian-perturbed air-water interface."""

    sigma: float = 0.0
    seed: int = 0
    tilt_sigma: float = 0.0
    reflectivity: float = 0.9
    enabled: bool = True
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        if self.sigma < 0 or self.tilt_sigma < 0:
            raise ValueError("sigma must be non-negative")
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)

    @property
    def mode(self) -> str:
        return "flat" if self.sigma == 0 and self.tilt_sigma == 0 else "gaussian-perturbed"


@dataclass
class InterfaceState:
    """Realized interface for one view: height offset and unit normal."""

    height: float = 0.0
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    enabled: bool = True
    reflectivity: float = 0.9


def flat_state(iface: InterfaceModel | None = None) -> InterfaceState:
    iface = iface or InterfaceModel()
    return InterfaceState(0.0, iface.normal.copy(), iface.enabled, iface.reflectivity)


def perturb_interface(iface: InterfaceModel, n_views: int, seed: int | None = None) -> list[InterfaceState]:
    """Per-view interface states with height offsets ``h ~ N(0, sigma^2)``.

    The offsets are ``sigma * z`` with ``z`` drawn from a seeded standard
    normal, so a fixed seed gives a continuous family in ``sigma``.
    """
    rng = np.random.default_rng(iface.seed if seed is None else seed)
    z = rng.standard_normal(n_views)
    tilt = rng.standard_normal((n_views, 2))
    states = []
    for k in range(n_views):
        n = iface.normal.copy()
        if iface.tilt_sigma > 0:
            n = n + np.array([tilt[k, 0], tilt[k, 1], 0.0]) * iface.tilt_sigma
            n /= np.linalg.norm(n)
        states.append(InterfaceState(float(iface.sigma * z[k]), n, iface.enabled, iface.reflectivity))
    return states


@dataclass
class MultipathSolution:
    """Per-point multipath geometry; every field is an array over source points."""

    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    t: np.ndarray
    beta_prime: np.ndarray
    surface_points: np.ndarray
    mirror_points: np.ndarray      # sonar frame
    rm: np.ndarray
    valid: np.ndarray
    degenerate: np.ndarray


def _depth(pose: SonarPose, state: InterfaceState) -> float:
    return pose.depth_d + state.height


def surface_point(ps, pose: SonarPose, state: InterfaceState | None = None, strict: bool = False):
    """Surface reflection points for world scatterers ``ps``.

    Returns ``(t, beta_prime, P_W, degenerate)`` where ``t`` is the in-plane
    offset from the foot of the sonar's perpendicular to ``P_W``.
    """
    state = state or InterfaceState()
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    n = state.normal
    s = pose.t
    d = _depth(pose, state) * float(n[2])
    r1 = ps - s
    r1n = np.linalg.norm(r1, axis=1)
    u1 = r1 / np.maximum(r1n, 1e-300)[:, None]
    sin_b = np.clip(u1 @ n, -1.0, 1.0)
    beta_p = np.arcsin(sin_b)
    cos_b = np.cos(beta_p)
    horiz = -np.cross(n, np.cross(n, u1))
    denom = 2.0 * d - r1n * sin_b
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hat = horiz / cos_b[:, None]
        t_len = d * r1n * cos_b / denom
    degenerate = (denom <= 0) | (cos_b < 1e-12) | ~np.isfinite(t_len) | (t_len > T_CAP) | (d <= 0)
    t_len = np.where(degenerate, np.nan, t_len)
    t = t_hat * t_len[:, None]
    pw = s + d * n + t
    if strict and degenerate.any():
        raise DegenerateGeometry("2|d| <= |R1| sin(beta') for some points")
    return t, beta_p, pw, degenerate


def solve(ps, pose: SonarPose, g: SonarGeometry, state: InterfaceState | None = None) -> MultipathSolution:
    """Full multipath solution for world scatterers ``ps`` seen from ``pose``."""
    state = state or InterfaceState()
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    t, beta_p, pw, degenerate = surface_point(ps, pose, state)
    if not state.enabled or _depth(pose, state) < MIN_SURFACE_DEPTH:
        degenerate = np.ones(len(ps), dtype=bool)
    s = pose.t
    r1 = ps - s
    r3 = s - pw
    r2 = -(r1 + r3)
    rm = 0.5 * (np.linalg.norm(r1, axis=1) + np.linalg.norm(r2, axis=1) + np.linalg.norm(r3, axis=1))
    to_pw = pose.vector_to_sonar(-r3)
    with np.errstate(invalid="ignore", divide="ignore"):
        dir_s = to_pw / np.linalg.norm(to_pw, axis=1, keepdims=True)
    pm = rm[:, None] * dir_s
    elev = np.arcsin(np.clip(dir_s[:, 2], -1, 1))
    valid = ~degenerate & (np.abs(elev) <= g.w_phi)
    return MultipathSolution(r1=r1, r2=r2, r3=r3, t=t, beta_prime=beta_p, surface_points=pw,
                             mirror_points=pm, rm=rm, valid=valid, degenerate=degenerate)


def mirror_point(sol: MultipathSolution):
    """Virtual mirror points (sonar frame) and their validity."""
    return sol.mirror_points, sol.valid


def ghost_range(sol: MultipathSolution) -> np.ndarray:
    """Apparent ghost range; NaN where the path does not exist."""
    return np.where(sol.valid, sol.rm, np.nan)


@dataclass
class ComponentMasks:
    object: np.ndarray
    mirror: np.ndarray
    ghost: np.ndarray

    @property
    def corrupted(self) -> np.ndarray:
        return corrupted_region(self)

    def labels(self) -> np.ndarray:
        """uint8 codes: 0 background, 1 object, 2 mirror, 3 ghost, 4 corrupted."""
        lab = np.zeros(self.object.shape, dtype=np.uint8)
        lab[self.mirror] = MIRROR
        lab[self.ghost] = GHOST
        lab[self.object] = OBJECT
        lab[self.corrupted] = CORRUPTED
        return lab

    @classmethod
    def from_labels(cls, lab) -> "ComponentMasks":
        lab = np.asarray(lab)
        obj = (lab == OBJECT) | (lab == CORRUPTED)
        # overlap of ghost vs mirror inside the object is not recoverable from codes
        return cls(object=obj, mirror=lab == MIRROR, ghost=(lab == GHOST) | (lab == CORRUPTED))


def corrupted_region(masks: ComponentMasks) -> np.ndarray:
    """Object pixels overlapped by the ghost or mirror component."""
    return masks.object & (masks.ghost | masks.mirror)


@dataclass
class Components:
    object: BeamBinImage
    mirror: BeamBinImage
    ghost: BeamBinImage
    masks: ComponentMasks
    hits: RayHits

    def combined(self) -> np.ndarray:
        return self.object.intensities + self.mirror.intensities + self.ghost.intensities


def render_components(mesh: TriangleMesh, pose: SonarPose, g: SonarGeometry,
                      state: InterfaceState | None = None, cfg: RenderConfig | None = None,
                      seg_threshold: float = 0.2, support_threshold: float = 0.05,
                      hits: RayHits | None = None) -> Components:
    """Object, mirror and ghost images of ``mesh`` plus their component masks.

    All three images share the object image's normalization; mirror and
    ghost carry the surface reflectivity. ``state=None`` or a disabled
    interface yields empty multipath components.
    """
    hits = hits if hits is not None else cast_rays(mesh, pose, g, cfg)
    obj_raw = accumulate(hits.beam, hits.bin, hits.weight, g)
    ghost_raw = np.zeros(g.shape)
    mirror_raw = np.zeros(g.shape)
    if state is not None and state.enabled and len(hits.ranges):
        world = pose.to_world(hits.points)
        sol = solve(world, pose, g, state)
        ok = sol.valid & (hits.weight > 0)
        w = hits.weight * state.reflectivity
        gb = np.rint((sol.rm - g.r_min) / g.delta_r)
        gb = np.where(ok & (gb >= 0) & (gb < g.n_bins), gb, -1).astype(np.int64)
        ghost_raw = accumulate(hits.beam, gb, np.where(ok, w, 0.0), g)
        sph = cart_to_sph(np.where(ok[:, None], sol.mirror_points, 0.0))
        mb = np.rint((sph[:, 1] - g.theta_min) / g.delta_theta)
        mr = np.rint((sph[:, 0] - g.r_min) / g.delta_r)
        inside = ok & (mb >= 0) & (mb < g.n_beams) & (mr >= 0) & (mr < g.n_bins)
        mirror_raw = accumulate(np.where(inside, mb, -1).astype(np.int64),
                                np.where(inside, mr, -1).astype(np.int64),
                                np.where(inside, w, 0.0), g)
    peak = obj_raw.max()
    scale = 1.0 / peak if peak > 0 else 0.0
    obj_img, ghost_img, mirror_img = obj_raw * scale, ghost_raw * scale, mirror_raw * scale
    try:
        obj_mask = segment(obj_img, seg_threshold)
    except EmptyMask:
        obj_mask = np.zeros(g.shape, dtype=bool)
    masks = ComponentMasks(object=obj_mask, mirror=mirror_img >= support_threshold,
                           ghost=ghost_img >= support_threshold)
    return Components(object=BeamBinImage(obj_img, g, pose),
                      mirror=BeamBinImage(mirror_img, g, pose),
                      ghost=BeamBinImage(ghost_img, g, pose),
                      masks=masks, hits=hits)
