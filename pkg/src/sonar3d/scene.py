"""Synthetic desk-scale scene: pose schedule and noisy multi-component images."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .carve import carve, feasible_region
from .forward import EmptyMask, RenderConfig, segment
from .geom import SonarGeometry, SonarPose
from .mesh import TriangleMesh
from .multipath import InterfaceModel, InterfaceState, flat_state, perturb_interface, render_components
from .refine import View


@dataclass
class SceneConfig:
    """Pose schedule and image-formation settings of a synthetic dataset.

    Sonars sit ``distance`` meters from ``target`` at ``M_p`` headings spread
    evenly around it, each rolled into ``M_r`` angles ``-pi + j pi / M_r``.
    """

    m_p: int = 2
    m_r: int = 8
    distance: float = 1.05
    sonar_z: float = 0.02
    surface_z: float = 0.125
    pitch_deg: float = -1.0
    target: tuple = (0.0, 0.0, 0.0)
    noise: float = 0.05
    seed: int = 0
    noise_seed: int | None = None
    sigma: float = 0.0
    tilt_sigma: float = 0.0
    reflectivity: float = 0.9
    multipath: bool = True

    def __post_init__(self):
        if self.m_p < 1 or self.m_r < 1:
            raise ValueError("need at least one position and one roll")
        if self.distance <= 0 or self.noise < 0 or self.sigma < 0:
            raise ValueError("distance must be positive and noise, sigma non-negative")
        if self.multipath and self.surface_z <= self.sonar_z:
            raise ValueError("the sonar must sit below the interface")

    @property
    def depth(self) -> float:
        return self.surface_z - self.sonar_z

    @property
    def roll_step(self) -> float:
        return math.pi / self.m_r

    def interface(self) -> InterfaceModel:
        return InterfaceModel(sigma=self.sigma, seed=self.seed, tilt_sigma=self.tilt_sigma,
                              reflectivity=self.reflectivity, enabled=self.multipath)

    def to_dict(self) -> dict:
        return asdict(self)


def pose_schedule(cfg: SceneConfig) -> list[SonarPose]:
    """``M_p * M_r`` poses, position-major."""
    target = np.asarray(cfg.target, dtype=float)
    poses = []
    for p in range(cfg.m_p):
        heading = 2 * math.pi * p / cfg.m_p
        bore = np.array([-math.sin(heading), math.cos(heading), 0.0])
        pos = target - cfg.distance * bore
        pos[2] = cfg.sonar_z
        for j in range(cfg.m_r):
            roll = -math.pi + j * cfg.roll_step
            poses.append(SonarPose.from_euler(heading, math.radians(cfg.pitch_deg), roll,
                                              t=pos, depth_d=cfg.depth))
    return poses


@dataclass
class SyntheticView:
    image: np.ndarray
    labels: np.ndarray
    pose: SonarPose
    state: InterfaceState
    clean: np.ndarray = field(repr=False, default=None)


def synthesize(mesh: TriangleMesh, cfg: SceneConfig, g: SonarGeometry | None = None,
               render_cfg: RenderConfig | None = None, seg_threshold: float = 0.2,
               support_threshold: float = 0.05) -> list[SyntheticView]:
    """Render every view of ``mesh`` with multipath and additive Gaussian noise.

    Images are object + mirror + ghost, rescaled to unit peak before noise;
    negative values after noise are clipped to zero. ``cfg.seed`` drives the
    interface draws and, unless ``cfg.noise_seed`` is set, the intensity noise.
    """
    g = g or SonarGeometry()
    poses = pose_schedule(cfg)
    states = perturb_interface(cfg.interface(), len(poses))
    rng = np.random.default_rng(cfg.seed if cfg.noise_seed is None else cfg.noise_seed)
    out = []
    for pose, state in zip(poses, states):
        comps = render_components(mesh, pose, g, state if cfg.multipath else None, render_cfg,
                                  seg_threshold, support_threshold)
        clean = comps.combined()
        peak = clean.max()
        if peak > 0:
            clean = clean / peak
        noisy = np.clip(clean + cfg.noise * rng.standard_normal(clean.shape), 0.0, None)
        out.append(SyntheticView(noisy.astype(np.float32).astype(float), comps.masks.labels(), pose,
                                 state, clean))
    return out


def to_views(synth: list[SyntheticView], assume_flat: bool = True) -> list[View]:
    """Refinement views; the interface is assumed flat unless told otherwise."""
    views = []
    for k, s in enumerate(synth):
        state = flat_state() if assume_flat else s.state
        if assume_flat:
            state.enabled = s.state.enabled
            state.reflectivity = s.state.reflectivity
        views.append(View(s.image, s.pose, state, name=f"view_{k:03d}"))
    return views


def carve_views(images, poses, g: SonarGeometry, seg_threshold: float = 0.2, labels=None,
                dilate_beams: int = 2):
    """``(FR, pose)`` pairs from segmented images; views with empty masks are skipped."""
    from .multipath import ComponentMasks

    out = []
    for k, (img, pose) in enumerate(zip(images, poses)):
        try:
            mask = segment(img, seg_threshold)
        except EmptyMask:
            continue
        masks = ComponentMasks.from_labels(labels[k]) if labels is not None else None
        out.append((feasible_region(mask, masks, dilate_beams), pose))
    return out


def initial_model(images, poses, g: SonarGeometry, seg_threshold: float = 0.2, labels=None,
                  dilate_beams: int = 2, **carve_kw):
    """Space-carved starting mesh from data images."""
    return carve(carve_views(images, poses, g, seg_threshold, labels, dilate_beams), g, **carve_kw)
