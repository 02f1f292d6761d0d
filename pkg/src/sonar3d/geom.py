"""Coordinate transforms for forward-scan sonar imaging.

Sonar frame convention: +Y is the boresight, +X points to the right
(positive azimuth), +Z points up (positive elevation). Azimuth is measured
from +Y, so ``theta = atan2(X, Y)``.

Poses are sonar-to-world rigid transforms ``P_world = R @ P_sonar + t`` with
``R`` built from an axis-angle vector. The reference pose ``r = t = 0`` makes
the sonar frame coincide with the world frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

# cos(phi) ~ 1 is accepted up to this elevation
APPROX_ELEVATION_LIMIT = math.radians(7.0)


class IndexOutOfRange(IndexError):
    """Beam or bin index outside the image."""


def cart_to_sph(p):
    """Cartesian ``(..., 3)`` points to ``(..., 3)`` spherical ``(R, theta, phi)``."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    out = np.empty_like(p)
    out[..., 0] = np.sqrt(x * x + y * y + z * z)
    out[..., 1] = np.arctan2(x, y)
    out[..., 2] = np.arctan2(z, rho)
    return out


def sph_to_cart(s):
    """Spherical ``(R, theta, phi)`` to Cartesian ``(X, Y, Z)``."""
    s = np.asarray(s, dtype=float)
    r, theta, phi = s[..., 0], s[..., 1], s[..., 2]
    if np.any(r < 0):
        raise ValueError("range must be non-negative")
    out = np.empty_like(s)
    cphi = np.cos(phi)
    out[..., 0] = r * cphi * np.sin(theta)
    out[..., 1] = r * cphi * np.cos(theta)
    out[..., 2] = r * np.sin(phi)
    return out


def polar_project(r, theta):
    """Polar image coordinates ``(x, y) = R (sin theta, cos theta)``."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return np.stack([r * np.sin(theta), r * np.cos(theta)], axis=-1)


def approx_cart(r, theta, phi, w_phi: float = APPROX_ELEVATION_LIMIT):
    """Small-elevation Cartesian point ``(R sin theta, R cos theta, R sin phi)``."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi) > w_phi + 1e-12):
        logger.warning("approx_cart used beyond |phi| <= %.1f deg", math.degrees(w_phi))
    return np.stack([r * np.sin(theta), r * np.cos(theta), r * np.sin(phi)], axis=-1)


_warned: set = set()


def _warn_once(msg: str, value: float) -> None:
    key = (msg, round(value, 6))
    if key not in _warned:
        _warned.add(key)
        logger.warning(msg, value)


@dataclass(frozen=True)
class SonarGeometry:
    """Beam-bin layout of a forward-scan sonar image.

    Beam ``b`` and bin ``B`` are 1-based: ``R = r_min + (B-1) dR`` and
    ``theta = theta_min + (b-1) dtheta``.
    """

    n_beams: int = 96
    n_bins: int = 151
    r_min: float = 0.75
    r_max: float = 1.5
    w_theta: float = math.radians(14.5)
    w_phi: float = math.radians(7.0)
    theta_min: float | None = None
    delta_theta: float | None = None

    def __post_init__(self):
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be below r_max")
        if self.n_beams < 2 or self.n_bins < 2:
            raise ValueError("need at least 2 beams and 2 bins")
        if self.theta_min is None:
            object.__setattr__(self, "theta_min", -self.w_theta)
        if self.delta_theta is None:
            object.__setattr__(self, "delta_theta", 2 * self.w_theta / (self.n_beams - 1))
        if not math.radians(6) <= self.w_phi <= math.radians(10):
            _warn_once("vertical half-FoV %.1f deg outside the usual 6-10 deg",
                       math.degrees(self.w_phi))
        if not math.radians(15) <= self.w_theta <= math.radians(65):
            _warn_once("horizontal half-FoV %.1f deg outside the usual 15-65 deg",
                       math.degrees(self.w_theta))

    @property
    def delta_r(self) -> float:
        return (self.r_max - self.r_min) / (self.n_bins - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_beams, self.n_bins)

    def ranges(self) -> np.ndarray:
        """Range of every bin, shape ``(n_bins,)``."""
        return self.r_min + np.arange(self.n_bins) * self.delta_r

    def azimuths(self) -> np.ndarray:
        """Azimuth of every beam, shape ``(n_beams,)``."""
        return self.theta_min + np.arange(self.n_beams) * self.delta_theta

    def polar_grid(self) -> np.ndarray:
        """Polar ``(x, y)`` of every pixel, shape ``(n_beams, n_bins, 2)``."""
        th, rr = np.meshgrid(self.azimuths(), self.ranges(), indexing="ij")
        return polar_project(rr, th)

    def to_dict(self) -> dict:
        return {
            "n_beams": self.n_beams,
            "n_bins": self.n_bins,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "w_theta": self.w_theta,
            "w_phi": self.w_phi,
            "theta_min": self.theta_min,
            "delta_theta": self.delta_theta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SonarGeometry":
        return cls(
            n_beams=int(d["n_beams"]),
            n_bins=int(d["n_bins"]),
            r_min=float(d["r_min"]),
            r_max=float(d["r_max"]),
            w_theta=float(d["w_theta"]),
            w_phi=float(d["w_phi"]),
            theta_min=float(d["theta_min"]),
            delta_theta=float(d["delta_theta"]),
        )


def beam_bin_to_range_azimuth(b, bb, g: SonarGeometry):
    """1-based beam ``b`` and bin ``bb`` to ``(R, theta)``."""
    b = np.asarray(b)
    bb = np.asarray(bb)
    if np.any((b < 1) | (b > g.n_beams)) or np.any((bb < 1) | (bb > g.n_bins)):
        raise IndexOutOfRange(f"beam/bin outside 1..{g.n_beams} x 1..{g.n_bins}")
    r = g.r_min + (bb - 1) * g.delta_r
    theta = g.theta_min + (b - 1) * g.delta_theta
    return r, theta


def range_azimuth_to_beam_bin(r, theta, g: SonarGeometry):
    """Inverse of :func:`beam_bin_to_range_azimuth` as fractional 1-based indices."""
    bb = 1.0 + (np.asarray(r, dtype=float) - g.r_min) / g.delta_r
    b = 1.0 + (np.asarray(theta, dtype=float) - g.theta_min) / g.delta_theta
    return b, bb


def rotvec_to_matrix(r) -> np.ndarray:
    """Axis-angle vector (radians) to a 3x3 rotation matrix."""
    return Rotation.from_rotvec(np.asarray(r, dtype=float)).as_matrix()


def matrix_to_rotvec(m) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(m, dtype=float)).as_rotvec()


@dataclass
class SonarPose:
    """Sonar-to-world pose plus the sonar depth below the air-water interface.

    ``r`` is an axis-angle rotation and ``t`` the sonar position. The flat
    interface of this view is the horizontal plane ``z = t_z + depth_d``.
    """

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depth_d: float = 0.0

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.depth_d = float(self.depth_d)

    @property
    def rotation(self) -> np.ndarray:
        return rotvec_to_matrix(self.r)

    @property
    def pitch_beta(self) -> float:
        """Boresight tilt above the horizontal interface, radians."""
        boresight = self.rotation[:, 1]
        return float(np.arcsin(np.clip(boresight[2], -1.0, 1.0)))

    @property
    def surface_z(self) -> float:
        return float(self.t[2] + self.depth_d)

    def to_world(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.rotation.T + self.t

    def to_sonar(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.t) @ self.rotation

    def vector_to_world(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T

    def vector_to_sonar(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation

    @classmethod
    def from_euler(cls, heading: float = 0.0, pitch: float = 0.0, roll: float = 0.0,
                   t=(0.0, 0.0, 0.0), depth_d: float = 0.0) -> "SonarPose":
        """Roll about the boresight, then pitch about X, then heading about world Z."""
        rot = (Rotation.from_euler("z", heading)
               * Rotation.from_euler("x", pitch)
               * Rotation.from_euler("y", roll))
        return cls(r=rot.as_rotvec(), t=np.asarray(t, dtype=float), depth_d=depth_d)

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "t": self.t.tolist(), "depth_d": self.depth_d}

    @classmethod
    def from_dict(cls, d: dict) -> "SonarPose":
        return cls(r=d["r"], t=d["t"], depth_d=d.get("depth_d", 0.0))


def transform_pose(p, src: SonarPose, dst: SonarPose) -> np.ndarray:
    """Re-express points given in the ``src`` sonar frame in the ``dst`` sonar frame."""
    return dst.to_sonar(src.to_world(p))
