"""Coordinate transform tests."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonar3d.geom import (SonarGeometry, SonarPose, IndexOutOfRange, approx_cart,
                          beam_bin_to_range_azimuth, cart_to_sph, polar_project,
                          range_azimuth_to_beam_bin, sph_to_cart, transform_pose)


def _random_sph(rng, n):
    r = rng.uniform(0.1, 10.0, n)
    th = rng.uniform(-math.pi / 2, math.pi / 2, n)
    ph = rng.uniform(-math.pi / 3, math.pi / 3, n)
    return np.c_[r, th, ph]


def test_cart_sph_round_trip(rng):
    s = _random_sph(rng, 10_000)
    p = sph_to_cart(s)
    assert np.abs(cart_to_sph(p) - s).max() <= 1e-9
    assert np.abs(sph_to_cart(cart_to_sph(p)) - p).max() <= 1e-9


def test_boresight_is_plus_y():
    s = cart_to_sph(np.array([[0.0, 2.0, 0.0], [1.0, 1.0, 0.0]]))
    np.testing.assert_allclose(s[0], [2.0, 0.0, 0.0])
    assert s[1, 1] == pytest.approx(math.pi / 4)


def test_negative_range_rejected():
    with pytest.raises(ValueError):
        sph_to_cart([-1.0, 0.0, 0.0])


def test_approx_cart_error_bound(rng):
    w_phi = math.radians(7.0)
    bound = 1 - math.cos(w_phi)
    assert bound <= 0.0075
    s = _random_sph(rng, 5000)
    s[:, 2] = rng.uniform(-w_phi, w_phi, len(s))
    exact = sph_to_cart(s)
    approx = approx_cart(s[:, 0], s[:, 1], s[:, 2])
    rel = np.linalg.norm(approx[:, :2] - exact[:, :2], axis=1) / s[:, 0]
    assert rel.max() <= bound + 1e-12
    edge = approx_cart(1.0, 0.3, w_phi)
    np.testing.assert_allclose(np.linalg.norm(edge[:2] - sph_to_cart([1.0, 0.3, w_phi])[:2]), bound)


def test_polar_projection_drops_elevation():
    np.testing.assert_allclose(polar_project(2.0, math.pi / 2), [2.0, 0.0], atol=1e-15)


def test_beam_bin_mapping(geometry):
    r, th = beam_bin_to_range_azimuth(1, 1, geometry)
    assert r == geometry.r_min and th == pytest.approx(-geometry.w_theta)
    r, th = beam_bin_to_range_azimuth(geometry.n_beams, geometry.n_bins, geometry)
    assert r == pytest.approx(geometry.r_max) and th == pytest.approx(geometry.w_theta)
    b, bb = range_azimuth_to_beam_bin(r, th, geometry)
    assert (b, bb) == (pytest.approx(geometry.n_beams), pytest.approx(geometry.n_bins))
    with pytest.raises(IndexOutOfRange):
        beam_bin_to_range_azimuth(0, 1, geometry)
    with pytest.raises(IndexOutOfRange):
        beam_bin_to_range_azimuth(1, geometry.n_bins + 1, geometry)


def test_geometry_defaults(geometry):
    assert geometry.shape == (96, 151)
    assert geometry.delta_r == pytest.approx(0.005)
    assert SonarGeometry.from_dict(geometry.to_dict()) == geometry
    with pytest.raises(ValueError):
        SonarGeometry(r_min=2.0, r_max=1.0)


def test_reference_pose_is_identity(rng):
    p = rng.normal(size=(20, 3))
    np.testing.assert_allclose(SonarPose().to_world(p), p)


angles = st.floats(-math.pi, math.pi, allow_nan=False)
offsets = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(angles, st.floats(-1.2, 1.2), angles, offsets, offsets, offsets)
def test_pose_round_trip(h, p, r, tx, ty, tz):
    pose = SonarPose.from_euler(h, p, r, t=(tx, ty, tz))
    pts = np.random.default_rng(0).normal(size=(8, 3))
    np.testing.assert_allclose(pose.to_sonar(pose.to_world(pts)), pts, atol=1e-9)
    back = SonarPose.from_dict(pose.to_dict())
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-12)


def test_transform_pose_chains_frames(rng):
    a = SonarPose.from_euler(0.3, 0.1, -0.2, t=(1, 2, 3))
    b = SonarPose.from_euler(-1.0, 0.0, 0.5, t=(0, -1, 0.5))
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(b.to_world(transform_pose(p, a, b)), a.to_world(p), atol=1e-12)


def test_pitch_beta_follows_boresight():
    pose = SonarPose.from_euler(0.7, math.radians(10), 0.4)
    assert pose.pitch_beta == pytest.approx(math.radians(10))
