"""Volumetric and image error metrics."""

from __future__ import annotations

import numpy as np
import pytest

from sonar3d.mesh import box_mesh, icosphere
from sonar3d.metrics import EmptyRegion, image_error, intensity_error, nve, voxelize


def test_nve_identical_is_zero():
    s = icosphere(0.1, 3)
    assert nve(s, s) == 0.0


def test_nve_disjoint_is_one():
    a = box_mesh([0, 0, 0], [1, 1, 1])
    b = box_mesh([2, 0, 0], [3, 1, 1])
    assert nve(a, b) == 1.0


def test_shifted_cube_two_thirds():
    a = box_mesh([0, 0, 0], [1, 1, 1])
    b = box_mesh([0.5, 0, 0], [1.5, 1, 1])
    assert nve(a, b, resolution=128) == pytest.approx(2 / 3, abs=0.02)


@pytest.mark.parametrize("shift", [0.1, 0.25, 0.4])
def test_nve_cube_shift_analytic(shift):
    a = box_mesh([0, 0, 0], [1, 1, 1])
    b = box_mesh([shift, 0, 0], [1 + shift, 1, 1])
    # symmetric difference 2s over union 1+s
    assert nve(a, b) == pytest.approx(2 * shift / (1 + shift), abs=0.02)


def test_voxelized_sphere_volume():
    s = icosphere(1.0, 4)
    occ = voxelize(s, [-1.1] * 3, [1.1] * 3, 96)
    vol = occ.sum() * (2.2 / 96) ** 3
    assert vol == pytest.approx(s.volume(), rel=0.02)


def test_intensity_error_is_peak_normalized():
    a = np.array([[0.0, 2.0], [1.0, 0.0]])
    assert intensity_error(a, 3 * a, np.ones_like(a, bool)) == 0.0
    with pytest.raises(EmptyRegion):
        intensity_error(a, a, np.zeros_like(a, bool))


def test_image_error_baseline():
    naie, nace, e_i, flags = image_error(2.0, 0.5, 4.0, 1.0)
    assert (naie, nace, e_i, flags) == (0.5, 0.5, 0.5, [])
    *_, e_i, flags = image_error(1.0, 1.0, 0.0, 1.0)
    assert "zero_aie_baseline" in flags and e_i == 1.0
