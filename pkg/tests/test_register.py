"""Contour ICP, block correlation and motion blending."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonar3d.forward import render
from sonar3d.geom import SonarGeometry, beam_bin_to_range_azimuth, polar_project
from sonar3d.mesh import bumpy_sphere
from sonar3d.register import (FlatRegion, SearchConfig, alpha, blend_motions, correlation_field,
                              correlation_search, icp_align, pcc, r_schedule, regularized_score,
                              relevant)
from sonar3d.scene import SceneConfig, pose_schedule


def exhaustive_match(synth, data, at, g, iteration, cfg):
    """Enumerate every in-image candidate of the search window and keep the best score.

    Ties go to the smaller motion, then the smaller bin, then the smaller beam.
    Returns ``None`` when the best raw correlation is below the flat-region cutoff.
    """
    hb, hB = cfg.block[0] // 2, cfg.block[1] // 2
    wb, wB = cfg.window[0] // 2, cfg.window[1] // 2
    b0, B0 = at
    ref = synth[b0 - hb:b0 + hb + 1, B0 - hB:B0 + hB + 1].ravel()
    r0, t0 = beam_bin_to_range_azimuth(b0 + 1, B0 + 1, g)
    p0 = np.array([r0 * math.sin(t0), r0 * math.cos(t0)])
    r = min(0.8, 0.2 + 0.15 * iteration)
    best = None
    for b in range(b0 - wb, b0 + wb + 1):
        for B in range(B0 - wB, B0 + wB + 1):
            if b - hb < 0 or B - hB < 0 or b + hb >= data.shape[0] or B + hB >= data.shape[1]:
                continue
            blk = data[b - hb:b + hb + 1, B - hB:B + hB + 1].ravel()
            if np.std(blk) == 0 or np.std(ref) == 0:
                c = 0.0
            else:
                c = float(np.corrcoef(ref, blk)[0, 1])
            rr, tt = beam_bin_to_range_azimuth(b + 1, B + 1, g)
            v = p0 - np.array([rr * math.sin(tt), rr * math.cos(tt)])
            d = float(np.hypot(*v)) * 100
            score = c / (1 + r) ** (1 + math.sqrt(d))
            key = (-score, d, B, b)
            if best is None or key < best[0]:
                best = (key, b, B, v, score, c)
    _, b, B, v, score, c = best
    if c < cfg.flat_pcc:
        return None
    return b, B, v, score


def fuzz_views(n=50):
    """Pairs of rendered synthetic/data images with perturbed geometry and noise."""
    g = SonarGeometry()
    truth = bumpy_sphere(0.1, 3)
    poses = pose_schedule(SceneConfig(m_p=5, m_r=10))
    rng = np.random.default_rng(42)
    for k in range(n):
        pose = poses[k % len(poses)]
        synth = render(truth, pose, g).intensities
        shifted = truth.copy()
        shifted.vertices = shifted.vertices * rng.uniform(0.9, 1.1) + rng.normal(scale=0.01, size=3)
        data = render(shifted, pose, g).intensities + 0.05 * rng.standard_normal(g.shape)
        yield g, synth, np.clip(data, 0, None), int(rng.integers(0, 6)), rng


def test_correlation_search_matches_exhaustive():
    cfg = SearchConfig()
    calls = 0
    for g, synth, data, it, rng in fuzz_views(50):
        obj = np.argwhere(synth > 0.05)
        picks = obj[rng.choice(len(obj), min(6, len(obj)), replace=False)]
        edge = np.array([[2, 3], [g.n_beams - 3, g.n_bins - 4]])
        for at in np.vstack([picks, edge]):
            at = tuple(int(x) for x in at)
            if at[0] < 2 or at[1] < 3 or at[0] > g.n_beams - 3 or at[1] > g.n_bins - 4:
                continue
            want = exhaustive_match(synth, data, at, g, it, cfg)
            calls += 1
            if want is None:
                with pytest.raises(FlatRegion):
                    correlation_search(synth, data, at, g, it, cfg)
                continue
            got = correlation_search(synth, data, at, g, it, cfg)
            assert (got.beam, got.bin) == want[:2]
            np.testing.assert_allclose(got.motion, want[2], atol=1e-12)
            assert got.score == pytest.approx(want[3], abs=1e-12)
    assert calls >= 300


def test_correlation_field_equals_search():
    cfg = SearchConfig()
    for g, synth, data, it, rng in fuzz_views(10):
        pix = np.argwhere(synth > 0.05)[::7]
        mot, score, _, ok = correlation_field(synth, data, pix, g, it, cfg)
        for k, at in enumerate(pix):
            try:
                m = correlation_search(synth, data, tuple(at), g, it, cfg)
            except (FlatRegion, IndexError):
                assert not ok[k]
                continue
            assert ok[k]
            np.testing.assert_allclose(mot[k], m.motion, atol=1e-12)
            assert score[k] == pytest.approx(m.score, abs=1e-12)


def test_identical_images_zero_motion(geometry):
    img = np.random.default_rng(0).random(geometry.shape)
    m = correlation_search(img, img, (40, 60), geometry, 0)
    np.testing.assert_allclose(m.motion, 0.0)
    assert m.c_pc == pytest.approx(1.0)
    assert m.score == pytest.approx(1 / 1.2)


def test_flat_region_raises(geometry):
    with pytest.raises(FlatRegion):
        correlation_search(np.zeros(geometry.shape), np.zeros(geometry.shape), (40, 60), geometry)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5))
def test_pcc_affine_invariant(scale, offset):
    rng = np.random.default_rng(1)
    a, b = rng.random(35), rng.random(35)
    assert pcc(a, scale * b + offset) == pytest.approx(pcc(a, b), abs=1e-9)


def test_pcc_constant_block_is_zero():
    assert pcc(np.ones(9), np.arange(9)) == 0.0


def test_score_examples():
    assert regularized_score(0.7, 0.0, r=0.3) == pytest.approx(0.7 / 1.3)
    assert regularized_score(1.0, 1.0, r=0.2) == pytest.approx(1 / 1.2 ** 2)
    assert regularized_score(1.0, 2.5, r=0.8) == pytest.approx(0.219, abs=5e-4)
    assert regularized_score(1.0, 2.5, r=0.8) < regularized_score(0.65, 0.0, r=0.8)


def test_r_schedule_caps():
    assert [r_schedule(k) for k in range(6)] == pytest.approx([0.2, 0.35, 0.5, 0.65, 0.8, 0.8])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1), st.floats(0, 10), st.floats(0, 5), st.floats(0.05, 1.0))
def test_score_monotone(c, d, dd, r):
    assert regularized_score(c, d + dd + 1e-3, r=r) < regularized_score(c, d, r=r)
    assert regularized_score(c, d, r=r + 0.1) < regularized_score(c, d, r=r)


def test_alpha_profile():
    assert alpha(0.0) == 1.0 and alpha(0.005) == 1.0
    assert alpha(0.02) == pytest.approx(0.01)
    assert alpha(0.0125) == pytest.approx(0.1, rel=1e-9)
    assert alpha(0.03) < 0.01


def test_blend_motions():
    contour = np.array([[0.0, 1.0]])
    vc = np.array([[0.01, 0.0]])
    pix = np.array([[0.0, 1.0], [0.03, 1.0], [0.01, 1.0]])
    vi = np.array([[0.0, 0.02]] * 3)
    out, a, has, src = blend_motions(pix, contour, vc, vi, np.array([True, True, False]))
    np.testing.assert_allclose(out[0], vc[0])
    np.testing.assert_allclose(out[1], vi[1], atol=0.01 * 0.03)
    assert has.tolist() == [True, True, False]
    assert src[0] == "contour" and src[1] in ("blended", "correlation")


def lumpy_curve(n=240):
    s = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = 0.08 * (1 + 0.25 * np.cos(3 * s) + 0.1 * np.sin(2 * s))
    return np.c_[1.3 * r * np.cos(s), r * np.sin(s) + 1.0]


def frontal_arc(n=200):
    s = np.linspace(-0.5, 0.5, n)
    r = 0.9 + 0.01 * np.sin(7 * s)
    return np.c_[r * np.sin(s), r * np.cos(s)]


def rigid_case(rng, pts):
    ang = math.radians(rng.uniform(-3, 3))
    t = rng.normal(size=2)
    t = t / np.linalg.norm(t) * rng.uniform(0, 0.02)
    c = pts.mean(axis=0)
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    return (pts - c) @ rot.T + c + t


def test_icp_identity():
    pts = lumpy_curve()
    m = icp_align(pts, pts)
    np.testing.assert_allclose(m.rotation, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(m.translation, 0, atol=1e-12)
    assert m.lam == pytest.approx(0, abs=1e-12) and m.converged


def test_icp_translation():
    pts = lumpy_curve()
    m = icp_align(pts, pts + [0.01, 0.02])
    np.testing.assert_allclose(m.translation, [0.01, 0.02], atol=1e-4)
    assert m.lam < 1e-4
    assert relevant(m)


def test_icp_unequal_sizes():
    pts = lumpy_curve(240)
    dst = rigid_case(np.random.default_rng(3), pts)[::2]
    m = icp_align(pts, dst)
    assert len(m.dst_index) == len(pts)
    assert m.lam < 2e-3


@pytest.mark.parametrize("curve", [lumpy_curve, frontal_arc], ids=["closed", "arc"])
@pytest.mark.parametrize("side", ["data", "model"])
def test_icp_contaminated(curve, side):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        src = curve()
        truth = rigid_case(rng, src)
        dst = truth.copy()
        fit_src = src.copy()
        k = int(0.2 * len(src))
        idx = rng.choice(len(src), k, replace=False)
        if side == "data":
            lo, hi = dst.min(axis=0) - 0.03, dst.max(axis=0) + 0.03
            dst[idx] = rng.uniform(lo, hi, (k, 2))
        else:
            u = rng.normal(size=(k, 2))
            fit_src[idx] += 0.1 * u / np.linalg.norm(u, axis=1, keepdims=True)
        m = icp_align(fit_src, dst)
        worst = max(worst, np.linalg.norm(m.apply(src) - truth, axis=1).max())
    assert worst <= 1e-3
