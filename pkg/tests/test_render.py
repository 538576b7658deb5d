import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvq import render, world
from mvq.render import CameraPose

FRONT = CameraPose((0.0, -0.6, 0.2), (0.0, 0.0, 0.2), (0.0, 0.0, 1.0), 45.0)
BLUE = render.COLORS["blue"]
ORANGE = render.COLORS["orange"]
NONE = np.zeros((0, 3))


def cube(center, edge):
    c = np.asarray(center, dtype=np.float64)
    return c - edge / 2, c + edge / 2


def boxes(*items):
    lo, hi, rgb = zip(*items)
    return np.array(lo), np.array(hi), np.array(rgb)


def color_mask(img, rgb, tol=0.35):
    """Pixels whose hue is dominated by ``rgb`` (flat shading only scales the color)."""
    px = img.pixels[..., :3]
    target = np.asarray(rgb) / np.linalg.norm(rgb)
    norm = np.linalg.norm(px, axis=-1, keepdims=True)
    cos = (px / np.maximum(norm, 1e-9)) @ target
    return (cos > 1 - tol / 10) & (norm[..., 0] > 0.2)


def test_camera_pose_validation():
    with pytest.raises(ValueError):
        CameraPose((0, 0, 0), (0, 0, 1), (0, 0, 1))
    with pytest.raises(ValueError):
        CameraPose((0, 0, 0), (1, 0, 0), (0, 0, 2))


def test_empty_world_is_background():
    img = render.render_boxes(NONE, NONE, NONE, FRONT, with_depth=True)
    rgb = img.pixels[..., :3].reshape(-1, 3)
    assert np.all(rgb == rgb[0])
    assert np.allclose(rgb[0], render.BACKGROUND, atol=1 / 255)
    assert np.all(img.pixels[..., 3] == 1.0)


@pytest.mark.parametrize("center", [(0.0, 0.0, 0.2), (0.08, 0.05, 0.25), (-0.1, 0.1, 0.12)])
def test_blob_centroid_matches_pinhole_projection(center):
    lo, hi = cube(center, 0.05)
    img = render.render_boxes(lo[None], hi[None], np.array([BLUE]), FRONT, supersample=5)
    background = render.render_boxes(NONE, NONE, NONE, FRONT, supersample=5).pixels
    mask = np.abs(img.pixels - background).max(axis=-1) > 0
    rows, cols = np.nonzero(mask)
    assert mask.sum() > 4
    # contiguous: every blob pixel has a 4-neighbour in the blob
    for r, c in zip(rows, cols):
        assert any(mask[r + dr, c + dc] for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                   if 0 <= r + dr < 32 and 0 <= c + dc < 32)
    r_true, c_true, _ = FRONT.project(center)
    assert abs(rows.mean() + 0.5 - r_true) < 1.0
    assert abs(cols.mean() + 0.5 - c_true) < 1.0


def test_nearer_block_occludes():
    a = cube((0.0, -0.1, 0.2), 0.06)
    b = cube((0.0, 0.0, 0.2), 0.06)
    img = render.render_boxes(*boxes((*b, ORANGE), (*a, BLUE)), FRONT)
    r, c, _ = FRONT.project((0.0, -0.1, 0.2))
    px = img.pixels[int(r), int(c)]
    assert color_mask(img, BLUE)[int(r), int(c)] and not color_mask(img, ORANGE)[int(r), int(c)], px


def test_depth_is_monotone_in_distance():
    near = render.render_boxes(*[x[None] for x in cube((0, -0.2, 0.2), 0.05)], np.array([BLUE]), FRONT, True)
    far = render.render_boxes(*[x[None] for x in cube((0, 0.2, 0.2), 0.05)], np.array([BLUE]), FRONT, True)
    r, c, _ = FRONT.project((0, 0, 0.2))
    assert near.pixels[int(r), int(c), 3] < far.pixels[int(r), int(c), 3] < 1.0


@given(st.floats(-0.3, 0.6))
def test_silhouette_shrinks_with_distance(y):
    def area(yy):
        lo, hi = cube((0.0, yy, 0.2), 0.06)
        return color_mask(render.render_boxes(lo[None], hi[None], np.array([BLUE]), FRONT), BLUE).sum()
    assert area(y + 0.15) <= area(y)


def test_pixels_are_valid_and_quantized():
    cfg = world.make_task_config("Insertion")
    for seed in range(5):
        s = world.reset_episode(cfg, seed)
        obs = render.observe(s, render.perturb_cameras(render.nominal_cameras(), seed), with_depth=True)
        for v in obs.views:
            p = v.pixels
            assert p.shape == (32, 32, 4) and np.all(np.isfinite(p)) and p.min() >= 0 and p.max() <= 1
            assert np.array_equal(np.round(p * 255) / np.float32(255), p)


def test_observe_views_and_gripper_flag():
    cfg = world.make_task_config("Insertion")
    s = replace(world.reset_episode(cfg, 0), gripper_closed=True)
    cams = render.nominal_cameras()
    obs = render.observe(s, cams)
    assert [v.view_id for v in obs.views] == [0, 1, 2]
    assert obs.gripper_closed
    again = render.observe(s, cams)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(obs.views, again.views))


def test_gripper_aperture_is_visible():
    cfg = world.make_task_config("Insertion")
    s = world.reset_episode(cfg, 0)
    cam = render.nominal_cameras()[0]
    assert not np.array_equal(render.render(s, cam).pixels, render.render(replace(s, gripper_closed=True), cam).pixels)


def test_every_nominal_view_sees_both_bins():
    cfg = world.make_task_config("Insertion")
    s = world.reset_episode(cfg, 0)
    for cam in render.nominal_cameras():
        for center in s.bins:
            r, c, z = cam.project(center)
            assert z > 0 and 0 <= r < 32 and 0 <= c < 32


def test_shoulder_is_closer_to_left_than_right():
    s, l, r = (np.array(c.position) for c in render.nominal_cameras())
    assert np.linalg.norm(s - l) < np.linalg.norm(s - r)


def test_zero_noise_perturbation_is_identity():
    cams = render.nominal_cameras()
    assert render.perturb_cameras(cams, 1, noise_std=0.0) == cams


def test_perturbation_is_deterministic():
    cams = render.nominal_cameras()
    assert render.perturb_cameras(cams, 5) == render.perturb_cameras(cams, 5)
    assert render.perturb_cameras(cams, 5) != render.perturb_cameras(cams, 6)


def test_perturbation_std_matches_uniform_oracle():
    # uniform on [-a, a] has standard deviation a / sqrt(3)
    cam = [render.nominal_cameras()[0]]
    rng = np.random.default_rng(0)
    x = np.array([render.perturb_cameras(cam, rng)[0].position[0] for _ in range(100_000)]) - cam[0].position[0]
    assert abs(x.std() - 0.01) < 0.05 * 0.01
    assert np.abs(x).max() <= 0.01 * math.sqrt(3) + 1e-12


@given(st.integers(0, 10 ** 6))
def test_perturbed_up_is_unit(seed):
    for c in render.perturb_cameras(render.nominal_cameras(), seed):
        assert abs(np.linalg.norm(c.up) - 1) < 1e-12


def test_raw_dump_round_trip(tmp_path):
    s = world.reset_episode(world.make_task_config("Insertion"), 0)
    img = render.render(s, render.nominal_cameras()[1], with_depth=True, view_id=1)
    render.dump_raw(img, tmp_path / "v.raw")
    blob = (tmp_path / "v.raw").read_bytes()
    assert len(blob) == 16 + 32 * 32 * 4
    back = render.load_raw(tmp_path / "v.raw")
    assert np.array_equal(back.pixels, img.pixels)


def test_resolution_limits():
    s = world.reset_episode(world.make_task_config("Insertion"), 0)
    assert render.render(s, FRONT, resolution=64, supersample=1).pixels.shape == (64, 64, 3)
    with pytest.raises(ValueError):
        render.render(s, FRONT, resolution=65)
