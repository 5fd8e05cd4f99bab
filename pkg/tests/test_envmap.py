"""Analytic oracles for equirectangular math, rotation, and irradiance."""

import numpy as np
import pytest

from lightblend.envmap import (
    CropSpec,
    EnvMap,
    bilinear_sample,
    crop_ray_directions,
    dir_to_equirect,
    equirect_to_dir,
    irradiance,
    load_envmap,
    project_to_background,
    rotate_envmap,
    save_envmap,
    solid_angle_map,
    tonemap_ldr,
)


def smooth_env(h=64, seed=0):
    # low-frequency positive radiance so bilinear interpolation is accurate
    rng = np.random.default_rng(seed)
    us, vs = np.meshgrid(np.arange(2 * h) + 0.5, np.arange(h) + 0.5)
    dirs = equirect_to_dir(us, vs, h, 2 * h)
    k = rng.normal(size=(3, 3))
    px = 1.5 + np.tanh(dirs @ k.T)
    return EnvMap(px.astype(np.float32))


def test_direction_convention_axes():
    h, w = 64, 128
    u, v = dir_to_equirect(np.array([0.0, 0.0, 1.0]), h, w)
    assert u == pytest.approx(w / 2) and v == pytest.approx(h / 2)
    u, v = dir_to_equirect(np.array([1.0, 0.0, 0.0]), h, w)
    assert u == pytest.approx(3 * w / 4) and v == pytest.approx(h / 2)
    u, v = dir_to_equirect(np.array([0.0, 1.0, 0.0]), h, w)
    assert v == pytest.approx(0.0)
    u, v = dir_to_equirect(np.array([0.0, -1.0, 0.0]), h, w)
    assert v == pytest.approx(h)
    u, v = dir_to_equirect(np.array([0.0, 0.0, -1.0]), h, w)
    assert u % w == pytest.approx(0.0, abs=1e-9)


def test_dir_equirect_round_trip():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    u, v = dir_to_equirect(d, 64, 128)
    back = equirect_to_dir(u, v, 64, 128)
    assert np.max(np.abs(back - d)) < 1e-5


def test_dir_to_equirect_rejects_non_unit():
    with pytest.raises(ValueError):
        dir_to_equirect(np.array([0.0, 0.0, 2.0]), 32, 64)


def test_envmap_validation():
    with pytest.raises(ValueError):
        EnvMap(np.ones((16, 16, 3), dtype=np.float32))  # W != 2H
    with pytest.raises(ValueError):
        EnvMap(np.full((16, 32, 3), -1.0, dtype=np.float32))
    bad = np.ones((16, 32, 3), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        EnvMap(bad)


def test_rotation_permutes_radiance():
    env = smooth_env(32, seed=2)
    rot = rotate_envmap(env, 1.2345)
    assert np.array_equal(np.sort(rot.pixels, axis=1), np.sort(env.pixels, axis=1))
    # texel-aligned yaw is an exact column roll
    k = 5
    rot = rotate_envmap(env, 2 * np.pi * k / env.w)
    assert np.array_equal(rot.pixels, np.roll(env.pixels, -k, axis=1))


def test_rotation_composition_and_wrap():
    env = smooth_env(32, seed=3)
    step = 2 * np.pi / env.w
    a, b = 3 * step, 11 * step
    ab = rotate_envmap(rotate_envmap(env, a), b)
    assert np.array_equal(ab.pixels, rotate_envmap(env, a + b).pixels)
    full = rotate_envmap(env, 2 * np.pi)
    assert np.array_equal(full.pixels, env.pixels)


def test_projection_of_rotation_matches_rotated_crop():
    env = smooth_env(64, seed=4)
    crop_0 = CropSpec(fov_deg=60.0, yaw=0.0, pitch=0.1, out_w=32, out_h=32)
    for yaw in (2 * np.pi * 9 / env.w, 2 * np.pi * 41 / env.w):
        crop_a = CropSpec(fov_deg=60.0, yaw=yaw, pitch=0.1, out_w=32, out_h=32)
        direct = project_to_background(env, crop_a)
        rotated = project_to_background(rotate_envmap(env, yaw), crop_0)
        rel = np.abs(direct - rotated) / np.abs(direct)
        assert rel.max() < 1e-3
    # a fractional yaw is snapped to the nearest column; the crop at the
    # snapped yaw reproduces the rotated projection
    snapped = round(0.7 / (2 * np.pi) * env.w) * 2 * np.pi / env.w
    crop_s = CropSpec(fov_deg=60.0, yaw=snapped, pitch=0.1, out_w=32, out_h=32)
    direct = project_to_background(env, crop_s)
    rotated = project_to_background(rotate_envmap(env, 0.7), crop_0)
    rel = np.abs(direct - rotated) / np.abs(direct)
    assert rel.max() < 1e-5


def test_solid_angles_sum_to_sphere():
    omega = solid_angle_map(64, 128)
    assert omega.shape == (64, 128)
    assert abs(omega.sum() - 4 * np.pi) / (4 * np.pi) < 0.005
    # symmetric about the equator, constant along rows
    assert np.allclose(omega, omega[::-1, :])
    assert np.allclose(omega, omega[:, :1])


def test_constant_env_irradiance_is_pi_L():
    level = 0.37
    env = EnvMap(np.full((64, 128, 3), level, dtype=np.float32))
    rng = np.random.default_rng(5)
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    e = irradiance(env, n)
    assert np.all(np.abs(e - np.pi * level) / (np.pi * level) < 0.01)


def test_single_texel_irradiance_matches_point_light():
    h, w = 64, 128
    px = np.zeros((h, w, 3), dtype=np.float32)
    vi, ui = 20, 40
    px[vi, ui] = 100.0
    env = EnvMap(px)
    d = equirect_to_dir(ui + 0.5, vi + 0.5, h, w)
    omega = solid_angle_map(h, w)[vi, ui]
    for n, expect in ((d, 100.0 * omega), (-d, 0.0)):
        got = irradiance(env, n)
        assert np.allclose(got, expect, rtol=1e-6, atol=1e-9)


def test_irradiance_is_linear_in_radiance():
    env = smooth_env(32, seed=6)
    doubled = EnvMap(env.pixels * 2.0)
    n = np.array([0.0, 0.0, -1.0])
    assert np.allclose(irradiance(doubled, n), 2.0 * irradiance(env, n), rtol=1e-7)


def test_bilinear_sample_hits_texel_centers_and_wraps():
    env = smooth_env(16, seed=7)
    us, vs = np.meshgrid(np.arange(env.w) + 0.5, np.arange(env.h) + 0.5)
    assert np.allclose(bilinear_sample(env, us, vs), env.pixels, atol=1e-6)
    left = bilinear_sample(env, np.array([0.25]), np.array([8.0]))
    wrapped = bilinear_sample(env, np.array([0.25 + env.w]), np.array([8.0]))
    assert np.allclose(left, wrapped)


def test_crop_rays_follow_yaw_and_pitch():
    crop = CropSpec(fov_deg=90.0, yaw=0.0, pitch=0.0, out_w=33, out_h=33)
    dirs = crop_ray_directions(crop)
    assert dirs.shape == (33, 33, 3)
    assert np.allclose(dirs[16, 16], [0.0, 0.0, 1.0], atol=1e-12)
    # outermost pixel centers sit half a pixel inside the frustum edge
    span = np.arccos(np.dot(dirs[16, 0], dirs[16, -1]))
    assert span == pytest.approx(2 * np.arctan((1 - 1 / 33) * np.tan(np.pi / 4)), abs=1e-9)
    up = crop_ray_directions(CropSpec(90.0, 0.0, 0.3, 33, 33))
    assert up[16, 16, 1] == pytest.approx(np.sin(0.3), abs=1e-9)
    right = crop_ray_directions(CropSpec(90.0, 0.4, 0.0, 33, 33))
    assert right[16, 16, 0] == pytest.approx(np.sin(0.4), abs=1e-9)


def test_tonemap_properties():
    x = np.array([0.0, 0.5, 1.0, 10.0, 1e6])
    y = tonemap_ldr(x)
    assert y[0] == 0.0
    assert np.all(np.diff(y) > 0)
    assert np.all(y < 1.0)
    assert y[2] == pytest.approx(0.5 ** (1 / 2.2), rel=1e-6)
    with pytest.raises(ValueError):
        tonemap_ldr(np.array([-0.1]))


def test_envmap_file_round_trip(tmp_path):
    env = smooth_env(16, seed=8)
    path = tmp_path / "e.envm"
    save_envmap(env, path)
    back = load_envmap(path)
    assert np.array_equal(back.pixels, env.pixels)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_envmap(path)
    path2 = tmp_path / "t.envm"
    path2.write_bytes(save_bytes_truncated(env))
    with pytest.raises(ValueError):
        load_envmap(path2)


def save_bytes_truncated(env):
    import io
    import struct

    buf = io.BytesIO()
    buf.write(struct.pack("<4sII", b"ENVM", env.h, env.w))
    buf.write(env.pixels.astype("<f4").tobytes()[:-8])
    return buf.getvalue()
