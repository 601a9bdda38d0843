import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cadfield import camera
from cadfield.camera import CameraPose, PoseUpdate
from cadfield.errors import AlignmentError, InvalidInputError


def random_pose(rng, size=32):
    rot = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    return CameraPose(rot, rng.normal(size=3), 40.0, size, size)


def test_exp_so3_matches_scipy(rng):
    for scale in (1e-9, 1e-4, 0.05, 1.0, 3.0):
        w = rng.normal(size=3)
        w *= scale / np.linalg.norm(w)
        assert np.allclose(camera.exp_so3(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-14)


def test_log_inverts_exp(rng):
    for _ in range(20):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        assert np.allclose(camera.log_so3(camera.exp_so3(w)), w, atol=1e-9)


def test_rotation_angle_small_and_large():
    assert camera.rotation_angle(camera.exp_so3([1e-10, 0, 0])) == pytest.approx(1e-10, rel=1e-6)
    assert camera.rotation_angle(camera.exp_so3([0, 3.0, 0])) == pytest.approx(3.0)


def test_exp_so3_tensor_value_and_gradient(rng):
    from cadfield import autodiff as ad

    for scale in (1e-3, 0.7):
        w0 = rng.normal(size=3) * scale
        target = rng.normal(size=(3, 3))
        w = ad.parameter(w0)
        loss = ad.sum(camera.exp_so3_tensor(w) * target)
        loss.backward()
        assert np.allclose(camera.exp_so3_tensor(w0).data, camera.exp_so3(w0), atol=1e-14)
        h = 1e-6
        fd = [(np.sum(camera.exp_so3(w0 + h * e) * target) - np.sum(camera.exp_so3(w0 - h * e) * target)) / (2 * h)
              for e in np.eye(3)]
        assert np.allclose(w.grad, fd, rtol=1e-6, atol=1e-8)


def test_library_lattice_properties():
    poses = camera.sample_library_poses(100, 2.0)
    centers = np.array([p.center for p in poses])
    assert np.allclose(np.linalg.norm(centers, axis=1), 2.0, atol=1e-9)
    unit = centers / 2.0
    cos = np.clip(unit @ unit.T, -1, 1)
    np.fill_diagonal(cos, -1)
    assert math.degrees(math.acos(cos.max())) >= 12.0
    for p in poses:
        assert np.allclose(p.rotation @ [0, 0, -1], -p.center / 2.0, atol=1e-9)
    keys = [(math.atan2(c[1], c[0]), math.asin(c[2] / 2.0)) for c in centers]
    assert keys == sorted(keys)


def test_single_pose_lattice():
    (p,) = camera.sample_library_poses(1, 3.0)
    assert np.linalg.norm(p.center) == pytest.approx(3.0)
    assert np.allclose(p.forward, -p.center / 3.0)


def test_look_at_pole_uses_fallback():
    rot = camera.look_at(np.array([0.0, 0.0, 2.0]))
    assert np.allclose(rot.T @ rot, np.eye(3))
    assert np.allclose(rot @ [0, 0, -1], [0, 0, -1])


def test_pose_validation():
    with pytest.raises(InvalidInputError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 10.0, 8, 8)
    with pytest.raises(InvalidInputError):
        CameraPose(np.eye(3), np.zeros(3), 0.0, 8, 8)
    with pytest.raises(InvalidInputError):
        PoseUpdate([np.nan, 0, 0], [0, 0, 0])


def test_principal_ray_is_forward():
    pose = camera.orbit_pose(0.4, 0.3, 2.0, 64)
    rays = camera.generate_rays(pose, [pose.principal], (1.0, 3.0))
    assert np.allclose(rays.directions[0], pose.forward, atol=1e-15)


def test_symmetric_pixels_give_mirrored_directions():
    pose = CameraPose(np.eye(3), np.zeros(3), 50.0, 64, 64)
    d = camera.camera_directions(pose, [[32 - 7.5, 32 + 3.0], [32 + 7.5, 32 - 3.0]])
    assert np.allclose(d[0] * [-1, -1, 1], d[1])


def test_frustum_bound():
    pose = camera.orbit_pose(1.0, -0.2, 2.0, 64)
    rays = camera.generate_rays(pose, pose.pixel_centers(), (1.0, 3.0))
    assert len(rays) == 4096
    assert np.allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
    angles = np.arccos(np.clip(rays.directions @ pose.forward, -1, 1))
    assert angles.max() <= math.atan(32 / pose.focal * math.sqrt(2)) + 1e-12


def test_rays_hit_projected_points(rng):
    pose = random_pose(rng, 40)
    pts = pose.center + pose.rotation @ np.array([0.3, -0.2, -2.0])
    xy, depth = pose.project(pts[None])
    ray = camera.generate_rays(pose, xy, (0.1, 5.0))
    along = (pts - pose.center) @ ray.directions[0]
    assert np.allclose(pose.center + along * ray.directions[0], pts, atol=1e-12)


def test_zero_update_is_identity(rng):
    init = random_pose(rng)
    out = camera.apply_pose_update(PoseUpdate(), init)
    assert np.array_equal(out.rotation, init.rotation) and np.array_equal(out.center, init.center)


def test_quarter_turn():
    init = CameraPose(np.eye(3), np.zeros(3), 10.0, 8, 8)
    out = camera.apply_pose_update(PoseUpdate([0, 0, math.pi / 2], [0, 0, 0]), init)
    assert np.allclose(out.rotation[:, 0], [0, 1, 0])


def test_update_matches_matrix_product(rng):
    for _ in range(10):
        init = random_pose(rng)
        upd = PoseUpdate(rng.normal(size=3), rng.normal(size=3))
        t = np.eye(4)
        t[:3, :3] = Rotation.from_rotvec(upd.axis_angle).as_matrix()
        t[:3, 3] = upd.delta_t
        assert np.allclose(camera.apply_pose_update(upd, init).matrix(), t @ init.matrix(), atol=1e-12)


def _ring(n=8):
    return [camera.orbit_pose(2 * math.pi * i / n, 0.3 * math.sin(i), 2.0, 32) for i in range(n)]


def test_registration_self_is_zero():
    poses = _ring()
    rot, trans = camera.pose_registration_error(poses, poses)
    assert rot == pytest.approx(0.0, abs=1e-6) and trans == pytest.approx(0.0, abs=1e-9)


def test_registration_removes_global_rotation():
    ref = _ring()
    g = Rotation.from_rotvec(np.radians(10) * np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])).as_matrix()
    est = [CameraPose(g @ p.rotation, g @ p.center, p.focal, p.width, p.height) for p in ref]
    rot, trans = camera.pose_registration_error(est, ref)
    assert rot == pytest.approx(0.0, abs=1e-6) and trans == pytest.approx(0.0, abs=1e-9)


def test_registration_keeps_independent_perturbations(rng):
    ref = [camera.orbit_pose(a, e, 2.0, 32) for a, e in zip(rng.uniform(0, 2 * math.pi, 40), rng.uniform(-1, 1, 40))]
    est = []
    for p in ref:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        est.append(CameraPose(Rotation.from_rotvec(np.radians(5) * axis).as_matrix() @ p.rotation, p.center,
                              p.focal, p.width, p.height))
    rot, _ = camera.pose_registration_error(est, ref)
    assert rot == pytest.approx(5.0, abs=0.1)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(10, 3))
    r = Rotation.random(random_state=3).as_matrix()
    dst = 1.7 * src @ r.T + [0.1, -2.0, 0.5]
    s, rot, t = camera.umeyama(src, dst)
    assert s == pytest.approx(1.7) and np.allclose(rot, r) and np.allclose(t, [0.1, -2.0, 0.5])


def test_collinear_centers_rejected():
    poses = [camera.orbit_pose(0.0, 0.0, r, 16) for r in (1.5, 2.0, 2.5)]
    with pytest.raises(AlignmentError):
        camera.pose_registration_error(poses, poses)


def test_map_to_estimated_frame_inverts_alignment(rng):
    ref = _ring()
    g = Rotation.random(random_state=5).as_matrix()
    est = [CameraPose(g @ p.rotation, 0.5 * g @ p.center + 1.0, p.focal, p.width, p.height) for p in ref]
    sim = camera.align_poses(est, ref)
    for e, r in zip(est, ref):
        m = camera.map_to_estimated_frame(r, sim)
        assert np.allclose(m.rotation, e.rotation, atol=1e-9) and np.allclose(m.center, e.center, atol=1e-9)


def test_pose_json_round_trip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(4)]
    camera.save_poses(tmp_path / "p.json", poses)
    back = camera.load_poses(tmp_path / "p.json")
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-15) and a.focal == b.focal
