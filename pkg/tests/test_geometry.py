import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tuplevote.geometry import (
    OrientedBox,
    PointCloud,
    Pose9D,
    estimate_normals,
    is_rotation,
    random_rotation,
    so3_exp,
    so3_log,
    transform,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
seeds = st.integers(0, 2**32 - 1)


def quaternion_matrix(axis, angle):
    """Independent oracle: unit quaternion -> rotation matrix."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    w = np.cos(angle / 2)
    x, y, z = np.sin(angle / 2) * axis
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def test_exp_zero_is_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_x_matches_quaternion():
    R = so3_exp([np.pi / 2, 0, 0])
    assert np.allclose(R, quaternion_matrix([1, 0, 0], np.pi / 2), atol=1e-12)
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-12)
    assert np.allclose(so3_log(R), [np.pi / 2, 0, 0], atol=1e-9)


@given(seeds)
def test_exp_matches_quaternion_oracle(seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    angle = rng.uniform(0, np.pi)
    R = so3_exp(axis / np.linalg.norm(axis) * angle)
    assert np.allclose(R, quaternion_matrix(axis, angle), atol=1e-12)


def test_exp_inverse_symmetry(rng):
    for _ in range(100):
        w = rng.normal(size=3) * 2
        assert np.abs(so3_exp(w) @ so3_exp(-w) - np.eye(3)).max() < 1e-9


@given(vec3)
def test_log_inverts_exp(w):
    if np.linalg.norm(w) > 3.0:
        w = w / np.linalg.norm(w) * 3.0
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_log_near_pi_uses_stable_branch():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    w = axis * (np.pi - 1e-7)
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-6)


@given(seeds)
def test_random_rotation_is_proper(seed):
    assert is_rotation(random_rotation(np.random.default_rng(seed)))


def test_composition_chain_stays_orthonormal(rng):
    pose = Pose9D.identity()
    step = Pose9D(so3_exp(rng.normal(size=3) * 0.3), rng.normal(size=3) * 0.01)
    for _ in range(1000):
        pose = step.compose(pose)
        assert np.abs(pose.rotation.T @ pose.rotation - np.eye(3)).max() < 1e-9


def test_pose_rejects_bad_inputs():
    with pytest.raises(ValueError):
        Pose9D(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose9D(np.eye(3), np.zeros(3), [1.0, 0.0, 1.0])


def _cloud(rng, n=50):
    p = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    return PointCloud(p, nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def test_transform_identity(rng):
    c = _cloud(rng)
    out = transform(c, Pose9D.identity())
    assert np.array_equal(out.points, c.points)
    assert np.allclose(out.normals, c.normals, atol=1e-15)


def test_transform_pure_translation(rng):
    c = _cloud(rng)
    t = np.array([0.1, -0.2, 0.3])
    out = transform(c, Pose9D(np.eye(3), t))
    assert np.allclose(out.points, c.points + t, atol=1e-15)
    assert np.allclose(out.normals, c.normals, atol=1e-15)


@given(seeds)
def test_transform_round_trip(seed):
    rng = np.random.default_rng(seed)
    c = _cloud(rng)
    g = Pose9D(random_rotation(rng), rng.normal(size=3))
    back = transform(transform(c, g), g.inverse())
    assert np.allclose(back.points, c.points, atol=1e-9)
    assert np.allclose(back.normals, c.normals, atol=1e-9)


@given(seeds)
def test_transform_is_group_action(seed):
    rng = np.random.default_rng(seed)
    c = _cloud(rng)
    g = Pose9D(random_rotation(rng), rng.normal(size=3))
    h = Pose9D(random_rotation(rng), rng.normal(size=3))
    a = transform(transform(c, g), h)
    b = transform(c, h.compose(g))
    assert np.allclose(a.points, b.points, atol=1e-9)
    assert np.allclose(a.normals, b.normals, atol=1e-9)


def test_normals_on_plane_face_origin(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)]) + [0, 0, 2.0]
    n, flag = estimate_normals(pts, k=10)
    assert not flag.any()
    assert np.allclose(n, [0, 0, -1], atol=1e-9)
    n_below, _ = estimate_normals(pts - [0, 0, 4.0], k=10)
    assert np.allclose(n_below, [0, 0, 1], atol=1e-9)


def test_normals_on_cube_face_match_eigen_oracle():
    g = np.linspace(0, 1, 12)
    face = np.array([[x, y, 1.0] for x in g for y in g]) + [-0.5, -0.5, 2.0]
    n, _ = estimate_normals(face, k=8)
    # oracle: covariance of a planar patch has its null vector along the face axis
    cov = np.cov((face - face.mean(0)).T)
    w, v = np.linalg.eigh(cov)
    axis = v[:, 0] * np.sign(v[2, 0])
    assert np.allclose(np.abs(n @ axis), 1.0, atol=1e-6)
    assert np.allclose(np.abs(n[:, 2]), 1.0, atol=1e-6)


def test_collinear_points_flagged():
    pts = np.array([[0, 0, 1.0], [0.1, 0, 1.0], [0.2, 0, 1.0]])
    n, flag = estimate_normals(pts, k=3)
    assert flag.all()
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)


@given(seeds)
def test_normals_rotate_with_cloud(seed):
    rng = np.random.default_rng(seed)
    # a gently curved patch so every neighbourhood has a unique normal
    uv = rng.uniform(-1, 1, (300, 2))
    pts = np.column_stack([uv, 0.1 * uv[:, 0] ** 2]) + [0, 0, 3.0]
    view = np.zeros(3)
    n0, _ = estimate_normals(pts, k=12, viewpoint=view)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    n1, _ = estimate_normals(pts @ R.T + t, k=12, viewpoint=R @ view + t)
    assert np.allclose(np.linalg.norm(n1, axis=1), 1.0, atol=1e-9)
    assert np.allclose(n1, n0 @ R.T, atol=1e-6)


def test_oriented_box_contains_corners_and_center():
    box = OrientedBox(Pose9D(so3_exp([0.1, 0.2, 0.3]), [1.0, 2.0, 3.0], [0.5, 1.0, 2.0]))
    assert box.contains(np.array([[1.0, 2.0, 3.0]])).all()
    inner = box.pose.apply(np.array([[0.99, -0.99, 0.99]]))
    outer = box.pose.apply(np.array([[1.01, 0, 0]]))
    assert box.contains(inner).all() and not box.contains(outer).any()
