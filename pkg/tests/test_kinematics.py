import numpy as np
import pytest

from occluforge.errors import AlignmentUnderdetermined, EmptyFrame, PreconditionError
from occluforge.geometry import Rotation, kabsch_align, rmsd
from occluforge.kinematics import (
    Joint,
    MarkerBinding,
    MarkerFrame,
    MarkerLayout,
    Pose,
    Skeleton,
    SkinnedMesh,
    align_to_tpose,
    centralize,
    fk_arrays,
    forward_kinematics,
    lbs_deform,
    markers_from_mesh,
)
from oracles import naive_fk


def branching_skeleton():
    return Skeleton((
        Joint("root", None, (0.1, 0.0, 0.0)),
        Joint("a", 0, (0.0, 1.0, 0.0)),
        Joint("b", 1, (0.0, 1.0, 0.5)),
        Joint("c", 0, (1.0, 0.0, 0.0)),
        Joint("d", 3, (0.0, 0.0, 1.0)),
    ))


def random_pose(rng, n):
    return Pose(rng.normal(size=3), np.stack([Rotation.random(rng).matrix for _ in range(n)]))


def test_skeleton_validation():
    with pytest.raises(PreconditionError):
        Skeleton((Joint("a", None, (0, 0, 0)), Joint("b", 2, (0, 0, 0)), Joint("c", 0, (0, 0, 0))))
    with pytest.raises(PreconditionError):
        Skeleton((Joint("a", None, (0, 0, 0)), Joint("b", None, (0, 0, 0))))


def test_fk_identity_is_cumulative_offsets():
    sk = branching_skeleton()
    _, pos = forward_kinematics(sk, Pose.identity(sk.n_joints))
    np.testing.assert_allclose(pos, [[0.1, 0, 0], [0.1, 1, 0], [0.1, 2, 0.5], [1.1, 0, 0],
                                     [1.1, 0, 1]], atol=1e-15)


def test_fk_hand_computed_chain():
    sk = Skeleton.chain(3, bone=(0, 1, 0))
    rots = np.tile(np.eye(3), (3, 1, 1))
    rots[0] = Rotation.from_axis_angle([0, 0, 1], np.pi / 2).matrix
    _, pos = forward_kinematics(sk, Pose(np.zeros(3), rots))
    np.testing.assert_allclose(pos[1], [-1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(pos[2], [-2, 0, 0], atol=1e-12)


def test_fk_matches_recursive_oracle(rng):
    sk = branching_skeleton()
    for _ in range(50):
        pose = random_pose(rng, sk.n_joints)
        _, pos = forward_kinematics(sk, pose)
        want = naive_fk(sk.parents, sk.offsets, pose.root_translation, pose.joint_rotations)
        np.testing.assert_allclose(pos, want, atol=1e-12)


def test_fk_root_equivariance(rng):
    sk = branching_skeleton()
    pose = random_pose(rng, sk.n_joints)
    r = Rotation.random(rng).matrix
    # Root rest offset is applied in world space, so zero it for the property.
    sk = Skeleton((Joint("root", None, (0, 0, 0)),) + sk.joints[1:])
    _, pos = forward_kinematics(sk, pose)
    rots = pose.joint_rotations.copy()
    rots[0] = r @ rots[0]
    _, pos2 = forward_kinematics(sk, Pose(r @ pose.root_translation, rots))
    np.testing.assert_allclose(pos2, pos @ r.T, atol=1e-7)


def test_fk_batched_matches_single(rng):
    sk = branching_skeleton()
    poses = [random_pose(rng, sk.n_joints) for _ in range(4)]
    _, gt = fk_arrays(sk, np.stack([p.root_translation for p in poses]),
                      np.stack([p.joint_rotations for p in poses]))
    for i, p in enumerate(poses):
        np.testing.assert_allclose(gt[i], forward_kinematics(sk, p)[1], atol=1e-14)


# --- LBS ------------------------------------------------------------------


def two_bone_mesh():
    sk = Skeleton.chain(2, bone=(0, 1, 0))
    verts = np.array([[0.3, 0.2, 0.0], [0.3, 1.5, 0.0], [0.0, 1.0, 0.4], [-0.2, 0.5, 0.1]])
    weights = (((0, 1.0),), ((1, 1.0),), ((0, 0.5), (1, 0.5)), ((0, 0.25), (1, 0.75)))
    mesh = SkinnedMesh(verts, [[0, 1, 2], [0, 2, 3]], weights)
    return sk, mesh


def test_lbs_identity(rng):
    sk, mesh = two_bone_mesh()
    out = lbs_deform(mesh, sk, Pose.identity(2))
    np.testing.assert_allclose(out, mesh.template_vertices, atol=1e-9)


def test_lbs_rigid_and_blend(rng):
    sk, mesh = two_bone_mesh()
    pose = random_pose(rng, 2)
    out = lbs_deform(mesh, sk, pose)
    transforms, _ = forward_kinematics(sk, pose)
    rest, _ = forward_kinematics(sk, Pose.identity(2))
    rel = [transforms[j] @ rest[j].inverse() for j in range(2)]
    v = mesh.template_vertices
    np.testing.assert_allclose(out[0], rel[0].apply(v[0]), atol=1e-12)
    np.testing.assert_allclose(out[1], rel[1].apply(v[1]), atol=1e-12)
    np.testing.assert_allclose(out[2], 0.5 * (rel[0].apply(v[2]) + rel[1].apply(v[2])), atol=1e-12)


def test_mesh_weight_validation():
    with pytest.raises(PreconditionError):
        SkinnedMesh(np.zeros((1, 3)), np.zeros((0, 3)), (((0, 0.7),),))
    with pytest.raises(PreconditionError):
        SkinnedMesh(np.zeros((3, 3)), [[0, 1, 5]], (((0, 1.0),),) * 3)


# --- markers ----------------------------------------------------------------


def test_markers_from_mesh(rng):
    sk, mesh = two_bone_mesh()
    layout = MarkerLayout((MarkerBinding("a", 0, 0.0, 0.0), MarkerBinding("b", 1, 0.2, 0.3),
                           MarkerBinding("c", 0, 0.5, 0.1)))
    rest = markers_from_mesh(layout, mesh.template_vertices, mesh.triangles)
    np.testing.assert_array_equal(rest.positions[0], mesh.template_vertices[0])
    assert rest.visibility.all()

    # Rigid body motion: rotate the root only, every vertex moves rigidly.
    pose = Pose.identity(2)
    pose.joint_rotations[0] = Rotation.random(rng).matrix
    pose.root_translation = rng.normal(size=3)
    moved = markers_from_mesh(layout, lbs_deform(mesh, sk, pose), mesh.triangles)
    t = kabsch_align(rest.positions, moved.positions)
    assert rmsd(t.apply(rest.positions), moved.positions) < 1e-9


def test_centralize():
    f = MarkerFrame([[3, 4, 5], [100, 100, 100]], [True, False])
    out, c = centralize(f)
    np.testing.assert_array_equal(out.positions[0], 0)
    np.testing.assert_array_equal(c, [3, 4, 5])
    assert out.centroid_removed
    with pytest.raises(EmptyFrame):
        centralize(MarkerFrame([[0, 0, 0]], [False]))


def test_centralize_properties(rng):
    pos = rng.normal(size=(12, 3))
    vis = rng.random(12) < 0.7
    vis[0] = True
    f = MarkerFrame(pos, vis)
    out, c = centralize(f)
    np.testing.assert_allclose(out.positions[vis].mean(axis=0), 0, atol=1e-12)
    again, c2 = centralize(out)
    np.testing.assert_allclose(again.positions[vis], out.positions[vis], atol=1e-12)
    np.testing.assert_allclose(c2, 0, atol=1e-12)
    t = rng.normal(size=3) * 10
    shifted, c3 = centralize(MarkerFrame(pos + t, vis))
    np.testing.assert_allclose(shifted.positions[vis], out.positions[vis], atol=1e-12)
    np.testing.assert_allclose(c3, c + t, atol=1e-12)


def test_align_to_tpose(rng):
    tpose = MarkerFrame.all_visible(rng.normal(size=(10, 3)))
    keys = [0, 1, 2, 3]
    aligned, t = align_to_tpose(tpose, keys, tpose)
    np.testing.assert_allclose(t.rotation.matrix, np.eye(3), atol=1e-9)
    r = Rotation.random(rng)
    moved = MarkerFrame.all_visible(r.apply(tpose.positions) + rng.normal(size=3))
    aligned, t = align_to_tpose(moved, keys, tpose)
    np.testing.assert_allclose(t.rotation.matrix, r.inv().matrix, atol=1e-6)
    np.testing.assert_allclose(aligned.positions, tpose.positions, atol=1e-9)
    np.testing.assert_allclose(t.inverse().apply(aligned.positions), moved.positions, atol=1e-9)
    with pytest.raises(AlignmentUnderdetermined):
        align_to_tpose(moved, [0, 1], tpose)
