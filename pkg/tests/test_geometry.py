import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occluforge import kernels
from occluforge.errors import AlignmentUnderdetermined, DegenerateRotation6D, PreconditionError
from occluforge.geometry import (
    Ray,
    RigidTransform,
    Rotation,
    Triangle,
    barycentric_point,
    geodesic_angle_deg,
    geodesic_angles_deg,
    kabsch_align,
    ray_triangle_intersect,
    rmsd,
    rotation_to_6d,
    six_d_to_rotation,
)
from oracles import linear_solve_intersections, quaternion_angle_deg

TRI = Triangle((-1, -1, 0), (1, -1, 0), (0, 1, 0))


def random_queries(rng, n):
    v1, v2, v3 = (rng.uniform(-1, 1, (n, 3)) for _ in range(3))
    origins = rng.uniform(-3, 3, (n, 3))
    # Aim near the triangle; barycentrics drawn a little outside the simplex
    # so roughly half the rays miss.
    b = rng.uniform(-0.3, 1.0, n)
    g = rng.uniform(-0.3, 1.0, n)
    aim = (1 - b - g)[:, None] * v1 + b[:, None] * v2 + g[:, None] * v3
    dirs = aim - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    flip = rng.random(n) < 0.1
    dirs[flip] *= -1.0
    return origins, dirs, v1, v2, v3


def test_edge_midpoint_hit():
    hit = ray_triangle_intersect(Ray((0, -1, 1), (0, 0, -1)), TRI)
    assert hit is not None
    assert hit.t == pytest.approx(1.0, abs=1e-12)
    assert hit.beta == pytest.approx(0.5, abs=1e-12)
    assert hit.gamma == pytest.approx(0.0, abs=1e-12)


def test_parallel_ray_misses():
    assert ray_triangle_intersect(Ray((0, 0, 1), (1, 0, 0)), TRI) is None


def test_behind_origin_misses():
    assert ray_triangle_intersect(Ray((0, 0, 1), (0, 0, 1)), TRI) is None


def test_degenerate_triangle_skipped():
    flat = Triangle((0, 0, 0), (1, 0, 0), (2, 0, 0))
    assert ray_triangle_intersect(Ray((0.5, 0, 1), (0, 0, -1)), flat) is None
    assert ray_triangle_intersect(Ray((0.5, 0, 1), (0, 0, -1)), flat, area_eps=1e-9) is None


def test_ray_normalizes_direction():
    r = Ray((0, 0, 0), (0, 3, 4))
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-15)


def test_matches_linear_solve_oracle(rng):
    o, d, v1, v2, v3 = random_queries(rng, 10_000)
    want_hit, want = linear_solve_intersections(o, d, v1, v2, v3)
    got_hit = np.zeros(len(o), bool)
    got = np.zeros((len(o), 3))
    for i in range(len(o)):
        h = ray_triangle_intersect(Ray(o[i], d[i]), Triangle(v1[i], v2[i], v3[i]))
        if h is not None:
            got_hit[i] = True
            got[i] = (h.t, h.beta, h.gamma)
    assert 0.2 < want_hit.mean() < 0.8
    np.testing.assert_array_equal(got_hit, want_hit)
    np.testing.assert_allclose(got[got_hit], want[want_hit], atol=1e-9, rtol=0)


def test_hit_closure(rng):
    o, d, v1, v2, v3 = random_queries(rng, 2000)
    hit, tbg = kernels.mt_batch(o, d, v1, v2 - v1, v3 - v1, 1e-12)
    for i in np.flatnonzero(hit):
        t, b, g = tbg[i]
        assert t >= 0 and b >= 0 and g >= 0 and b + g <= 1
        p = barycentric_point(Triangle(v1[i], v2[i], v3[i]), b, g)
        assert np.linalg.norm(o[i] + t * d[i] - p) < 1e-9


def test_rigid_invariance_of_hits(rng):
    o, d, v1, v2, v3 = random_queries(rng, 2000)
    rot = Rotation.random(rng).matrix
    tr = rng.normal(size=3)
    hit, tbg = kernels.mt_batch(o, d, v1, v2 - v1, v3 - v1, 1e-12)
    mv = lambda p: p @ rot.T + tr  # noqa: E731
    hit2, tbg2 = kernels.mt_batch(mv(o), d @ rot.T, mv(v1), (v2 - v1) @ rot.T,
                                  (v3 - v1) @ rot.T, 1e-12)
    # Only compare queries comfortably away from a boundary decision.
    t, b, g = tbg.T
    safe = hit & (b > 1e-6) & (g > 1e-6) & (b + g < 1 - 1e-6)
    assert hit2[safe].all()
    np.testing.assert_allclose(tbg2[safe], tbg[safe], atol=1e-7)


def test_barycentric_cases():
    np.testing.assert_array_equal(barycentric_point(TRI, 0, 0), TRI.v1)
    np.testing.assert_allclose(barycentric_point(TRI, 1 / 3, 1 / 3),
                               (TRI.v1 + TRI.v2 + TRI.v3) / 3, atol=1e-15)
    np.testing.assert_allclose(barycentric_point(TRI, 0.25, 0.5), [0, 0, 0], atol=1e-15)
    with pytest.raises(PreconditionError):
        barycentric_point(TRI, 0.8, 0.5)
    with pytest.raises(PreconditionError):
        barycentric_point(TRI, -0.1, 0.5)


# --- Kabsch ---------------------------------------------------------------


def test_kabsch_identity(rng):
    pts = rng.normal(size=(8, 3))
    t = kabsch_align(pts, pts)
    np.testing.assert_allclose(t.rotation.matrix, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(t.translation, 0, atol=1e-9)


def test_kabsch_recovers_transform(rng):
    for _ in range(200):
        src = rng.normal(size=(6, 3))
        r = Rotation.random(rng)
        tr = rng.normal(size=3) * 5
        dst = r.apply(src) + tr
        est = kabsch_align(src, dst)
        np.testing.assert_allclose(est.rotation.matrix, r.matrix, atol=1e-6)
        np.testing.assert_allclose(est.translation, tr, atol=1e-6)
        assert rmsd(est.apply(src), dst) < 1e-9
        assert np.linalg.det(est.rotation.matrix) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_reflection_corrected(rng):
    src = rng.normal(size=(10, 3))
    dst = src * np.array([1, 1, -1])  # a mirror image
    est = kabsch_align(src, dst)
    assert np.linalg.det(est.rotation.matrix) == pytest.approx(1.0, abs=1e-9)


def test_kabsch_underdetermined():
    with pytest.raises(AlignmentUnderdetermined):
        kabsch_align([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [1, 0, 0]])
    line = [[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3]]
    with pytest.raises(AlignmentUnderdetermined):
        kabsch_align(line, line)


# --- 6D -----------------------------------------------------------------


def test_6d_identity():
    np.testing.assert_array_equal(rotation_to_6d(Rotation.identity()), [1, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(six_d_to_rotation([1, 0, 0, 0, 1, 0]).matrix, np.eye(3))
    np.testing.assert_allclose(six_d_to_rotation([2, 0, 0, 0, 3, 0]).matrix, np.eye(3), atol=0)


def test_6d_round_trip(rng):
    for _ in range(1000):
        r = Rotation.random(rng)
        back = six_d_to_rotation(rotation_to_6d(r))
        assert np.abs(back.matrix - r.matrix).max() < 1e-12


def test_6d_degenerate():
    with pytest.raises(DegenerateRotation6D):
        six_d_to_rotation([1, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateRotation6D):
        six_d_to_rotation([0, 0, 0, 0, 1, 0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=6, max_size=6),
    st.floats(0.01, 100),
    st.floats(0.01, 100),
)
def test_6d_scale_invariance(v, s1, s2):
    v = np.array(v)
    a, b = v[:3], v[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(np.cross(a, b)) < 1e-3 * np.linalg.norm(b) \
            or np.linalg.norm(b) < 1e-3:
        return
    m1 = six_d_to_rotation(v).matrix
    m2 = six_d_to_rotation(np.concatenate([s1 * a, s2 * b])).matrix
    np.testing.assert_allclose(m1, m2, atol=1e-9)
    assert np.linalg.det(m1) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(m1.T @ m1, np.eye(3), atol=1e-9)


# --- geodesic angle -------------------------------------------------------


def test_geodesic_simple(rng):
    r = Rotation.random(rng)
    assert geodesic_angle_deg(r, r) == pytest.approx(0.0, abs=1e-9)
    for axis in ([1, 0, 0], [0, 1, 0], rng.normal(size=3)):
        r2 = r @ Rotation.from_axis_angle(axis, np.pi / 2)
        assert geodesic_angle_deg(r, r2) == pytest.approx(90.0, abs=1e-9)
    assert geodesic_angle_deg(Rotation.identity(), Rotation.from_axis_angle([1, 0, 0], np.pi)) \
        == pytest.approx(180.0, abs=1e-9)


def test_geodesic_matches_quaternion_oracle(rng):
    a = np.stack([Rotation.random(rng).matrix for _ in range(500)])
    b = np.stack([Rotation.random(rng).matrix for _ in range(500)])
    np.testing.assert_allclose(geodesic_angles_deg(a, b), quaternion_angle_deg(a, b), atol=1e-6)


def test_geodesic_symmetric_and_triangle(rng):
    for _ in range(300):
        a, b, c = (Rotation.random(rng) for _ in range(3))
        ab = geodesic_angle_deg(a, b)
        assert ab == pytest.approx(geodesic_angle_deg(b, a), abs=1e-9)
        assert geodesic_angle_deg(a, c) <= ab + geodesic_angle_deg(b, c) + 1e-6


# --- rigid transforms -----------------------------------------------------


def test_rigid_transform_algebra(rng):
    ts = [RigidTransform(Rotation.random(rng), rng.normal(size=3)) for _ in range(3)]
    p = rng.normal(size=(5, 3))
    lhs = ((ts[0] @ ts[1]) @ ts[2]).apply(p)
    rhs = (ts[0] @ (ts[1] @ ts[2])).apply(p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    ident = ts[0] @ ts[0].inverse()
    np.testing.assert_allclose(ident.as_matrix(), np.eye(4), atol=1e-9)


def test_rotation_quaternion_round_trip(rng):
    r = Rotation.random(rng)
    q = r.as_quat()
    assert q[0] >= 0
    np.testing.assert_allclose(Rotation.from_quat(q).matrix, r.matrix, atol=1e-12)
