import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polysplat.primitives import (
    DISTANCE_FLOOR, OCTAHEDRON, TETRAHEDRON, TETRA_BASIS, DegenerateParameterError, PrimitiveSet,
    build_vertices, density, face_topology, logit, matrix_to_quat, normalize_rotation,
    normalize_rotation_backward, quat_to_matrix, sigmoid, world_size)

finite = st.floats(-3, 3, allow_nan=False)
positive = st.floats(0.05, 3.0)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1)


def one(kind, q, d, c=(0.0, 0.0, 0.0)):
    return PrimitiveSet.from_features(kind, [c], q, [d], [0.5])


class TestNormalizeRotation:
    @pytest.mark.parametrize("q, expected", [
        ((1, 0, 0, 0), (1, 0, 0, 0)),
        ((2, 0, 0, 0), (1, 0, 0, 0)),
        ((1, 1, 1, 1), (0.5, 0.5, 0.5, 0.5)),
    ])
    def test_examples(self, q, expected):
        np.testing.assert_allclose(normalize_rotation(np.array(q, float)), expected)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateParameterError):
            normalize_rotation(np.zeros(4))

    @given(quats, st.lists(finite, min_size=4, max_size=4))
    def test_backward_orthogonal_to_q(self, q, g):
        q = np.array(q)
        out = normalize_rotation_backward(q, np.array(g))
        assert abs(np.dot(out, q)) < 1e-9 * max(1.0, np.abs(g).max())

    def test_backward_matches_finite_differences(self, rng):
        q = rng.normal(size=4)
        g = rng.normal(size=4)
        h = 1e-6
        num = np.array([(g @ normalize_rotation(q + h * e) - g @ normalize_rotation(q - h * e)) / (2 * h)
                        for e in np.eye(4)])
        np.testing.assert_allclose(normalize_rotation_backward(q, g), num, rtol=1e-6, atol=1e-9)


@given(quats)
def test_quaternion_matrix_roundtrip(q):
    q = normalize_rotation(np.array(q))
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    q2 = matrix_to_quat(R)
    assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9


class TestBuildVertices:
    def test_octahedron_axis_aligned(self):
        v = build_vertices(one(OCTAHEDRON, [1, 0, 0, 0], (1, 2, 3)))[0]
        expected = [(1, 0, 0), (-1, 0, 0), (0, 2, 0), (0, -2, 0), (0, 0, 3), (0, 0, -3)]
        np.testing.assert_allclose(v, expected, atol=1e-15)

    def test_octahedron_rotated_about_z(self):
        q = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
        v = build_vertices(one(OCTAHEDRON, q, (1, 1, 1)))[0]
        np.testing.assert_allclose(v[0], (0, 1, 0), atol=1e-12)

    def test_tetrahedron_basis(self):
        v = build_vertices(one(TETRAHEDRON, [1, 0, 0, 0], (1, 1, 1, 1)))[0]
        np.testing.assert_allclose(v, TETRA_BASIS, atol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(TETRA_BASIS, axis=1), 1.0)
        np.testing.assert_allclose(TETRA_BASIS.sum(0), 0.0, atol=1e-15)

    def test_non_positive_distance_rejected(self):
        with pytest.raises(DegenerateParameterError):
            build_vertices(one(OCTAHEDRON, [1, 0, 0, 0], (1, 0, 1)))

    @given(quats, st.tuples(positive, positive, positive), st.tuples(finite, finite, finite))
    def test_octahedron_centroid_is_center(self, q, d, c):
        v = build_vertices(one(OCTAHEDRON, q, d, c))[0]
        np.testing.assert_allclose(v.mean(0), c, atol=1e-12)

    @given(quats, positive, st.tuples(finite, finite, finite))
    def test_tetrahedron_equal_distances_centroid(self, q, d, c):
        v = build_vertices(one(TETRAHEDRON, q, (d,) * 4, c))[0]
        np.testing.assert_allclose(v.mean(0), c, atol=1e-12)

    @settings(max_examples=50)
    @given(st.sampled_from([OCTAHEDRON, TETRAHEDRON]), quats,
           st.lists(positive, min_size=4, max_size=4), st.tuples(finite, finite, finite))
    def test_rotation_equivariance(self, kind, q, d, c):
        d = d[:3] if kind == OCTAHEDRON else d
        rotated = build_vertices(one(kind, q, d, c))[0]
        plain = build_vertices(one(kind, [1, 0, 0, 0], d, c))[0]
        R = quat_to_matrix(normalize_rotation(np.array(q)))
        np.testing.assert_allclose(rotated, (plain - c) @ R.T + c, atol=1e-6)


class TestFaceTopology:
    @pytest.mark.parametrize("kind, n_faces, per_vertex", [(OCTAHEDRON, 8, 4), (TETRAHEDRON, 4, 3)])
    def test_counts(self, kind, n_faces, per_vertex):
        faces = face_topology(kind)
        assert faces.shape == (n_faces, 3)
        assert set(np.bincount(faces.ravel())) == {per_vertex}

    @pytest.mark.parametrize("kind", [OCTAHEDRON, TETRAHEDRON])
    def test_closed_manifold(self, kind):
        edges = {}
        for f in face_topology(kind):
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges.setdefault(frozenset((a, b)), []).append((a, b))
        assert all(len(e) == 2 for e in edges.values())
        # consistent winding: each shared edge is traversed in opposite directions
        assert all(e[0] == e[1][::-1] for e in edges.values())

    def test_octahedron_faces_join_sign_triples(self):
        signs = {0: (0, 1), 1: (0, -1), 2: (1, 1), 3: (1, -1), 4: (2, 1), 5: (2, -1)}
        triples = set()
        for f in face_topology(OCTAHEDRON):
            axes = sorted(signs[i] for i in f)
            assert [a for a, _ in axes] == [0, 1, 2]
            triples.add(tuple(s for _, s in axes))
        assert len(triples) == 8

    @pytest.mark.parametrize("kind", [OCTAHEDRON, TETRAHEDRON])
    def test_outward_normals(self, kind):
        d = (1, 1.5, 2) if kind == OCTAHEDRON else (1, 1.5, 2, 0.7)
        v = build_vertices(one(kind, [0.9, 0.1, -0.3, 0.2], d, (1, 2, 3)))[0]
        centroid = v.mean(0)
        for a, b, c in face_topology(kind):
            n = np.cross(v[b] - v[a], v[c] - v[a])
            assert np.dot(n, v[a] - centroid) > 0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            face_topology("cube")


class TestDensity:
    def test_zero_opacity(self):
        assert density(0.0, np.array([0.3, 0.2, 1.0])) == 0.0

    def test_half_opacity_unit_distance(self):
        # -ln(1 - 0.99 * 0.5) / 2
        assert density(0.5, np.array([1.0, 2.0, 3.0])) == pytest.approx(-math.log(0.505) / 2, rel=1e-12)
        assert density(0.5, np.array([1.0, 2.0, 3.0])) == pytest.approx(0.3415984, abs=1e-7)

    def test_near_one_opacity_is_finite(self):
        assert density(1.0, np.array([0.5, 0.5, 0.5])) == pytest.approx(4.60517, abs=1e-5)

    def test_tetrahedron_uses_min_corner(self):
        assert density(0.5, np.array([2.0, 1.0, 3.0, 4.0]), TETRAHEDRON) == pytest.approx(
            -math.log(0.505) / 2)

    def test_non_positive_distance(self):
        with pytest.raises(DegenerateParameterError):
            density(0.5, np.array([0.0, 1.0, 1.0]))

    @given(st.floats(0.01, 0.98), st.floats(0.01, 0.98), st.tuples(positive, positive, positive))
    def test_monotone_in_opacity(self, a, b, d):
        lo, hi = sorted((a, b))
        assert density(lo, np.array(d)) <= density(hi, np.array(d))

    @given(st.floats(0.01, 0.99), st.tuples(positive, positive, positive))
    def test_scale_covariance(self, a, d):
        d = np.array(d)
        assert density(a, 2 * d) == pytest.approx(density(a, d) / 2, rel=1e-12)


class TestWorldSize:
    def test_octahedron(self):
        assert world_size(OCTAHEDRON, np.array([1.0, 2.0, 3.0])) == 6.0

    def test_tetrahedron(self):
        assert world_size(TETRAHEDRON, np.array([1.0, 1.0, 1.0, 2.0])) == pytest.approx(2 * math.sqrt(2))

    @given(positive)
    def test_isotropic_octahedron(self, a):
        assert world_size(OCTAHEDRON, np.array([a, a, a])) == pytest.approx(2 * a)

    @given(quats, st.tuples(finite, finite, finite))
    def test_rigid_invariance(self, q, c):
        # derived from the vertex cloud: longest center-vertex distance is unchanged
        p = one(OCTAHEDRON, q, (0.4, 0.9, 0.2), c)
        v = build_vertices(p)[0]
        assert 2 * np.linalg.norm(v - c, axis=1).max() == pytest.approx(world_size(p.kind, p.distances)[0])


class TestPrimitiveSet:
    def test_shapes_validated(self):
        with pytest.raises(ValueError):
            PrimitiveSet(OCTAHEDRON, np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)),
                         np.zeros(2), np.zeros((2, 16, 3)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PrimitiveSet("cube", np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                         np.zeros(0), np.zeros((0, 16, 3)))

    def test_concat_rejects_mixed_kinds(self):
        a = PrimitiveSet.empty(OCTAHEDRON)
        b = PrimitiveSet.empty(TETRAHEDRON)
        with pytest.raises(ValueError):
            PrimitiveSet.concat(a, b)

    def test_sigmoid_logit_inverse(self):
        p = np.linspace(0.01, 0.99, 17)
        np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-12)

    def test_effective_distances(self):
        p = one(OCTAHEDRON, [1, 0, 0, 0], (0.3, 0.4, 1e-3))
        p.filter_3d[:] = 0.4
        eff = p.effective_distances()
        np.testing.assert_allclose(eff, np.sqrt(p.distances**2 + 0.16))
        assert np.all(eff >= np.maximum(p.distances, 0.4))
        np.testing.assert_array_equal(p.effective_distances(False), p.distances)

    def test_distance_floor_constant(self):
        assert DISTANCE_FLOOR == 1e-7
