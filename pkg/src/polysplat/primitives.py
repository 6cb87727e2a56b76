"""Polyhedral primitives: octahedra and tetrahedra of homogeneous density.

Both kinds are stored column-wise in a :class:`PrimitiveSet`.  Vertex order
and face winding are fixed constants so the rasterizer, the backward pass and
the reference renderer all agree on topology.

Octahedron vertex order: ``+x, -x, +y, -y, +z, -z`` (local frame).
Tetrahedron vertex order: the four entries of :data:`TETRA_BASIS`.
All faces are wound counter-clockwise when seen from outside.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

OCTAHEDRON = "octahedron"
TETRAHEDRON = "tetrahedron"
KINDS = (OCTAHEDRON, TETRAHEDRON)

SH_COEFFS = 16
DISTANCE_FLOOR = 1e-7
DENSITY_SCALE = 0.99

_S3 = 1.0 / np.sqrt(3.0)
TETRA_BASIS = np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
) * _S3

# local vertex = sign * distance[axis] * e_axis
OCTA_AXIS = np.array([0, 0, 1, 1, 2, 2])
OCTA_SIGN = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])


class DegenerateParameterError(ValueError):
    """Raised for zero-norm rotations or non-positive distances."""


def _outward(faces, verts):
    out = []
    centroid = verts.mean(axis=0)
    for a, b, c in faces:
        n = np.cross(verts[b] - verts[a], verts[c] - verts[a])
        if np.dot(n, verts[a] - centroid) < 0:
            b, c = c, b
        out.append((a, b, c))
    return np.array(out, dtype=np.int64)


def _octahedron_faces():
    faces = []
    for sx, sy, sz in itertools.product((1, -1), repeat=3):
        faces.append((0 if sx > 0 else 1, 2 if sy > 0 else 3, 4 if sz > 0 else 5))
    unit = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    return _outward(faces, unit)


def _tetrahedron_faces():
    faces = [tuple(i for i in range(4) if i != k) for k in range(4)]
    return _outward(faces, TETRA_BASIS)


OCTA_FACES = _octahedron_faces()
TETRA_FACES = _tetrahedron_faces()


def face_topology(kind: str) -> np.ndarray:
    """Vertex-index triples of every face, outward (counter-clockwise) winding."""
    if kind == OCTAHEDRON:
        return OCTA_FACES.copy()
    if kind == TETRAHEDRON:
        return TETRA_FACES.copy()
    raise ValueError(f"unknown primitive kind {kind!r}")


def n_vertices(kind: str) -> int:
    return 6 if kind == OCTAHEDRON else 4


def n_distances(kind: str) -> int:
    return 3 if kind == OCTAHEDRON else 4


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)


def normalize_rotation(q):
    """Unit quaternion(s).  Accepts shape (4,) or (N, 4)."""
    q = np.asarray(q, dtype=float) if not isinstance(q, np.ndarray) else q
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 0) or not np.all(np.isfinite(norm)):
        raise DegenerateParameterError("zero-norm or non-finite quaternion")
    return q / norm


def normalize_rotation_backward(q, grad_unit):
    """Pull a gradient w.r.t. the unit quaternion back to the raw quaternion."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    radial = np.sum(qn * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - qn * radial) / norm


def quat_to_matrix(q):
    """Rotation matrices for unit quaternions, shape (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q, G):
    """Gradient w.r.t. a unit quaternion given dL/dR (elementwise)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = lambda i, j: G[..., i, j]  # noqa: E731
    out = np.empty_like(q)
    out[..., 0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    out[..., 1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
                       + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    out[..., 2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
                       - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    out[..., 3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
                       + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return out


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) for a single 3x3 rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


@dataclass
class PrimitiveSet:
    """Structure-of-arrays store for one primitive kind.

    ``distances`` holds the raw (unsmoothed) per-axis or per-corner
    distances; ``filter_3d`` is the per-primitive smoothing size that the
    renderer folds in as ``sqrt(d**2 + s**2)``.
    """

    kind: str
    centers: np.ndarray
    rotations: np.ndarray
    distances: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    filter_3d: np.ndarray = None
    sh_degree: int = 3
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        n = len(self.centers)
        if self.filter_3d is None:
            self.filter_3d = np.zeros(n, dtype=self.centers.dtype)
        self.sh = self.sh.reshape(n, SH_COEFFS, 3)
        expected = {
            "centers": (n, 3),
            "rotations": (n, 4),
            "distances": (n, n_distances(self.kind)),
            "opacity_logits": (n,),
            "sh": (n, SH_COEFFS, 3),
            "filter_3d": (n,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")

    def __len__(self):
        return len(self.centers)

    @property
    def dtype(self):
        return self.centers.dtype

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def effective_distances(self, use_filter=True):
        if not use_filter:
            return self.distances
        return np.sqrt(self.distances**2 + self.filter_3d[:, None] ** 2)

    def astype(self, dtype):
        return PrimitiveSet(
            self.kind,
            self.centers.astype(dtype),
            self.rotations.astype(dtype),
            self.distances.astype(dtype),
            self.opacity_logits.astype(dtype),
            self.sh.astype(dtype),
            self.filter_3d.astype(dtype),
            self.sh_degree,
        )

    def copy(self):
        return self.astype(self.dtype)

    def select(self, index):
        """Subset (boolean mask or integer index array)."""
        return PrimitiveSet(
            self.kind,
            self.centers[index],
            self.rotations[index],
            self.distances[index],
            self.opacity_logits[index],
            self.sh[index],
            self.filter_3d[index],
            self.sh_degree,
        )

    @staticmethod
    def concat(a: "PrimitiveSet", b: "PrimitiveSet") -> "PrimitiveSet":
        if a.kind != b.kind:
            raise ValueError("cannot mix primitive kinds in one set")
        return PrimitiveSet(
            a.kind,
            np.concatenate([a.centers, b.centers]),
            np.concatenate([a.rotations, b.rotations]),
            np.concatenate([a.distances, b.distances]),
            np.concatenate([a.opacity_logits, b.opacity_logits]),
            np.concatenate([a.sh, b.sh]),
            np.concatenate([a.filter_3d, b.filter_3d]),
            a.sh_degree,
        )

    @classmethod
    def empty(cls, kind, dtype=np.float32, sh_degree=3):
        nd = n_distances(kind)
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        return cls(kind, z(0, 3), z(0, 4), z(0, nd), z(0), z(0, SH_COEFFS, 3), z(0), sh_degree)

    @classmethod
    def from_features(cls, kind, centers, rotations, distances, opacities, rgb=None,
                      sh=None, dtype=np.float64, sh_degree=3):
        """Convenience constructor from activated values (opacity in (0, 1))."""
        from .appearance import rgb_to_sh_dc

        centers = np.atleast_2d(np.asarray(centers, dtype=dtype))
        n = len(centers)
        rotations = np.broadcast_to(np.asarray(rotations, dtype=dtype), (n, 4)).copy()
        distances = np.broadcast_to(np.asarray(distances, dtype=dtype), (n, n_distances(kind))).copy()
        opacities = np.broadcast_to(np.asarray(opacities, dtype=float), (n,))
        if sh is None:
            sh = np.zeros((n, SH_COEFFS, 3), dtype=dtype)
            if rgb is not None:
                sh[:, 0, :] = rgb_to_sh_dc(np.broadcast_to(np.asarray(rgb, float), (n, 3)))
        return cls(kind, centers, rotations, distances, logit(opacities).astype(dtype),
                   np.asarray(sh, dtype=dtype), None, sh_degree)


def local_vertices(kind, distances):
    """Vertex offsets in the primitive's local (unrotated) frame, (N, V, 3)."""
    n = len(distances)
    if kind == OCTAHEDRON:
        out = np.zeros((n, 6, 3), dtype=distances.dtype)
        for k in range(6):
            out[:, k, OCTA_AXIS[k]] = OCTA_SIGN[k] * distances[:, OCTA_AXIS[k]]
        return out
    return distances[:, :, None] * TETRA_BASIS[None].astype(distances.dtype)


def local_vertices_backward(kind, grad_local):
    """dL/d(distances) given dL/d(local vertex offsets)."""
    if kind == OCTAHEDRON:
        out = np.zeros(grad_local.shape[:1] + (3,), dtype=grad_local.dtype)
        for k in range(6):
            out[:, OCTA_AXIS[k]] += OCTA_SIGN[k] * grad_local[:, k, OCTA_AXIS[k]]
        return out
    return np.einsum("nvc,vc->nv", grad_local, TETRA_BASIS.astype(grad_local.dtype))


def build_vertices(prims: PrimitiveSet, use_filter=False):
    """World-space vertices, (N, V, 3), in the documented vertex order."""
    if np.any(prims.distances <= 0):
        raise DegenerateParameterError("distances must be positive")
    q = normalize_rotation(prims.rotations)
    R = quat_to_matrix(q)
    local = local_vertices(prims.kind, prims.effective_distances(use_filter))
    return prims.centers[:, None, :] + np.einsum("nij,nvj->nvi", R, local)


def density_denominator(kind, effective_distances):
    """2 * min distance, the normalization in the density formula."""
    dmin = np.min(effective_distances, axis=-1)
    if np.any(dmin <= 0):
        raise DegenerateParameterError("minimum distance must be positive")
    return 2.0 * dmin


def density(opacity, effective_distances, kind=OCTAHEDRON, denominator=None):
    """Homogeneous density such that a chord of 2*min(d) has opacity 0.99*alpha."""
    opacity = np.asarray(opacity)
    if denominator is None:
        denominator = density_denominator(kind, np.asarray(effective_distances))
    return -np.log1p(-DENSITY_SCALE * opacity) / denominator


def world_size(kind, distances):
    """Longest extent proxy used by pruning and clone/split decisions."""
    dmax = np.max(np.asarray(distances), axis=-1)
    return 2.0 * dmax if kind == OCTAHEDRON else np.sqrt(2.0) * dmax
