"""View-dependent color from real spherical harmonics (degrees 0..3)."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb) - 0.5) / C0


def sh_basis(degree, dirs):
    """Basis values (N, 16); entries above ``degree`` are zero."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    B = np.zeros(dirs.shape[:-1] + (16,), dtype=dirs.dtype)
    B[..., 0] = C0
    if degree > 0:
        B[..., 1] = -C1 * y
        B[..., 2] = C1 * z
        B[..., 3] = -C1 * x
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        B[..., 4] = C2[0] * x * y
        B[..., 5] = C2[1] * y * z
        B[..., 6] = C2[2] * (2 * zz - xx - yy)
        B[..., 7] = C2[3] * x * z
        B[..., 8] = C2[4] * (xx - yy)
    if degree > 2:
        B[..., 9] = C3[0] * y * (3 * xx - yy)
        B[..., 10] = C3[1] * x * y * z
        B[..., 11] = C3[2] * y * (4 * zz - xx - yy)
        B[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[..., 13] = C3[4] * x * (4 * zz - xx - yy)
        B[..., 14] = C3[5] * z * (xx - yy)
        B[..., 15] = C3[6] * x * (xx - 3 * yy)
    return B


def sh_basis_jacobian(degree, dirs):
    """d(basis)/d(dir), shape (N, 16, 3)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    J = np.zeros(dirs.shape[:-1] + (16, 3), dtype=dirs.dtype)
    if degree > 0:
        J[..., 1, 1] = -C1
        J[..., 2, 2] = C1
        J[..., 3, 0] = -C1
    if degree > 1:
        J[..., 4, 0] = C2[0] * y
        J[..., 4, 1] = C2[0] * x
        J[..., 5, 1] = C2[1] * z
        J[..., 5, 2] = C2[1] * y
        J[..., 6, 0] = -2 * C2[2] * x
        J[..., 6, 1] = -2 * C2[2] * y
        J[..., 6, 2] = 4 * C2[2] * z
        J[..., 7, 0] = C2[3] * z
        J[..., 7, 2] = C2[3] * x
        J[..., 8, 0] = 2 * C2[4] * x
        J[..., 8, 1] = -2 * C2[4] * y
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        J[..., 9, 0] = C3[0] * 6 * x * y
        J[..., 9, 1] = C3[0] * (3 * xx - 3 * yy)
        J[..., 10, 0] = C3[1] * y * z
        J[..., 10, 1] = C3[1] * x * z
        J[..., 10, 2] = C3[1] * x * y
        J[..., 11, 0] = -2 * C3[2] * x * y
        J[..., 11, 1] = C3[2] * (4 * zz - xx - 3 * yy)
        J[..., 11, 2] = 8 * C3[2] * y * z
        J[..., 12, 0] = -6 * C3[3] * x * z
        J[..., 12, 1] = -6 * C3[3] * y * z
        J[..., 12, 2] = C3[3] * (6 * zz - 3 * xx - 3 * yy)
        J[..., 13, 0] = C3[4] * (4 * zz - 3 * xx - yy)
        J[..., 13, 1] = -2 * C3[4] * x * y
        J[..., 13, 2] = 8 * C3[4] * x * z
        J[..., 14, 0] = 2 * C3[5] * x * z
        J[..., 14, 1] = -2 * C3[5] * y * z
        J[..., 14, 2] = C3[5] * (xx - yy)
        J[..., 15, 0] = C3[6] * (3 * xx - 3 * yy)
        J[..., 15, 1] = -6 * C3[6] * x * y
    return J


def eval_sh(sh, dirs, degree=3):
    """Clamped color ``max(0, sum_k c_k Y_k(dir) + 0.5)``.

    ``sh`` is (N, 16, 3) or (16, 3); ``dirs`` are unit vectors (N, 3) or (3,).
    Returns (rgb, clamp_mask) where the mask marks channels that were clamped.
    """
    sh = np.asarray(sh)
    dirs = np.asarray(dirs, dtype=sh.dtype)
    B = sh_basis(degree, dirs)
    raw = np.einsum("...k,...kc->...c", B, sh) + 0.5
    clamped = raw < 0
    return np.where(clamped, 0.0, raw).astype(sh.dtype), clamped


def sh_backward(sh, dirs, grad_rgb, clamped, degree=3):
    """Gradients (dL/dsh, dL/ddir) of the clamped color."""
    grad = np.where(clamped, 0.0, grad_rgb).astype(sh.dtype)
    B = sh_basis(degree, dirs)
    grad_sh = B[..., :, None] * grad[..., None, :]
    J = sh_basis_jacobian(degree, dirs)
    # dL/dB_k = sum_c sh_kc g_c
    grad_B = np.einsum("...kc,...c->...k", sh, grad)
    grad_dir = np.einsum("...k,...kd->...d", grad_B, J)
    return grad_sh, grad_dir


def direction_backward(offset, grad_dir):
    """Pull dL/d(unit direction) back to the unnormalized ``offset``."""
    norm = np.linalg.norm(offset, axis=-1, keepdims=True)
    d = offset / norm
    return (grad_dir - d * np.sum(d * grad_dir, axis=-1, keepdims=True)) / norm
