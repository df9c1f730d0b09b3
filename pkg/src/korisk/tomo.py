"""Parallel-beam CT in pixel space: rotate-and-sum projection and the
analytic pieces of filtered backprojection.

Rotation works on fractional pixel indices about the grid centre
``c = (h - 1) / 2``.  With ``di = i - c`` and ``dj = j - c`` the output pixel
``(i, j)`` of a rotation by ``angle`` samples the input at::

    dj' = dj cos(angle) - di sin(angle)
    di' = dj sin(angle) + di cos(angle)

which is the rotation by ``-angle`` of the pixel's ``(x, y)`` coordinate
(``y`` points up, so ``di`` and ``y`` have opposite signs).  Working in index
space keeps ``angle = 0`` bit-exact.
"""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import InputError, NumericError
from .rng import Rng

TIKHONOV_ALPHA = 0.1
POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000
_POWER_START_SEED = 0x5EED


@dataclass(frozen=True)
class Geometry:
    h: int
    v: int
    b: int
    angular_range: float = 180.0

    def __post_init__(self):
        if self.h < 2 or self.v < 1 or self.b < 1:
            raise InputError(f"invalid geometry {self}")

    @classmethod
    def surrogate(cls, h):
        """CPU-surrogate geometry: ``v = round(1.25 h)`` views, ``b = h`` bins."""
        return cls(h=h, v=int(math.floor(1.25 * h + 0.5)), b=h)

    @property
    def angles(self):
        """View angles in radians, endpoint excluded."""
        return np.deg2rad(np.arange(self.v) * self.angular_range / self.v)

    @property
    def n_pixels(self):
        return self.h * self.h

    @property
    def n_measurements(self):
        return self.v * self.b


def _check_square(img):
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise InputError(f"expected a square image, got shape {img.shape}")
    return img


def _sample_coords(h, angle):
    c = (h - 1) / 2.0
    d = np.arange(h) - c
    di, dj = d[:, None], d[None, :]
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    rj = dj * cos_a - di * sin_a + c
    ri = dj * sin_a + di * cos_a + c
    return ri, rj


def _bilinear_taps(h, angle):
    """Yield ``(i0, j0, weight, valid)`` for the four neighbours of each output pixel."""
    ri, rj = _sample_coords(h, angle)
    i0 = np.floor(ri)
    j0 = np.floor(rj)
    fi, fj = ri - i0, rj - j0
    i0, j0 = i0.astype(np.int64), j0.astype(np.int64)
    for di, wi in ((0, 1.0 - fi), (1, fi)):
        for dj, wj in ((0, 1.0 - fj), (1, fj)):
            ii, jj = i0 + di, j0 + dj
            valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < h)
            yield ii, jj, wi * wj, valid


def rotate_bilinear(img, angle):
    """Rotate a square image by ``angle`` radians with zero padding."""
    img = _check_square(img)
    h = img.shape[0]
    out = np.zeros_like(img)
    for ii, jj, w, valid in _bilinear_taps(h, angle):
        vals = np.where(valid, img[np.clip(ii, 0, h - 1), np.clip(jj, 0, h - 1)], 0.0)
        out += w * vals
    return out


def _check_projector_geometry(geom):
    if geom.b != geom.h:
        raise InputError(
            f"rotate-and-sum projection needs b == h (got b={geom.b}, h={geom.h})"
        )


def forward_project(img, geom):
    """Sinogram of shape ``(v, b)``: column sums of the rotated image per view."""
    img = _check_square(img)
    _check_projector_geometry(geom)
    if img.shape[0] != geom.h:
        raise InputError(f"image side {img.shape[0]} does not match geometry h={geom.h}")
    return np.stack([rotate_bilinear(img, t).sum(axis=0) for t in geom.angles])


def assemble_system_matrix(geom):
    """Dense ``(v*b) x h^2`` matrix with ``A @ img.ravel() == forward_project(img).ravel()``."""
    _check_projector_geometry(geom)
    h = geom.h
    a = np.zeros((geom.v * geom.b, h * h))
    cols = np.broadcast_to(np.arange(h)[None, :], (h, h))
    for view, angle in enumerate(geom.angles):
        rows = view * geom.b + cols
        for ii, jj, w, valid in _bilinear_taps(h, angle):
            np.add.at(a, (rows[valid], ii[valid] * h + jj[valid]), w[valid])
    return a


def tikhonov_pseudo_inverse(a, alpha=TIKHONOV_ALPHA):
    """``(A^T A + alpha I)^{-1} A^T`` by a dense Cholesky solve."""
    if not alpha > 0:
        raise InputError(f"alpha must be > 0, got {alpha}")
    a = np.asarray(a, dtype=float)
    gram = a.T @ a
    gram[np.diag_indices_from(gram)] += alpha
    try:
        pinv = scipy.linalg.solve(gram, a.T, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"Tikhonov solve failed: {exc}") from exc
    if not np.all(np.isfinite(pinv)):
        raise NumericError("Tikhonov pseudo-inverse has non-finite entries")
    return pinv


def ramp_filter_circulant(b):
    """Ram-Lak spatial kernel (Kak & Slaney) wrapped to length ``b``.

    Index ``k`` holds offset ``k`` for ``k <= b // 2`` and ``k - b`` otherwise:
    1/4 at offset 0, ``-1/(pi^2 n^2)`` at odd offsets, 0 at even ones.
    """
    if b < 2:
        raise InputError(f"need at least 2 detector bins, got {b}")
    k = np.arange(b)
    n = np.where(k <= b // 2, k, k - b)
    kernel = np.zeros(b)
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (math.pi**2 * n[odd] ** 2)
    kernel[0] = 0.25
    return kernel


def filter_matrix(kernel):
    """Dense circulant matrix of the per-view filter (``K @ row`` = circular convolution)."""
    return scipy.linalg.circulant(kernel)


def apply_filter(sino, kernel):
    """Circular convolution of every sinogram row with ``kernel``."""
    return np.asarray(sino, dtype=float) @ filter_matrix(kernel).T


def operator_norm(m, tol=POWER_TOL, max_iter=POWER_MAX_ITER, return_info=False):
    """Largest singular value of ``m`` by power iteration on ``m^T m``.

    The start vector is a fixed pseudo-random positive vector, so results are
    reproducible.  With ``return_info`` the result is
    ``(estimate, converged, iterations)``.
    """
    if not tol > 0 or max_iter < 1:
        raise InputError("need tol > 0 and max_iter >= 1")
    m = np.asarray(m, dtype=float)
    if not np.any(m):
        return (0.0, True, 0) if return_info else 0.0
    x = 0.5 + Rng(_POWER_START_SEED).random(m.shape[1])
    x /= np.linalg.norm(x)
    est, converged, it = 0.0, False, 0
    for it in range(1, max_iter + 1):
        y = m @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            break
        if abs(new - est) < tol * new:
            est, converged = new, True
            break
        est = new
        x = m.T @ y
        x /= np.linalg.norm(x)
    return (est, converged, it) if return_info else est


def relu(img):
    return np.maximum(np.asarray(img, dtype=float), 0.0)


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """System matrix, its Tikhonov pseudo-inverse, the ramp kernel and operator norms."""

    geometry: Geometry
    a: np.ndarray
    a_pinv: np.ndarray
    filter_k: np.ndarray
    norm_k: float
    norm_at: float
    alpha: float = TIKHONOV_ALPHA

    @classmethod
    def build(cls, geom, alpha=TIKHONOV_ALPHA):
        a = assemble_system_matrix(geom)
        a_pinv = tikhonov_pseudo_inverse(a, alpha)
        kernel = ramp_filter_circulant(geom.b)
        for arr in (a, a_pinv, kernel):
            arr.flags.writeable = False
        return cls(
            geometry=geom,
            a=a,
            a_pinv=a_pinv,
            filter_k=kernel,
            norm_k=operator_norm(filter_matrix(kernel)),
            norm_at=operator_norm(a.T),
            alpha=alpha,
        )

    @property
    def filter_frequency_response(self):
        """DFT coefficients of the circulant filter (real, since the kernel is symmetric)."""
        return np.fft.fft(self.filter_k).real

    @cached_property
    def pinv_gram(self):
        """``A+^T A+``, reused by every operator-aware ridge fit."""
        g = self.a_pinv.T @ self.a_pinv
        g.flags.writeable = False
        return g

    def project(self, img):
        h = self.geometry.h
        return (self.a @ np.asarray(img, dtype=float).reshape(h * h)).reshape(
            self.geometry.v, self.geometry.b
        )

    def backproject(self, sino):
        """``A^T`` applied to a sinogram, reshaped to ``h x h``."""
        g = self.geometry
        sino = np.asarray(sino, dtype=float)
        if sino.size != g.n_measurements:
            raise InputError(f"sinogram size {sino.size} != {g.n_measurements}")
        return (self.a.T @ sino.reshape(-1)).reshape(g.h, g.h)

    def fbp(self, sino, weights=None):
        """``ReLU(A^T K W x)`` with unit weights unless given."""
        sino = np.asarray(sino, dtype=float).reshape(self.geometry.v, self.geometry.b)
        if weights is not None:
            sino = sino * np.asarray(weights).reshape(sino.shape)
        return relu(self.backproject(apply_filter(sino, self.filter_k)))


def backproject(sino, model):
    return model.backproject(sino)


def save_csv(matrix, path):
    """Debug export of a matrix or sinogram."""
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g")
