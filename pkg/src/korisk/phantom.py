"""Random-ellipse phantoms on the square [-1, 1]^2.

Pixel (row i, col j) of an ``h x h`` image sits at
``x = 2(j + 0.5)/h - 1`` and ``y = 1 - 2(i + 0.5)/h``.  Every ellipse adds
its amplitude to the pixels whose centre lies inside it (no anti-aliasing)
and the sum is clipped to ``[0, 1.5]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rng import Rng

AMPLITUDE_RANGE = (0.2, 1.0)
CENTER_RANGE = (-0.5, 0.5)
AXIS_RANGE = (0.08, 0.4)
ORIENTATION_RANGE = (0.0, math.pi)
MAX_ELLIPSES = 4
CLIP_MAX = 1.5


@dataclass(frozen=True)
class Ellipse:
    amplitude: float
    center: tuple
    semi_axes: tuple
    orientation: float

    def contains(self, x, y):
        """Boolean mask of points ``(x, y)`` inside the closed ellipse."""
        cx, cy = self.center
        a, b = self.semi_axes
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        dx, dy = x - cx, y - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def sample_ellipse(rng):
    """Draw one ellipse; consumes exactly six uniforms in field order
    (amplitude, cx, cy, a, b, orientation)."""
    amp = rng.uniform(*AMPLITUDE_RANGE)
    cx = rng.uniform(*CENTER_RANGE)
    cy = rng.uniform(*CENTER_RANGE)
    a = rng.uniform(*AXIS_RANGE)
    b = rng.uniform(*AXIS_RANGE)
    theta = rng.uniform(*ORIENTATION_RANGE)
    if theta >= math.pi:
        # half-open orientation range even for a degenerate stream
        theta = math.nextafter(math.pi, 0.0)
    return Ellipse(amp, (cx, cy), (a, b), theta)


def pixel_centers(h):
    """Coordinate grids ``(x, y)`` of pixel centres, each ``h x h``."""
    c = 2.0 * (np.arange(h) + 0.5) / h - 1.0
    x = np.broadcast_to(c[None, :], (h, h))
    y = np.broadcast_to(-c[:, None], (h, h))
    return x, y


def render(ellipses, h):
    """Rasterize ``ellipses`` onto an ``h x h`` grid and clip to [0, 1.5]."""
    if int(h) != h or h < 2:
        raise InputError(f"image side must be an integer >= 2, got {h!r}")
    h = int(h)
    x, y = pixel_centers(h)
    img = np.zeros((h, h))
    for e in ellipses:
        img += e.amplitude * e.contains(x, y)
    np.clip(img, 0.0, CLIP_MAX, out=img)
    img.flags.writeable = False
    return img


def generate_phantom(rng, h):
    """One phantom: ellipse count uniform on {1, ..., 4}, drawn first."""
    if int(h) != h or h < 2:
        raise InputError(f"image side must be an integer >= 2, got {h!r}")
    k = 1 + rng.below(MAX_ELLIPSES)
    return render([sample_ellipse(rng) for _ in range(k)], h)


def generate_pool(seed, count, h):
    """``count`` phantoms from a single stream seeded with ``seed``."""
    if count < 1:
        raise InputError(f"pool size must be >= 1, got {count}")
    rng = Rng(seed)
    return [generate_phantom(rng, h) for _ in range(count)]


def save_csv(img, path):
    """Debug export: one image per file, row-major."""
    np.savetxt(path, np.asarray(img), delimiter=",", fmt="%.17g")
