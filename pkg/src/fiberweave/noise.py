"""Seeded, periodic 3D gradient (Perlin) noise.

Classic lattice noise: gradients hashed from a seeded permutation table,
quintic fade, trilinear blend. The integer lattice wraps with a per-dimension
period, so fields tile seamlessly; values vanish exactly on lattice points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseField", "perlin3"]

_TABLE = 256  # permutation size; all periods must divide into hashing range


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _grad_dot(h, x, y, z):
    """Dot product of the hashed corner gradient with the offset (x, y, z).

    Uses the 12-edge-gradient scheme: the low 4 hash bits pick two of the
    three coordinates and their signs.
    """
    h = h & 15
    u = np.where(h < 8, x, y)
    v = np.where(h < 4, y, np.where((h == 12) | (h == 14), x, z))
    return np.where(h & 1, -u, u) + np.where(h & 2, -v, v)


@dataclass(frozen=True)
class NoiseField:
    """A seeded 3D noise field, periodic with integer ``period`` per axis."""

    seed: int
    period: tuple[int, int, int] = (_TABLE, _TABLE, _TABLE)
    perm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(int(p) != p or p < 1 for p in self.period):
            raise ValueError(f"period {self.period!r} must be integers >= 1")
        object.__setattr__(self, "period", tuple(int(p) for p in self.period))
        rng = np.random.default_rng(self.seed)
        p = rng.permutation(_TABLE).astype(np.int64)
        perm = np.concatenate([p, p])
        perm.setflags(write=False)
        object.__setattr__(self, "perm", perm)

    def _corner_hash(self, ix, iy, iz):
        px, py, pz = self.period
        ix = np.mod(ix, px) & (_TABLE - 1)
        iy = np.mod(iy, py) & (_TABLE - 1)
        iz = np.mod(iz, pz) & (_TABLE - 1)
        perm = self.perm
        return perm[perm[perm[ix] + iy] + iz]

    def values(self, x, y, z):
        """Noise at broadcastable coordinate arrays; result in [-1, 1]."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        x, y, z = np.broadcast_arrays(x, y, z)

        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        z0 = np.floor(z).astype(np.int64)
        fx, fy, fz = x - x0, y - y0, z - z0
        u, v, w = _fade(fx), _fade(fy), _fade(fz)

        acc_w0 = None
        for dz in (0, 1):
            acc_v0 = None
            for dy in (0, 1):
                h0 = self._corner_hash(x0, y0 + dy, z0 + dz)
                h1 = self._corner_hash(x0 + 1, y0 + dy, z0 + dz)
                g0 = _grad_dot(h0, fx, fy - dy, fz - dz)
                g1 = _grad_dot(h1, fx - 1.0, fy - dy, fz - dz)
                lerp_u = g0 + u * (g1 - g0)
                if dy == 0:
                    acc_v0 = lerp_u
                else:
                    acc_v0 = acc_v0 + v * (lerp_u - acc_v0)
            if dz == 0:
                acc_w0 = acc_v0
            else:
                acc_w0 = acc_w0 + w * (acc_v0 - acc_w0)
        return acc_w0


def perlin3(point, noise: NoiseField) -> float:
    """Scalar noise value at a single 3D point."""
    x, y, z = point
    return float(noise.values(x, y, z))
