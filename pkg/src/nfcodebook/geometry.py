"""Uniform planar array geometry and near-field array responses.

The array lies in the x-z plane centred at the origin with boresight along +y.
Elements are ordered row-major: ``ix`` is the outer index, ``iz`` the inner
one, both ascending from ``-half`` to ``+half``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry, index or evaluation point."""


@dataclass(frozen=True)
class ArrayGeometry:
    n_x: int = 11
    n_z: int = 11
    spacing: float = 0.005
    wavelength: float = 0.01

    def __post_init__(self):
        for name in ("n_x", "n_z"):
            n = getattr(self, name)
            if int(n) != n or n < 1 or n % 2 == 0:
                raise GeometryError(f"{name} must be an odd positive count, got {n}")
        if not self.spacing > 0:
            raise GeometryError(f"spacing must be > 0, got {self.spacing}")
        if not self.wavelength > 0:
            raise GeometryError(f"wavelength must be > 0, got {self.wavelength}")

    @classmethod
    def half_wavelength(cls, n_x: int, n_z: int, wavelength: float = 0.01) -> "ArrayGeometry":
        return cls(n_x, n_z, wavelength / 2, wavelength)

    @property
    def half_x(self) -> int:
        return (self.n_x - 1) // 2

    @property
    def half_z(self) -> int:
        return (self.n_z - 1) // 2

    @property
    def n_elements(self) -> int:
        return self.n_x * self.n_z

    @property
    def center_index(self) -> int:
        """Flat index of the element at the origin."""
        return self.half_x * self.n_z + self.half_z

    @cached_property
    def positions(self) -> np.ndarray:
        """All element positions, shape (N, 3), in the global element order."""
        ix = np.arange(-self.half_x, self.half_x + 1)
        iz = np.arange(-self.half_z, self.half_z + 1)
        gx, gz = np.meshgrid(ix, iz, indexing="ij")
        pos = np.zeros((self.n_elements, 3))
        pos[:, 0] = gx.ravel() * self.spacing
        pos[:, 2] = gz.ravel() * self.spacing
        return pos


def element_position(geom: ArrayGeometry, ix: int, iz: int) -> np.ndarray:
    if not (-geom.half_x <= ix <= geom.half_x and -geom.half_z <= iz <= geom.half_z):
        raise GeometryError(
            f"element index ({ix}, {iz}) outside [-{geom.half_x}, {geom.half_x}] x "
            f"[-{geom.half_z}, {geom.half_z}]"
        )
    return np.array([ix * geom.spacing, 0.0, iz * geom.spacing])


def aperture(geom: ArrayGeometry) -> float:
    """Array diagonal length in meters."""
    return float(np.hypot((geom.n_x - 1) * geom.spacing, (geom.n_z - 1) * geom.spacing))


def rayleigh_distance_from_aperture(d: float, wavelength: float) -> float:
    return 2.0 * d * d / wavelength


def rayleigh_distance(geom: ArrayGeometry) -> float:
    """Near-field boundary 2 D^2 / wavelength, with D the array diagonal."""
    return rayleigh_distance_from_aperture(aperture(geom), geom.wavelength)


def array_response(geom: ArrayGeometry, point) -> np.ndarray:
    """Spherical-wave response of every element towards ``point``.

    Entry n is ``exp(-j 2pi/lambda (|r - s_n| - |r - s_0|))`` where ``s_0`` is
    the centre element, so the centre entry is exactly ``1 + 0j``.
    """
    return array_responses(geom, np.asarray(point, dtype=float)[None, :])[0]


def array_responses(geom: ArrayGeometry, points) -> np.ndarray:
    """Vectorised :func:`array_response` for points of shape (P, 3); returns (P, N)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise GeometryError(f"points must have shape (P, 3), got {points.shape}")
    dist = np.linalg.norm(points[:, None, :] - geom.positions[None, :, :], axis=-1)
    if np.any(dist == 0.0):
        raise GeometryError("evaluation point coincides with an array element")
    ref = dist[:, geom.center_index]
    delta = dist - ref[:, None]
    # exact zero at the centre element so its entry is 1 + 0j bit-for-bit
    delta[:, geom.center_index] = 0.0
    return np.exp(-2j * np.pi / geom.wavelength * delta)
