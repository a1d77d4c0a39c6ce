"""Near-field multi-user channel generation and the NFCB batch file format."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import ArrayGeometry, array_responses, rayleigh_distance


class NearFieldWarning(UserWarning):
    """A generated user lies at or beyond the Rayleigh distance."""


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class UserArea:
    azimuth_range: tuple[float, float]
    distance_range: tuple[float, float]
    elevation: float = 0.0

    def __post_init__(self):
        a0, a1 = self.azimuth_range
        r0, r1 = self.distance_range
        if not a0 < a1:
            raise ValueError(f"azimuth_range must satisfy min < max, got {self.azimuth_range}")
        if not r0 < r1:
            raise ValueError(f"distance_range must satisfy min < max, got {self.distance_range}")
        if not r0 > 0:
            raise ValueError(f"distance_range minimum must be > 0, got {r0}")
        if not (-np.pi / 2 < a0 and a1 < np.pi / 2):
            raise ValueError("azimuth_range must lie inside the boresight half-space (-pi/2, pi/2)")

    @classmethod
    def from_degrees(cls, az_min, az_max, r_min, r_max, elevation_deg=0.0) -> "UserArea":
        return cls(
            (np.deg2rad(az_min), np.deg2rad(az_max)),
            (float(r_min), float(r_max)),
            float(np.deg2rad(elevation_deg)),
        )

    def contains(self, point, tol: float = 1e-9) -> bool:
        az, r, _ = cartesian_to_polar(point)
        return (
            self.azimuth_range[0] - tol <= az <= self.azimuth_range[1] + tol
            and self.distance_range[0] - tol <= r <= self.distance_range[1] + tol
        )


@dataclass(frozen=True)
class Scatterer:
    position: np.ndarray
    gain: complex
    random_phase: complex

    def __post_init__(self):
        if abs(abs(self.random_phase) - 1.0) > 1e-12:
            raise ValueError("scatterer random_phase must be unit-modulus")


@dataclass(frozen=True)
class Scenario:
    """User distribution: K users spread over weighted areas, plus L scatterers.

    Scatterers are placed with the same polar sampling as users unless
    ``scatterer_areas`` is given.
    """

    areas: tuple[UserArea, ...]
    n_users: int
    weights: tuple[float, ...] | None = None
    n_scatterers: int = 0
    scatterer_loss: float = 1.0
    scatterer_areas: tuple[UserArea, ...] | None = None
    name: str = ""

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("a scenario needs at least one user")
        if not self.areas:
            raise ValueError("a scenario needs at least one area")
        if self.n_scatterers < 0:
            raise ValueError("scatterer count must be >= 0")
        w = self.area_weights
        if len(w) != len(self.areas) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("area weights must be nonnegative, one per area, not all zero")

    @property
    def area_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.ones(len(self.areas))
        return np.asarray(self.weights, dtype=float)

    def contains(self, point) -> bool:
        return any(a.contains(point) for a in self.areas)


@dataclass
class ChannelBatch:
    """Channel matrices H (count, N, K) with user positions (count, K, 3)."""

    matrices: np.ndarray
    user_positions: np.ndarray
    scenario: str = ""

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.complex128)
        self.user_positions = np.asarray(self.user_positions, dtype=float)
        if self.matrices.ndim != 3:
            raise ValueError(f"matrices must be (count, N, K), got shape {self.matrices.shape}")
        count, _, k = self.matrices.shape
        if self.user_positions.shape != (count, k, 3):
            raise ValueError(
                f"user_positions shape {self.user_positions.shape} does not match ({count}, {k}, 3)"
            )
        if not np.all(np.isfinite(self.matrices)):
            raise ValueError("channel matrices contain non-finite entries")

    def __len__(self):
        return self.matrices.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_users(self) -> int:
        return self.matrices.shape[2]

    def subset(self, indices) -> "ChannelBatch":
        idx = np.asarray(indices, dtype=int)
        return ChannelBatch(self.matrices[idx], self.user_positions[idx], self.scenario)

    @classmethod
    def empty(cls, n_antennas: int, n_users: int) -> "ChannelBatch":
        return cls(
            np.zeros((0, n_antennas, n_users), dtype=np.complex128),
            np.zeros((0, n_users, 3)),
        )


def polar_to_cartesian(azimuth, distance, elevation=0.0) -> np.ndarray:
    """Azimuth measured from +y boresight towards +x; elevation towards +z."""
    c = np.cos(elevation)
    return np.stack(
        np.broadcast_arrays(
            distance * c * np.sin(azimuth),
            distance * c * np.cos(azimuth),
            distance * np.sin(elevation),
        ),
        axis=-1,
    )


def cartesian_to_polar(point):
    x, y, z = np.asarray(point, dtype=float)
    r = float(np.sqrt(x * x + y * y + z * z))
    return float(np.arctan2(x, y)), r, float(np.arcsin(z / r)) if r > 0 else 0.0


def sample_user(area: UserArea, rng: np.random.Generator) -> np.ndarray:
    az = rng.uniform(*area.azimuth_range)
    r = rng.uniform(*area.distance_range)
    return polar_to_cartesian(az, r, area.elevation)


def los_gain(distance, wavelength: float):
    """Free-space gain exp(-j 2pi r / lambda) / sqrt(4 pi r^2)."""
    distance = np.asarray(distance, dtype=float)
    return np.exp(-2j * np.pi / wavelength * distance) / np.sqrt(4 * np.pi * distance**2)


def user_channel(geom: ArrayGeometry, user, scatterers: Sequence[Scatterer] = ()) -> np.ndarray:
    user = np.asarray(user, dtype=float)
    r_k = np.linalg.norm(user)
    h = los_gain(r_k, geom.wavelength) * array_responses(geom, user[None, :])[0]
    if scatterers:
        pts = np.stack([np.asarray(s.position, dtype=float) for s in scatterers])
        coef = np.array([s.random_phase * s.gain for s in scatterers])
        h = h + coef @ array_responses(geom, pts)
    return h


def sample_scatterers(geom: ArrayGeometry, scenario: Scenario, rng) -> list[Scatterer]:
    areas = scenario.scatterer_areas or scenario.areas
    weights = np.ones(len(areas)) if scenario.scatterer_areas else scenario.area_weights
    p = weights / weights.sum()
    out = []
    for _ in range(scenario.n_scatterers):
        pos = sample_user(areas[rng.choice(len(areas), p=p)], rng)
        gain = scenario.scatterer_loss * los_gain(np.linalg.norm(pos), geom.wavelength)
        phase = np.exp(1j * rng.uniform(0, 2 * np.pi))
        out.append(Scatterer(pos, complex(gain), complex(phase)))
    return out


def generate_batch(
    geom: ArrayGeometry, scenario: Scenario, count: int, rng: np.random.Generator,
    check_near_field: bool = True,
) -> ChannelBatch:
    """Draw ``count`` independent channel matrices from ``scenario``.

    Each user's area is drawn by weight, then its position inside the area;
    scatterers are redrawn for every matrix.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    n, k = geom.n_elements, scenario.n_users
    if count == 0:
        out = ChannelBatch.empty(n, k)
        out.scenario = scenario.name
        return out
    p = scenario.area_weights / scenario.area_weights.sum()
    mats = np.empty((count, n, k), dtype=np.complex128)
    pos = np.empty((count, k, 3))
    for c in range(count):
        for u in range(k):
            pos[c, u] = sample_user(scenario.areas[rng.choice(len(scenario.areas), p=p)], rng)
        scat = sample_scatterers(geom, scenario, rng)
        for u in range(k):
            mats[c, :, u] = user_channel(geom, pos[c, u], scat)
    if check_near_field:
        limit = rayleigh_distance(geom)
        far = np.linalg.norm(pos, axis=-1) >= limit
        if np.any(far):
            warnings.warn(
                f"{int(far.sum())} of {far.size} users lie beyond the Rayleigh distance "
                f"{limit:.4g} m",
                NearFieldWarning,
                stacklevel=2,
            )
    return ChannelBatch(mats, pos, scenario.name)


def split_seed(root_seed: int, index: int) -> np.random.Generator:
    """Independent stream for batch ``index`` derived from ``root_seed``."""
    return np.random.default_rng([int(root_seed), int(index)])


_NFCB_MAGIC = b"NFCB"
_NFCB_HEADER = struct.Struct("<4sHIII")


def dumps_batch(batch: ChannelBatch) -> bytes:
    count, n, k = batch.matrices.shape
    parts = [_NFCB_HEADER.pack(_NFCB_MAGIC, 1, count, n, k)]
    for c in range(count):
        parts.append(np.ascontiguousarray(batch.user_positions[c], dtype="<f8").tobytes())
        # column-major: user k's N entries are contiguous
        cols = np.ascontiguousarray(batch.matrices[c].T)
        inter = np.empty((k, n, 2), dtype="<f8")
        inter[..., 0] = cols.real
        inter[..., 1] = cols.imag
        parts.append(inter.tobytes())
    return b"".join(parts)


def loads_batch(data: bytes) -> ChannelBatch:
    if len(data) < _NFCB_HEADER.size:
        raise FormatError("truncated NFCB header")
    magic, version, count, n, k = _NFCB_HEADER.unpack_from(data, 0)
    if magic != _NFCB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_NFCB_MAGIC!r}")
    if version != 1:
        raise FormatError(f"unsupported NFCB version {version}")
    rec = k * 3 + n * k * 2
    expected = _NFCB_HEADER.size + count * rec * 8
    if len(data) != expected:
        raise FormatError(f"NFCB payload is {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype="<f8", offset=_NFCB_HEADER.size).reshape(count, rec)
    pos = body[:, : k * 3].reshape(count, k, 3).astype(float)
    inter = body[:, k * 3 :].reshape(count, k, n, 2)
    mats = (inter[..., 0] + 1j * inter[..., 1]).transpose(0, 2, 1)
    return ChannelBatch(np.ascontiguousarray(mats), pos)


def save_batch(path, batch: ChannelBatch) -> None:
    Path(path).write_bytes(dumps_batch(batch))


def load_batch(path) -> ChannelBatch:
    return loads_batch(Path(path).read_bytes())
