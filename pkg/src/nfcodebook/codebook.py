"""Phase-matrix codebooks: synthesis, the uniform polar baseline and beam maps."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import FormatError, polar_to_cartesian
from .geometry import ArrayGeometry, array_responses

TWO_PI = 2.0 * np.pi


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseMatrix:
    """Real N x N phases; column n holds the per-element phases of beam n.

    Values are kept unwrapped during optimisation, :meth:`wrapped` gives the
    canonical representative in [0, 2pi).
    """

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ValueError(f"phase matrix must be square, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("phase matrix has non-finite entries")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def wrapped(self) -> "PhaseMatrix":
        w = np.mod(self.theta, TWO_PI)
        # mod can round up to exactly 2pi for tiny negative inputs
        w[w >= TWO_PI] = 0.0
        return PhaseMatrix(w)


@dataclass(frozen=True)
class Codebook:
    u: np.ndarray

    @property
    def n(self) -> int:
        return self.u.shape[0]


def synthesize(theta: PhaseMatrix | np.ndarray) -> Codebook:
    t = theta.theta if isinstance(theta, PhaseMatrix) else np.asarray(theta, dtype=float)
    return Codebook((np.cos(t) + 1j * np.sin(t)) / np.sqrt(t.shape[0]))


def polar_grid(angle_count: int, distance_count: int, sector, distance_range):
    """Angle-major grid: row ``a * distance_count + d`` is (azimuth_a, distance_d)."""

    def axis(lo, hi, count):
        if count == 1:
            return np.array([(lo + hi) / 2.0])
        return np.linspace(lo, hi, count)

    az = axis(*sector, angle_count)
    r = axis(*distance_range, distance_count)
    ga, gr = np.meshgrid(az, r, indexing="ij")
    return ga.ravel(), gr.ravel()


def uniform_polar_codebook(
    geom: ArrayGeometry,
    angle_count: int,
    distance_count: int,
    distance_range=(0.1, 1.0),
    sector=(-np.pi / 3, np.pi / 3),
    elevation: float = 0.0,
) -> PhaseMatrix:
    """Baseline codebook with one beam focused on each point of a uniform polar grid."""
    n = geom.n_elements
    if angle_count * distance_count != n:
        raise ConfigurationError(
            f"grid {angle_count} x {distance_count} = {angle_count * distance_count} "
            f"does not match N = {n}"
        )
    az, r = polar_grid(angle_count, distance_count, sector, distance_range)
    pts = polar_to_cartesian(az, r, elevation)
    a = array_responses(geom, pts)
    # beam n = a(point_n) / sqrt(N) maximises |a(point_n)^H u_n|
    return PhaseMatrix(np.mod(np.angle(a), TWO_PI).T)


def init_phase_matrix(strategy: str, geom: ArrayGeometry, rng: np.random.Generator | None = None,
                      **polar_kwargs) -> PhaseMatrix:
    n = geom.n_elements
    if strategy == "uniform-random":
        if rng is None:
            raise ValueError("uniform-random initialisation needs a random generator")
        return PhaseMatrix(rng.uniform(0.0, TWO_PI, size=(n, n)))
    if strategy == "polar-seeded":
        if "angle_count" not in polar_kwargs:
            side = int(round(np.sqrt(n)))
            if side * side != n:
                raise ConfigurationError("polar-seeded init needs angle_count/distance_count for non-square N")
            polar_kwargs.update(angle_count=side, distance_count=side)
        return uniform_polar_codebook(geom, **polar_kwargs)
    raise ConfigurationError(f"unknown init strategy {strategy!r}")


def beam_gains(geom: ArrayGeometry, codebook: Codebook, points) -> np.ndarray:
    """|a(point)^H u_n| for every point (rows) and beam (columns)."""
    a = array_responses(geom, points)
    return np.abs(a.conj() @ codebook.u)


def beam_response_map(geom: ArrayGeometry, codebook: Codebook, beam_indices,
                      azimuths, distances, elevation: float = 0.0) -> list[tuple[float, float, int, float]]:
    """Gain table rows ``(azimuth, distance, beam, gain)`` over a polar grid.

    Rows are ordered by azimuth, then distance, then the given beam order.
    """
    beams = [int(b) for b in beam_indices]
    for b in beams:
        if not 0 <= b < codebook.n:
            raise IndexError(f"beam index {b} out of range for N = {codebook.n}")
    az, r = np.meshgrid(np.asarray(azimuths, float), np.asarray(distances, float), indexing="ij")
    az, r = az.ravel(), r.ravel()
    g = beam_gains(geom, Codebook(codebook.u[:, beams]), polar_to_cartesian(az, r, elevation))
    return [
        (float(az[p]), float(r[p]), beams[j], float(g[p, j]))
        for p in range(len(az))
        for j in range(len(beams))
    ]


BEAM_MAP_HEADER = "azimuth_rad,distance_m,beam_index,gain"


def format_beam_map(rows) -> str:
    lines = [BEAM_MAP_HEADER]
    lines += [f"{a:.17g},{r:.17g},{b},{g:.17g}" for a, r, b, g in rows]
    return "\n".join(lines) + "\n"


def parse_beam_map(text: str) -> list[tuple[float, float, int, float]]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != BEAM_MAP_HEADER:
        raise FormatError("missing beam map header")
    out = []
    for line in lines[1:]:
        a, r, b, g = line.split(",")
        out.append((float(a), float(r), int(b), float(g)))
    return out


_NFTH_MAGIC = b"NFTH"
_NFTH_HEADER = struct.Struct("<4sHI")


def dumps_phase_matrix(theta: PhaseMatrix) -> bytes:
    """Serialise the wrapped phases (entries in [0, 2pi))."""
    w = theta.wrapped().theta
    return _NFTH_HEADER.pack(_NFTH_MAGIC, 1, w.shape[0]) + np.ascontiguousarray(w, dtype="<f8").tobytes()


def loads_phase_matrix(data: bytes) -> PhaseMatrix:
    if len(data) < _NFTH_HEADER.size:
        raise FormatError("truncated NFTH header")
    magic, version, n = _NFTH_HEADER.unpack_from(data, 0)
    if magic != _NFTH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_NFTH_MAGIC!r}")
    if version != 1:
        raise FormatError(f"unsupported NFTH version {version}")
    if len(data) != _NFTH_HEADER.size + 8 * n * n:
        raise FormatError("NFTH payload size does not match N")
    body = np.frombuffer(data, dtype="<f8", offset=_NFTH_HEADER.size).reshape(n, n)
    return PhaseMatrix(body.astype(float))


def save_phase_matrix(path, theta: PhaseMatrix) -> None:
    Path(path).write_bytes(dumps_phase_matrix(theta))


def load_phase_matrix(path) -> PhaseMatrix:
    return loads_phase_matrix(Path(path).read_bytes())
