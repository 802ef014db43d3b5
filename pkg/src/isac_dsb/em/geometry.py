"""Geometry and material containers for the volume-integral scattering model."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

EPS0 = 8.8541878128e-12  # F/m
C0 = 299_792_458.0  # m/s


@dataclass(frozen=True)
class FrequencyPlan:
    """Centered OFDM comb: ``f_k = f_c + (k - (K-1)/2) * delta_f`` for k = 0..K-1."""

    f_c: float
    K: int
    delta_f: float

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.f_c <= 0 or self.delta_f < 0:
            raise ValueError("f_c must be positive and delta_f non-negative")
        if self.K > 1 and self.delta_f == 0:
            raise ValueError("delta_f must be positive when K > 1")
        if self.freqs[0] <= 0:
            raise ValueError("comb extends to non-positive frequencies")

    @cached_property
    def freqs(self) -> np.ndarray:
        k = np.arange(self.K, dtype=float)
        return self.f_c + (k - (self.K - 1) / 2.0) * self.delta_f

    @property
    def omegas(self) -> np.ndarray:
        return 2.0 * np.pi * self.freqs

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * self.freqs / C0

    def check_index(self, k: int) -> int:
        if not 0 <= k < self.K:
            raise IndexError(f"subcarrier index {k} outside 0..{self.K - 1}")
        return k


@dataclass(frozen=True)
class VoxelGrid:
    """Regular box of voxels centred on ``center`` (the region holding the target)."""

    center: tuple[float, float, float]
    extent: tuple[float, float, float]
    shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.center) != 3 or len(self.extent) != 3 or len(self.shape) != 3:
            raise ValueError("center, extent and shape must have three entries")
        if min(self.extent) <= 0 or min(self.shape) < 1:
            raise ValueError("extent and shape must be positive")

    @classmethod
    def cube(cls, center, side: float, n: int) -> "VoxelGrid":
        return cls(tuple(center), (side, side, side), (n, n, n))

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.shape)

    @property
    def dv(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.extent) / 2.0

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.extent) / 2.0

    def centers(self) -> np.ndarray:
        """Voxel-centre coordinates, shape ``(nx, ny, nz, 3)``."""
        axes = [
            lo + (np.arange(n) + 0.5) * d
            for lo, n, d in zip(self.lower, self.shape, self.spacing)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def contains(self, points: np.ndarray, atol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - atol) & (p <= self.upper + atol), axis=-1)

    def equivalent_radius(self) -> float:
        """Radius of the sphere with the same volume as one voxel."""
        return (3.0 * self.dv / (4.0 * np.pi)) ** (1.0 / 3.0)

    def with_center(self, center) -> "VoxelGrid":
        return VoxelGrid(tuple(center), self.extent, self.shape)


@dataclass
class MaterialGrid:
    """Relative permittivity and conductivity (S/m) per voxel."""

    eps_r: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.eps_r = np.asarray(self.eps_r, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.eps_r.shape != self.sigma.shape:
            raise ValueError("eps_r and sigma shapes differ")
        if np.any(self.eps_r < 1.0) or np.any(self.sigma < 0.0):
            raise ValueError("materials must satisfy eps_r >= 1 and sigma >= 0")

    @classmethod
    def background(cls, shape) -> "MaterialGrid":
        return cls(np.ones(shape), np.zeros(shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.eps_r.shape

    def occupied(self) -> np.ndarray:
        return (self.eps_r != 1.0) | (self.sigma != 0.0)


def contrast_from_materials(mat: MaterialGrid, plan: FrequencyPlan, k: int) -> np.ndarray:
    """Complex contrast ``eps_r - j*sigma/(eps0*omega_k) - 1`` on subcarrier ``k``."""
    plan.check_index(k)
    omega = plan.omegas[k]
    chi = mat.eps_r - 1j * mat.sigma / (EPS0 * omega) - 1.0
    # exact zero on background voxels
    chi[~mat.occupied()] = 0.0
    return chi


@dataclass
class AntennaArray:
    """Dipole array: element positions (m), a shared polarization and a gain."""

    positions: np.ndarray
    polarization: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    gain: float = 1.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.polarization = np.asarray(self.polarization, dtype=float)
        if self.positions.shape[-1] != 3:
            raise ValueError("positions must be (N, 3)")
        if not np.isclose(np.linalg.norm(self.polarization), 1.0, atol=1e-12):
            raise ValueError("polarization must be a unit vector")
        if len(np.unique(self.positions, axis=0)) != len(self.positions):
            raise ValueError("antenna positions must be distinct")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def ula(cls, n: int, spacing: float, axis: int, polarization, gain: float = 1.0):
        """Uniform linear array along ``axis`` placed symmetrically about the origin."""
        pos = np.zeros((n, 3))
        pos[:, axis] = (np.arange(n) - (n - 1) / 2.0) * spacing
        return cls(pos, np.asarray(polarization, dtype=float), gain)


def mills_cross(n_t: int, n_r: int, wavelength: float) -> tuple[AntennaArray, AntennaArray]:
    """Transmit ULA along y (z-polarized) and receive ULA along z (y-polarized), half-wave spacing."""
    tx = AntennaArray.ula(n_t, wavelength / 2.0, axis=1, polarization=[0.0, 0.0, 1.0])
    rx = AntennaArray.ula(n_r, wavelength / 2.0, axis=2, polarization=[0.0, 1.0, 0.0])
    return tx, rx
