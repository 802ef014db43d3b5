"""5D point clouds (x, y, z, eps_r, sigma): procedural targets, normalization and Chamfer metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .em.geometry import MaterialGrid, VoxelGrid
from .units import to_db

REGION_HALF = 0.5  # targets fit in a 1 m cube around their location
SHAPE_KINDS = ("sphere", "box", "ellipsoid", "union-of-blobs")


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-coordinate centre/scale. Centre is the known target location; scales are dataset constants."""

    center: tuple[float, float, float]
    scales: tuple[float, float, float]
    eps_c: float
    eps_d: float
    sig_c: float
    sig_d: float

    def __post_init__(self):
        if min(self.scales) <= 0 or self.eps_d <= 0 or self.sig_d <= 0:
            raise ValueError("normalization scales must be positive")

    @property
    def offset(self) -> np.ndarray:
        return np.array([*self.center, self.eps_c, self.sig_c], dtype=float)

    @property
    def scale(self) -> np.ndarray:
        return np.array([*self.scales, self.eps_d, self.sig_d], dtype=float)

    def at(self, center) -> "NormalizationSpec":
        return NormalizationSpec(tuple(float(c) for c in center), self.scales, self.eps_c, self.eps_d, self.sig_c, self.sig_d)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "eps_c": self.eps_c,
            "eps_d": self.eps_d,
            "sig_c": self.sig_c,
            "sig_d": self.sig_d,
        }

    @classmethod
    def from_dict(cls, d: dict, center=(0.0, 0.0, 0.0)) -> "NormalizationSpec":
        return cls(tuple(center), tuple(d["scales"]), d["eps_c"], d["eps_d"], d["sig_c"], d["sig_d"])


def normalize(points: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return (np.asarray(points, dtype=float) - spec.offset) / spec.scale


def denormalize(points: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return np.asarray(points, dtype=float) * spec.scale + spec.offset


def fit_normalization(clouds, locations) -> NormalizationSpec:
    """Dataset-level scales: pooled std of coordinates about each target's location, and of materials."""
    clouds = np.asarray(clouds, dtype=float)
    rel = clouds[..., :3] - np.asarray(locations, dtype=float)[:, None, :]
    spatial = tuple(float(s) for s in np.sqrt(np.mean(rel**2, axis=(0, 1))))
    eps, sig = clouds[..., 3], clouds[..., 4]
    return NormalizationSpec(
        (0.0, 0.0, 0.0),
        spatial,
        float(eps.mean()),
        float(eps.std()) or 1.0,
        float(sig.mean()),
        float(sig.std()) or 1.0,
    )


# --------------------------------------------------------------------------- targets


@dataclass
class Part:
    """Ellipsoid or box in the target frame, optionally split into two materials across a plane."""

    kind: str  # "ellipsoid" | "box"
    offset: np.ndarray
    half: np.ndarray  # semi-axes or half-extents (m)
    eps_r: float
    sigma: float
    split_axis: int | None = None
    eps_r2: float = 1.0
    sigma2: float = 0.0

    def contains(self, p: np.ndarray) -> np.ndarray:
        q = (p - self.offset) / self.half
        if self.kind == "ellipsoid":
            return np.sum(q**2, axis=-1) <= 1.0
        return np.all(np.abs(q) <= 1.0, axis=-1)

    def materials(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eps = np.full(len(p), self.eps_r)
        sig = np.full(len(p), self.sigma)
        if self.split_axis is not None:
            upper = (p[:, self.split_axis] - self.offset[self.split_axis]) > 0
            eps[upper] = self.eps_r2
            sig[upper] = self.sigma2
        return eps, sig

    def bounding_radius(self) -> float:
        reach = np.max(self.half) if self.kind == "ellipsoid" else np.linalg.norm(self.half)
        return float(np.linalg.norm(self.offset) + reach)


@dataclass
class TargetSpec:
    kind: str
    location: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    parts: list[Part] = field(default_factory=list)

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float)
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        for part in self.parts:
            if np.any(np.asarray(part.half) <= 0):
                raise ValueError("degenerate shape: non-positive extent")
        if self.parts and max(p.bounding_radius() for p in self.parts) > REGION_HALF + 1e-12:
            raise ValueError("target does not fit in the 1 m cubic region")

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.location) @ self.rotation

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return local @ self.rotation.T + self.location

    def material_at(self, local: np.ndarray):
        """Materials at target-frame points; the first containing part wins. Background elsewhere."""
        eps = np.ones(len(local))
        sig = np.zeros(len(local))
        free = np.ones(len(local), dtype=bool)
        for part in self.parts:
            hit = free & part.contains(local)
            if hit.any():
                e, s = part.materials(local[hit])
                eps[hit], sig[hit] = e, s
                free &= ~hit
        return eps, sig, ~free


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def sample_location(rng, r_min=5.0, r_max=30.0, max_angle_deg=60.0) -> np.ndarray:
    """Uniform (by area) point in the horizontal sector ``|atan(y/x)| <= max_angle``, ``r <= r_max``."""
    r = math.sqrt(rng.uniform(r_min**2, r_max**2))
    th = math.radians(rng.uniform(-max_angle_deg, max_angle_deg))
    return np.array([r * math.cos(th), r * math.sin(th), 0.0])


def sample_target_spec(
    rng: np.random.Generator,
    location=None,
    kinds=SHAPE_KINDS,
    eps_range=(1.0, 5.0),
    sigma_range=(0.0, 0.05),
    r_min=5.0,
    r_max=30.0,
    max_angle_deg=60.0,
    split_prob=0.5,
) -> TargetSpec:
    kind = kinds[rng.integers(len(kinds))]
    loc = sample_location(rng, r_min, r_max, max_angle_deg) if location is None else np.asarray(location, float)

    def mat():
        return float(rng.uniform(*eps_range)), float(rng.uniform(*sigma_range))

    def maybe_split(part: Part) -> Part:
        if rng.uniform() < split_prob:
            part.split_axis = int(rng.integers(3))
            part.eps_r2, part.sigma2 = mat()
        return part

    if kind == "sphere":
        rad = rng.uniform(0.2, 0.45)
        parts = [maybe_split(Part("ellipsoid", np.zeros(3), np.full(3, rad), *mat()))]
    elif kind == "ellipsoid":
        parts = [maybe_split(Part("ellipsoid", np.zeros(3), rng.uniform(0.15, 0.45, 3), *mat()))]
    elif kind == "box":
        parts = [maybe_split(Part("box", np.zeros(3), rng.uniform(0.12, 0.28, 3), *mat()))]
    else:
        parts = []
        for _ in range(int(rng.integers(2, 5))):
            rad = rng.uniform(0.1, 0.2)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            off = direction * rng.uniform(0.0, 0.45 - rad)
            parts.append(Part("ellipsoid", off, np.full(3, rad), *mat()))
    return TargetSpec(kind, loc, _random_rotation(rng), parts)


def canonical_order(cloud: np.ndarray) -> np.ndarray:
    """Sort points by x, then y, then z so that slot m has a consistent meaning across targets."""
    cloud = np.asarray(cloud)
    idx = np.lexsort((cloud[:, 2], cloud[:, 1], cloud[:, 0]))
    return cloud[idx]


def generate_target(spec: TargetSpec, M: int, rng: np.random.Generator, grid: VoxelGrid | None = None):
    """Sample ``M`` points uniformly inside the target and rasterize its materials.

    Returns ``(cloud, materials)``: cloud is ``(M, 5)`` in world coordinates with
    physical materials (sigma in S/m), canonically ordered; materials is the
    :class:`MaterialGrid` on ``grid`` (centred at the target if ``grid`` is None-sized default).
    """
    if M <= 0:
        raise ValueError("M must be positive")
    if not spec.parts:
        raise ValueError("degenerate shape: no parts")
    reach = max(p.bounding_radius() for p in spec.parts)
    pts = []
    n = 0
    for _ in range(1000):
        cand = rng.uniform(-reach, reach, size=(max(4 * M, 256), 3))
        eps, sig, inside = spec.material_at(cand)
        pts.append(np.column_stack([cand, eps, sig])[inside])
        n += int(inside.sum())
        if n >= M:
            break
    if n < M:
        raise ValueError("degenerate shape: could not sample interior points")
    local = np.concatenate(pts)[:M]
    cloud = np.column_stack([spec.to_world(local[:, :3]), local[:, 3:]])
    cloud = canonical_order(cloud)

    mat = None
    if grid is not None:
        centers = grid.centers().reshape(-1, 3)
        eps, sig, _ = spec.material_at(spec.to_local(centers))
        mat = MaterialGrid(eps.reshape(grid.shape), sig.reshape(grid.shape))
    return cloud, mat


def voxelize(cloud: np.ndarray, grid: VoxelGrid) -> MaterialGrid:
    """Average the materials of the points falling in each voxel; empty voxels are background."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 5)
    if len(cloud) and not np.all(grid.contains(cloud[:, :3])):
        raise ValueError("cloud extends outside the voxel grid")
    shape = grid.shape
    if not len(cloud):
        return MaterialGrid.background(shape)
    ijk = np.floor((cloud[:, :3] - grid.lower) / grid.spacing).astype(int)
    ijk = np.minimum(ijk, np.asarray(shape) - 1)
    flat = np.ravel_multi_index(ijk.T, shape)
    nv = grid.n_voxels
    count = np.bincount(flat, minlength=nv)
    hit = count > 0
    # average deviations from one reference point per voxel so uniform materials come back exactly
    ref = np.zeros((nv, 2))
    ref[flat[::-1]] = cloud[::-1, 3:]
    dev = cloud[:, 3:] - ref[flat]
    eps = np.ones(nv)
    sig = np.zeros(nv)
    eps[hit] = ref[hit, 0] + np.bincount(flat, weights=dev[:, 0], minlength=nv)[hit] / count[hit]
    sig[hit] = ref[hit, 1] + np.bincount(flat, weights=dev[:, 1], minlength=nv)[hit] / count[hit]
    return MaterialGrid(np.maximum(eps, 1.0).reshape(shape), np.maximum(sig, 0.0).reshape(shape))


# --------------------------------------------------------------------------- metrics


def _directed_mins(X: np.ndarray, Y: np.ndarray, w: np.ndarray) -> np.ndarray:
    # dimension-ordered accumulation: matches a scalar double loop exactly
    d2 = np.zeros((len(X), len(Y)))
    for d in range(X.shape[1]):
        diff = X[:, None, d] - Y[None, :, d]
        d2 += w[d] * (diff * diff)
    return d2.min(axis=1)


def chamfer_sq(X: np.ndarray, Y: np.ndarray, weights=None) -> float:
    """Sum of both directed mean nearest-neighbour squared distances."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.size == 0 or Y.size == 0:
        raise ValueError("chamfer distance of an empty cloud")
    w = np.ones(X.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    a = _directed_mins(X, Y, w)
    b = _directed_mins(Y, X, w)
    return math.fsum(a) / len(X) + math.fsum(b) / len(Y)


def mcd(items, weights=None) -> float:
    """Mean Chamfer distance in dB over a test set.

    ``items`` holds either precomputed ``chamfer_sq`` values or ``(truth, estimate)`` pairs.
    """
    vals = [chamfer_sq(*it, weights=weights) if isinstance(it, tuple) else float(it) for it in items]
    if not vals:
        raise ValueError("empty test set")
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite Chamfer value")
    return to_db(math.fsum(vals) / len(vals))
