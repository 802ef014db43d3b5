"""Desk dataset: procedural targets, their materials and ground-truth echo channels."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..em import C0, FrequencyPlan, SolverNotConverged, VoxelGrid, mills_cross, synthesize_channel
from ..pointcloud import fit_normalization, generate_target, sample_target_spec
from .config import canonical_json
from .tensorio import atomic_write_bytes, load_tensor, save_tensor

log = logging.getLogger(__name__)

# stream tags keep the per-purpose RNG streams disjoint
STREAM_TARGET = 1
STREAM_SPLIT = 2


@dataclass
class Physics:
    plan: FrequencyPlan
    tx: object
    rx: object
    side: float
    n: int
    tol: float
    max_iter: int

    def grid_at(self, location) -> VoxelGrid:
        return VoxelGrid.cube(tuple(location), self.side, self.n)

    def channel(self, mat, location) -> np.ndarray:
        return synthesize_channel(mat, self.grid_at(location), self.tx, self.rx, self.plan, self.tol, self.max_iter)


def physics_from_config(cfg: dict) -> Physics:
    p = cfg["physics"]
    plan = FrequencyPlan(float(p["f_c"]), int(p["K"]), float(p["delta_f"]))
    tx, rx = mills_cross(int(p["n_t"]), int(p["n_r"]), C0 / plan.f_c)
    return Physics(plan, tx, rx, float(p["grid_side"]), int(p["grid_n"]), float(p["solver_tol"]), int(p["solver_max_iter"]))


def build_target(cfg: dict, seed: int, index: int, location=None):
    """Target ``index`` of the dataset; ``location`` re-places the same object elsewhere."""
    d = cfg["dataset"]
    phys = physics_from_config(cfg)
    rng = np.random.default_rng([int(seed), STREAM_TARGET, int(index)])
    spec = sample_target_spec(
        rng,
        eps_range=tuple(d["eps_range"]),
        sigma_range=tuple(d["sigma_range"]),
        r_min=d["r_min"],
        r_max=d["r_max"],
        max_angle_deg=d["max_angle_deg"],
    )
    if location is not None:
        spec.location = np.asarray(location, dtype=float)
    cloud, mat = generate_target(spec, int(d["M"]), rng, phys.grid_at(spec.location))
    return spec, cloud, mat


def split_indices(n_ok: list[int], fractions, seed: int) -> dict[str, list[int]]:
    rng = np.random.default_rng([int(seed), STREAM_SPLIT])
    order = [n_ok[i] for i in rng.permutation(len(n_ok))]
    n_train = int(round(fractions[0] * len(order)))
    n_test = int(round(fractions[1] * len(order)))
    return {
        "train": sorted(order[:n_train]),
        "test": sorted(order[n_train : n_train + n_test]),
        "val": sorted(order[n_train + n_test :]),
    }


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def generate_dataset(cfg: dict, seed: int, out_dir: str | Path, progress=None) -> dict:
    """Synthesize every target, write tensors plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    d, p = cfg["dataset"], cfg["physics"]
    n, M = int(d["count"]), int(d["M"])
    phys = physics_from_config(cfg)
    g = int(p["grid_n"])
    clouds = np.zeros((n, M, 5))
    locs = np.zeros((n, 3))
    H = np.zeros((n, phys.plan.K, int(p["n_r"]), int(p["n_t"])), dtype=complex)
    eps = np.ones((n, g, g, g))
    sig = np.zeros((n, g, g, g))
    rows = []
    t0 = time.monotonic()
    for i in range(n):
        spec, cloud, mat = build_target(cfg, seed, i)
        row = {"index": i, "kind": spec.kind, "location": [float(v) for v in spec.location]}
        try:
            H[i] = phys.channel(mat, spec.location)
            if not np.any(H[i]):
                # per-sample NMSE is undefined on a null channel
                raise ValueError("zero channel: the target has no support on the solver grid")
            row["status"] = "ok"
        except (SolverNotConverged, np.linalg.LinAlgError, ValueError) as exc:
            row["status"] = "failed"
            row["error"] = str(exc)
            log.warning("target %d failed: %s", i, exc)
        clouds[i], locs[i], eps[i], sig[i] = cloud, spec.location, mat.eps_r, mat.sigma
        row["sha256"] = _digest(cloud, H[i])
        rows.append(row)
        if progress is not None:
            progress(i + 1, n, time.monotonic() - t0)
    ok = [r["index"] for r in rows if r["status"] == "ok"]
    if not ok:
        raise RuntimeError("every target failed to synthesize")
    split = split_indices(ok, d["split"], seed)
    norm = fit_normalization(clouds[split["train"] or ok], locs[split["train"] or ok])
    manifest = {
        "format": 1,
        "seed": int(seed),
        "count": n,
        "partial": len(ok) < n,
        "split": split,
        "normalization": norm.to_dict(),
        "config": {k: cfg[k] for k in ("physics", "dataset")},
        "targets": rows,
    }
    save_tensor(out_dir / "clouds.emt", clouds)
    save_tensor(out_dir / "locations.emt", locs)
    save_tensor(out_dir / "channels.emt", H)
    save_tensor(out_dir / "eps_r.emt", eps)
    save_tensor(out_dir / "sigma.emt", sig)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


def save_manifest(path, manifest: dict) -> None:
    atomic_write_bytes(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


@dataclass
class Dataset:
    clouds: np.ndarray
    locations: np.ndarray
    channels: np.ndarray
    manifest: dict

    def subset(self, name: str):
        idx = self.manifest["split"][name]
        return self.clouds[idx], self.locations[idx], self.channels[idx]


def load_dataset(out_dir) -> Dataset:
    out_dir = Path(out_dir)
    return Dataset(
        load_tensor(out_dir / "clouds.emt", np.float64),
        load_tensor(out_dir / "locations.emt", np.float64),
        load_tensor(out_dir / "channels.emt", np.complex128),
        load_manifest(out_dir / "manifest.json"),
    )


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(canonical_json(manifest["targets"]).encode()).hexdigest()
