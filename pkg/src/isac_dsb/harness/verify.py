"""Quick oracle suite behind ``verify``: each check yields (name, value, threshold, pass)."""

from __future__ import annotations

import math

import numpy as np
import torch

from ..channel_sim import ls_estimate, make_pilots, nmse_ratio
from ..em import (
    FrequencyPlan,
    VoxelGrid,
    apply_ls_operator,
    assemble_dense,
    dyadic_green,
    incident_field,
    mills_cross,
    solve_total_field,
    solve_total_field_dense,
)
from ..nnet import ConcatSquashLinear, finite_difference_check
from ..pointcloud import chamfer_sq


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _random_chi(rng, shape, amax=2.0):
    mag = rng.uniform(0, amax, shape)
    return mag * np.exp(1j * rng.uniform(-0.5, 0.5, shape))


def check_solver(seed: int, n: int = 4, trials: int = 3) -> float:
    rng = np.random.default_rng([seed, 1])
    plan = FrequencyPlan(3e8, 1, 0.0)
    k = plan.wavenumbers[0]
    tx, _ = mills_cross(2, 2, 1.0)
    grid = VoxelGrid.cube((3.0, 0.0, 0.0), 0.5, n)
    E_i = incident_field(tx, np.eye(2), grid, k)
    worst = 0.0
    for _ in range(trials):
        chi = _random_chi(rng, grid.shape)
        worst = max(worst, _rel(solve_total_field(chi, E_i, grid, k), solve_total_field_dense(chi, E_i, grid, k)))
    return worst


def check_operator(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    grid = VoxelGrid.cube((0.0, 0.0, 0.0), 0.5, 4)
    k = 2 * math.pi
    chi = _random_chi(rng, grid.shape)
    E = rng.normal(size=grid.shape + (3,)) + 1j * rng.normal(size=grid.shape + (3,))
    dense = (assemble_dense(chi, grid, k) @ E.reshape(-1)).reshape(E.shape)
    return _rel(apply_ls_operator(chi, E, grid, k), dense)


def check_reciprocity(seed: int, pairs: int = 200) -> float:
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(pairs):
        r, rp = rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)
        G = dyadic_green(r, rp, 2 * math.pi)
        worst = max(worst, float(np.linalg.norm(G - dyadic_green(rp, r, 2 * math.pi).T) / np.linalg.norm(G)))
    return worst


def check_ls(seed: int) -> float:
    rng = np.random.default_rng([seed, 4])
    H = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    W = make_pilots("unitary-comb", 8, 32).W
    return nmse_ratio(H, ls_estimate(H @ W, W))


def check_chamfer(seed: int) -> float:
    rng = np.random.default_rng([seed, 5])
    X, Y = rng.normal(size=(16, 5)), rng.normal(size=(12, 5))
    naive_xy = math.fsum(min(sum((x[d] - y[d]) ** 2 for d in range(5)) for y in Y) for x in X) / len(X)
    naive_yx = math.fsum(min(sum((x[d] - y[d]) ** 2 for d in range(5)) for x in X) for y in Y) / len(Y)
    return abs(chamfer_sq(X, Y) - (naive_xy + naive_yx))


def check_gradients(seed: int) -> float:
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(seed)
        layer = ConcatSquashLinear(4, 3, 2)
        x, c = torch.randn(5, 4), torch.randn(5, 2)
        return finite_difference_check(layer, lambda m: m(x, c).pow(2).sum(), generator=np.random.default_rng(seed))
    finally:
        torch.set_default_dtype(prev)


CHECKS = [
    ("solver_vs_dense_rel_l2", check_solver, 1e-6),
    ("fft_operator_vs_dense_rel", check_operator, 1e-10),
    ("green_reciprocity_rel", check_reciprocity, 1e-12),
    ("ls_noiseless_nmse_ratio", check_ls, 1e-24),
    ("chamfer_vs_bruteforce_abs", check_chamfer, 0.0),
    ("concatsquash_gradcheck_rel", check_gradients, 1e-4),
]


def run_verify(seed: int = 0) -> str:
    """CSV text ``check,value,threshold,pass``; values only, no timings, so reruns are byte-identical."""
    lines = ["check,value,threshold,pass"]
    for name, fn, thr in CHECKS:
        v = fn(seed)
        lines.append(f"{name},{v:.6e},{thr:.1e},{int(v <= thr)}")
    return "\n".join(lines) + "\n"
