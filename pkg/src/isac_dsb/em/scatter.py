"""Incident and scattered fields, and end-to-end echo channel synthesis."""

from __future__ import annotations

import numpy as np

from .geometry import AntennaArray, FrequencyPlan, MaterialGrid, VoxelGrid, contrast_from_materials
from .green import dyadic_green
from .solver import SolverNotConverged, solve_total_field


def incident_field(tx: AntennaArray, w: np.ndarray, grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """Field radiated into the grid by dipoles driven with weights ``w`` (unit transmit constant).

    ``w`` is ``(N_t,)`` or ``(batch, N_t)``; the result is ``(..., nx, ny, nz, 3)``.
    """
    w = np.asarray(w, dtype=complex)
    if w.shape[-1] != len(tx):
        raise ValueError("weight vector length differs from number of transmit antennas")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    pts = grid.centers()
    # (nx, ny, nz, N_t, 3): field of each element at each voxel
    per_el = dyadic_green(pts[..., None, :], tx.positions, k_wav) @ tx.polarization
    return np.einsum("...j,xyzjc->...xyzc", w, per_el)


def scattered_field_at(
    rx_points: np.ndarray,
    chi: np.ndarray,
    E_tot: np.ndarray,
    grid: VoxelGrid,
    k_wav: float,
) -> np.ndarray:
    """Scattered field ``k^2 sum G(r_n, r') chi E dV`` at points outside the grid.

    ``rx_points`` is ``(3,)`` or ``(N, 3)``; ``E_tot`` may carry leading batch axes.
    Returns ``(..., N, 3)`` (or ``(..., 3)`` for a single point).
    """
    pts = np.asarray(rx_points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if np.any(grid.contains(pts)):
        raise ValueError("receive point lies inside the scattering region")
    chi = np.asarray(chi)
    E_tot = np.asarray(E_tot)
    J = (chi[..., None] * E_tot).reshape(E_tot.shape[:-4] + (-1, 3))
    vox = grid.centers().reshape(-1, 3)
    G = dyadic_green(pts[:, None, :], vox[None, :, :], k_wav)  # (N, nv, 3, 3)
    out = k_wav**2 * grid.dv * np.einsum("nvab,...vb->...na", G, J)
    return out[..., 0, :] if single else out


def synthesize_channel(
    mat: MaterialGrid,
    grid: VoxelGrid,
    tx: AntennaArray,
    rx: AntennaArray,
    plan: FrequencyPlan,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> np.ndarray:
    """Noiseless echo channel ``K x N_r x N_t``; column j is the response to ``w = e_j``."""
    if np.any(grid.contains(tx.positions)) or np.any(grid.contains(rx.positions)):
        raise ValueError("antenna arrays must lie outside the scattering region")
    n_t = len(tx)
    H = np.zeros((plan.K, len(rx), n_t), dtype=complex)
    eye = np.eye(n_t)
    for k in range(plan.K):
        chi = contrast_from_materials(mat, plan, k)
        if not np.any(chi):
            continue
        kw = plan.wavenumbers[k]
        E_i = incident_field(tx, eye, grid, kw)
        try:
            E_t = solve_total_field(chi, E_i, grid, kw, tol=tol, max_iter=max_iter)
        except SolverNotConverged as exc:
            tags = ", ".join(f"({k}, {j})" for j in exc.columns)
            raise SolverNotConverged(
                exc.residual, exc.iterations, f"at (subcarrier, column) {tags}", exc.columns
            ) from exc
        E_s = scattered_field_at(rx.positions, chi, E_t, grid, kw)  # (N_t, N_r, 3)
        H[k] = rx.gain * (E_s @ rx.polarization).T
    return H
