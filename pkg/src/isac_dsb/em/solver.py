"""Discretized Lippmann-Schwinger operator and its solvers.

Pulse basis, point matching at voxel centres.  The self-voxel is replaced by a
volume-equivalent sphere so that the FFT operator and the dense oracle share
one discretization exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
import scipy.linalg

from .geometry import VoxelGrid
from .green import dyadic_green, dyadic_green_from_offsets, self_term

MAX_DENSE_VOXELS = 8**3


class SolverNotConverged(RuntimeError):
    def __init__(self, residual: float, iterations: int, context: str = "", columns=()):
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.context = context
        self.columns = tuple(int(c) for c in columns)
        msg = f"BiCGStab stopped after {iterations} iterations at relative residual {residual:.3e}"
        super().__init__(f"{msg} {context}".strip())


@dataclass
class SolveInfo:
    iterations: int
    residual: np.ndarray  # per right-hand side


def _kernel_spectrum(grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """FFT of ``k^2 dV G`` over the doubled grid, shape ``(3, 3, 2nx, 2ny, 2nz)``."""
    # translation invariant: the grid centre does not enter
    return _kernel_spectrum_at(VoxelGrid((0.0, 0.0, 0.0), grid.extent, grid.shape), float(k_wav))


@lru_cache(maxsize=32)
def _kernel_spectrum_at(grid: VoxelGrid, k_wav: float) -> np.ndarray:
    shape = np.asarray(grid.shape)
    padded = tuple(2 * shape)
    idx = [np.arange(p) for p in padded]
    offs = [np.where(i < n, i, i - p) for i, n, p in zip(idx, shape, padded)]
    # index n on each axis is outside the linear-convolution support; leave it zero
    valid = [np.abs(o) < n for o, n in zip(offs, shape)]
    oi = np.stack(np.meshgrid(*offs, indexing="ij"), axis=-1).astype(float)
    d = oi * grid.spacing
    mask = np.logical_and.reduce(np.meshgrid(*valid, indexing="ij"))
    origin = np.all(oi == 0, axis=-1)
    far = mask & ~origin

    kern = np.zeros(padded + (3, 3), dtype=complex)
    kern[far] = grid.dv * k_wav**2 * dyadic_green_from_offsets(d[far], k_wav)
    kern[origin] = self_term(k_wav, grid.equivalent_radius()) * np.eye(3)
    kern = np.moveaxis(kern, (-2, -1), (0, 1))
    spec = scipy.fft.fftn(kern, axes=(-3, -2, -1))
    spec.flags.writeable = False
    return spec


def _check_shapes(chi: np.ndarray, E: np.ndarray, grid: VoxelGrid):
    if chi.shape != grid.shape:
        raise ValueError(f"contrast shape {chi.shape} does not match grid {grid.shape}")
    if E.shape[-4:] != grid.shape + (3,):
        raise ValueError(f"field shape {E.shape} does not match grid {grid.shape} x 3")


def scattering_potential(chi: np.ndarray, E: np.ndarray, grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """``k^2 sum_r' G(r, r') chi(r') E(r') dV`` inside the grid, evaluated by zero-padded FFTs."""
    chi = np.asarray(chi)
    E = np.asarray(E)
    _check_shapes(chi, E, grid)
    spec = _kernel_spectrum(grid, float(k_wav))
    n = grid.shape
    padded = tuple(2 * s for s in n)
    f = np.ascontiguousarray(np.moveaxis(chi[..., None] * E, -1, -4))  # (..., 3, nx, ny, nz)
    # axis-by-axis transforms skip the all-zero padded lines
    for ax in (-1, -2, -3):
        f = scipy.fft.fft(f, n=padded[ax], axis=ax)
    f = np.einsum("abxyz,...bxyz->...axyz", spec, f)
    f = scipy.fft.ifft(f, axis=-3)[..., : n[0], :, :]
    f = scipy.fft.ifft(f, axis=-2)[..., : n[1], :]
    f = scipy.fft.ifft(f, axis=-1)[..., : n[2]]
    return np.moveaxis(f, -4, -1)


def apply_ls_operator(chi: np.ndarray, E: np.ndarray, grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """``E - k^2 sum G chi E dV``: the left-hand side of the discretized Lippmann-Schwinger equation."""
    E = np.asarray(E, dtype=complex)
    if not np.any(chi):
        _check_shapes(np.asarray(chi), E, grid)
        return E.copy()
    return E - scattering_potential(chi, E, grid, k_wav)


def assemble_dense(chi: np.ndarray, grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """Dense MoM matrix ``I - K diag(chi)`` with unknowns ordered (voxel, component).

    Built pairwise from voxel-centre coordinates, independently of the FFT path.
    """
    if grid.n_voxels > MAX_DENSE_VOXELS:
        raise ValueError(f"dense assembly limited to {MAX_DENSE_VOXELS} voxels")
    pts = grid.centers().reshape(-1, 3)
    nv = len(pts)
    ii, jj = np.meshgrid(np.arange(nv), np.arange(nv), indexing="ij")
    off = ii != jj
    blocks = np.zeros((nv, nv, 3, 3), dtype=complex)
    blocks[off] = grid.dv * k_wav**2 * dyadic_green(pts[ii[off]], pts[jj[off]], k_wav)
    blocks[~off] = self_term(k_wav, grid.equivalent_radius()) * np.eye(3)
    K = blocks.transpose(0, 2, 1, 3).reshape(3 * nv, 3 * nv)
    chi_flat = np.repeat(np.asarray(chi).reshape(-1), 3)
    return np.eye(3 * nv) - K * chi_flat[None, :]


def solve_total_field_dense(chi: np.ndarray, E_inc: np.ndarray, grid: VoxelGrid, k_wav: float) -> np.ndarray:
    """Direct LU solve of the same system; oracle for :func:`solve_total_field`."""
    E_inc = np.asarray(E_inc, dtype=complex)
    _check_shapes(np.asarray(chi), E_inc, grid)
    A = assemble_dense(chi, grid, k_wav)
    batch = E_inc.shape[:-4]
    b = E_inc.reshape(batch + (-1,))
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    if np.any(np.diag(lu) == 0):
        raise np.linalg.LinAlgError("Lippmann-Schwinger matrix is singular")
    x = scipy.linalg.lu_solve((lu, piv), b.reshape(-1, A.shape[0]).T).T
    return x.reshape(E_inc.shape)


def _dot(a, b):
    return np.einsum("bi,bi->b", a.conj(), b)


def bicgstab(matvec, b: np.ndarray, tol: float = 1e-8, max_iter: int = 500, x0=None):
    """Batched BiCGStab; ``b`` is ``(batch, n)``, initial guess zero unless ``x0`` is given.

    Each right-hand side carries its own Krylov scalars; converged columns are frozen.
    Convergence is judged on the true residual ``|A x - b| / |b|``.
    Returns ``(x, iterations, relative_residuals)``.
    """
    b = np.atleast_2d(np.asarray(b, dtype=complex))
    nb = np.linalg.norm(b, axis=1)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=complex).reshape(b.shape)
    x[nb == 0] = 0.0
    res = np.zeros(len(b))
    active = nb > 0
    if not active.any():
        return x, 0, res
    warm = x0 is not None

    def restart(mask):
        r[mask] = b[mask] - matvec(x)[mask] if (it or warm) else b[mask]
        rhat[mask] = r[mask]
        rho[mask] = alpha[mask] = omega[mask] = 1.0
        v[mask] = 0.0
        p[mask] = 0.0

    r = np.empty_like(b)
    rhat = np.empty_like(b)
    v = np.empty_like(b)
    p = np.empty_like(b)
    rho = np.ones(len(b), dtype=complex)
    alpha = np.ones(len(b), dtype=complex)
    omega = np.ones(len(b), dtype=complex)
    it = 0
    restart(np.ones(len(b), dtype=bool))
    res[active] = 1.0
    tiny = np.finfo(float).tiny

    while it < max_iter:
        it += 1
        a = active[:, None]
        rho_new = _dot(rhat, r)
        broke = active & (np.abs(rho_new) < tiny * nb**2 + tiny)
        beta = np.where(active, (rho_new / np.where(rho == 0, 1, rho)) * (alpha / np.where(omega == 0, 1, omega)), 0)
        p = np.where(a, r + beta[:, None] * (p - omega[:, None] * v), p)
        v = np.where(a, matvec(p), v)
        denom = _dot(rhat, v)
        alpha = np.where(active & (denom != 0), rho_new / np.where(denom == 0, 1, denom), 0)
        s = r - alpha[:, None] * v
        t = matvec(s)
        tt = np.real(_dot(t, t))
        omega = np.where(active & (tt > 0), _dot(t, s) / np.where(tt > 0, tt, 1), 0)
        x = x + np.where(a, alpha[:, None] * p + omega[:, None] * s, 0)
        r = np.where(a, s - omega[:, None] * t, r)
        rho = np.where(active, rho_new, rho)

        est = np.linalg.norm(r, axis=1) / np.where(nb > 0, nb, 1)
        check = active & ((est <= tol) | broke | (omega == 0))
        if check.any():
            true_r = np.linalg.norm(matvec(x) - b, axis=1) / np.where(nb > 0, nb, 1)
            done = check & (true_r <= tol)
            res = np.where(check, true_r, res)
            active = active & ~done
            again = check & ~done
            if again.any():
                restart(again)
        else:
            res = np.where(active, est, res)
        if not active.any():
            break
    if active.any():
        res[active] = np.linalg.norm(matvec(x) - b, axis=1)[active] / nb[active]
    return x, it, res


def solve_total_field(
    chi: np.ndarray,
    E_inc: np.ndarray,
    grid: VoxelGrid,
    k_wav: float,
    tol: float = 1e-8,
    max_iter: int = 500,
    full_output: bool = False,
    x0: np.ndarray | None = None,
):
    """Total field from the incident field by FFT-accelerated BiCGStab.

    ``E_inc`` may carry leading batch axes (e.g. one per transmit antenna); each
    right-hand side must reach ``|A E - E_inc| / |E_inc| <= tol``.
    ``x0`` optionally warm-starts the iteration (default: zero field).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    chi = np.asarray(chi)
    E_inc = np.asarray(E_inc, dtype=complex)
    _check_shapes(chi, E_inc, grid)
    batch = E_inc.shape[:-4]
    b = E_inc.reshape((-1, 3 * grid.n_voxels))
    if not np.any(chi):
        out = E_inc.copy()
        info = SolveInfo(0, np.zeros(len(b)))
        return (out, info) if full_output else out

    fshape = grid.shape + (3,)

    def matvec(xb):
        return apply_ls_operator(chi, xb.reshape((-1,) + fshape), grid, k_wav).reshape(xb.shape)

    if x0 is not None:
        x0 = np.asarray(x0, dtype=complex).reshape(b.shape)
    x, iters, res = bicgstab(matvec, b, tol=tol, max_iter=max_iter, x0=x0)
    if np.any(res > tol):
        bad = np.flatnonzero(res > tol)
        raise SolverNotConverged(float(res.max()), iters, columns=bad)
    out = x.reshape(batch + fshape)
    return (out, SolveInfo(iters, res)) if full_output else out
