"""Pilot transmission, receiver noise, least-squares channel estimation and NMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .units import to_db


@dataclass
class PilotMatrix:
    W: np.ndarray  # (N_t, I)
    kind: str
    power: float

    @property
    def n_t(self) -> int:
        return self.W.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.W.shape[1]


@dataclass
class NoiseSpec:
    sigma: np.ndarray  # per-subcarrier noise std
    snr_db: float


def make_pilots(kind: str, n_t: int, n_sym: int, power: float = 1.0, steering=None, steer_weight: float = 1.0) -> PilotMatrix:
    """Pilots with orthogonal rows, ``W W^H = power * I``.

    ``unitary-comb`` takes the first ``n_t`` rows of the unitary DFT of size ``n_sym``.
    ``target-steered`` adds a rank-one component along ``steering`` and restores
    orthogonality with the polar factor.
    """
    if n_sym < n_t:
        raise ValueError(f"need at least N_t={n_t} pilot symbols, got {n_sym}")
    if power <= 0:
        raise ValueError("pilot power must be positive")
    F = np.fft.fft(np.eye(n_sym)) / np.sqrt(n_sym)
    U = F[:n_t]
    if kind == "unitary-comb":
        pass
    elif kind == "target-steered":
        a = np.ones(n_t, dtype=complex) if steering is None else np.asarray(steering, dtype=complex)
        a = a / np.linalg.norm(a)
        U = U + steer_weight * np.outer(a, F[0])
        # polar factor: closest matrix with orthonormal rows
        u, _, vh = np.linalg.svd(U, full_matrices=False)
        U = u @ vh
    else:
        raise ValueError(f"unknown pilot kind {kind!r}")
    return PilotMatrix(np.sqrt(power) * U, kind, float(power))


def snr_to_sigma(H: np.ndarray, W: np.ndarray, snr_db: float, per_subcarrier: bool = False) -> NoiseSpec:
    """Noise std so that receiver SNR (averaged over antennas and symbols) equals ``snr_db``.

    ``H`` is ``(K, N_r, N_t)``. By default one common sigma uses the signal energy
    averaged over subcarriers; ``per_subcarrier`` gives each subcarrier its own.
    """
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[None]
    W = np.asarray(W)
    n_r, n_sym = H.shape[1], W.shape[-1]
    energy = np.array([np.linalg.norm(Hk @ (W[k] if W.ndim == 3 else W)) ** 2 for k, Hk in enumerate(H)])
    if not per_subcarrier:
        energy = np.full_like(energy, energy.mean())
    if np.any(energy <= 0):
        raise ValueError("zero signal energy: SNR undefined")
    if np.isinf(snr_db) and snr_db > 0:
        return NoiseSpec(np.zeros(len(H)), float(snr_db))
    sigma2 = energy / (n_r * n_sym * 10.0 ** (snr_db / 10.0))
    return NoiseSpec(np.sqrt(sigma2), float(snr_db))


def noise_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(k)])


def transmit(H_k: np.ndarray, W_k: np.ndarray, sigma: float, seed: int, k: int = 0) -> np.ndarray:
    """``Y = H W + N`` with CSCG noise of variance ``sigma**2``; the stream depends on (seed, k) only."""
    H_k = np.asarray(H_k)
    W_k = np.asarray(W_k)
    if H_k.shape[1] != W_k.shape[0]:
        raise ValueError("channel and pilot shapes do not conform")
    Y = H_k @ W_k
    rng = noise_rng(seed, k)
    shape = Y.shape
    N = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / np.sqrt(2.0))
    return Y + N


def ls_estimate(Y_k: np.ndarray, W_k: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """``Y W^H (W W^H)^{-1}``."""
    W_k = np.asarray(W_k)
    gram = W_k @ W_k.conj().T
    s = np.linalg.svd(gram, compute_uv=False)
    if s[-1] <= rcond * s[0]:
        raise np.linalg.LinAlgError("pilot Gram matrix is singular")
    rhs = np.asarray(Y_k) @ W_k.conj().T
    # X gram = rhs  <=>  gram^T X^T = rhs^T
    return scipy.linalg.solve(gram.T, rhs.T).T


def stack_channels(per_k) -> np.ndarray:
    mats = [np.asarray(h) for h in per_k]
    if not mats:
        raise ValueError("no subcarrier estimates to stack")
    if len({m.shape for m in mats}) != 1:
        raise ValueError("per-subcarrier estimates have mismatched shapes")
    return np.stack(mats, axis=0)


def unstack_channels(H: np.ndarray) -> list[np.ndarray]:
    return [h for h in np.asarray(H)]


def estimate_channel(H: np.ndarray, pilots: PilotMatrix, snr_db: float, seed: int, per_subcarrier: bool = False) -> np.ndarray:
    """Full pilot round trip for every subcarrier: transmit, add noise, LS-estimate, stack."""
    noise = snr_to_sigma(H, pilots.W, snr_db, per_subcarrier)
    est = []
    for k, Hk in enumerate(np.asarray(H)):
        Y = transmit(Hk, pilots.W, noise.sigma[k], seed, k)
        est.append(ls_estimate(Y, pilots.W))
    return stack_channels(est)


def nmse_ratio(H_ref: np.ndarray, H_test: np.ndarray) -> float:
    H_ref = np.asarray(H_ref)
    H_test = np.asarray(H_test)
    if H_ref.shape != H_test.shape:
        raise ValueError("NMSE operands differ in shape")
    ref = np.linalg.norm(H_ref) ** 2
    if ref == 0:
        raise ValueError("NMSE undefined for a zero reference channel")
    return float(np.linalg.norm(H_ref - H_test) ** 2 / ref)


def nmse(H_ref: np.ndarray, H_test: np.ndarray) -> float:
    """NMSE in dB; identical inputs return the -300 dB floor."""
    return to_db(nmse_ratio(H_ref, H_test))
