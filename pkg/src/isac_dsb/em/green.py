"""Free-space Green's functions for the exp(jkR) convention."""

from __future__ import annotations

import numpy as np


class SingularityError(ValueError):
    """Raised when a Green's function is evaluated at coincident points."""


def _separation(r, rp):
    d = np.asarray(r, dtype=float) - np.asarray(rp, dtype=float)
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist == 0.0):
        raise SingularityError("Green's function evaluated at coincident points")
    return d, dist


def scalar_green(r, rp, k_wav: float):
    """``exp(j k R) / (4 pi R)`` with ``R = |r - rp|``; broadcasts over leading axes."""
    _, dist = _separation(r, rp)
    return np.exp(1j * k_wav * dist) / (4.0 * np.pi * dist)


def dyadic_green_from_offsets(d: np.ndarray, k_wav: float) -> np.ndarray:
    """Dyadic Green's function for displacement vectors ``d = r - rp`` (..., 3) -> (..., 3, 3)."""
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist == 0.0):
        raise SingularityError("Green's function evaluated at coincident points")
    rhat = d / dist[..., None]
    kr = k_wav * dist
    g = np.exp(1j * kr) / (4.0 * np.pi * dist)
    a = 3.0 / kr**2 - 3j / kr - 1.0
    b = 1.0 / kr**2 - 1j / kr - 1.0
    outer = rhat[..., :, None] * rhat[..., None, :]
    eye = np.eye(3)
    return (a[..., None, None] * outer - b[..., None, None] * eye) * g[..., None, None]


def dyadic_green(r, rp, k_wav: float) -> np.ndarray:
    d, _ = _separation(r, rp)
    return dyadic_green_from_offsets(d, k_wav)


def self_term(k_wav: float, radius: float) -> complex:
    """``k^2`` times the dyadic Green's integral over a sphere about its own centre (scalar x I3).

    Principal value of the ``(I + grad grad / k^2) g`` part gives 2/3 of the scalar
    integral ``((1 - jka) e^{jka} - 1) / k^2``; the delta part adds ``-1/(3 k^2)``.
    """
    ka = k_wav * radius
    scalar = ((1.0 - 1j * ka) * np.exp(1j * ka) - 1.0) / k_wav**2
    return k_wav**2 * (2.0 / 3.0) * scalar - 1.0 / 3.0
