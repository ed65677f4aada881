"""Flux definitions, Jacobians, and wave speeds for scalar transport and 2D Euler.

Euler state layout is conservative: u = (rho, m_x, m_y, rho*E) with the ideal
gas law p = (gamma - 1) * rho * (E - |v|^2 / 2).  All functions broadcast over
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class InadmissibleStateError(ValueError):
    pass


@dataclass
class ScalarTransport:
    """Linear transport by a (possibly space-dependent) divergence-free field."""

    velocity: Callable
    m: int = 1

    def velocity_at(self, x):
        v = self.velocity(np.asarray(x, dtype=float))
        return np.asarray(v, dtype=float)


@dataclass
class EulerGas:
    gamma: float = 1.4
    m: int = 4


@dataclass
class RoeState:
    v: np.ndarray      # (..., 2)
    a: np.ndarray
    H: np.ndarray
    rho: np.ndarray


def euler_primitives(model: EulerGas, u):
    u = np.asarray(u, dtype=float)
    rho = u[..., 0]
    if np.any(rho <= 0):
        raise InadmissibleStateError("non-positive density")
    v = u[..., 1:3] / rho[..., None]
    E = u[..., 3] / rho
    p = (model.gamma - 1.0) * rho * (E - 0.5 * np.sum(v * v, axis=-1))
    if np.any(p <= 0):
        raise InadmissibleStateError("non-positive pressure")
    H = E + p / rho
    a = np.sqrt(model.gamma * p / rho)
    return rho, v, p, H, a


def flux(model, u, x=None):
    """Physical flux, shape (..., m, d)."""
    if isinstance(model, ScalarTransport):
        u = np.asarray(u, dtype=float)
        v = model.velocity_at(x if x is not None else np.zeros(u.shape + (2,)))
        return (u[..., None] * v)[..., None, :]
    rho, v, p, H, _ = euler_primitives(model, u)
    u = np.asarray(u, dtype=float)
    m = u[..., 1:3]
    out = np.zeros(u.shape[:-1] + (4, 2))
    out[..., 0, :] = m
    out[..., 1, :] = m[..., 0:1] * v
    out[..., 2, :] = m[..., 1:2] * v
    out[..., 1, 0] += p
    out[..., 2, 1] += p
    out[..., 3, :] = v * (u[..., 3] + p)[..., None]
    return out


def euler_jacobian_vH(gamma: float, v, H, n):
    """Flux Jacobian contracted with direction n, written in (v, H) variables.

    Valid for a physical state or a Roe-averaged pair; broadcasts to
    (..., 4, 4).
    """
    v = np.asarray(v, dtype=float)
    H = np.asarray(H, dtype=float)
    n = np.asarray(n, dtype=float)
    vx, vy = v[..., 0], v[..., 1]
    nx, ny = n[..., 0], n[..., 1]
    vn = vx * nx + vy * ny
    g1 = gamma - 1.0
    phi = 0.5 * g1 * (vx * vx + vy * vy)
    A = np.zeros(np.broadcast(vx, nx).shape + (4, 4))
    A[..., 0, 1] = nx
    A[..., 0, 2] = ny
    A[..., 1, 0] = phi * nx - vx * vn
    A[..., 1, 1] = vn - (gamma - 2.0) * vx * nx
    A[..., 1, 2] = vx * ny - g1 * vy * nx
    A[..., 1, 3] = g1 * nx
    A[..., 2, 0] = phi * ny - vy * vn
    A[..., 2, 1] = vy * nx - g1 * vx * ny
    A[..., 2, 2] = vn - (gamma - 2.0) * vy * ny
    A[..., 2, 3] = g1 * ny
    A[..., 3, 0] = (phi - H) * vn
    A[..., 3, 1] = H * nx - g1 * vx * vn
    A[..., 3, 2] = H * ny - g1 * vy * vn
    A[..., 3, 3] = gamma * vn
    return A


def euler_jacobian_dir_derivative(gamma, v, H, dv_du, dH_du, c, w):
    """d/du of [f'(u).c] w, via the (v, H) parametrization.

    dv_du: (..., 2, 4) and dH_du: (..., 4) are the primitive sensitivities at
    the state; w is the fixed right-hand vector.  Vanishes when w equals the
    state itself (degree-one homogeneity).  Broadcasts to (..., 4, 4).
    """
    v = np.asarray(v, dtype=float)
    c = np.asarray(c, dtype=float)
    w = np.asarray(w, dtype=float)
    vx, vy = v[..., 0], v[..., 1]
    nx, ny = c[..., 0], c[..., 1]
    vn = vx * nx + vy * ny
    g1 = gamma - 1.0
    shape = np.broadcast(vx, nx).shape
    dA = {}
    for s in ("vx", "vy", "H"):
        dA[s] = np.zeros(shape + (4, 4))
    Ax = dA["vx"]
    Ax[..., 1, 0] = g1 * vx * nx - vn - vx * nx
    Ax[..., 1, 1] = (3.0 - gamma) * nx
    Ax[..., 1, 2] = ny
    Ax[..., 2, 0] = g1 * vx * ny - vy * nx
    Ax[..., 2, 1] = -g1 * ny
    Ax[..., 2, 2] = nx
    Ax[..., 3, 0] = g1 * vx * vn + (0.5 * g1 * (vx**2 + vy**2) - H) * nx
    Ax[..., 3, 1] = -g1 * (vn + vx * nx)
    Ax[..., 3, 2] = -g1 * vy * nx
    Ax[..., 3, 3] = gamma * nx
    Ay = dA["vy"]
    Ay[..., 1, 0] = g1 * vy * nx - vx * ny
    Ay[..., 1, 1] = ny
    Ay[..., 1, 2] = -g1 * nx
    Ay[..., 2, 0] = g1 * vy * ny - vn - vy * ny
    Ay[..., 2, 1] = nx
    Ay[..., 2, 2] = (3.0 - gamma) * ny
    Ay[..., 3, 0] = g1 * vy * vn + (0.5 * g1 * (vx**2 + vy**2) - H) * ny
    Ay[..., 3, 1] = -g1 * vx * ny
    Ay[..., 3, 2] = -g1 * (vn + vy * ny)
    Ay[..., 3, 3] = gamma * ny
    AH = dA["H"]
    AH[..., 3, 0] = -vn
    AH[..., 3, 1] = nx
    AH[..., 3, 2] = ny
    out = np.zeros(shape + (4, 4))
    mats = (Ax, Ay, AH)
    sens = (dv_du[..., 0, :], dv_du[..., 1, :], dH_du)
    for Ms, ds in zip(mats, sens):
        Mw = np.einsum("...bg,...g->...b", Ms, w)
        out += Mw[..., :, None] * ds[..., None, :]
    return out


def euler_primitive_sensitivities(gamma, u):
    """(v, H) and their derivatives w.r.t. the conservative state."""
    u = np.asarray(u, dtype=float)
    rho = u[..., 0]
    v = u[..., 1:3] / rho[..., None]
    shape = rho.shape
    dv = np.zeros(shape + (2, 4))
    dv[..., 0, 0] = -v[..., 0] / rho
    dv[..., 1, 0] = -v[..., 1] / rho
    dv[..., 0, 1] = 1.0 / rho
    dv[..., 1, 2] = 1.0 / rho
    m2 = u[..., 1] ** 2 + u[..., 2] ** 2
    H = gamma * u[..., 3] / rho - (gamma - 1.0) * m2 / (2.0 * rho**2)
    dH = np.zeros(shape + (4,))
    dH[..., 0] = -gamma * u[..., 3] / rho**2 + (gamma - 1.0) * m2 / rho**3
    dH[..., 1] = -(gamma - 1.0) * u[..., 1] / rho**2
    dH[..., 2] = -(gamma - 1.0) * u[..., 2] / rho**2
    dH[..., 3] = gamma / rho
    return v, H, dv, dH


def jacobian_dot(model, u, n, x=None):
    """f'(u) . n as an (..., m, m) matrix."""
    if isinstance(model, ScalarTransport):
        v = model.velocity_at(x if x is not None else np.zeros(np.shape(u) + (2,)))
        return np.sum(v * np.asarray(n, dtype=float), axis=-1)[..., None, None]
    _, v, _, H, _ = euler_primitives(model, u)
    return euler_jacobian_vH(model.gamma, v, H, n)


def roe_average(u_i, u_j, gamma: float) -> RoeState:
    """Density-square-root weighted pair average (v, H, rho) and its sound speed."""
    model = EulerGas(gamma)
    rho_i, v_i, _, H_i, _ = euler_primitives(model, u_i)
    rho_j, v_j, _, H_j, _ = euler_primitives(model, u_j)
    si, sj = np.sqrt(rho_i), np.sqrt(rho_j)
    w = 1.0 / (si + sj)
    v = (si[..., None] * v_i + sj[..., None] * v_j) * w[..., None]
    H = (si * H_i + sj * H_j) * w
    rad = (gamma - 1.0) * (H - 0.5 * np.sum(v * v, axis=-1))
    if np.any(rad < 0):
        raise InadmissibleStateError("negative sound-speed radicand in pair average")
    return RoeState(v=v, a=np.sqrt(rad), H=H, rho=si * sj)


def char_speeds(v, a, n):
    """Closed-form eigenvalues of the direction-contracted Jacobian.

    Ordering matches the conserved components: the first d entries are v.n
    (advective), then v.n - a|n| and v.n + a|n| (acoustic).
    """
    n = np.asarray(n, dtype=float)
    vn = np.sum(np.asarray(v) * n, axis=-1)
    nn = np.linalg.norm(n, axis=-1)
    return np.stack([vn, vn, vn - a * nn, vn + a * nn], axis=-1)


def max_wave_speed(model, u_i, u_j, c, x_mid=None):
    """Spectral radius of the pair-averaged Jacobian contracted with c."""
    c = np.asarray(c, dtype=float)
    if isinstance(model, ScalarTransport):
        if x_mid is None:
            raise ValueError("scalar wave speed needs the pair midpoint")
        v = model.velocity_at(x_mid)
        return np.abs(np.sum(v * c, axis=-1))
    roe = roe_average(u_i, u_j, model.gamma)
    return np.abs(np.sum(roe.v * c, axis=-1)) + roe.a * np.linalg.norm(c, axis=-1)


def euler_state(rho, v, p=None, E=None, gamma=1.4):
    """Convenience constructor for conservative states from primitives."""
    v = np.asarray(v, dtype=float)
    if E is None:
        if p is None:
            raise ValueError("need p or E")
        E = p / ((gamma - 1.0) * rho) + 0.5 * np.sum(v * v, axis=-1)
    return np.array([rho, rho * v[..., 0], rho * v[..., 1], rho * E])


def random_admissible_states(rng, count, gamma=1.4,
                             rho_range=(0.1, 5.0), p_range=(0.1, 5.0), vmax=4.0):
    rho = rng.uniform(*rho_range, size=count)
    p = rng.uniform(*p_range, size=count)
    v = rng.uniform(-vmax, vmax, size=(count, 2))
    E = p / ((gamma - 1.0) * rho) + 0.5 * np.sum(v * v, axis=-1)
    return np.stack([rho, rho * v[:, 0], rho * v[:, 1], rho * E], axis=-1)
