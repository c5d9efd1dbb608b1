"""Pseudo-spectral vorticity solver for 2-D incompressible Navier-Stokes.

The periodic square is resolved on a ``G x G`` grid. Vorticity is advanced
with the advection term explicit and viscosity by Crank-Nicolson:

    zeta_hat_new = (dt P_hat + (1 - nu dt |k|^2 / 2) zeta_hat)
                   / (1 + nu dt |k|^2 / 2)

where ``P = -(u d_x zeta + v d_y zeta)`` and the velocity comes from the
streamfunction, ``u = -d_y psi``, ``v = d_x psi``, ``lap psi = zeta``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fem import PdeSpec, Trajectory
from .mesh import Graph

TWO_PI = 2.0 * np.pi


@lru_cache(maxsize=16)
def _wavenumbers(g: int, side: float):
    k = np.fft.fftfreq(g, d=1.0 / g) * (TWO_PI / side)
    ky, kx = np.meshgrid(k, k, indexing="ij")  # arrays indexed [y, x]
    k2 = kx ** 2 + ky ** 2
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    idx = np.abs(np.fft.fftfreq(g, d=1.0 / g))
    cutoff = int(np.floor((2.0 / 3.0) * (g // 2)))
    keep = (np.maximum(idx[:, None], idx[None, :]) <= cutoff)
    return kx, ky, k2, inv_k2, keep


def grid_coordinates(g: int, side: float = TWO_PI):
    """Grid point coordinates ``(x, y)`` as ``[y, x]``-indexed arrays."""
    s = side * np.arange(g) / g
    y, x = np.meshgrid(s, s, indexing="ij")
    return x, y


@dataclass
class SpectralState:
    zeta_hat: np.ndarray
    nu: float = 3e-4
    rho: float = 1.0
    side: float = TWO_PI

    @property
    def grid_size(self) -> int:
        return self.zeta_hat.shape[0]

    @classmethod
    def from_field(cls, zeta: np.ndarray, nu: float = 3e-4, side: float = TWO_PI):
        return cls(np.fft.fft2(zeta), nu, 1.0, side)

    def field(self) -> np.ndarray:
        return np.fft.ifft2(self.zeta_hat).real


def dealias_mask(g: int, side: float = TWO_PI) -> np.ndarray:
    return _wavenumbers(g, side)[4]


def random_filtered_ic(grid_size: int, seed: int, side: float = TWO_PI) -> np.ndarray:
    """U[0, 5] grid noise with the top third of wavenumbers removed."""
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.0, 5.0, size=(grid_size, grid_size))
    hat = np.fft.fft2(raw) * dealias_mask(grid_size, side)
    return np.fft.ifft2(hat).real


def velocity_from_vorticity(zeta_hat: np.ndarray, side: float = TWO_PI):
    """Real ``(u, v)`` grids from vorticity coefficients (mean mode dropped)."""
    kx, ky, _, inv_k2, _ = _wavenumbers(zeta_hat.shape[0], side)
    psi_hat = -zeta_hat * inv_k2
    u = np.fft.ifft2(-1j * ky * psi_hat).real
    v = np.fft.ifft2(1j * kx * psi_hat).real
    return u, v


def nonlinear_term(zeta_hat: np.ndarray, side: float = TWO_PI) -> np.ndarray:
    """Fourier coefficients of ``-(u d_x zeta + v d_y zeta)``, 2/3-rule dealiased."""
    kx, ky, _, _, keep = _wavenumbers(zeta_hat.shape[0], side)
    u, v = velocity_from_vorticity(zeta_hat, side)
    zx = np.fft.ifft2(1j * kx * zeta_hat).real
    zy = np.fft.ifft2(1j * ky * zeta_hat).real
    return np.fft.fft2(-(u * zx + v * zy)) * keep


def step_cn(zeta_hat: np.ndarray, dt: float, nu: float, side: float = TWO_PI) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    k2 = _wavenumbers(zeta_hat.shape[0], side)[2]
    half = 0.5 * nu * dt * k2
    return (dt * nonlinear_term(zeta_hat, side) + (1.0 - half) * zeta_hat) / (1.0 + half)


def sample_to_graph(field: np.ndarray, positions: np.ndarray, side: float = TWO_PI) -> np.ndarray:
    """Periodic bilinear interpolation of a ``[y, x]`` grid onto points."""
    g = field.shape[0]
    h = side / g
    fx = np.asarray(positions[:, 0]) / h
    fy = np.asarray(positions[:, 1]) / h
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    tx, ty = fx - i0, fy - j0
    i0 %= g
    j0 %= g
    i1, j1 = (i0 + 1) % g, (j0 + 1) % g
    return ((1 - tx) * (1 - ty) * field[j0, i0] + tx * (1 - ty) * field[j0, i1]
            + (1 - tx) * ty * field[j1, i0] + tx * ty * field[j1, i1])


def taylor_green(g: int, side: float = TWO_PI) -> np.ndarray:
    x, y = grid_coordinates(g, side)
    return 2.0 * np.sin(x) * np.sin(y)


def simulate_ns(grid_size: int, nu: float, t_end: float, dt: float, record_every: int,
                seed: int, graph: Graph, ic: np.ndarray | None = None,
                side: float = TWO_PI) -> Trajectory:
    """Vorticity trajectory sampled on graph nodes.

    Records ``floor(t_end / (dt * record_every)) + 1`` frames, the first
    being the initial condition.
    """
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    zeta0 = random_filtered_ic(grid_size, seed, side) if ic is None else np.asarray(ic, float)
    n_frames = int(np.floor(t_end / (dt * record_every) + 1e-9)) + 1
    zh = np.fft.fft2(zeta0)
    frames = [sample_to_graph(zeta0, graph.positions, side)]
    for _ in range(n_frames - 1):
        for _ in range(record_every):
            zh = step_cn(zh, dt, nu, side)
        frames.append(sample_to_graph(np.fft.ifft2(zh).real, graph.positions, side))
    pde = PdeSpec("navier_stokes", 0.0, nu)
    label = "random_filtered" if ic is None else "custom"
    return Trajectory(graph, np.array(frames), dt * record_every, dt, pde, label, seed)
