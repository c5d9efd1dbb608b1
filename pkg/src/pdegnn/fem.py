"""P1 finite elements with backward Euler for heat and advection-diffusion.

Ground-truth generator: assembles mass, stiffness and x-advection matrices
on a triangulated :class:`~pdegnn.mesh.Graph`, then steps
``(M + dt l2 K + dt l1 Ax) u_new = M u_old`` with Dirichlet nodes pinned,
zero-flux Neumann left natural and periodic x-faces identified.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Domain, Graph, merge_periodic_x, unit_square

SOLVER_RTOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class BC:
    kind: str  # "dirichlet" | "neumann" | "periodic"
    value: float = 0.0

    def __str__(self):
        return f"{self.value:g}" if self.kind == "dirichlet" else self.kind


def parse_bc(text: str) -> dict[str, BC]:
    """Parse ``top=200,left=0,right=periodic,...``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValueError(f"bad boundary condition {part!r}; expected segment=value")
        name, val = (s.strip() for s in part.split("=", 1))
        if val in ("periodic", "neumann"):
            out[name] = BC(val)
        else:
            out[name] = BC("dirichlet", float(val))
    return out


def format_bc(bc: dict[str, BC]) -> str:
    return ",".join(f"{k}={v}" for k, v in bc.items())


@dataclass
class PdeSpec:
    kind: str = "heat"  # "heat" | "advection_diffusion" | "navier_stokes"
    lambda1: float = 0.0
    lambda2: float = 1.0
    bc: dict[str, BC] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "heat":
            self.lambda1, self.lambda2 = 0.0, 1.0
        if self.lambda2 <= 0:
            raise ValueError("lambda2 (diffusivity) must be positive")

    @property
    def n_params(self) -> int:
        return 2 if self.kind == "advection_diffusion" else 0

    @property
    def periodic_x(self) -> bool:
        return any(b.kind == "periodic" for b in self.bc.values())


def element_matrices(p: np.ndarray):
    """Mass, stiffness and x-advection matrices of one P1 triangle ``p`` (3x2)."""
    (x0, y0), (x1, y1), (x2, y2) = p
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    area = 0.5 * abs(det)
    grads = np.array([[y1 - y2, x2 - x1], [y2 - y0, x0 - x2], [y0 - y1, x1 - x0]]) / det
    mass = area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    stiff = area * grads @ grads.T
    adv = area / 3.0 * np.tile(grads[:, 0], (3, 1))
    return mass, stiff, adv


def assemble_p1(graph: Graph, positions: np.ndarray | None = None):
    """Global consistent mass ``M``, stiffness ``K`` and advection ``Ax`` (CSR).

    ``Ax[a, b] = int phi_a d/dx phi_b``. Raises on a zero-area triangle.
    """
    pos = graph.positions if positions is None else positions
    tri = graph.triangles
    p = pos[tri]  # (T, 3, 2)
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    scale = max(np.ptp(pos, axis=0).max(), 1e-300) ** 2
    bad = np.flatnonzero(np.abs(det) <= 1e-14 * scale)
    if len(bad):
        raise ValueError(f"zero-area triangle {int(bad[0])}: nodes {tri[bad[0]].tolist()}")
    area = 0.5 * np.abs(det)
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / det[:, None]
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / det[:, None]

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    ones = np.ones((3, 3)) + np.eye(3)
    m_loc = area[:, None, None] / 12.0 * ones
    k_loc = area[:, None, None] * (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :])
    a_loc = area[:, None, None] / 3.0 * np.broadcast_to(gx[:, None, :], (len(tri), 3, 3))
    n = graph.n_nodes

    def build(vals):
        return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))

    return build(m_loc), build(k_loc), build(a_loc)


def lump(mass: sp.spmatrix) -> sp.csr_matrix:
    return sp.diags(np.asarray(mass.sum(axis=1)).ravel()).tocsr()


def dirichlet_values(graph: Graph, domain: Domain, bc: dict[str, BC]) -> dict[int, float]:
    """Pinned value per boundary node; a corner shared by two Dirichlet
    segments takes the mean of the two values."""
    nodes = np.flatnonzero(graph.flags)
    if not len(nodes):
        return {}
    dist = domain.segment_distance(graph.positions[nodes])
    tol = 1e-7 * domain.diameter()
    pinned = {}
    for k, node in enumerate(nodes):
        vals = [bc[name].value for name in dist
                if dist[name][k] <= tol and name in bc and bc[name].kind == "dirichlet"]
        if vals:
            pinned[int(node)] = float(np.mean(vals))
    return pinned


@dataclass
class System:
    """Assembled implicit-Euler operator for one mesh, PDE and step size."""

    lhs: sp.csr_matrix  # free-free block on the reduced dof space
    mass: sp.csr_matrix  # reduced dof space
    coupling: sp.csr_matrix  # free-pinned block of the lhs
    prolong: sp.csr_matrix  # dofs -> nodes
    free: np.ndarray
    pinned: np.ndarray
    pinned_values: np.ndarray
    symmetric: bool


def periodic_prolongation(graph: Graph, period: float = 1.0) -> sp.csr_matrix:
    _, keep, node_map = merge_periodic_x(graph, period)
    n = graph.n_nodes
    return sp.csr_matrix((np.ones(n), (np.arange(n), node_map)), shape=(n, len(keep)))


def build_system(graph: Graph, pde: PdeSpec, dt: float, domain: Domain | None = None,
                 mass_kind: str = "consistent", matrices=None) -> System:
    domain = domain or unit_square()
    M, K, A = matrices if matrices is not None else assemble_p1(graph)
    if mass_kind == "lumped":
        M = lump(M)
    elif mass_kind != "consistent":
        raise ValueError(f"unknown mass matrix kind {mass_kind!r}")
    lhs = M + dt * pde.lambda2 * K
    if pde.lambda1 != 0.0:
        lhs = lhs + dt * pde.lambda1 * A
    if pde.periodic_x:
        P = periodic_prolongation(graph)
    else:
        P = sp.identity(graph.n_nodes, format="csr")
    lhs = (P.T @ lhs @ P).tocsr()
    Mr = (P.T @ M @ P).tocsr()

    pinned_map = dirichlet_values(graph, domain, pde.bc)
    # pinned dofs: map node ids through P (periodic faces are never Dirichlet)
    node_to_dof = np.asarray(P.argmax(axis=1)).ravel()
    pinned = np.array(sorted({int(node_to_dof[i]) for i in pinned_map}), dtype=np.int64)
    pvals = np.zeros(len(pinned))
    for node, val in pinned_map.items():
        pvals[np.searchsorted(pinned, node_to_dof[node])] = val
    free = np.setdiff1d(np.arange(lhs.shape[0]), pinned)
    return System(
        lhs=lhs[free][:, free].tocsr(),
        mass=Mr,
        coupling=lhs[free][:, pinned].tocsr(),
        prolong=P,
        free=free,
        pinned=pinned,
        pinned_values=pvals,
        symmetric=pde.lambda1 == 0.0,
    )


def _solve(A, b, x0, symmetric: bool):
    n = A.shape[0]
    if n == 0:
        return b.copy()
    diag = A.diagonal()
    precond = sp.diags(1.0 / diag)
    solver = spla.cg if symmetric else spla.bicgstab
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    x, info = solver(A, b, x0=x0, rtol=SOLVER_RTOL, atol=0.0, maxiter=10 * n, M=precond)
    res = np.linalg.norm(b - A @ x) / bnorm
    if info != 0 and not res <= SOLVER_RTOL * 10:
        raise SolverError(f"linear solver did not converge: relative residual {res:.3e}")
    return x


def step_implicit_euler(state: np.ndarray, system: System) -> np.ndarray:
    """One backward-Euler step on nodal values ``state``; returns nodal values."""
    P = system.prolong
    dofs = _restrict(state, P)
    rhs = system.mass @ dofs
    new = np.empty_like(dofs)
    new[system.pinned] = system.pinned_values
    b = rhs[system.free] - system.coupling @ system.pinned_values
    new[system.free] = _solve(system.lhs, b, dofs[system.free], system.symmetric)
    return P @ new


def _restrict(state, P):
    # dof value = mean over the nodes identified with it
    counts = np.asarray(P.sum(axis=0)).ravel()
    return (P.T @ state) / counts


@dataclass
class Trajectory:
    graph: Graph
    frames: np.ndarray  # (T, N)
    dt_record: float
    dt_solver: float
    pde: PdeSpec
    ic: str = ""
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def _step_count(t: float, dt: float, what: str) -> int:
    k = int(round(t / dt))
    if k < 1 or abs(k * dt - t) > 1e-9 * max(t, dt):
        raise ValueError(f"{what} ({t:g}) is not a positive integer multiple of dt_solver ({dt:g})")
    return k


def simulate(graph: Graph, pde: PdeSpec, ic, t_end: float, dt_solver: float,
             dt_record: float, seed: int = 0, domain: Domain | None = None,
             mass_kind: str | None = None, ic_label: str = "") -> Trajectory:
    """Run backward Euler and record every ``dt_record / dt_solver``-th state.

    ``ic`` is either nodal values, a scalar, or a callable ``f(x, y)``. With
    periodic x-faces the returned trajectory lives on the merged periodic
    graph. Heat defaults to a lumped mass matrix, which keeps the discrete
    maximum principle on Delaunay meshes; other PDEs use the consistent one.
    """
    if mass_kind is None:
        mass_kind = "lumped" if pde.kind == "heat" else "consistent"
    if not (t_end >= dt_record > 0):
        raise ValueError("require t_end >= dt_record > 0")
    every = _step_count(dt_record, dt_solver, "dt_record")
    n_steps = _step_count(t_end, dt_solver, "t_end")
    domain = domain or unit_square()
    system = build_system(graph, pde, dt_solver, domain, mass_kind)
    if callable(ic):
        u = np.asarray(ic(graph.positions[:, 0], graph.positions[:, 1]), dtype=float)
        u = np.broadcast_to(u, (graph.n_nodes,)).copy()
    else:
        u = np.array(ic, dtype=float)
        if u.ndim == 0:
            u = np.full(graph.n_nodes, float(u))
        if u.shape != (graph.n_nodes,):
            raise ValueError("initial condition length does not match the graph")
    P = system.prolong
    dofs = _restrict(u, P)
    dofs[system.pinned] = system.pinned_values
    u = P @ dofs

    frames = [u.copy()]
    for step in range(1, n_steps + 1):
        u = step_implicit_euler(u, system)
        if step % every == 0:
            frames.append(u.copy())
    frames = np.array(frames)
    out_graph = graph
    if pde.periodic_x:
        out_graph, keep, _ = merge_periodic_x(graph)
        frames = frames[:, keep]
    return Trajectory(out_graph, frames, dt_record, dt_solver, pde, ic_label, seed)


def stencil_reference(grid: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """One explicit five-point heat update on a grid with fixed edges.

    ``alpha`` weights neighbours along the second array axis (``u[i, j+-1]``)
    and ``beta`` along the first (``u[i+-1, j]``); both already include the
    time step, e.g. ``alpha = D dt / h**2``.
    """
    u = np.asarray(grid, dtype=float)
    if u.ndim != 2 or min(u.shape) < 3:
        raise ValueError("stencil grid must be 2-D with at least 3x3 points")
    out = u.copy()
    c = u[1:-1, 1:-1]
    out[1:-1, 1:-1] = (c + alpha * (u[1:-1, 2:] - c) + alpha * (u[1:-1, :-2] - c)
                       + beta * (u[2:, 1:-1] - c) + beta * (u[:-2, 1:-1] - c))
    return out
