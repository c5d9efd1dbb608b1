"""Binary file formats for graphs (PGN1) and trajectories (PTR1).

Both are little-endian and end with a CRC-32 of everything before it.

PGN1: ``magic | N, M, T (u64) | positions N x 2 f64 | flags N u8 |
edges M x 2 u64 | shifts M x 2 f64 | triangles T x 3 u64 | crc32``.

PTR1: ``magic | N, T (u64) | dt_solver, dt_record (f64) | pde kind (u32) |
lambda1, lambda2 (f64) | seed (u64) | BC table | ic label | embedded PGN1
graph | frames T x N f64 row-major | crc32``.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib

import numpy as np

from .fem import BC, PdeSpec, Trajectory
from .mesh import Graph

GRAPH_MAGIC = b"PGN1"
TRAJ_MAGIC = b"PTR1"
PDE_KINDS = ["heat", "advection_diffusion", "navier_stokes"]
BC_KINDS = ["dirichlet", "neumann", "periodic"]


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _unseal(data: bytes, magic: bytes, what: str) -> memoryview:
    if len(data) < 8 or data[:4] != magic:
        raise FormatError(f"not a {magic.decode()} {what} (bad magic)")
    body = data[:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{what} checksum mismatch")
    return memoryview(body)


class _Reader:
    def __init__(self, view: memoryview, off: int, what: str):
        self.view, self.off, self.what = view, off, what

    def take(self, n: int) -> memoryview:
        if self.off + n > len(self.view):
            raise FormatError(f"truncated {self.what}")
        out = self.view[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape) -> np.ndarray:
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n), dtype=dtype).reshape(shape).copy()

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return bytes(self.take(n)).decode()


def graph_bytes(g: Graph) -> bytes:
    buf = io.BytesIO()
    buf.write(GRAPH_MAGIC)
    buf.write(struct.pack("<3Q", g.n_nodes, g.n_edges, len(g.triangles)))
    buf.write(np.ascontiguousarray(g.positions, "<f8").tobytes())
    buf.write(np.ascontiguousarray(g.flags, "u1").tobytes())
    buf.write(np.ascontiguousarray(g.edges, "<u8").tobytes())
    buf.write(np.ascontiguousarray(g.shifts, "<f8").tobytes())
    buf.write(np.ascontiguousarray(g.triangles, "<u8").tobytes())
    return _seal(buf.getvalue())


def graph_from_bytes(data: bytes) -> Graph:
    r = _Reader(_unseal(data, GRAPH_MAGIC, "graph"), 4, "graph")
    n, m, t = r.unpack("<3Q")
    pos = r.array("<f8", (n, 2)).astype(np.float64)
    flags = r.array("u1", (n,))
    edges = r.array("<u8", (m, 2)).astype(np.int64)
    shifts = r.array("<f8", (m, 2)).astype(np.float64)
    tri = r.array("<u8", (t, 3)).astype(np.int64)
    return Graph(pos, flags, edges, shifts, tri)


def trajectory_bytes(tr: Trajectory) -> bytes:
    n = tr.graph.n_nodes
    frames = np.asarray(tr.frames, dtype="<f8")
    if frames.ndim != 2 or frames.shape[1] != n:
        raise FormatError("frame width does not match the graph")
    buf = io.BytesIO()
    buf.write(TRAJ_MAGIC)
    buf.write(struct.pack("<2Q2dI2dQ", n, len(frames), tr.dt_solver, tr.dt_record,
                          PDE_KINDS.index(tr.pde.kind), tr.pde.lambda1, tr.pde.lambda2, tr.seed))
    buf.write(struct.pack("<I", len(tr.pde.bc)))
    for name, bc in tr.pde.bc.items():
        b = name.encode()
        buf.write(struct.pack("<I", len(b)) + b)
        buf.write(struct.pack("<Bd", BC_KINDS.index(bc.kind), bc.value))
    lab = tr.ic.encode()
    buf.write(struct.pack("<I", len(lab)) + lab)
    gb = graph_bytes(tr.graph)
    buf.write(struct.pack("<Q", len(gb)) + gb)
    buf.write(np.ascontiguousarray(frames).tobytes())
    return _seal(buf.getvalue())


def trajectory_from_bytes(data: bytes) -> Trajectory:
    r = _Reader(_unseal(data, TRAJ_MAGIC, "trajectory"), 4, "trajectory")
    n, t, dts, dtr, kind, l1, l2, seed = r.unpack("<2Q2dI2dQ")
    (nbc,) = r.unpack("<I")
    bc = {}
    for _ in range(nbc):
        name = r.string()
        k, v = r.unpack("<Bd")
        bc[name] = BC(BC_KINDS[k], v)
    label = r.string()
    (glen,) = r.unpack("<Q")
    graph = graph_from_bytes(bytes(r.take(glen)))
    frames = r.array("<f8", (t, n)).astype(np.float64)
    pde = PdeSpec(PDE_KINDS[kind], l1, l2, bc)
    return Trajectory(graph, frames, dtr, dts, pde, label, int(seed))


def save_graph(path, g: Graph) -> None:
    atomic_write(path, graph_bytes(g))


def load_graph(path) -> Graph:
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())


def save_trajectory(path, tr: Trajectory) -> None:
    atomic_write(path, trajectory_bytes(tr))


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        return trajectory_from_bytes(fh.read())


def validate(path) -> list[str]:
    """Violations found in any PGN1 / PTR1 / PMP1 / manifest file; empty means OK."""
    from .dataset import MANIFEST_HEADER, load_manifest
    from .graphnet import CHECKPOINT_MAGIC, CheckpointError, checkpoint_from_bytes

    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:4]
    try:
        if magic == GRAPH_MAGIC:
            return graph_from_bytes(data).violations()
        if magic == TRAJ_MAGIC:
            tr = trajectory_from_bytes(data)
            out = tr.graph.violations()
            if not np.all(np.isfinite(tr.frames)):
                out.append("non-finite frame values")
            return out
        if magic == CHECKPOINT_MAGIC:
            model = checkpoint_from_bytes(data)[0]
            return [] if all(np.all(np.isfinite(p)) for p in model.params) else ["non-finite parameters"]
        if data.startswith(MANIFEST_HEADER.encode()):
            load_manifest(path, verify=True)
            return []
    except (FormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        return [str(exc)]
    return [f"unrecognised file type (magic {magic!r})"]
