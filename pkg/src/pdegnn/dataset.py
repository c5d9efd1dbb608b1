"""Supervised windows over trajectories, node/edge features and manifests.

A sample takes ``n`` input frames spaced ``gap`` recorded steps apart and
``m`` target frames, the first of which lies ``target_offset`` recorded
steps after the last input (``target_offset`` defaults to ``gap``).
Node features are the input frames followed by the boundary flag; edge
features are the wrapped displacement ``x_j - x_i`` followed by the PDE
parameters at the edge midpoint.
"""
from __future__ import annotations

import hashlib
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .fem import PdeSpec, Trajectory
from .formats import atomic_write, load_trajectory
from .graphnet import Normalizer
from .mesh import Graph

MANIFEST_HEADER = "pdegnn-manifest 1"
STD_FLOOR = 1e-8
SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    graph: Graph
    node_x: np.ndarray  # (N, n + 1)
    edge_x: np.ndarray  # (M, 2 + P)
    targets: np.ndarray  # (N, m)
    frame_gap: int
    inputs: tuple[int, ...] = ()
    target_frames: tuple[int, ...] = ()
    sim_id: str = ""

    def as_item(self):
        return self.node_x, self.graph.edges, self.edge_x, self.targets


def window_span(n: int, m: int, gap: int, target_offset: int | None = None) -> int:
    """Recorded steps from the first input frame to the last target frame."""
    off = gap if target_offset is None else target_offset
    return (n - 1) * gap + off + (m - 1) * gap


def window_count(n_frames: int, n: int, m: int, gap: int, max_windows: int,
                 target_offset: int | None = None) -> int:
    return max(0, min(max_windows, n_frames - window_span(n, m, gap, target_offset)))


def window_indices(start: int, n: int, m: int, gap: int, target_offset: int | None = None):
    off = gap if target_offset is None else target_offset
    ins = tuple(start + i * gap for i in range(n))
    outs = tuple(ins[-1] + off + i * gap for i in range(m))
    return ins, outs


def edge_features(graph: Graph, pde: PdeSpec) -> np.ndarray:
    disp = graph.displacements()
    if pde.n_params == 0:
        return disp
    # constant parameters, evaluated at the edge midpoints
    lam = np.broadcast_to([pde.lambda1, pde.lambda2], (graph.n_edges, 2))
    return np.concatenate([disp, lam], axis=1)


def assemble_features(graph: Graph, frames: np.ndarray, pde: PdeSpec):
    """Node matrix ``[u(t-(n-1)gap), ..., u(t), flag]`` and edge matrix."""
    frames = np.atleast_2d(frames)
    if frames.shape[1] != graph.n_nodes:
        raise ValueError("frame width does not match the graph")
    if pde.kind == "advection_diffusion" and (pde.lambda1 is None or pde.lambda2 is None):
        raise ValueError("advection-diffusion samples need lambda1 and lambda2")
    node_x = np.concatenate([frames.T, graph.flags[:, None].astype(float)], axis=1)
    return node_x, edge_features(graph, pde)


def window(traj: Trajectory, n: int, m: int, gap: int, max_windows: int = 20,
           target_offset: int | None = None, offsets=None, sim_id: str = "") -> list[Sample]:
    """Sliding windows with start offsets ``0 .. count - 1`` (or ``offsets``)."""
    need = window_span(n, m, gap, target_offset) + 1
    if traj.n_frames < need:
        raise ValueError(f"trajectory has {traj.n_frames} frames; a window needs {need}")
    if offsets is None:
        offsets = range(window_count(traj.n_frames, n, m, gap, max_windows, target_offset))
    e_x = edge_features(traj.graph, traj.pde)
    flag = traj.graph.flags[:, None].astype(float)
    out = []
    for s in offsets:
        ins, outs = window_indices(s, n, m, gap, target_offset)
        node_x = np.concatenate([traj.frames[list(ins)].T, flag], axis=1)
        out.append(Sample(traj.graph, node_x, e_x, traj.frames[list(outs)].T.copy(),
                          gap, ins, outs, sim_id))
    return out


def compute_normalization(samples) -> Normalizer:
    """Statistics over the given (training) samples only.

    Node values pool every input-frame entry; edge statistics are per column.
    """
    if not samples:
        raise ValueError("no samples to normalise over")
    u = np.concatenate([s.node_x[:, :-1].ravel() for s in samples])
    e = np.concatenate([s.edge_x for s in samples])
    return Normalizer(
        float(u.mean()), float(max(u.std(), STD_FLOOR)),
        e.mean(axis=0), np.maximum(e.std(axis=0), STD_FLOOR),
    )


# -- manifest ----------------------------------------------------------------

@dataclass
class TrajRecord:
    path: str
    checksum: str
    split: str
    offsets: list[int]


@dataclass
class Manifest:
    n: int
    m: int
    gap: int
    target_offset: int
    pde: str
    records: list[TrajRecord] = field(default_factory=list)
    norm: Normalizer | None = None
    root: str = "."

    def split(self, name: str) -> list[TrajRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rec: TrajRecord) -> str:
        return rec.path if os.path.isabs(rec.path) else os.path.join(self.root, rec.path)

    def text(self) -> str:
        lines = [MANIFEST_HEADER,
                 f"n = {self.n}", f"m = {self.m}", f"gap = {self.gap}",
                 f"target_offset = {self.target_offset}", f"pde = {self.pde}"]
        if self.norm is not None:
            lines += [f"u_mean = {self.norm.u_mean!r}", f"u_std = {self.norm.u_std!r}",
                      "edge_mean = " + ",".join(repr(float(v)) for v in self.norm.edge_mean),
                      "edge_std = " + ",".join(repr(float(v)) for v in self.norm.edge_std)]
        for r in self.records:
            offs = ",".join(str(o) for o in r.offsets)
            lines.append(f"traj {r.split} {r.checksum} {offs} {r.path}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()


def file_checksum(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            b = fh.read(chunk)
            if not b:
                break
            h.update(b)
    return h.hexdigest()


def save_manifest(path, manifest: Manifest) -> None:
    atomic_write(path, manifest.text().encode())


def load_manifest(path, verify: bool = True) -> Manifest:
    """Parse a manifest; every referenced trajectory must exist.

    With ``verify`` the trajectory checksums are streamed and compared.
    Trajectory contents are never held in memory here.
    """
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise ValueError(f"unsupported manifest header {header!r}")
        kv, recs = {}, []
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("traj "):
                _, split, checksum, offs, rel = line.split(" ", 4)
                recs.append(TrajRecord(rel, checksum, split, [int(o) for o in offs.split(",") if o]))
            else:
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
    norm = None
    if "u_mean" in kv:
        norm = Normalizer(float(kv["u_mean"]), float(kv["u_std"]),
                          np.array([float(v) for v in kv["edge_mean"].split(",")]),
                          np.array([float(v) for v in kv["edge_std"].split(",")]))
    man = Manifest(int(kv["n"]), int(kv["m"]), int(kv["gap"]), int(kv["target_offset"]),
                   kv["pde"], recs, norm, root)
    for rec in recs:
        full = man.resolve(rec)
        if not os.path.exists(full):
            raise FileNotFoundError(f"missing trajectory file {full}")
        if verify and file_checksum(full) != rec.checksum:
            raise ValueError(f"checksum mismatch for trajectory file {full}")
    return man


class Dataset:
    """Lazily regenerated samples from a manifest's trajectories."""

    def __init__(self, manifest: Manifest, cache_size: int = 256):
        self.manifest = manifest
        self._cache: OrderedDict[str, Trajectory] = OrderedDict()
        self._cache_size = cache_size

    @property
    def norm(self) -> Normalizer:
        return self.manifest.norm

    @classmethod
    def load(cls, path, verify: bool = True) -> "Dataset":
        return cls(load_manifest(path, verify))

    def trajectory(self, rec: TrajRecord) -> Trajectory:
        full = self.manifest.resolve(rec)
        tr = self._cache.get(full)
        if tr is None:
            tr = load_trajectory(full)
            self._cache[full] = tr
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(full)
        return tr

    def samples(self, split: str) -> list[Sample]:
        man = self.manifest
        out = []
        for rec in man.split(split):
            out.extend(window(self.trajectory(rec), man.n, man.m, man.gap,
                              target_offset=man.target_offset, offsets=rec.offsets,
                              sim_id=rec.path))
        return out

    def trajectories(self, split: str) -> list[Trajectory]:
        return [self.trajectory(r) for r in self.manifest.split(split)]


def assign_splits(n_sims: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[str]:
    """Per-simulation split labels (never per window)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_sims)
    n_train = int(round(fractions[0] * n_sims))
    n_val = int(round(fractions[1] * n_sims))
    labels = [""] * n_sims
    for rank, i in enumerate(order):
        labels[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return labels


def build_manifest(paths, splits, n: int, m: int, gap: int, max_windows: int = 20,
                   target_offset: int | None = None, root: str | None = None) -> Manifest:
    """Manifest over trajectory files with statistics from the training split."""
    off = gap if target_offset is None else target_offset
    root = root or os.path.dirname(os.path.abspath(paths[0]))
    recs, pde, train = [], None, []
    for p, split in zip(paths, splits):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        tr = load_trajectory(p)
        pde = pde or tr.pde.kind
        count = window_count(tr.n_frames, n, m, gap, max_windows, off)
        if count == 0:
            need = window_span(n, m, gap, off) + 1
            raise ValueError(f"trajectory {p} has {tr.n_frames} frames; a window needs {need}")
        rel = os.path.relpath(os.path.abspath(p), root)
        recs.append(TrajRecord(rel, file_checksum(p), split, list(range(count))))
        if split == "train":
            train.extend(window(tr, n, m, gap, max_windows, off))
    man = Manifest(n, m, gap, off, pde, recs, None, root)
    man.norm = compute_normalization(train)
    return man
