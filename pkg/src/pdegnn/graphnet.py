"""Message-passing graph network with hand-written reverse mode.

Each of the ``K`` layers computes a message per directed edge ``(i, j)``,

    m_ij = phi_k(u_i, u_j, e_ij),

averages the messages arriving at node ``i`` and updates the node state,

    u_i <- gamma_k(u_i, mean_j m_ij).

``phi_k`` and ``gamma_k`` are three-layer ReLU perceptrons with identity
output. The raw edge features are re-fed at every layer. Messages are summed
in a canonical per-node order (sorted by edge features), which makes the
output exactly equivariant under node relabelling.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

CHECKPOINT_MAGIC = b"PMP1"
CHECKPOINT_VERSION = 1
AGGREGATIONS = {"mean": 0, "sum": 1}
DTYPES = {"float64": 0, "float32": 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Normalizer:
    """z-score statistics; node values share one mean/std across frames."""

    u_mean: float = 0.0
    u_std: float = 1.0
    edge_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    edge_std: np.ndarray = field(default_factory=lambda: np.ones(2))

    def nodes(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[:, :-1] = (x[:, :-1] - self.u_mean) / self.u_std
        return out

    def edges(self, e: np.ndarray) -> np.ndarray:
        return (e - self.edge_mean) / self.edge_std

    def values(self, u: np.ndarray) -> np.ndarray:
        return (u - self.u_mean) / self.u_std

    def denorm(self, u: np.ndarray) -> np.ndarray:
        return u * self.u_std + self.u_mean


@dataclass
class Batch:
    """Concatenation of one or more graphs with edges sorted by receiver.

    ``node_x`` holds ``n`` past frames then the boundary flag per node.
    """

    node_x: np.ndarray
    edge_x: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    deg: np.ndarray
    starts: np.ndarray
    graph_ptr: np.ndarray
    targets: np.ndarray | None = None
    _send_matrix: sp.csr_matrix | None = None
    _recv_matrix: sp.csr_matrix | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_x)

    @property
    def n_graphs(self) -> int:
        return len(self.graph_ptr) - 1

    def send_matrix(self) -> sp.csr_matrix:
        if self._send_matrix is None:
            m = len(self.send)
            self._send_matrix = sp.csr_matrix(
                (np.ones(m), (self.send, np.arange(m))), shape=(self.n_nodes, m))
        return self._send_matrix

    def recv_matrix(self) -> sp.csr_matrix:
        """Row ``i`` sums the messages arriving at node ``i`` in canonical order."""
        if self._recv_matrix is None:
            m = len(self.recv)
            self._recv_matrix = sp.csr_matrix(
                (np.ones(m), np.arange(m), np.concatenate([self.starts, [m]])),
                shape=(self.n_nodes, m))
        return self._recv_matrix

    def node_graph(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_graphs), np.diff(self.graph_ptr))


def canonical_edge_order(edges: np.ndarray, edge_x: np.ndarray) -> np.ndarray:
    """Permutation sorting edges by receiver, then by their feature values."""
    keys = [edge_x[:, c] for c in range(edge_x.shape[1] - 1, -1, -1)]
    return np.lexsort(keys + [edges[:, 0]])


def make_batch(items) -> Batch:
    """Build a batch from ``(node_x, edges, edge_x, targets)`` tuples."""
    node_x, edge_x, recv, send, targets, ptr = [], [], [], [], [], [0]
    for nx, edges, ex, tg in items:
        n = len(nx)
        deg = np.bincount(edges[:, 0], minlength=n)
        if np.any(deg == 0):
            raise ValueError(f"isolated node {int(np.flatnonzero(deg == 0)[0])} has no neighbours")
        order = canonical_edge_order(edges, ex)
        node_x.append(nx)
        edge_x.append(ex[order])
        recv.append(edges[order, 0] + ptr[-1])
        send.append(edges[order, 1] + ptr[-1])
        targets.append(tg)
        ptr.append(ptr[-1] + n)
    recv = np.concatenate(recv)
    deg = np.bincount(recv, minlength=ptr[-1])
    starts = np.concatenate([[0], np.cumsum(deg)[:-1]])
    has_t = all(t is not None for t in targets)
    return Batch(
        np.concatenate(node_x), np.concatenate(edge_x), recv, np.concatenate(send),
        deg, starts, np.asarray(ptr), np.concatenate(targets) if has_t else None,
    )


def _he_uniform(rng, fan_in, fan_out, gain=6.0):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class MpgnnModel:
    n_in: int  # past frames per node
    n_out: int  # predicted frames per node
    edge_dim: int
    K: int = 3
    latent: int = 64
    hidden: int = 128
    aggregation: str = "mean"
    residual: bool = False
    dtype: str = "float64"  # compute precision; parameters are always stored as float64
    params: list = field(default_factory=list)
    norm: Normalizer = field(default_factory=Normalizer)

    def layer_dims(self, k: int):
        d_in = self.n_in + 1 if k == 0 else self.latent
        d_out = self.n_out if k == self.K - 1 else self.latent
        h = self.hidden
        phi = [2 * d_in + self.edge_dim, h, h, h]
        gamma = [d_in + h, h, h, d_out]
        return phi, gamma

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for k in range(self.K):
            for dims in self.layer_dims(k):
                for a, b in zip(dims[:-1], dims[1:]):
                    shapes += [(a, b), (b,)]
        return shapes

    def init(self, seed: int = 0) -> "MpgnnModel":
        """He-uniform weights on ReLU-fed layers, LeCun-uniform on outputs, zero biases."""
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        rng = np.random.default_rng(seed)
        self.params = []
        for k in range(self.K):
            for dims in self.layer_dims(k):
                n_lin = len(dims) - 1
                for li, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                    gain = 3.0 if li == n_lin - 1 else 6.0
                    self.params += [_he_uniform(rng, a, b, gain), np.zeros(b)]
        return self

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params))


def _aggregate(msg, batch, how):
    s = batch.recv_matrix().astype(msg.dtype, copy=False) @ msg
    if how == "mean":
        s /= batch.deg[:, None].astype(s.dtype)
    return s


def _compute_params(model: MpgnnModel):
    if model.dtype == "float64":
        return model.params
    return [p.astype(model.dtype) for p in model.params]


def _forward(model: MpgnnModel, batch: Batch, node_x, edge_x, keep_cache=False):
    params = _compute_params(model)
    h = node_x
    caches = []
    for k in range(model.K):
        W1, b1, W2, b2, W3, b3, G1, c1, G2, c2, G3, c3 = params[12 * k:12 * (k + 1)]
        d = h.shape[1]
        pa = h @ W1[:d]
        pb = h @ W1[d:2 * d]
        z1 = pa[batch.recv] + pb[batch.send] + edge_x @ W1[2 * d:] + b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ W2 + b2
        a2 = np.maximum(z2, 0.0)
        msg = a2 @ W3 + b3
        agg = _aggregate(msg, batch, model.aggregation)
        y1 = h @ G1[:d] + agg @ G1[d:] + c1
        r1 = np.maximum(y1, 0.0)
        y2 = r1 @ G2 + c2
        r2 = np.maximum(y2, 0.0)
        out = r2 @ G3 + c3
        if keep_cache:
            caches.append((h, z1, a1, z2, a2, agg, y1, r1, y2, r2))
        h = out
    return h, caches


def forward_normalized(model: MpgnnModel, batch: Batch, keep_cache=False):
    """Predictions in normalized units, plus the backward cache."""
    node_x = model.norm.nodes(batch.node_x).astype(model.dtype, copy=False)
    edge_x = model.norm.edges(batch.edge_x).astype(model.dtype, copy=False)
    out, caches = _forward(model, batch, node_x, edge_x, keep_cache)
    if model.residual:
        out = out + node_x[:, model.n_in - 1:model.n_in]
    return out, (caches, edge_x)


def forward(model: MpgnnModel, batch: Batch) -> np.ndarray:
    """Predictions ``(N, n_out)`` in physical units."""
    out, _ = forward_normalized(model, batch)
    return model.norm.denorm(out.astype(np.float64))


def loss_mse(pred: np.ndarray, target: np.ndarray, graph_ptr=None) -> float:
    """Mean squared error over nodes and frames, averaged per graph when
    ``graph_ptr`` separates several graphs."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if graph_ptr is None:
        return float(np.mean((pred - target) ** 2))
    per = [np.mean((pred[a:b] - target[a:b]) ** 2) for a, b in zip(graph_ptr[:-1], graph_ptr[1:])]
    return float(np.mean(per))


def _loss_grad(pred, target, batch):
    sizes = np.diff(batch.graph_ptr) * pred.shape[1]
    w = 2.0 / (batch.n_graphs * np.repeat(sizes, np.diff(batch.graph_ptr)))
    return (pred - target) * w[:, None]


def backward(model: MpgnnModel, batch: Batch, scale: float = 1.0):
    """Loss (normalized units) and its exact gradient w.r.t. every parameter."""
    if batch.targets is None:
        raise ValueError("batch has no targets")
    pred, (caches, edge_x) = forward_normalized(model, batch, keep_cache=True)
    target = model.norm.values(batch.targets)
    loss = loss_mse(pred, target, batch.graph_ptr) * scale
    dh = (_loss_grad(pred, target, batch) * scale).astype(model.dtype, copy=False)
    params = _compute_params(model)
    grads = [None] * len(model.params)
    smat = batch.send_matrix().astype(dh.dtype, copy=False)
    rmat = batch.recv_matrix().astype(dh.dtype, copy=False)
    for k in range(model.K - 1, -1, -1):
        W1, b1, W2, b2, W3, b3, G1, c1, G2, c2, G3, c3 = params[12 * k:12 * (k + 1)]
        h, z1, a1, z2, a2, agg, y1, r1, y2, r2 = caches[k]
        d = h.shape[1]
        base = 12 * k
        # update network
        dG3 = r2.T @ dh
        dc3 = dh.sum(0)
        dy2 = (dh @ G3.T) * (y2 > 0)
        dG2 = r1.T @ dy2
        dc2 = dy2.sum(0)
        dy1 = (dy2 @ G2.T) * (y1 > 0)
        dG1 = np.concatenate([h.T @ dy1, agg.T @ dy1])
        dc1 = dy1.sum(0)
        dh_new = dy1 @ G1[:d].T
        dagg = dy1 @ G1[d:].T
        if model.aggregation == "mean":
            dagg = dagg / batch.deg[:, None].astype(dagg.dtype)
        dmsg = np.repeat(dagg, batch.deg, axis=0)
        # message network
        dW3 = a2.T @ dmsg
        db3 = dmsg.sum(0)
        dz2 = (dmsg @ W3.T) * (z2 > 0)
        dW2 = a1.T @ dz2
        db2 = dz2.sum(0)
        dz1 = (dz2 @ W2.T) * (z1 > 0)
        dpa = rmat @ dz1
        dpb = smat @ dz1
        dW1 = np.concatenate([h.T @ dpa, h.T @ dpb, edge_x.T @ dz1])
        db1 = dz1.sum(0)
        dh_new += dpa @ W1[:d].T + dpb @ W1[d:2 * d].T
        grads[base:base + 12] = [dW1, db1, dW2, db2, dW3, db3, dG1, dc1, dG2, dc2, dG3, dc3]
        dh = dh_new
    if model.dtype != "float64":
        grads = [g.astype(np.float64) for g in grads]
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def lr_schedule(epoch: int, base_lr: float = 1e-3, factor: float = 0.2, every: int = 5) -> float:
    return base_lr * factor ** (epoch // every)


# -- checkpoint format -------------------------------------------------------
# PMP1, little-endian: magic | version u32 | K, latent, hidden, n, m,
# edge_dim, aggregation id, residual, dtype id (9 x u32) | [u_mean, u_std] |
# edge_mean | edge_std | flat parameters | Adam (t + 1, or 0 when absent;
# then m and v) | epoch u64 | RNG state JSON | metadata JSON | crc32.
# Arrays are stored as a u64 length followed by float64 values.

def _pack_array(buf, a):
    a = np.ascontiguousarray(a, dtype="<f8")
    buf.write(struct.pack("<Q", a.size))
    buf.write(a.tobytes())


def _unpack_array(view, off):
    (n,) = struct.unpack_from("<Q", view, off)
    off += 8
    end = off + 8 * n
    if end > len(view):
        raise CheckpointError("truncated checkpoint")
    return np.frombuffer(view[off:end], dtype="<f8").astype(np.float64), end


def _pack_str(buf, s: str):
    b = s.encode()
    buf.write(struct.pack("<Q", len(b)))
    buf.write(b)


def _unpack_str(view, off):
    (n,) = struct.unpack_from("<Q", view, off)
    off += 8
    if off + n > len(view):
        raise CheckpointError("truncated checkpoint")
    return bytes(view[off:off + n]).decode(), off + n


def checkpoint_bytes(model: MpgnnModel, opt: AdamState | None = None, epoch: int = 0,
                     rng_state: dict | None = None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<9I", model.K, model.latent, model.hidden, model.n_in, model.n_out,
                          model.edge_dim, AGGREGATIONS[model.aggregation], int(model.residual),
                          DTYPES[model.dtype]))
    nrm = model.norm
    _pack_array(buf, np.array([nrm.u_mean, nrm.u_std]))
    _pack_array(buf, nrm.edge_mean)
    _pack_array(buf, nrm.edge_std)
    flat = np.concatenate([p.ravel() for p in model.params])
    _pack_array(buf, flat)
    if opt is None:
        buf.write(struct.pack("<Q", 0))
    else:
        buf.write(struct.pack("<Q", opt.t + 1))
        _pack_array(buf, np.concatenate([m.ravel() for m in opt.m]))
        _pack_array(buf, np.concatenate([v.ravel() for v in opt.v]))
    buf.write(struct.pack("<Q", epoch))
    _pack_str(buf, json.dumps(rng_state or {}))
    _pack_str(buf, json.dumps(meta or {}))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _split(flat, shapes):
    out, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[off:off + n].reshape(s).copy())
        off += n
    return out


def checkpoint_from_bytes(data: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, opt, epoch, rng_state, meta)``."""
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PMP1 checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt)")
    view = memoryview(body)
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    K, latent, hidden, n_in, n_out, edim, agg, resid, dt = struct.unpack_from("<9I", view, 8)
    off = 8 + 36
    stats, off = _unpack_array(view, off)
    emean, off = _unpack_array(view, off)
    estd, off = _unpack_array(view, off)
    if agg not in AGGREGATIONS.values() or dt not in DTYPES.values():
        raise CheckpointError("unknown aggregation or dtype id in checkpoint")
    aggname = {v: k for k, v in AGGREGATIONS.items()}[agg]
    dtname = {v: k for k, v in DTYPES.items()}[dt]
    model = MpgnnModel(n_in, n_out, edim, K, latent, hidden, aggname, bool(resid), dtname)
    model.norm = Normalizer(float(stats[0]), float(stats[1]), emean, estd)
    flat, off = _unpack_array(view, off)
    shapes = model.param_shapes()
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise CheckpointError("parameter blob does not match the architecture")
    model.params = _split(flat, shapes)
    (t1,) = struct.unpack_from("<Q", view, off)
    off += 8
    opt = None
    if t1:
        mflat, off = _unpack_array(view, off)
        vflat, off = _unpack_array(view, off)
        opt = AdamState(_split(mflat, shapes), _split(vflat, shapes), int(t1 - 1))
    (epoch,) = struct.unpack_from("<Q", view, off)
    off += 8
    rng_text, off = _unpack_str(view, off)
    meta_text, off = _unpack_str(view, off)
    return model, opt, int(epoch), json.loads(rng_text), json.loads(meta_text)


def save_checkpoint(path, model, opt=None, epoch=0, rng_state=None, meta=None) -> None:
    from .formats import atomic_write
    atomic_write(path, checkpoint_bytes(model, opt, epoch, rng_state, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
