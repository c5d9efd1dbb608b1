"""Data generation, training, evaluation, transfer, ablation and rollout."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from . import graphnet as gn
from .dataset import Sample, compute_normalization, window
from .fem import BC, PdeSpec, Trajectory, parse_bc, simulate
from .mesh import Domain, build_mesh, make_distorted_domain, points_for_edge_length, unit_square

log = logging.getLogger(__name__)


def child_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- data generation ---------------------------------------------------------

@dataclass
class HeatConfig:
    """Heat-equation ground truth: random Dirichlet values per boundary segment."""

    n_points: int = 196
    dt: float = 8e-4
    n_steps: int = 220
    record_every: int = 1
    bc_low: float = 0.0
    bc_high: float = 200.0
    ic: float = 0.0
    domain: str = "square"  # "square" | "distorted"


@dataclass
class AdvectionConfig:
    n_points: int = 256
    dt: float = 1e-4
    n_steps: int = 820
    record_every: int = 1
    lam_low: float = 0.5
    lam_high: float = 1.5


def make_domain(name: str) -> Domain:
    if name == "square":
        return unit_square()
    if name == "distorted":
        return make_distorted_domain()
    raise ValueError(f"unknown domain {name!r}")


def heat_simulation(cfg: HeatConfig, seed: int) -> Trajectory:
    domain = make_domain(cfg.domain)
    rng = np.random.default_rng(seed)
    graph = build_mesh(domain, cfg.n_points, child_seed(seed, 1))
    values = rng.uniform(cfg.bc_low, cfg.bc_high, size=len(domain.segments))
    bc = {s.name: BC("dirichlet", float(v)) for s, v in zip(domain.segments, values)}
    pde = PdeSpec("heat", bc=bc)
    return simulate(graph, pde, cfg.ic, cfg.n_steps * cfg.dt, cfg.dt, cfg.record_every * cfg.dt,
                    seed=seed, domain=domain, ic_label=f"constant {cfg.ic:g}")


def advection_ic(coeffs):
    a1, a2, a3, a4 = coeffs

    def f(x, y):
        return a1 * np.sin(x) + a2 * np.sin(2 * x) + a3 * np.cos(x) + a4 * np.cos(2 * x)
    return f


def advection_simulation(cfg: AdvectionConfig, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    graph = build_mesh(unit_square(), cfg.n_points, child_seed(seed, 1))
    coeffs = rng.uniform(-1.0, 1.0, size=4)
    lam1, lam2 = rng.uniform(cfg.lam_low, cfg.lam_high, size=2)
    bc = parse_bc("left=periodic,right=periodic,top=neumann,bottom=neumann")
    pde = PdeSpec("advection_diffusion", float(lam1), float(lam2), bc)
    label = "fourier " + ",".join(f"{c:.17g}" for c in coeffs)
    return simulate(graph, pde, advection_ic(coeffs), cfg.n_steps * cfg.dt, cfg.dt,
                    cfg.record_every * cfg.dt, seed=seed, ic_label=label)


def generate(kind: str, cfg, n_sims: int, seed: int, threads: int = 1) -> list[Trajectory]:
    """Independent simulations; seeds are derived per simulation index."""
    fn = {"heat": heat_simulation, "advection_diffusion": advection_simulation}[kind]
    seeds = [child_seed(seed, i) for i in range(n_sims)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda s: fn(cfg, s), seeds))
    return [fn(cfg, s) for s in seeds]


# -- windowing over in-memory trajectories ---------------------------------

@dataclass
class WindowSpec:
    n: int = 4
    m: int = 1
    gap: int = 20
    target_offset: int | None = None
    max_windows: int = 20

    def offset(self) -> int:
        return self.gap if self.target_offset is None else self.target_offset


def windows(trajs, spec: WindowSpec) -> list[Sample]:
    out = []
    for i, tr in enumerate(trajs):
        out.extend(window(tr, spec.n, spec.m, spec.gap, spec.max_windows,
                          spec.offset(), sim_id=str(i)))
    return out


class SampleSet:
    """In-memory splits with statistics from the training split."""

    def __init__(self, train: list[Sample], val: list[Sample], test: list[Sample] = ()):
        self._splits = {"train": list(train), "val": list(val), "test": list(test)}
        self.norm = compute_normalization(self._splits["train"])

    def samples(self, split: str) -> list[Sample]:
        return self._splits[split]


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 1e-3
    lr_factor: float = 0.2
    lr_every: int = 5
    batch_size: int = 8
    seed: int = 0
    n: int = 4
    m: int = 1
    K: int = 3
    latent: int = 64
    hidden: int = 128
    residual: bool = True
    dtype: str = "float32"
    aggregation: str = "mean"
    dataset: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n", "m", "K", "latent", "hidden", "lr_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.base_lr <= 0 or self.lr_factor <= 0:
            raise ValueError("learning-rate settings must be positive")


@dataclass
class TrainResult:
    model: gn.MpgnnModel
    history: list[dict]
    best_val: float
    best_epoch: int


class NonFiniteLoss(FloatingPointError):
    pass


def _last_path(path: str) -> str:
    return path + ".last"


def normalized_mse(model: gn.MpgnnModel, samples, batch_size: int = 8) -> float:
    losses = []
    for i in range(0, len(samples), batch_size):
        b = gn.make_batch([s.as_item() for s in samples[i:i + batch_size]])
        pred, _ = gn.forward_normalized(model, b)
        losses.append(gn.loss_mse(pred, model.norm.values(b.targets), b.graph_ptr) * b.n_graphs)
    return float(np.sum(losses) / len(samples))


def train(config: TrainConfig, data, resume: bool = False, window_spec: WindowSpec | None = None,
          stop_after: int | None = None) -> TrainResult:
    """Adam over shuffled mini-batches with a step learning-rate schedule.

    ``data`` provides ``samples(split)`` and ``norm``. When ``config.checkpoint``
    is set, the best-validation model is written there and the resumable state
    of the latest epoch to ``<checkpoint>.last``. ``stop_after`` ends the run
    early after that many epochs (used to test resumption).
    """
    train_s = data.samples("train")
    val_s = data.samples("val")
    if not train_s or not val_s:
        raise ValueError("training needs non-empty train and val splits")
    edge_dim = train_s[0].edge_x.shape[1]
    meta = {"config": asdict(config), "window": asdict(window_spec) if window_spec else None}

    if resume:
        model, opt, start, rng_state, saved = gn.load_checkpoint(_last_path(config.checkpoint))
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        history = saved["history"]
        best_val, best_epoch = saved["best_val"], saved["best_epoch"]
    else:
        model = gn.MpgnnModel(config.n, config.m, edge_dim, config.K, config.latent,
                              config.hidden, config.aggregation, config.residual, config.dtype)
        model.init(child_seed(config.seed, 0))
        model.norm = data.norm
        opt = gn.AdamState.zeros_like(model.params)
        rng = np.random.default_rng(child_seed(config.seed, 1))
        start, history, best_val, best_epoch = 0, [], np.inf, -1

    best_params = None
    for epoch in range(start, config.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        lr = gn.lr_schedule(epoch, config.base_lr, config.lr_factor, config.lr_every)
        order = rng.permutation(len(train_s))
        losses = []
        for bi, i in enumerate(range(0, len(order), config.batch_size)):
            batch = gn.make_batch([train_s[j].as_item() for j in order[i:i + config.batch_size]])
            loss, grads = gn.backward(model, batch)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}, batch {bi}")
            gn.adam_step(model.params, grads, opt, lr)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = normalized_mse(model, val_s)
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d lr %.1e train %.4e val %.4e", epoch, lr, train_loss, val_loss)
        improved = val_loss < best_val
        if improved:
            best_val, best_epoch = val_loss, epoch
            best_params = [p.copy() for p in model.params]
        if config.checkpoint:
            info = dict(meta, history=history, best_val=best_val, best_epoch=best_epoch)
            if improved:
                gn.save_checkpoint(config.checkpoint, model, None, epoch + 1, None, info)
            gn.save_checkpoint(_last_path(config.checkpoint), model, opt, epoch + 1,
                               rng.bit_generator.state, info)
    if best_params is not None:
        model.params = best_params
    elif resume and os.path.exists(config.checkpoint):
        # the best epoch predates the resumed run
        model = gn.load_checkpoint(config.checkpoint)[0]
    return TrainResult(model, history, float(best_val), best_epoch)


def loss_curve_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_loss"])
    for h in history:
        w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]), repr(h["val_loss"])])
    return buf.getvalue()


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    per_sample_mse: list[float]
    per_sample_mse_norm: list[float]
    per_sample_rel_l2: list[float]
    geometry: str = "same geometry"
    resolution: str = ""
    rollout_curve: list[float] = field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.per_sample_mse))

    @property
    def mean_mse_norm(self) -> float:
        return float(np.mean(self.per_sample_mse_norm))

    @property
    def mean_rel_l2(self) -> float:
        return float(np.mean(self.per_sample_rel_l2))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "mse", "mse_normalized", "rel_l2", "geometry", "resolution"])
        for i, (a, b, c) in enumerate(zip(self.per_sample_mse, self.per_sample_mse_norm,
                                          self.per_sample_rel_l2)):
            w.writerow([i, repr(a), repr(b), repr(c), self.geometry, self.resolution])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"geometry: {self.geometry}", f"resolution: {self.resolution or '-'}",
                 f"samples: {len(self.per_sample_mse)}",
                 f"mean MSE: {self.mean_mse:.6e}",
                 f"mean MSE (normalized): {self.mean_mse_norm:.6e}",
                 f"mean relative L2: {self.mean_rel_l2:.6e}"]
        if self.rollout_curve:
            lines.append("rollout MSE per step: " + " ".join(f"{v:.4e}" for v in self.rollout_curve))
        return "\n".join(lines) + "\n"


def predict(model: gn.MpgnnModel, sample: Sample) -> np.ndarray:
    """Single-graph prediction ``(N, m)`` in physical units."""
    return gn.forward(model, gn.make_batch([sample.as_item()]))


def relative_l2(pred, truth) -> float:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


def relative_l2_from_mse(mse: float, truth) -> float:
    """Relative L2 through the MSE (independent of :func:`relative_l2`)."""
    t = np.asarray(truth).ravel()
    return float(np.sqrt(mse * t.size / np.dot(t, t)))


def check_compatible(model: gn.MpgnnModel, samples) -> None:
    s = samples[0]
    if s.node_x.shape[1] != model.n_in + 1 or s.targets.shape[1] != model.n_out \
            or s.edge_x.shape[1] != model.edge_dim:
        raise ValueError(
            f"feature mismatch: checkpoint expects n={model.n_in}, m={model.n_out}, "
            f"edge_dim={model.edge_dim}; data has n={s.node_x.shape[1] - 1}, "
            f"m={s.targets.shape[1]}, edge_dim={s.edge_x.shape[1]}")


def evaluate(model: gn.MpgnnModel, samples, geometry: str = "same geometry",
             resolution: str = "", predictions=None) -> EvalReport:
    """Per-sample metrics; ``predictions`` may override the model (for testing)."""
    if not samples:
        raise ValueError("no samples to evaluate")
    check_compatible(model, samples)
    mse, mse_n, rel = [], [], []
    for k, s in enumerate(samples):
        pred = predict(model, s) if predictions is None else np.asarray(predictions[k])
        err = pred - s.targets
        mse.append(float(np.mean(err ** 2)))
        mse_n.append(float(np.mean(err ** 2)) / model.norm.u_std ** 2)
        rel.append(relative_l2(pred, s.targets))
    return EvalReport(mse, mse_n, rel, geometry, resolution)


def transfer_test(model: gn.MpgnnModel, spec: WindowSpec, n_sims: int, seed: int,
                  sim: HeatConfig | None = None, domain: str = "distorted",
                  resolution: str = "") -> EvalReport:
    """Fresh meshes and simulations on another geometry, evaluated without retraining."""
    sim = sim or HeatConfig()
    cfg = HeatConfig(**{**asdict(sim), "domain": domain})
    trajs = generate("heat", cfg, n_sims, seed)
    tag = "different geometry" if domain != "square" else "same geometry"
    return evaluate(model, windows(trajs, spec), tag, resolution)


def zero_edge_columns(samples, norm, columns) -> list[Sample]:
    """Copies whose chosen edge columns sit at the training mean (zero once normalised)."""
    out = []
    for s in samples:
        e = s.edge_x.copy()
        e[:, columns] = norm.edge_mean[columns]
        out.append(replace(s, edge_x=e))
    return out


def parameter_ablation(model: gn.MpgnnModel, samples) -> tuple[float, float]:
    """Normalised test MSE with and without the PDE-parameter edge columns."""
    cols = list(range(2, model.edge_dim))
    if not cols:
        raise ValueError("model has no PDE-parameter edge features")
    full = evaluate(model, samples).mean_mse_norm
    ablated = evaluate(model, zero_edge_columns(samples, model.norm, cols)).mean_mse_norm
    return full, ablated


# -- frame ablation ----------------------------------------------------------

ABLATION_GAPS = {2: 40, 3: 25, 4: 20, 5: 15, 8: 10}
ABLATION_TARGET_OFFSET = 80


def ablation_spec(n: int, max_windows: int = 20) -> WindowSpec:
    return WindowSpec(n, 1, ABLATION_GAPS[n], ABLATION_TARGET_OFFSET, max_windows)


def frame_ablation(ns, train_trajs, val_trajs, test_trajs, transfer_trajs,
                   config: TrainConfig) -> list[dict]:
    """One model per input-frame count; target 80 recorded steps after the last input."""
    rows = []
    for n in ns:
        spec = ablation_spec(n)
        data = SampleSet(windows(train_trajs, spec), windows(val_trajs, spec))
        cfg = TrainConfig(**{**asdict(config), "n": n, "checkpoint": ""})
        res = train(cfg, data, window_spec=spec)
        same = evaluate(res.model, windows(test_trajs, spec))
        other = evaluate(res.model, windows(transfer_trajs, spec), "different geometry")
        rows.append({"n": n, "gap": spec.gap, "same_mse": same.mean_mse,
                     "transfer_mse": other.mean_mse, "same_mse_norm": same.mean_mse_norm,
                     "transfer_mse_norm": other.mean_mse_norm})
    return rows


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# -- recurrent rollout -------------------------------------------------------

@dataclass
class Rollout:
    predictions: np.ndarray  # (steps, N)
    per_step_mse: list[float]


def rollout(model: gn.MpgnnModel, graph, pde: PdeSpec, initial: np.ndarray, steps: int,
            truth: np.ndarray | None = None, teacher_forcing: bool = False,
            allow_general: bool = False) -> Rollout:
    """Autoregressive prediction from the first ``n`` frames.

    ``initial`` is ``(n, N)``; each prediction replaces the oldest frame.
    ``truth`` holds the following ``steps`` frames when errors are wanted.
    With ``teacher_forcing`` the true frame is fed back instead.
    """
    from .dataset import assemble_features

    n = model.n_in
    if model.n_out != 1:
        raise ValueError("rollout needs a single-frame (m = 1) model")
    if n != 3 and not allow_general:
        raise ValueError(f"rollout expects an n = 3 model (got n = {n}); pass allow_general")
    frames = np.array(initial, dtype=float)
    if frames.shape != (n, graph.n_nodes):
        raise ValueError(f"initial frames must have shape ({n}, {graph.n_nodes})")
    if teacher_forcing and truth is None:
        raise ValueError("teacher forcing needs ground truth")
    preds, errs = [], []
    for k in range(steps):
        node_x, edge_x = assemble_features(graph, frames, pde)
        batch = gn.make_batch([(node_x, graph.edges, edge_x, None)])
        nxt = gn.forward(model, batch)[:, 0]
        preds.append(nxt)
        if truth is not None:
            errs.append(float(np.mean((nxt - truth[k]) ** 2)))
        feed = truth[k] if teacher_forcing else nxt
        frames = np.concatenate([frames[1:], feed[None]])
    return Rollout(np.array(preds), errs)


def rollout_study(model: gn.MpgnnModel, trajs, gap: int, steps: int = 8, start: int = 0,
                  teacher_forcing: bool = False):
    """Mean per-step MSE over trajectories and its Spearman correlation with step."""
    n = model.n_in
    curves = []
    for tr in trajs:
        idx = [start + i * gap for i in range(n + steps)]
        if idx[-1] >= tr.n_frames:
            raise ValueError(f"trajectory too short for {steps} rollout steps")
        f = tr.frames[idx]
        r = rollout(model, tr.graph, tr.pde, f[:n], steps, f[n:], teacher_forcing,
                    allow_general=True)
        curves.append(r.per_step_mse)
    mean = np.mean(curves, axis=0)
    rho = spearmanr(np.arange(1, steps + 1), mean).statistic
    return mean, float(rho)


# -- resolution / geometry benchmark ---------------------------------------

@dataclass
class BenchConfig:
    high_edge: float = 0.1
    low_edge: float = 0.2
    n_train: int = 40
    n_val: int = 5
    n_test: int = 10
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    spec: WindowSpec = field(default_factory=WindowSpec)
    heat: HeatConfig = field(default_factory=lambda: HeatConfig(n_steps=100))


def benchmark_matrix(cfg: BenchConfig) -> list[dict]:
    """Train on high- and low-resolution squares; test on same and distorted geometry.

    Resolutions are mean edge lengths; each domain gets the point count that
    reaches them. Rows follow ``(train_res, eval_geometry, eval_res, mse, rel_l2)``.
    """
    edge = {"high": cfg.high_edge, "low": cfg.low_edge}

    def points(dom, res):
        return points_for_edge_length(dom, edge[res], cfg.seed)

    rows = []
    for ti, train_res in enumerate(("high", "low")):
        heat = HeatConfig(**{**asdict(cfg.heat), "domain": "square",
                             "n_points": points(unit_square(), train_res)})
        sims = generate("heat", heat, cfg.n_train + cfg.n_val + cfg.n_test, child_seed(cfg.seed, ti))
        tr, va, te = (sims[:cfg.n_train], sims[cfg.n_train:cfg.n_train + cfg.n_val],
                      sims[cfg.n_train + cfg.n_val:])
        data = SampleSet(windows(tr, cfg.spec), windows(va, cfg.spec))
        model = train(cfg.train, data, window_spec=cfg.spec).model
        same = evaluate(model, windows(te, cfg.spec), "same geometry", train_res)
        rows.append({"train_res": train_res, "eval_geometry": "same", "eval_res": train_res,
                     "mse": same.mean_mse, "rel_l2": same.mean_rel_l2})
        for ei, eval_res in enumerate(("low", "high")):
            other = HeatConfig(**{**asdict(heat),
                                  "n_points": points(make_distorted_domain(), eval_res)})
            rep = transfer_test(model, cfg.spec, cfg.n_test, child_seed(cfg.seed, 10 + ti, ei),
                                other, "distorted", eval_res)
            rows.append({"train_res": train_res, "eval_geometry": "different", "eval_res": eval_res,
                         "mse": rep.mean_mse, "rel_l2": rep.mean_rel_l2})
    return rows
