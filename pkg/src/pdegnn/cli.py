"""Command-line entry point: ``pdegnn <subcommand> [options]``.

Options may also come from a flat ``key = value`` file given with
``--config``; explicit flags take precedence. Every run writes the effective
settings to ``<out-dir>/<subcommand>-<hash>.cfg``, which can be passed back
through ``--config`` to repeat the run. Failures print a single line
``error: <kind>: <message>`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import pipeline as pl
from .dataset import Dataset, assign_splits, build_manifest, save_manifest, window
from .fem import PdeSpec, parse_bc, simulate
from .formats import atomic_write, load_graph, load_trajectory, save_graph, save_trajectory, validate
from .graphnet import load_checkpoint
from .mesh import build_mesh, mean_edge_length, periodic_square, points_for_edge_length

THREADS_ENV = "PDEGNN_THREADS"
# options that never enter the resolved config
_NOT_CONFIG = {"command", "config", "help"}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads (default from ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pdegnn", description="Mesh-based learned PDE time stepping.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    def mesh_args(q, nodes=196):
        q.add_argument("--domain", choices=["square", "distorted", "periodic"], default="square")
        q.add_argument("--nodes", type=int, default=None,
                       help=f"random points sampled before boundary points are added (default {nodes})")
        q.add_argument("--edge-length", type=float, default=None,
                       help="target mean edge length (alternative to --nodes)")

    q = add("mesh", "triangulate a sampled domain")
    mesh_args(q)
    q.add_argument("-o", "--output", required=True)

    q = add("simulate", "run a ground-truth solver")
    q.add_argument("--pde", choices=["heat", "advection_diffusion", "navier_stokes"], default="heat")
    q.add_argument("--bc", default=None, help="e.g. top=200,left=0 or left=periodic,top=neumann")
    mesh_args(q)
    q.add_argument("--mesh", default=None, help="existing PGN1 graph instead of sampling one")
    q.add_argument("--t-end", type=float, default=0.064)
    q.add_argument("--dt", type=float, default=8e-4)
    q.add_argument("--record-every", type=int, default=1)
    q.add_argument("--ic", default="0", help="constant value, or fourier:a1,a2,a3,a4")
    q.add_argument("--lambda1", type=float, default=1.0)
    q.add_argument("--lambda2", type=float, default=1.0)
    q.add_argument("--nu", type=float, default=3e-4)
    q.add_argument("--grid", type=int, default=64, help="spectral grid size")
    q.add_argument("--mass", choices=["lumped", "consistent"], default=None)
    q.add_argument("-o", "--output", required=True)

    q = add("dataset", "generate simulations and a manifest, or index existing trajectories")
    q.add_argument("--pde", choices=["heat", "advection_diffusion"], default="heat")
    q.add_argument("--traj", nargs="*", default=None, help="existing trajectory files")
    q.add_argument("--sims", type=int, default=150)
    q.add_argument("--domain", choices=["square", "distorted"], default="square")
    q.add_argument("--nodes", type=int, default=None)
    q.add_argument("--steps", type=int, default=None, help="solver steps per simulation")
    q.add_argument("--n", type=int, default=4)
    q.add_argument("--m", type=int, default=1)
    q.add_argument("--gap", type=int, default=None, help="default 20 (heat) or 200 (advection)")
    q.add_argument("--target-offset", type=int, default=None)
    q.add_argument("--max-windows", type=int, default=20)
    q.add_argument("--split", default="0.8,0.1,0.1")
    q.add_argument("-o", "--output", required=True)

    q = add("train", "train a model on a manifest")
    q.add_argument("--dataset", required=True)
    tc = pl.TrainConfig()
    q.add_argument("--epochs", type=int, default=tc.epochs)
    q.add_argument("--lr", type=float, default=tc.base_lr)
    q.add_argument("--lr-factor", type=float, default=tc.lr_factor)
    q.add_argument("--lr-every", type=int, default=tc.lr_every)
    q.add_argument("--batch-size", type=int, default=tc.batch_size)
    q.add_argument("--layers", type=int, default=tc.K)
    q.add_argument("--latent", type=int, default=tc.latent)
    q.add_argument("--hidden", type=int, default=tc.hidden)
    q.add_argument("--aggregation", choices=["mean", "sum"], default=tc.aggregation)
    q.add_argument("--dtype", choices=["float32", "float64"], default=tc.dtype)
    q.add_argument("--residual", action=argparse.BooleanOptionalAction, default=tc.residual)
    q.add_argument("--resume", action="store_true")
    q.add_argument("-o", "--output", required=True, help="checkpoint path")

    q = add("eval", "evaluate a checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", default=None)
    q.add_argument("--split", default="test")
    q.add_argument("--traj", nargs="*", default=None)
    q.add_argument("-o", "--output", required=True, help="report CSV")

    q = add("transfer", "evaluate a checkpoint on fresh simulations in another geometry")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--sims", type=int, default=20)
    q.add_argument("--domain", choices=["square", "distorted"], default="distorted")
    q.add_argument("--nodes", type=int, default=None)
    q.add_argument("-o", "--output", required=True)

    q = add("ablate", "train one model per input-frame count")
    q.add_argument("--frames", default="2,3,4,5,8")
    q.add_argument("--sims", type=int, default=60)
    q.add_argument("--transfer-sims", type=int, default=20)
    q.add_argument("--epochs", type=int, default=10)
    q.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    q.add_argument("-o", "--output", required=True)

    q = add("rollout", "chain single-step predictions")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--traj", required=True)
    q.add_argument("--steps", type=int, default=8)
    q.add_argument("--start", type=int, default=0)
    q.add_argument("--gap", type=int, default=None, help="default: the checkpoint's frame gap")
    q.add_argument("--teacher-forcing", action="store_true")
    q.add_argument("--allow-general", action="store_true", help="permit models with n != 3")
    q.add_argument("-o", "--output", required=True)

    q = add("bench", "resolution and geometry benchmark grid")
    bc = pl.BenchConfig()
    q.add_argument("--sims", type=int, default=bc.n_train)
    q.add_argument("--epochs", type=int, default=bc.train.epochs)
    q.add_argument("--high-edge", type=float, default=bc.high_edge, help="mean edge length")
    q.add_argument("--low-edge", type=float, default=bc.low_edge, help="mean edge length")
    q.add_argument("-o", "--output", required=True)

    q = add("plot", "rasterise a field to PPM and CSV")
    q.add_argument("--traj", default=None)
    q.add_argument("--graph", default=None, help="PGN1 graph for --values")
    q.add_argument("--values", default=None, help="text file, one nodal value per line")
    q.add_argument("--frame", type=int, default=-1)
    q.add_argument("--checkpoint", default=None, help="with --traj: prediction/truth/error triptych")
    q.add_argument("--start", type=int, default=0)
    q.add_argument("--width", type=int, default=200)
    q.add_argument("--height", type=int, default=200)
    q.add_argument("-o", "--output", required=True, help="output stem (.ppm and .csv are added)")

    q = add("validate", "check any PGN1 / PTR1 / PMP1 / manifest file")
    q.add_argument("files", nargs="+")
    return p


def read_config(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise CliError("missing-file", f"config file {path} not found")
    out = {}
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError("config", f"{path}:{no}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise CliError("usage", f"unknown subcommand {command}")


def _coerce(action, text: str):
    if action.nargs in ("*", "+"):
        return text.split() if text else []
    if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise CliError("config", f"{action.dest}: expected true/false, got {text!r}")
    if text == "None":
        return None
    try:
        value = action.type(text) if action.type else text
    except ValueError:
        raise CliError("config", f"{action.dest}: invalid value {text!r}") from None
    if action.choices is not None and value not in action.choices:
        raise CliError("config", f"{action.dest}: {value!r} not in {sorted(action.choices)}")
    return value


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse(argv):
    parser = build_parser()
    path = _config_path(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    if path and command:
        sp = _subparser(parser, command)
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for k, v in read_config(path).items():
            if k in _NOT_CONFIG or k not in actions:
                raise CliError("config", f"unknown key {k!r} for {command}")
            defaults[k] = _coerce(actions[k], v)
        sp.set_defaults(**defaults)
        # settings supplied by the file no longer have to appear on the command line
        for a in sp._actions:
            if a.dest in defaults:
                a.required = False
                if not a.option_strings:
                    a.nargs = "*"
    return parser.parse_args(argv)


def resolved_text(args) -> str:
    lines = []
    for k, v in sorted(vars(args).items()):
        if k in _NOT_CONFIG or k == "verbose":
            continue
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_resolved(args) -> str:
    text = resolved_text(args)
    # the name depends on the settings only, not on where they are written
    keyed = "".join(ln + "\n" for ln in text.splitlines() if not ln.startswith("out_dir ="))
    digest = hashlib.sha256(f"{args.command}\n{keyed}".encode()).hexdigest()[:12]
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, f"{args.command}-{digest}.cfg")
    atomic_write(path, text.encode())
    return path


def _out(args, path):
    """Relative outputs land in --out-dir."""
    full = path if os.path.isabs(path) else os.path.join(args.out_dir, path)
    os.makedirs(os.path.dirname(os.path.abspath(full)), exist_ok=True)
    return full


def _need(path):
    if path is not None and not os.path.exists(path):
        raise CliError("missing-file", f"{path} not found")
    return path


def _mesh(args):
    if args.nodes is not None and args.edge_length is not None:
        raise CliError("conflict", "--nodes and --edge-length are mutually exclusive")
    domain = periodic_square() if args.domain == "periodic" else pl.make_domain(args.domain)
    n = args.nodes
    if args.edge_length is not None:
        n = points_for_edge_length(domain, args.edge_length, args.seed)
    return domain, build_mesh(domain, 196 if n is None else n, args.seed)


# -- subcommands -------------------------------------------------------------

def cmd_mesh(args):
    _, g = _mesh(args)
    save_graph(_out(args, args.output), g)
    print(f"nodes {g.n_nodes} edges {g.n_edges} triangles {len(g.triangles)} "
          f"mean_edge {mean_edge_length(g):.6g}")


def _initial_condition(text: str):
    if text.startswith("fourier:"):
        coeffs = [float(v) for v in text[len("fourier:"):].split(",")]
        if len(coeffs) != 4:
            raise CliError("usage", "fourier initial condition needs four coefficients")
        return pl.advection_ic(coeffs), "fourier " + ",".join(f"{c:.17g}" for c in coeffs)
    try:
        return float(text), f"constant {float(text):g}"
    except ValueError:
        raise CliError("usage", f"unrecognised --ic {text!r}") from None


def cmd_simulate(args):
    if args.mesh is not None and (args.nodes is not None or args.edge_length is not None):
        raise CliError("conflict", "--mesh cannot be combined with --nodes or --edge-length")
    if args.pde == "navier_stokes":
        from .spectral import simulate_ns
        if args.mesh:
            g = load_graph(_need(args.mesh))
        else:
            args.domain = "periodic"
            _, g = _mesh(args)
        tr = simulate_ns(args.grid, args.nu, args.t_end, args.dt, args.record_every, args.seed, g)
    else:
        default_bc = ("top=0,right=0,bottom=0,left=0" if args.pde == "heat"
                      else "left=periodic,right=periodic,top=neumann,bottom=neumann")
        bc = parse_bc(args.bc or default_bc)
        domain = pl.make_domain("square" if args.domain == "periodic" else args.domain)
        if args.mesh:
            g = load_graph(_need(args.mesh))
        else:
            domain, g = _mesh(args)
        pde = PdeSpec(args.pde, args.lambda1, args.lambda2, bc)
        ic, label = _initial_condition(args.ic)
        tr = simulate(g, pde, ic, args.t_end, args.dt, args.dt * args.record_every, args.seed,
                      domain=domain, mass_kind=args.mass, ic_label=label)
    save_trajectory(_out(args, args.output), tr)
    print(f"frames {tr.n_frames} nodes {tr.graph.n_nodes} min {tr.frames.min():.6g} max {tr.frames.max():.6g}")


def _split_fractions(text):
    try:
        f = tuple(float(v) for v in text.split(","))
    except ValueError:
        f = ()
    if len(f) != 3 or any(v < 0 for v in f) or abs(sum(f) - 1) > 1e-9:
        raise CliError("usage", "--split needs three non-negative fractions summing to 1")
    return f


def cmd_dataset(args):
    fractions = _split_fractions(args.split)
    gap = args.gap if args.gap is not None else (20 if args.pde == "heat" else 200)
    out = _out(args, args.output)
    root = os.path.dirname(os.path.abspath(out))
    if args.traj:
        paths = [_need(p) for p in args.traj]
    else:
        if args.pde == "heat":
            cfg = pl.HeatConfig(domain=args.domain)
        else:
            cfg = pl.AdvectionConfig()
        if args.nodes is not None:
            cfg.n_points = args.nodes
        if args.steps is not None:
            cfg.n_steps = args.steps
        trajs = pl.generate(args.pde, cfg, args.sims, args.seed, args.threads)
        stem = os.path.splitext(os.path.basename(out))[0]
        paths = []
        for i, tr in enumerate(trajs):
            p = os.path.join(root, f"{stem}-{i:04d}.ptr")
            save_trajectory(p, tr)
            paths.append(p)
    splits = assign_splits(len(paths), fractions, args.seed)
    man = build_manifest(paths, splits, args.n, args.m, gap, args.max_windows,
                         args.target_offset, root)
    save_manifest(out, man)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(f"trajectories {len(paths)} train {counts['train']} val {counts['val']} test {counts['test']}")


def cmd_train(args):
    data = Dataset.load(_need(args.dataset))
    man = data.manifest
    cfg = pl.TrainConfig(epochs=args.epochs, base_lr=args.lr, lr_factor=args.lr_factor,
                         lr_every=args.lr_every, batch_size=args.batch_size, seed=args.seed,
                         n=man.n, m=man.m, K=args.layers, latent=args.latent, hidden=args.hidden,
                         residual=args.residual, dtype=args.dtype, aggregation=args.aggregation,
                         dataset=os.path.abspath(args.dataset), checkpoint=_out(args, args.output))
    spec = pl.WindowSpec(man.n, man.m, man.gap, man.target_offset)
    if args.resume:
        _need(cfg.checkpoint + ".last")
    res = pl.train(cfg, data, resume=args.resume, window_spec=spec)
    stem = os.path.splitext(cfg.checkpoint)[0]
    atomic_write(stem + "-loss.csv", pl.loss_curve_csv(res.history).encode())
    print(f"best_epoch {res.best_epoch} best_val {res.best_val:.6e}")


def _load_model(path):
    model, _, _, _, meta = load_checkpoint(_need(path))
    w = (meta or {}).get("window") or {}
    return model, pl.WindowSpec(**w) if w else None


def _write_report(args, rep: pl.EvalReport):
    out = _out(args, args.output)
    atomic_write(out, rep.to_csv().encode())
    text = rep.to_text()
    atomic_write(os.path.splitext(out)[0] + ".txt", text.encode())
    sys.stdout.write(text)


def cmd_eval(args):
    model, spec = _load_model(args.checkpoint)
    if args.dataset:
        samples = Dataset.load(_need(args.dataset)).samples(args.split)
    elif args.traj:
        if spec is None:
            raise CliError("usage", "checkpoint has no window settings; use --dataset")
        samples = pl.windows([load_trajectory(_need(p)) for p in args.traj], spec)
    else:
        raise CliError("usage", "eval needs --dataset or --traj")
    if not samples:
        raise CliError("usage", f"no samples in split {args.split!r}")
    _write_report(args, pl.evaluate(model, samples))


def cmd_transfer(args):
    model, spec = _load_model(args.checkpoint)
    if spec is None:
        raise CliError("usage", "checkpoint has no window settings")
    sim = pl.HeatConfig()
    if args.nodes is not None:
        sim.n_points = args.nodes
    sim.n_steps = max(sim.n_steps, (spec.n - 1) * spec.gap + spec.offset() + spec.max_windows)
    _write_report(args, pl.transfer_test(model, spec, args.sims, args.seed, sim, args.domain))


def cmd_ablate(args):
    try:
        ns = [int(v) for v in args.frames.split(",")]
    except ValueError:
        raise CliError("usage", "--frames takes comma-separated integers") from None
    bad = [n for n in ns if n not in pl.ABLATION_GAPS]
    if bad:
        raise CliError("usage", f"frame counts must be among {sorted(pl.ABLATION_GAPS)}")
    spans = [pl.ablation_spec(n) for n in ns]
    steps = max((s.n - 1) * s.gap + s.offset() + s.max_windows for s in spans)
    heat = pl.HeatConfig(n_steps=steps)
    n_val = max(1, args.sims // 10)
    sims = pl.generate("heat", heat, args.sims + n_val * 2, args.seed, args.threads)
    other = pl.generate("heat", pl.HeatConfig(n_steps=steps, domain="distorted"),
                        args.transfer_sims, pl.child_seed(args.seed, 99), args.threads)
    cfg = pl.TrainConfig(epochs=args.epochs, seed=args.seed, dtype=args.dtype)
    rows = pl.frame_ablation(ns, sims[:args.sims], sims[args.sims:args.sims + n_val],
                             sims[args.sims + n_val:], other, cfg)
    atomic_write(_out(args, args.output), pl.rows_csv(rows).encode())
    sys.stdout.write(pl.rows_csv(rows))


def cmd_rollout(args):
    model, spec = _load_model(args.checkpoint)
    tr = load_trajectory(_need(args.traj))
    gap = args.gap if args.gap is not None else (spec.gap if spec else None)
    if gap is None:
        raise CliError("usage", "checkpoint has no frame gap; pass --gap")
    n = model.n_in
    idx = [args.start + i * gap for i in range(n + args.steps)]
    if idx[-1] >= tr.n_frames:
        raise CliError("usage", f"trajectory has {tr.n_frames} frames; rollout needs {idx[-1] + 1}")
    f = tr.frames[idx]
    r = pl.rollout(model, tr.graph, tr.pde, f[:n], args.steps, f[n:], args.teacher_forcing,
                   args.allow_general)
    rows = [{"step": k + 1, "frame": idx[n + k], "mse": e,
             "rel_l2": pl.relative_l2(r.predictions[k], f[n + k])}
            for k, e in enumerate(r.per_step_mse)]
    text = pl.rows_csv(rows)
    atomic_write(_out(args, args.output), text.encode())
    sys.stdout.write(text)


def cmd_bench(args):
    base = pl.BenchConfig()
    cfg = pl.BenchConfig(high_edge=args.high_edge, low_edge=args.low_edge,
                         n_train=args.sims, seed=args.seed,
                         train=pl.TrainConfig(**{**asdict(base.train), "epochs": args.epochs,
                                                 "seed": args.seed}))
    rows = pl.benchmark_matrix(cfg)
    text = pl.rows_csv(rows)
    atomic_write(_out(args, args.output), text.encode())
    sys.stdout.write(text)


def cmd_plot(args):
    from . import plot

    stem = _out(args, args.output)
    if args.values is not None:
        if args.graph is None:
            raise CliError("usage", "--values needs --graph")
        g = load_graph(_need(args.graph))
        vals = np.loadtxt(_need(args.values), ndmin=1)
        if vals.size != g.n_nodes:
            raise CliError("shape", f"field has {vals.size} values but the graph has {g.n_nodes} nodes")
        plot.write_plot(stem, g, vals, args.width, args.height)
    elif args.traj is not None:
        tr = load_trajectory(_need(args.traj))
        if args.checkpoint:
            model, spec = _load_model(args.checkpoint)
            if spec is None:
                raise CliError("usage", "checkpoint has no window settings")
            s = window(tr, spec.n, spec.m, spec.gap, target_offset=spec.offset(),
                       offsets=[args.start])[0]
            pred = pl.predict(model, s)[:, 0]
            plot.write_triptych(stem, tr.graph, pred, s.targets[:, 0], args.width, args.height)
        else:
            if not -tr.n_frames <= args.frame < tr.n_frames:
                raise CliError("usage", f"frame {args.frame} out of range (0..{tr.n_frames - 1})")
            plot.write_plot(stem, tr.graph, tr.frames[args.frame], args.width, args.height)
    else:
        raise CliError("usage", "plot needs --traj or --graph with --values")
    print(f"wrote {stem}.ppm {stem}.csv")


def cmd_validate(args):
    bad = 0
    for path in args.files:
        if not os.path.exists(path):
            print(f"{path}: missing file")
            bad += 1
            continue
        problems = validate(path)
        if problems:
            bad += 1
            for v in problems:
                print(f"{path}: {v}")
        else:
            print(f"{path}: OK")
    return 1 if bad else 0


COMMANDS = {
    "mesh": cmd_mesh, "simulate": cmd_simulate, "dataset": cmd_dataset, "train": cmd_train,
    "eval": cmd_eval, "transfer": cmd_transfer, "ablate": cmd_ablate, "rollout": cmd_rollout,
    "bench": cmd_bench, "plot": cmd_plot, "validate": cmd_validate,
}


def run(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else list(argv))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        write_resolved(args)
        return COMMANDS[args.command](args) or 0
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
