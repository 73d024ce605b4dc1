"""Command-line entry point.

Every subcommand wraps one library operation. Exit codes: 0 success,
1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import ProjectConfig, load_config
from .errors import ConfigError, OccluforgeError, ParseError, PreconditionError

log = logging.getLogger("occluforge")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


class Context:
    def __init__(self, args):
        self.args = args
        if args.config:
            self.config = load_config(args.config)
            self.base = Path(args.config).resolve().parent
        else:
            self.config = ProjectConfig()
            self.base = Path.cwd()
        self.seed = args.seed if args.seed is not None else self.config.seeds.base
        self.threads = 1 if args.deterministic else max(1, args.threads)

    def path(self, name: str, override=None) -> Path:
        if override:
            return Path(override)
        p = self.config.path(name, self.base)
        if p is None:
            raise ConfigError(f"no {name!r} given (set it in the config or on the command line)")
        return p

    def out(self, default: str) -> Path:
        return Path(self.args.out or default)


def _versions() -> dict:
    import numba
    import scipy
    import torch

    from ._accel import USE_NUMBA

    return {"occluforge": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "numba": numba.__version__,
            "numba_enabled": USE_NUMBA}


def write_run_manifest(ctx: Context, outputs: dict) -> Path:
    """Reproducibility record next to the primary output: config hash, seeds, versions."""
    out = ctx.out(".")
    target = out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(ctx.args).items())
            if k not in ("func", "json_errors", "verbose")}
    io.write_json(target, {
        "command": ctx.args.command,
        "arguments": argv,
        "config_sha256": ctx.config.digest(),
        "seeds": {"seed": ctx.seed, **ctx.config.seeds.model_dump()},
        "deterministic": bool(ctx.args.deterministic),
        "threads": ctx.threads,
        "versions": _versions(),
        "outputs": outputs,
    })
    return target


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _character(ctx: Context):
    from .kinematics import Character

    skeleton = io.load_skeleton(ctx.path("skeleton"))
    mesh = io.load_mesh(ctx.path("mesh"))
    layout = io.load_layout(ctx.path("layout"))
    return Character(skeleton, mesh, layout)


def _clean_markers(ctx: Context, character, motion):
    from .kinematics import marker_positions

    verts = character.vertices(motion)
    return verts, marker_positions(character.layout, verts, character.mesh.triangles)


def _dataset(ctx: Context):
    from .dataset import MocapDataset

    return MocapDataset.load(ctx.path("dataset", getattr(ctx.args, "dataset", None)))


def _train_config(ctx: Context):
    from .solver.losses import LossWeights
    from .solver.train import TrainConfig

    t = ctx.config.training
    return TrainConfig(t.position_steps, t.rotation_steps, t.batch_size, t.lr, t.clip, t.cosine,
                       LossWeights(t.lambda1, t.lambda2, t.lambda3), ctx.seed,
                       ctx.args.deterministic or ctx.threads == 1, ctx.threads)


def _solver_config(ctx: Context, ds):
    from .solver.models import SolverConfig

    s = ctx.config.solver
    return SolverConfig(ds.character.layout.n_markers, ds.character.skeleton.n_joints, s.width,
                        s.conv_blocks, s.kernel, s.encoder_blocks, s.decoder_blocks,
                        s.rotation_blocks, s.heads, s.ff_ratio, False, ctx.seed, s.dtype)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_toygen(ctx: Context) -> int:
    from .toy import ToyConfig, generate_toy_dataset

    t = ctx.config.toy
    c = ctx.config.corruption
    cfg = ToyConfig(t.n_joints, t.n_markers, t.n_frames, t.n_sequences, t.motion_richness, ctx.seed,
                    rig=t.rig, occl_prob=c.occl_prob, shift_prob=c.shift_prob,
                    shift_sigma=c.shift_sigma, threads=ctx.threads)
    ds = generate_toy_dataset(cfg)
    out = ctx.out("toy_dataset")
    digest = ds.save(out)
    _emit({"container": str(out), "sha256": digest, "sequences": len(ds.sequences),
           "frames": ds.n_frames})
    write_run_manifest(ctx, {"container": digest})
    return EXIT_OK


def cmd_simulate(ctx: Context) -> int:
    from .occlusion import simulate_visibility

    character = _character(ctx)
    rig = io.load_rig(ctx.path("rig"))
    motion = io.load_motion(ctx.path("motion"))
    verts, markers = _clean_markers(ctx, character, motion)
    s = ctx.config.simulation
    mask = simulate_visibility(markers, verts, character.mesh.triangles, rig, s.min_cameras,
                               s.skin_eps, s.frame_rate, ctx.threads)
    out = ctx.out("mask.bin")
    io.save_mask(out, mask)
    digest = io.sha256_file(out)
    _emit({"mask": str(out), "sha256": digest, "frames": mask.visible.shape[0],
           "markers": mask.visible.shape[1], "occluded_fraction": float(mask.occluded.mean())})
    write_run_manifest(ctx, {"mask": digest})
    return EXIT_OK


def cmd_corrupt(ctx: Context) -> int:
    from .kinematics import fk_arrays
    from .occlusion import corrupt

    character = _character(ctx)
    motion = io.load_motion(ctx.path("motion"))
    _, clean = _clean_markers(ctx, character, motion)
    vis = io.load_mask(ctx.args.mask).visible if ctx.args.mask else None
    c = ctx.config.corruption
    seed = ctx.args.seed if ctx.args.seed is not None else ctx.config.seeds.corruption
    res = corrupt(clean, vis, c.occl_prob, c.shift_prob, c.shift_sigma, seed)
    _, joints = fk_arrays(character.skeleton, motion.root_translations, motion.rotations)
    block = io.FrameBlock(clean, np.where(res.visibility[..., None], res.positions, 0.0), joints,
                          res.visibility, res.shifted)
    out = ctx.out("frames.mfrm")
    io.save_frames(out, block)
    digest = io.sha256_file(out)
    _emit({"frames": str(out), "sha256": digest, "occluded_fraction": float(res.occluded.mean()),
           "shifted_fraction": float(res.shifted.mean())})
    write_run_manifest(ctx, {"frames": digest})
    return EXIT_OK


def cmd_stats(ctx: Context) -> int:
    from .occlusion import occlusion_stats

    mask = io.load_mask(ctx.args.mask)
    names = io.load_layout(ctx.path("layout")).names if ctx.config.layout else None
    stats = occlusion_stats(mask, names)
    out = ctx.out("stats.csv")
    io.save_stats_csv(out, stats)
    _emit({"stats": str(out), "occl_prob": [float(p) for p in stats.probability],
           "mean_run_length": [float(x) for x in stats.mean_run_length]})
    write_run_manifest(ctx, {"stats": io.sha256_file(out)})
    return EXIT_OK


def cmd_select_rig(ctx: Context) -> int:
    from .occlusion import Scene, select_camera_rigs

    sel = ctx.config.rig_selection
    if not sel.candidates or not sel.reference_stats:
        raise ConfigError("rig_selection needs candidates and reference_stats")
    character = _character(ctx)
    motion = io.load_motion(ctx.path("motion"))
    verts, markers = _clean_markers(ctx, character, motion)
    scene = Scene(markers, verts, character.mesh.triangles)
    rigs = [io.load_rig(ctx.base / p if not Path(p).is_absolute() else p) for p in sel.candidates]
    ref = io.load_stats_csv(ctx.base / sel.reference_stats)
    ranked = select_camera_rigs(rigs, [scene], ref, min(sel.k, len(rigs)), sel.order,
                                ctx.config.simulation.min_cameras, threads=ctx.threads)
    out = ctx.out("rig_ranking.csv")
    io.write_csv(out, ["rank", "candidate", "path", "kl_divergence"],
                 ([r, i, sel.candidates[i], float(d)] for r, (i, _, d) in enumerate(ranked)))
    _emit({"ranking": [{"candidate": i, "path": sel.candidates[i], "kl": float(d)}
                       for i, _, d in ranked]})
    write_run_manifest(ctx, {"ranking": io.sha256_file(out)})
    return EXIT_OK


def cmd_oversample(ctx: Context) -> int:
    from .occlusion import oversample

    ds = _dataset(ctx)
    o = ctx.config.oversampling
    fractions = [float(s.occlusion_fractions.mean()) for s in ds.sequences]
    _, idx = oversample(list(range(len(ds.sequences))), fractions, o.occlusion_threshold,
                        o.target_ratio, ctx.seed, o.max_factor)
    out = ctx.out("oversampled.json")
    io.write_json(out, {"sequences": [ds.sequences[i].name for i in idx], "indices": idx,
                        "fractions": fractions})
    _emit({"out": str(out), "original": len(ds.sequences), "resampled": len(idx)})
    write_run_manifest(ctx, {"oversampled": io.sha256_file(out)})
    return EXIT_OK


def cmd_train(ctx: Context) -> int:
    from .solver.checkpoint import save_solver
    from .solver.train import CURVE_COLUMNS, train, train_merged

    ds = _dataset(ctx)
    train_ids, _ = ds.split(ctx.config.training.holdout, ctx.config.seeds.split)
    batch = ds.batch(train_ids)
    mcfg = _solver_config(ctx, ds)
    tcfg = _train_config(ctx)
    if ctx.args.ablation == "no-decouple":
        res = train_merged(batch, ds.tpose.positions, ds.key_marker_ids, mcfg, tcfg)
    else:
        res = train(batch, ds.tpose.positions, ds.key_marker_ids, mcfg, tcfg,
                    chain=ctx.args.ablation != "no-chain")
    out = ctx.out("model.ofck")
    digest = save_solver(out, res.solver, {"train_config": tcfg.to_dict(),
                                           "ablation": ctx.args.ablation,
                                           "train_sequences": train_ids})
    curve = out.with_name(out.name + ".loss.csv")
    io.write_csv(curve, CURVE_COLUMNS, res.curve.as_rows())
    _emit({"checkpoint": str(out), "sha256": digest, "loss_curve": str(curve)})
    write_run_manifest(ctx, {"checkpoint": digest, "loss_curve": io.sha256_file(curve)})
    return EXIT_OK


def _eval_split(ctx: Context, ds):
    if ctx.args.split == "all":
        return list(range(len(ds.sequences)))
    train_ids, test_ids = ds.split(ctx.config.training.holdout, ctx.config.seeds.split)
    return test_ids if ctx.args.split == "test" else train_ids


def cmd_eval(ctx: Context) -> int:
    from .dataset import dataset_fingerprint
    from .eval import OracleSolver, evaluate
    from .solver.checkpoint import load_solver

    ds = _dataset(ctx)
    batch = ds.batch(_eval_split(ctx, ds))
    if ctx.args.oracle:
        solver, model_hash = OracleSolver(batch), "oracle"
    else:
        if not ctx.args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --oracle")
        solver, _ = load_solver(ctx.args.checkpoint)
        model_hash = io.sha256_file(ctx.args.checkpoint)
    fp = {"model": model_hash, "dataset": dataset_fingerprint(ds), "split": ctx.args.split,
          "oracle": bool(ctx.args.oracle)}
    report = evaluate(solver, batch, tuple(ctx.config.buckets), fp)
    out = ctx.out("eval.csv")
    report.save_csv(out)
    report.save_joint_csv(out.with_name(out.stem + "_joints.csv"), ds.character.skeleton.names)
    print(report.table())
    problems = report.self_check()
    write_run_manifest(ctx, {"report": io.sha256_file(out), "fingerprint": fp})
    if problems:
        for p in problems:
            log.error("report self-check: %s", p)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(ctx: Context) -> int:
    from .solver.gradcheck import position_loss_report, primitive_reports, rotation_loss_report

    n = ctx.args.samples
    reports = primitive_reports(ctx.seed, n)
    reports["position_loss"] = position_loss_report(seed=ctx.seed, n_samples=n)
    reports["rotation_loss"] = rotation_loss_report(seed=ctx.seed, n_samples=n)
    out = ctx.out("gradcheck.csv")
    io.write_csv(out, ["check", "block", "max_relative_error", "passed"],
                 ([name, block, err, err < r.tolerance] for name, r in reports.items()
                  for block, err in r.rows()))
    summary = {name: {"max_relative_error": r.max_error, "passed": r.passed}
               for name, r in reports.items()}
    _emit(summary)
    write_run_manifest(ctx, {"gradcheck": io.sha256_file(out)})
    if not all(r.passed for r in reports.values()):
        log.error("gradient check failed")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_chain_report(ctx: Context) -> int:
    from .solver.chain import ChainPropagation, chain_report, save_chain_report
    from .solver.checkpoint import load_solver
    from .solver.pipeline import MocapSolver

    ds = _dataset(ctx)
    solver, _ = load_solver(ctx.args.checkpoint)
    if not isinstance(solver, MocapSolver):
        raise PreconditionError("chain-report needs a decoupled (position + rotation) checkpoint")
    batch = ds.batch(_eval_split(ctx, ds))
    if not 0 <= ctx.args.frame < len(batch):
        raise PreconditionError(f"frame {ctx.args.frame} outside 0..{len(batch) - 1}")
    f = slice(ctx.args.frame, ctx.args.frame + 1)
    *_, attn = solver.complete(batch.observed[f], batch.visible[f], keep_attention=True)
    names = ds.character.layout.names + ds.character.skeleton.names
    chain = ChainPropagation.from_attention(attn, 0, len(ds.character.layout.names),
                                            len(ds.character.skeleton.names), names)
    rows = chain_report(chain, ctx.args.token, ctx.args.layer)
    out = ctx.out("chain_report.csv")
    save_chain_report(out, rows)
    _emit({"token": names[ctx.args.token], "top": [{"source": r[1], "kind": r[2], "weight": r[4]}
                                                   for r in rows[:5]]})
    write_run_manifest(ctx, {"chain_report": io.sha256_file(out)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="project config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bitwise reproducible")
    common.add_argument("--json-errors", action="store_true",
                        help="report errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="occluforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"occluforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    add("toygen", cmd_toygen, "generate the procedural toy dataset container")
    add("simulate", cmd_simulate, "ray-trace a rig over a motion and write a visibility mask")
    sp = add("corrupt", cmd_corrupt, "apply random occlusion and shifts, write solver frames")
    sp.add_argument("--mask", help="visibility mask to start from (default: all visible)")
    sp = add("stats", cmd_stats, "occlusion statistics of a mask as CSV")
    sp.add_argument("--mask", required=True)
    add("select-rig", cmd_select_rig, "rank candidate rigs by KL divergence to reference stats")
    sp = add("oversample", cmd_oversample, "rebalance heavily occluded sequences")
    sp.add_argument("--dataset")
    sp = add("train", cmd_train, "train the solver on a dataset container")
    sp.add_argument("--dataset")
    sp.add_argument("--ablation", choices=["none", "no-chain", "no-decouple"], default="none")
    sp = add("eval", cmd_eval, "bucketed JPE/JOE report")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    sp.add_argument("--split", choices=["test", "train", "all"], default="test")
    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and loss")
    sp.add_argument("--samples", type=int, default=100)
    sp = add("chain-report", cmd_chain_report, "ranked attention sources for one token")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--token", type=int, required=True, help="marker index, or M + joint index")
    sp.add_argument("--layer", type=int, default=None, help="single layer instead of the product")
    sp.add_argument("--split", choices=["test", "train", "all"], default="test")
    return p


def _fail(args, exc: BaseException, code: int) -> int:
    if args is not None and getattr(args, "json_errors", False):
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, ParseError) and exc.offset is not None:
            err["offset"] = exc.offset
        print(json.dumps(err), file=sys.stderr)
    else:
        print(f"occluforge: error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = None
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        # --json-errors may be present even when parsing failed
        return _fail(argparse.Namespace(json_errors="--json-errors" in argv), exc, EXIT_INVALID)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        ctx = Context(args)
        if args.deterministic:
            from .solver.train import configure_threads

            configure_threads(True)
        return args.func(ctx)
    except (ConfigError, ParseError, PreconditionError, FileNotFoundError) as exc:
        return _fail(args, exc, EXIT_INVALID)
    except (OccluforgeError, OSError, RuntimeError, ValueError) as exc:
        return _fail(args, exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
