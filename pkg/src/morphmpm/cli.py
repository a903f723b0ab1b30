"""Batch front end: morph runs, adjoint checks, and threading benchmarks.

Exit codes: 0 success, 2 configuration / input errors, 3 simulation errors
(the message names the failing timestep), 4 optimization failures, 5 failed
gradient checks. Logs go to stderr; result tables and artifacts paths to
stdout.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import runtime
from .errors import (ConfigError, EmptyGeometry, IoError, LatticeMismatch,
                     LineSearchFailed, MorphError, OptimizationError,
                     OutOfDomain, ParseError, SingularDeformation,
                     SizeMismatch)
from .gradcheck import DIMS, COUNTS, HORIZONS, LOSSES, run_matrix
from .losses import accuracy_pct, make_evaluator
from .optimize import chain_segments
from .scene import FrameRecord, SceneConfig, write_frame
from .sim import ParticleSet, SimParams, advance

log = logging.getLogger("morphmpm")

_LOSS_FLAG = {"position": "position", "mass": "mass", "logmass": "log_mass"}


def _add_common(p):
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: MORPHMPM_THREADS or all cores)")
    p.add_argument("--deterministic", action="store_true",
                   help="ordered reductions; bit-identical across thread counts")
    p.add_argument("--seed", type=int, default=None, help="override RNG seed")


def build_parser():
    ap = argparse.ArgumentParser(prog="morphmpm",
                                 description="shape-morphing control optimizer")
    sub = ap.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("morph", help="optimize controls for a configured scene")
    mp.add_argument("--config", required=True, help="scene JSON file")
    mp.add_argument("--output-dir", default=None, help="artifact directory")
    mp.add_argument("--passes", type=int, default=None,
                    help="refinement passes per segment")
    mp.add_argument("--iters", type=int, default=None,
                    help="optimizer iterations per control layer")
    mp.add_argument("--control-period", type=int, default=None,
                    help="timesteps between control layers")
    mp.add_argument("--segment-len", type=int, default=None,
                    help="timesteps per chained segment")
    mp.add_argument("--loss", choices=sorted(_LOSS_FLAG), default=None,
                    help="objective to minimize")
    _add_common(mp)

    gp = sub.add_parser("gradcheck", help="finite-difference adjoint validation")
    gp.add_argument("--case", default=None,
                    help="run exactly one case, e.g. d3_n16_h3_log_mass")
    gp.add_argument("--dims", default=None, help="comma list, default 2,3")
    gp.add_argument("--counts", default=None, help="comma list, default 1,16,64")
    gp.add_argument("--horizons", default=None, help="comma list, default 1,3,5")
    gp.add_argument("--losses", default=None,
                    help="comma list of position,mass,logmass")
    gp.add_argument("--tol", type=float, default=1e-4)
    gp.add_argument("--corrupt-adjoint", action="store_true",
                    help="inject a 1%% adjoint error; the check must then fail")
    _add_common(gp)

    bp = sub.add_parser("bench", help="forward-step throughput per thread count")
    bp.add_argument("--particles", type=int, default=20000)
    bp.add_argument("--steps", type=int, default=20)
    bp.add_argument("--grid", type=int, default=32)
    bp.add_argument("--dim", type=int, default=3, choices=(2, 3))
    bp.add_argument("--thread-counts", default="1,2,4,8",
                    help="comma list of worker counts to time")
    _add_common(bp)
    return ap


def _apply_common(args):
    if args.threads is not None:
        runtime.set_threads(args.threads)
    else:
        runtime.set_threads(runtime.threads_from_env(runtime.max_threads()))
    runtime.set_deterministic(bool(args.deterministic))


# ---------------------------------------------------------------------------
# morph
# ---------------------------------------------------------------------------

def _override_plan(plan, args):
    kw = {}
    if args.passes is not None:
        kw["passes"] = args.passes
    if args.iters is not None:
        kw["i_max"] = args.iters
    if args.control_period is not None:
        kw["delta_n"] = args.control_period
    if args.segment_len is not None:
        kw["segment_len"] = args.segment_len
    if args.loss is not None:
        kw["loss_kind"] = _LOSS_FLAG[args.loss]
    if not kw:
        return plan
    from dataclasses import replace
    return replace(plan, **kw)


def _write_trace(path, rows, multi_segment):
    cols = ["pass", "layer", "iter", "loss", "gradnorm", "alpha"]
    if multi_segment:
        cols = ["segment"] + cols
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def cmd_morph(args):
    _apply_common(args)
    cfg = SceneConfig.from_file(args.config)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.plan = _override_plan(cfg.plan, args)
    cfg.validate()
    os.makedirs(cfg.output_dir, exist_ok=True)

    source, target = cfg.build()
    log.info("scene: %d particles, %d frames, loss=%s, %d-step segments",
             source.n, cfg.total_frames, cfg.plan.loss_kind,
             cfg.plan.segment_len)
    log.info("threads=%d deterministic=%s", runtime.get_threads(),
             runtime.deterministic())

    with open(os.path.join(cfg.output_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")

    trace = []
    stats = {}
    frames_written = []

    def sink(idx, state, channel):
        frames_written.append(write_frame(
            FrameRecord(idx, state.x, channel), cfg.output_dir))

    t0 = time.perf_counter()
    final, loss0, loss1 = chain_segments(
        source, target, cfg.plan, cfg.total_frames, sink=sink,
        params=cfg.params, trace=trace, stats=stats)
    wall = time.perf_counter() - t0

    n_segments = -(-cfg.total_frames // cfg.plan.segment_len)
    _write_trace(os.path.join(cfg.output_dir, "trace.csv"), trace,
                 multi_segment=n_segments > 1)

    acc = accuracy_pct(loss0, loss1)
    summary = {
        "particles": source.n,
        "frames": cfg.total_frames,
        "segments": n_segments,
        "loss_kind": cfg.plan.loss_kind,
        "initial_loss": loss0,
        "final_loss": loss1,
        "accuracy_pct": acc,
        "trace_rows": len(trace),
        "updates_accepted": sum(1 for r in trace if r["alpha"] > 0.0),
        "threads": runtime.get_threads(),
        "deterministic": runtime.deterministic(),
        "seconds": {"total": wall,
                    "simulate": stats.get("simulate", 0.0),
                    "backprop": stats.get("backprop", 0.0),
                    "linesearch": stats.get("linesearch", 0.0)},
    }
    with open(os.path.join(cfg.output_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")

    log.info("loss %.6g -> %.6g (accuracy %s%%) in %.1fs", loss0, loss1,
             "n/a" if acc is None else f"{acc:.2f}", wall)
    print(f"wrote {len(frames_written)} frames, trace.csv, summary.json "
          f"to {cfg.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _int_list(text, default):
    if text is None:
        return default
    return tuple(int(t) for t in text.split(","))


def cmd_gradcheck(args):
    _apply_common(args)
    if args.losses is None:
        losses = LOSSES
    else:
        try:
            losses = tuple(_LOSS_FLAG[t] for t in args.losses.split(","))
        except KeyError as e:
            raise ConfigError(f"unknown loss {e} in --losses") from None
    try:
        results = run_matrix(
            dims=_int_list(args.dims, DIMS),
            counts=_int_list(args.counts, COUNTS),
            horizons=_int_list(args.horizons, HORIZONS),
            losses=losses,
            seed=args.seed if args.seed is not None else 0,
            tol=args.tol,
            corrupt=args.corrupt_adjoint,
            case_filter=args.case,
            progress=lambda r: print(
                f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24s} "
                f"max rel err {r.max_rel_err:.3e} "
                f"({r.n_checked} entries, {r.seconds:.2f}s)"),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    n_fail = sum(1 for r in results if not r.passed)
    print(f"{len(results) - n_fail}/{len(results)} cases passed")
    return 5 if n_fail else 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _bench_scene(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    params = SimParams(dim=args.dim, grid_res=args.grid,
                       f_ext=(0.0,) * args.dim)
    lo = 0.3 * params.domain
    hi = 0.7 * params.domain
    x = lo + (hi - lo) * rng.random((args.particles, args.dim))
    n_per_cell = 8 if args.dim == 3 else 9
    v0 = np.full(args.particles, params.dx ** args.dim / n_per_cell)
    m = np.full(args.particles, params.rho * v0[0])
    ps = ParticleSet.rest(x, m, v0)
    ps.v = 0.2 * rng.standard_normal(ps.v.shape)
    return params, ps


def cmd_bench(args):
    _apply_common(args)
    counts = _int_list(args.thread_counts, (1, 2, 4, 8))
    params, ps0 = _bench_scene(args)
    advance(ps0.copy(), {}, 1, params)  # compile kernels outside the timing
    rows = []
    for nt in counts:
        runtime.set_threads(nt)
        state = ps0.copy()
        t0 = time.perf_counter()
        state = advance(state, {}, args.steps, params)
        dt = time.perf_counter() - t0
        digest = hashlib.sha256(
            state.x.tobytes() + state.v.tobytes() + state.F.tobytes()
        ).hexdigest()
        rows.append((nt, dt, digest))
    base = rows[0][1]
    print(f"{'threads':>7s} {'seconds':>9s} {'steps/s':>9s} {'speedup':>8s}  state")
    for nt, dt, digest in rows:
        print(f"{nt:7d} {dt:9.3f} {args.steps / dt:9.1f} {base / dt:8.2f}x  "
              f"{digest[:12]}")
    identical = len({d for _, _, d in rows}) == 1
    print(f"bit-identical across thread counts: {'yes' if identical else 'no'}")
    if runtime.deterministic() and not identical:
        log.error("deterministic mode produced thread-count-dependent state")
        return 3
    return 0


# ---------------------------------------------------------------------------

def main(argv=None):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    handler = {"morph": cmd_morph, "gradcheck": cmd_gradcheck,
               "bench": cmd_bench}[args.command]
    try:
        return handler(args)
    except (ConfigError, ParseError, SizeMismatch, LatticeMismatch,
            EmptyGeometry, IoError) as e:
        log.error("%s", e)
        return 2
    except (SingularDeformation, OutOfDomain) as e:
        log.error("simulation failed: %s", e)
        return 3
    except (OptimizationError, LineSearchFailed) as e:
        log.error("optimization failed: %s", e)
        return 4
    except MorphError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
