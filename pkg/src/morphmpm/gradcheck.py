"""Finite-difference validation of the hand-written adjoints.

Runs a matrix of small scenes (dimension x particle count x horizon x loss)
and compares the reverse-pass gradient of the loss with respect to the
step-1 control against central differences. Entries whose FD magnitude is
below `fd_floor` carry no signal and are skipped; everything else must agree
to `tol` in relative terms.

The scenes are deliberately generic: random deformation, velocity, and
affine state so no kernel branch sits exactly on a threshold (the update
gate stays far from its trigger norm, FD bumps cannot flip it).
"""

import time
from dataclasses import dataclass

import numpy as np

from .losses import make_evaluator, rasterize_target
from .sim import ParticleSet, SimParams
from .tape import backprop, fd_gradient, record_segment

DIMS = (2, 3)
COUNTS = (1, 16, 64)
HORIZONS = (1, 3, 5)
LOSSES = ("position", "mass", "log_mass")


@dataclass
class CaseResult:
    name: str
    dim: int
    count: int
    horizon: int
    loss_kind: str
    max_rel_err: float
    n_checked: int
    n_skipped: int
    passed: bool
    seconds: float


def case_name(dim, count, horizon, loss_kind):
    return f"d{dim}_n{count}_h{horizon}_{loss_kind}"


def build_case(dim, count, horizon, loss_kind, seed=0):
    """Seeded random scene plus its loss evaluator and step-1 control."""
    rng = np.random.default_rng([seed, dim, count, horizon,
                                 LOSSES.index(loss_kind)])
    f_ext = (0.0,) * dim
    # scale note: mu controls the control->loss coupling, the target offset
    # controls the loss magnitude. FD noise ~ eps*L/h must stay below
    # tol*|entry|, so keep mu high and the offset small.
    params = SimParams(dim=dim, grid_res=16, dt=0.0125, mu=2000.0, lam=2000.0,
                       f_ext=f_ext)
    if count == 1:
        # a lone interior particle cannot push itself (stress forces cancel
        # through partition of unity), so park it against the sticky wall
        # where the control couples to motion
        x = 2.42 * params.dx + 0.06 * rng.random((count, dim)) * params.dx
    else:
        # wide blob + uneven masses break stencil symmetry; interior
        # particles of a uniform blob would couple to the loss only weakly
        # and their FD entries would drown in roundoff. Spread keeps a few
        # particles per cell: sparser and they decouple, denser and the
        # stencils symmetrize.
        spread = 4.0 if dim == 2 else 2.8
        x = 0.5 * params.domain + spread * (rng.random((count, dim)) - 0.5) * params.dx
    n_per_cell = 8 if dim == 3 else 9
    v0 = np.full(count, params.dx ** dim / n_per_cell)
    m = 0.7 + 0.6 * rng.random(count)
    ps = ParticleSet.rest(np.ascontiguousarray(x), m, v0)
    ps.v += 0.1 * rng.standard_normal(ps.v.shape)
    ps.F += 0.15 * (rng.random(ps.F.shape) - 0.5)
    ps.C += 0.02 * (rng.random(ps.C.shape) - 0.5)
    ctrl = 0.03 * (rng.random((count, dim, dim)) - 0.5)
    if loss_kind == "position":
        x_star = x + 0.03 * params.dx + 0.01 * rng.random((count, dim))
        target = x_star
    else:
        # same geometry with masses scaled down keeps the nodal residual
        # one-signed (no control entry sits at a sign-crossing, where its
        # FD value would drown in roundoff) and the loss value small
        # (FD noise grows with the loss magnitude)
        target = rasterize_target(x, 0.97 * m, params)
    evaluator = make_evaluator(loss_kind, target, params)
    return params, ps, ctrl, evaluator


def run_case(dim, count, horizon, loss_kind, seed=0, tol=1e-4,
             fd_floor=1e-8, h=1e-5, corrupt=False):
    t0 = time.perf_counter()
    params, ps, ctrl, evaluator = build_case(dim, count, horizon, loss_kind, seed)

    tape = record_segment(ps, {1: ctrl}, horizon, params)
    _, xgrad = evaluator.evaluate(tape.final(), params)
    bundle = backprop(tape, xgrad, 1, _corrupt=corrupt)
    analytic = bundle.dL_dFctrl
    tape.release()

    def loss_of(c):
        t = record_segment(ps, {1: c}, horizon, params)
        value, _ = evaluator.evaluate(t.final(), params)
        t.release()
        return value

    fd = fd_gradient(loss_of, ctrl, h=h)
    signal = np.abs(fd) > fd_floor
    if signal.any():
        rel = np.abs(analytic[signal] - fd[signal]) / np.maximum(
            np.abs(fd[signal]), np.abs(analytic[signal]))
        max_rel = float(rel.max())
    else:
        max_rel = 0.0
    return CaseResult(
        name=case_name(dim, count, horizon, loss_kind),
        dim=dim, count=count, horizon=horizon, loss_kind=loss_kind,
        max_rel_err=max_rel,
        n_checked=int(signal.sum()),
        n_skipped=int((~signal).sum()),
        passed=bool(max_rel < tol and signal.any()),
        seconds=time.perf_counter() - t0)


def run_matrix(dims=DIMS, counts=COUNTS, horizons=HORIZONS, losses=LOSSES,
               seed=0, tol=1e-4, fd_floor=1e-8, h=1e-5, corrupt=False,
               case_filter=None, progress=None):
    """Run the full case matrix (optionally one named case) and return the
    list of CaseResult. `progress` is called with each result as it lands."""
    results = []
    for dim in dims:
        for count in counts:
            for horizon in horizons:
                for loss_kind in losses:
                    name = case_name(dim, count, horizon, loss_kind)
                    if case_filter is not None and name != case_filter:
                        continue
                    res = run_case(dim, count, horizon, loss_kind, seed=seed,
                                   tol=tol, fd_floor=fd_floor, h=h,
                                   corrupt=corrupt)
                    results.append(res)
                    if progress is not None:
                        progress(res)
    if case_filter is not None and not results:
        raise ValueError(f"no gradcheck case named {case_filter!r}")
    return results
