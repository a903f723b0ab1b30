import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import morphmpm as mm
from morphmpm import runtime


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile every jit path once (both scatter modes, 2-D and 3-D, forward
    and reverse) so runtime-budgeted tests measure compute, not compilation."""
    for dim in (2, 3):
        params = mm.SimParams(dim=dim, grid_res=12, f_ext=(0.0,) * dim)
        rng = np.random.default_rng(0)
        x = 5.0 + rng.random((4, dim))
        ps = mm.ParticleSet.rest(x, np.full(4, 1.0), np.full(4, 0.1))
        ctrl = {1: 0.01 * rng.standard_normal((4, dim, dim))}
        for det in (True, False):
            runtime.set_deterministic(det)
            tape = mm.record_segment(ps, ctrl, 2, params)
            mm.backprop(tape, tape.final().x - ps.x, 1)
            tape.release()
    runtime.set_deterministic(True)


@pytest.fixture(autouse=True)
def deterministic_default():
    runtime.set_deterministic(True)
    yield
    runtime.set_deterministic(True)


def desk_scene():
    params = mm.SimParams(dim=3, grid_res=16, mu=1e4, lam=1e4, rho=75.0)
    source = mm.seed_particles(mm.Sphere((7.5, 7.5, 7.5), 3.9), params, seed=11)
    tp = mm.seed_particles(mm.Box((7.5, 7.5, 7.5), (6.3, 6.3, 6.3)), params,
                           seed=12)
    target = mm.rasterize_target(tp.x, tp.m * (source.m.sum() / tp.m.sum()),
                                 params)
    return params, source, target


def run_desk(passes, iters):
    params, source, target = desk_scene()
    plan = mm.MorphPlan(passes=passes, segment_len=10, delta_n=10,
                        i_max=iters, loss_kind="log_mass", alpha=0.003)
    trace = []
    t0 = time.perf_counter()
    _, L0, L1 = mm.chain_segments(source, target, plan, 120, params=params,
                                  trace=trace)
    wall = time.perf_counter() - t0
    return {"particles": source.n, "L0": L0, "L1": L1, "wall": wall,
            "trace": trace}


@pytest.fixture(scope="session")
def desk_3x4(warm_kernels):
    """The 120-frame sphere-to-cube morph, 3 passes x 4 iterations."""
    return run_desk(3, 4)


@pytest.fixture(scope="session")
def desk_1x12(warm_kernels):
    """Same morph and iteration budget in a single pass."""
    return run_desk(1, 12)
