"""Verify the adjoint against finite differences on a small scene by hand.

Records a 5-step segment, backpropagates a position loss to the step-1
control layer, then redoes a few entries with central differences. This
is the long way round -- `morphmpm gradcheck` runs the full matrix -- but
it shows the tape API: record_segment / backprop / fd_gradient.
"""

import numpy as np

import morphmpm as mm

params = mm.SimParams(dim=2, grid_res=16, mu=2000.0, lam=2000.0,
                      f_ext=(0.0, 0.0))
rng = np.random.default_rng(4)

n = 6
x = np.column_stack([2.3 + 0.5 * rng.random(n),       # near the low-x wall
                     6.0 + 2.0 * rng.random(n)])
ps = mm.ParticleSet.rest(x, 0.7 + 0.6 * rng.random(n), np.full(n, 0.125))
ps.v = 0.5 * rng.standard_normal((n, 2))

schedule = {1: 0.03 * (rng.random((n, 2, 2)) - 0.5)}
weights = rng.standard_normal((n, 2))

tape = mm.record_segment(ps, schedule, 5, params)
loss_grad = weights                                    # d/dx of sum(w * x)
bundle = mm.backprop(tape, loss_grad, layer_n=1)
analytic = bundle.dL_dFctrl


def loss_at(ctrl):
    final = mm.advance(ps, {1: ctrl}, 5, params)
    return float((weights * final.x).sum())


fd = mm.fd_gradient(loss_at, schedule[1], h=1e-5)

worst = 0.0
for idx in np.ndindex(analytic.shape):
    if abs(fd[idx]) < 1e-8:
        continue
    rel = abs(analytic[idx] - fd[idx]) / max(abs(fd[idx]), abs(analytic[idx]))
    worst = max(worst, rel)

print(f"checked {analytic.size} control entries, worst relative error {worst:.2e}")
assert worst < 1e-4
print("adjoint matches finite differences.")
