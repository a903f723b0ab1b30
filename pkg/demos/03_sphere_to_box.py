"""Morph a disc into a square and report the accuracy.

The whole pipeline in ~20 lines: seed source/target geometry, rasterize
the target to a nodal mass field, then optimize per-particle deformation
controls over chained 12-step segments. Writes one PLY per frame into
demo_out/ (glob them into your point-cloud viewer of choice).
"""

import os

import morphmpm as mm

params = mm.SimParams(dim=2, grid_res=16, mu=1000.0, lam=1000.0,
                      f_ext=(0.0, 0.0))
source = mm.seed_particles(mm.Sphere((7.5, 7.5), 2.2), params, seed=21)
square = mm.seed_particles(mm.Box((7.5, 7.5), (3.6, 3.6)), params, seed=22)
target = mm.rasterize_target(square.x, square.m * (source.m.sum() / square.m.sum()),
                             params)

os.makedirs("demo_out", exist_ok=True)


def sink(frame, state, channel):
    mm.write_frame(mm.FrameRecord(frame, state.x, channel), "demo_out")


# gentle steps: chaining is greedy per segment, and a strong alpha here
# makes consecutive segments overshoot and fight each other
plan = mm.MorphPlan(passes=2, segment_len=12, delta_n=10, i_max=4,
                    loss_kind="log_mass", alpha=0.003)
trace = []
final, L0, L1 = mm.chain_segments(source, target, plan, 120,
                                  sink=sink, params=params, trace=trace)

for seg in range(120 // plan.segment_len):
    rows = [r for r in trace if r["segment"] == seg]
    accepted = sum(1 for r in rows if r["alpha"] > 0)
    print(f"segment {seg}: {len(rows)} iterations, {accepted} accepted, "
          f"loss {rows[-1]['loss']:.4f}")

print(f"\nloss {L0:.4f} -> {L1:.4f}  "
      f"(accuracy {mm.accuracy_pct(L0, L1):.1f}%)")
print(f"wrote 120 frames to demo_out/")
