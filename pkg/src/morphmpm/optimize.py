"""Per-layer Adam optimization of control deformation gradients.

A morph is optimized one control layer at a time, in causal order. For layer
n of a segment of N steps, each iteration is

  SIMULATE   forward n..N under the current controls (recorded on a tape)
  EVALUATE   terminal loss L and its gradient w.r.t. final positions
  BACKPROP   g = dL/dF_ctrl^n via the tape adjoints
  DESCENT    Adam moments -> direction d = -mhat/(sqrt(vhat)+eps), then a
             bisection line search picks alpha with L(F_ctrl + alpha d) <= L

Accepted steps therefore never increase the segment-final loss. The search
direction is the actual Adam update at unit step so the acceptance test
certifies descent of the update that gets applied. The starting alpha carries
across iterations within a layer and resets to the base value on a failed
search (that iteration applies no update; moments stay advanced).

Iterations stop early when ||g|| drops below kappa, checked before any moment
update so an already-converged layer performs zero updates.

Long animations are chained: consecutive segments of `segment_len` steps are
optimized independently, each seeded by the previous segment's final state,
so peak tape memory is one segment regardless of total length.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import LineSearchFailed, OptimizationError, OutOfDomain, SingularDeformation
from .losses import make_evaluator
from .sim import advance
from .tape import backprop, record_segment


def _frob(a):
    return float(np.sqrt(np.sum(a * a)))


@dataclass
class ControlSchedule:
    """Which steps of a segment carry optimized controls."""
    n_steps: int
    delta_n: int = 10
    i_max: int = 4
    kappa: float = 1e-6

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not (1 <= self.delta_n <= self.n_steps):
            raise ValueError("delta_n must lie in 1..n_steps")
        if self.i_max < 1:
            raise ValueError("i_max must be at least 1")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    @property
    def layers(self):
        return list(range(1, self.n_steps + 1, self.delta_n))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    alpha: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def zeros(cls, shape, alpha=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("beta1, beta2 must lie in [0, 1)")
        if alpha <= 0 or eps <= 0:
            raise ValueError("alpha and eps must be positive")
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0,
                   alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)

    def direction(self, g):
        """Advance the moments one step and return the descent direction
        -mhat/(sqrt(vhat)+eps) (the update at unit step size)."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (g * g)
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return -mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class MorphPlan:
    """Everything the optimization pipeline needs beyond the physics."""
    passes: int = 3
    segment_len: int = 10
    delta_n: int = 10
    i_max: int = 4
    kappa: float = 1e-6
    loss_kind: str = "log_mass"
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fresh_moments: bool = True   # new Adam moments each pass
    max_halvings: int = 20

    def __post_init__(self):
        if self.passes < 1 or self.segment_len < 1:
            raise ValueError("passes and segment_len must be at least 1")

    def schedule_for(self, n_steps):
        return ControlSchedule(n_steps=n_steps,
                               delta_n=min(self.delta_n, n_steps),
                               i_max=self.i_max, kappa=self.kappa)

    @property
    def schedule(self):
        return self.schedule_for(self.segment_len)

    def adam_for(self, shape):
        return AdamState.zeros(shape, alpha=self.alpha, beta1=self.beta1,
                               beta2=self.beta2, eps=self.eps)


def compute_step_size(loss_fn, L0, x, dx, alpha0, max_halvings=20):
    """Bisection line search: halve alpha until loss_fn(x + alpha dx) <= L0.

    Non-finite trial losses count as ascent and keep halving. Raises
    LineSearchFailed after max_halvings halvings.
    """
    if alpha0 <= 0:
        raise ValueError("alpha0 must be positive")
    alpha = float(alpha0)
    for h in range(max_halvings + 1):
        trial = loss_fn(x + alpha * dx)
        if trial <= L0:
            return alpha
        alpha *= 0.5
    raise LineSearchFailed(
        f"no non-increasing step within {max_halvings} halvings "
        f"(alpha reached {alpha:.3e})", halvings=max_halvings, last_alpha=alpha)


@dataclass
class Segment:
    """One chained piece of the animation: an initial state, a step count,
    the physics parameters and the terminal loss evaluator."""
    initial: "ParticleSet"
    n_steps: int
    params: "SimParams"
    loss: object

    def loss_value(self, controls):
        final = advance(self.initial, controls, self.n_steps, self.params)
        return self.loss.evaluate(final, self.params)[0]


def optimize_layer(segment, layer_n, controls, adam, schedule, trace=None,
                   trace_ctx=(0, 0, None), stats=None, max_halvings=20):
    """Run up to i_max Adam iterations on F_ctrl at one layer of a segment.

    `controls` maps step indices to control arrays and is updated in place at
    layer_n. Returns (final segment loss under the accepted controls, number
    of applied updates). trace_ctx = (segment, pass, layer label) tags the
    appended trace rows; skipped or converged iterations log alpha = 0.
    """
    seg_idx, pass_idx, layer_label = trace_ctx
    if layer_label is None:
        layer_label = layer_n
    if layer_n not in range(1, segment.n_steps + 1):
        raise ValueError("layer_n outside the segment")
    base_alpha = adam.alpha
    alpha = base_alpha
    zeros = np.zeros_like(segment.initial.F)
    last_loss = None
    updates = 0

    def log(i, loss, gnorm, a):
        if trace is not None:
            trace.append({"segment": seg_idx, "pass": pass_idx,
                          "layer": layer_label, "iter": i, "loss": loss,
                          "gradnorm": gnorm, "alpha": a})

    def timed(key, t0):
        if stats is not None:
            stats[key] = stats.get(key, 0.0) + (time.perf_counter() - t0)

    for i in range(schedule.i_max):
        t0 = time.perf_counter()
        tape = record_segment(segment.initial, controls, segment.n_steps,
                              segment.params)
        L0, xgrad = segment.loss.evaluate(tape.final(), segment.params)
        timed("simulate", t0)
        if not math.isfinite(L0):
            tape.release()
            raise OptimizationError(f"non-finite loss {L0} at layer {layer_n}")
        t0 = time.perf_counter()
        bundle = backprop(tape, xgrad, layer_n)
        tape.release()
        timed("backprop", t0)
        g = bundle.dL_dFctrl
        gnorm = _frob(g)
        if last_loss is None:
            last_loss = L0
        if gnorm < schedule.kappa:
            log(i, L0, gnorm, 0.0)
            break
        d = adam.direction(g)
        cur = controls.get(layer_n, zeros)
        cache = {}

        def trial_loss(candidate):
            probe = dict(controls)
            probe[layer_n] = candidate
            try:
                val = segment.loss_value(probe)
            except (SingularDeformation, OutOfDomain):
                val = float("inf")
            cache["last"] = val
            return val

        t0 = time.perf_counter()
        try:
            alpha = compute_step_size(trial_loss, L0, cur, d, alpha,
                                      max_halvings=max_halvings)
        except LineSearchFailed:
            timed("linesearch", t0)
            alpha = base_alpha
            log(i, L0, gnorm, 0.0)
            continue
        timed("linesearch", t0)
        controls[layer_n] = cur + alpha * d
        last_loss = cache["last"]
        updates += 1
        log(i, last_loss, gnorm, alpha)
    return last_loss, updates


def run_pass(segment, plan, controls, moments=None, trace=None, pass_idx=0,
             seg_idx=0, stats=None):
    """Sweep the control layers of one segment in causal order, optimizing
    each with downstream controls held at their current values. Returns the
    per-layer losses of this pass."""
    schedule = plan.schedule_for(segment.n_steps)
    state = segment.initial
    prev_step = 0
    losses = []
    for n in schedule.layers:
        if n - 1 > prev_step:
            state = advance(state, controls, n - 1 - prev_step, segment.params,
                            start=prev_step)
            prev_step = n - 1
        sub = Segment(initial=state, n_steps=segment.n_steps - (n - 1),
                      params=segment.params, loss=segment.loss)
        shifted = {k - (n - 1): arr for k, arr in controls.items() if k >= n}
        if moments is None:
            adam = plan.adam_for(segment.initial.F.shape)
        else:
            adam = moments.setdefault(n, plan.adam_for(segment.initial.F.shape))
        L, _ = optimize_layer(sub, 1, shifted, adam, schedule, trace=trace,
                              trace_ctx=(seg_idx, pass_idx, n), stats=stats,
                              max_halvings=plan.max_halvings)
        if 1 in shifted:
            controls[n] = shifted[1]
        losses.append(L)
    return losses


def optimize_segment(segment, plan, trace=None, seg_idx=0, stats=None):
    """plan.passes passes over one segment; returns the control schedule."""
    controls = {}
    bank = None if plan.fresh_moments else {}
    for p in range(plan.passes):
        run_pass(segment, plan, controls,
                 moments=None if plan.fresh_moments else bank,
                 trace=trace, pass_idx=p, seg_idx=seg_idx, stats=stats)
    return controls


def chain_segments(source, target, plan, total_frames, sink=None, params=None,
                   trace=None, stats=None):
    """Optimize a total_frames animation as consecutive segments of
    plan.segment_len steps, each seeded by the previous segment's final state.

    `target` is a TargetMassField for the mass losses or an (n, dim) position
    array for the position loss. `sink(frame_idx, particles, channel)` is
    called once per timestep with a [0,1] per-particle loss channel; frames of
    a segment are persisted before its tape memory is released. Returns
    (final state, initial loss, final loss).
    """
    if params is None:
        raise TypeError("params is required")
    if total_frames < plan.segment_len:
        raise ValueError("total_frames must be at least plan.segment_len")
    loss = make_evaluator(plan.loss_kind, target, params)
    L_init = loss.evaluate(source, params)[0]
    state = source
    frame = 0
    seg_idx = 0
    remaining = total_frames
    while remaining > 0:
        seg_len = min(plan.segment_len, remaining)
        segment = Segment(initial=state, n_steps=seg_len, params=params,
                          loss=loss)
        controls = optimize_segment(segment, plan, trace=trace,
                                    seg_idx=seg_idx, stats=stats)
        final_tape = record_segment(state, controls, seg_len, params)
        if sink is not None:
            for k in range(1, seg_len + 1):
                st = final_tape.states[k]
                channel = loss.per_particle(st, params)
                peak = float(channel.max())
                if peak > 0:
                    channel = channel / peak
                sink(frame + k - 1, st, channel)
        state = final_tape.final().copy()
        final_tape.release()
        frame += seg_len
        remaining -= seg_len
        seg_idx += 1
    L_final = loss.evaluate(state, params)[0]
    return state, L_init, L_final
