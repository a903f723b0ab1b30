"""Recorded simulation segments and reverse-mode gradients.

The tape stores one full particle snapshot per timestep plus the grid
intermediates each adjoint needs (no recompute-from-checkpoint; segments are
short). backprop walks the timesteps in reverse and applies the hand-written
adjoint of each sub-step. Per step k (states[k-1] -> states[k], control ctrl_k):

  P2  reverse: vbar' = vbar + dt xbar; gate branch constant:
      open:  Fhalf_bar = Fbar;  Cbar' += dt Fhalf_bar (F+ctrl)^T;
             Bbar = (I + dt C')^T Fhalf_bar  -> flows to both F and ctrl
      shut:  Fbar passes straight to F (the kept branch)
  G2P reverse: grid vbar_i += w vbar' + (3/dx^2) w Cbar' d; position terms
      via the weight gradients (see _kernels.g2p_backward_*)
  G   reverse: pbar_i = vbar_i / m_i, mbar_i = -(vbar_i . v_i)/m_i on valid
      nodes; sticky and near-empty nodes block gradient flow
  P2G reverse: vbar_p, Gbar_p, position terms (see _kernels.p2g_backward_map);
      then Pbar = (-3/dx^2) dt V0 Gbar^T and Cbar_in = m_p Gbar
  P1  reverse: fixed-corotated stress adjoint including the polar-rotation
      term (see _kernels.stress_backward); the result accumulates into both
      Fbar and ctrl_bar since stress reads F + ctrl

The unit-step gate is treated as a constant of the branch taken during the
backward pass; its own derivative is zero almost everywhere.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import runtime
from .errors import MorphError, OptimizationError, VanishingGradient
from .sim import DET_FLOOR, ParticleSet, SimParams, _step_full, _tables, _transfer_matrix

# module-level gauge of tape-resident states (for the chaining memory audit)
_live_states = 0
_peak_states = 0


def _track(delta):
    global _live_states, _peak_states
    _live_states += delta
    if _live_states > _peak_states:
        _peak_states = _live_states


def live_states():
    return _live_states


def peak_states():
    return _peak_states


def reset_peak():
    global _peak_states
    _peak_states = _live_states


@dataclass
class GradientBundle:
    dL_dFctrl: np.ndarray    # (n, dim, dim) gradient at the requested layer
    dL_dx_final: np.ndarray  # (n, dim) loss gradient at the final positions


class Tape:
    """n_steps+1 particle snapshots plus per-step grid intermediates."""

    def __init__(self, states, aux, controls, params):
        self.states = states
        self.aux = aux
        self.controls = controls  # {1-based step: (n,d,d)}, private copies
        self.params = params
        self.n_steps = len(states) - 1
        self._released = False

    def final(self):
        return self.states[-1]

    def control_at(self, k):
        ctrl = self.controls.get(k)
        if ctrl is None:
            return np.zeros_like(self.states[0].F)
        return ctrl

    def release(self):
        """Drop the recorded states and update the memory gauge."""
        if not self._released:
            _track(-len(self.states))
            self._released = True
            self.states = []
            self.aux = []

    def __del__(self):
        try:
            self.release()
        except Exception:
            pass


def record_segment(initial, F_ctrl_sched, n_steps, params):
    """Run n_steps forward from `initial`, storing every state.

    F_ctrl_sched maps 1-based step indices to (n, dim, dim) control arrays;
    missing steps mean zero control. Simulation errors are re-raised with the
    failing timestep attached.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    controls = {}
    for k, arr in (F_ctrl_sched or {}).items():
        k = int(k)
        if not (1 <= k <= n_steps):
            raise ValueError(f"control layer {k} outside 1..{n_steps}")
        controls[k] = np.array(arr, dtype=np.float64)
    states = [initial.copy()]
    aux = []
    _track(1)
    zero = np.zeros_like(initial.F)
    try:
        for k in range(1, n_steps + 1):
            ctrl = controls.get(k, zero)
            try:
                new, a = _step_full(states[-1], ctrl, params)
            except MorphError as e:
                if getattr(e, "timestep", None) is None:
                    e.timestep = k
                e.args = (f"{e.args[0]} (timestep {k})",) + e.args[1:]
                raise
            states.append(new)
            aux.append(a)
            _track(1)
    except Exception:
        _track(-len(states))
        raise
    return Tape(states, aux, controls, params)


def _backward_step(prev, cur, ctrl, aux, params, xbar, vbar, Fbar, Cbar):
    """Adjoint of one timestep; returns the previous state's adjoint plus the
    control gradient of this step."""
    n, dim = prev.x.shape
    dt = params.dt
    F_tot = prev.F + ctrl

    # P2 reverse
    vbar_tot = vbar + dt * xbar
    xbar_new = xbar.copy()
    cbar_tot = Cbar.copy()
    shut = aux.beta.astype(bool)[:, None, None]
    if params.post_smooth:
        fh_bar = np.where(shut, 0.0, (1.0 - params.gamma) * Fbar)
        Fbar_prev = np.where(shut, Fbar, params.gamma * Fbar)
    else:
        fh_bar = np.where(shut, 0.0, Fbar)
        Fbar_prev = np.where(shut, Fbar, 0.0)
    cbar_tot += dt * np.matmul(fh_bar, np.swapaxes(F_tot, 1, 2))
    M = np.eye(dim)[None] + dt * cur.C
    Bbar = np.matmul(np.swapaxes(M, 1, 2), fh_bar)

    # G2P reverse
    base, w, dw = _tables(prev.x, params)
    gvbar = np.zeros((params.n_nodes, dim))
    if runtime.deterministic():
        K.g2p_backward_scatter(base, w, prev.x, vbar_tot, cbar_tot,
                               params.dx, params.inv_dx, params.grid_res, gvbar)
    else:
        K.g2p_backward_scatter_fast(base, w, prev.x, vbar_tot, cbar_tot,
                                    params.dx, params.inv_dx, params.grid_res, gvbar)
    K.g2p_backward_map(base, w, dw, prev.x, aux.gv, vbar_tot, cbar_tot,
                       params.dx, params.inv_dx, params.grid_res, xbar_new)

    # G reverse (mass floor and sticky mask are branch constants)
    valid = aux.valid.astype(bool)
    pbar = np.zeros_like(gvbar)
    mbar = np.zeros(params.n_nodes)
    gm_v = aux.gm[valid]
    pbar[valid] = gvbar[valid] / gm_v[:, None]
    mbar[valid] = -np.einsum("na,na->n", gvbar[valid], aux.gv[valid]) / gm_v

    # P2G reverse
    G = _transfer_matrix(aux.P, prev, params)
    mom_part = (1.0 - params.zeta * dt) * prev.m[:, None] * prev.v
    vbar_new = np.empty((n, dim))
    Gbar = np.empty((n, dim, dim))
    K.p2g_backward_map(base, w, dw, prev.x, mom_part, prev.m, G, pbar, mbar,
                       1.0 - params.zeta * dt, params.dx, params.inv_dx,
                       params.grid_res, vbar_new, Gbar, xbar_new)

    # P1 reverse
    a = -3.0 * params.inv_dx ** 2
    Pbar = a * dt * prev.V0[:, None, None] * np.swapaxes(Gbar, 1, 2)
    Cbar_new = prev.m[:, None, None] * Gbar
    Fbar_tot = np.zeros((n, dim, dim))
    status = np.zeros(n, dtype=np.uint8)
    K.stress_backward(np.ascontiguousarray(F_tot), np.ascontiguousarray(Pbar),
                      params.mu, params.lam, DET_FLOOR, Fbar_tot, status)
    if status.any():
        raise OptimizationError("stress adjoint hit a singular deformation "
                                "that the forward pass accepted")

    ctrl_bar = Bbar + Fbar_tot
    Fbar_new = Fbar_prev + ctrl_bar
    return xbar_new, vbar_new, Fbar_new, Cbar_new, ctrl_bar


def backprop(tape, loss_grad_final, layer_n, _corrupt=False):
    """Reverse traversal from the final state down to layer_n; returns the
    loss gradient w.r.t. the control deformation gradients of that layer.

    Because stress reads F + F_ctrl, the control gradient at layer n equals
    the F gradient restricted to the layer-n contribution; both come out of
    the same accumulation here. `_corrupt` is a negative-control test hook
    that deliberately mis-scales the stress adjoint.
    """
    if not (1 <= layer_n <= tape.n_steps):
        raise ValueError(f"layer_n must lie in 1..{tape.n_steps}")
    if tape._released:
        raise ValueError("tape was released")
    n, dim = tape.states[0].x.shape
    xbar = np.array(loss_grad_final, dtype=np.float64)
    if xbar.shape != (n, dim):
        raise ValueError("loss gradient shape does not match particle count")
    vbar = np.zeros((n, dim))
    Fbar = np.zeros((n, dim, dim))
    Cbar = np.zeros((n, dim, dim))
    ctrl_bar = None
    for k in range(tape.n_steps, layer_n - 1, -1):
        prev = tape.states[k - 1]
        cur = tape.states[k]
        ctrl = tape.control_at(k)
        xbar, vbar, Fbar, Cbar, ctrl_bar = _backward_step(
            prev, cur, ctrl, tape.aux[k - 1], tape.params, xbar, vbar, Fbar, Cbar)
        if _corrupt:
            ctrl_bar = 1.01 * ctrl_bar
            Fbar = 1.01 * Fbar
    bundle = GradientBundle(dL_dFctrl=ctrl_bar,
                            dL_dx_final=np.array(loss_grad_final, dtype=np.float64))
    if not np.all(np.isfinite(bundle.dL_dFctrl)):
        raise OptimizationError("backprop produced non-finite control gradients")
    if float(np.sqrt(np.sum(bundle.dL_dFctrl ** 2))) < 1e-14:
        warnings.warn("control gradient norm below 1e-14; the horizon from "
                      f"layer {layer_n} may be too long", VanishingGradient)
    return bundle


def fd_gradient(loss_eval, F_ctrl, h=1e-5):
    """Central-difference gradient of a black-box Loss(F_ctrl), entry by
    entry: (L(F+h e_k) - L(F-h e_k)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    F = np.asarray(F_ctrl, dtype=np.float64)
    out = np.zeros_like(F)
    flat = out.reshape(-1)
    base = F.copy().reshape(-1)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        lp = loss_eval(bumped.reshape(F.shape))
        bumped[i] = base[i] - h
        lm = loss_eval(bumped.reshape(F.shape))
        flat[i] = (lp - lm) / (2.0 * h)
    return out
