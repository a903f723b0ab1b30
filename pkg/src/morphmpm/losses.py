"""Morphing losses and target rasterization.

Three losses, all sums of squares over corresponded points or grid nodes:

  position  L = sum_p 1/2 ||x_p - x*_p||^2          dL/dx_p = x_p - x*_p
  mass      L = sum_i 1/2 (m_i - m*_i)^2            dL/dm_i = m_i - m*_i
  log mass  L = sum_i 1/2 (ln(m_i+1) - ln(m*_i+1))^2
            dL/dm_i = (ln(m_i+1) - ln(m*_i+1)) / (m_i + 1)

The log form damps outliers: for a node with m* = 0 the gradient ratio
log/plain is ln(m+1)/(m(m+1)), strictly decreasing in m, which is what stops
distant target mass from flinging particle clumps ("mass ejection").

Nodal gradients chain to particle positions through the same B-spline weights
P2G uses: dL/dx_p = m_p sum_i (dw_ip/dx_p) (dL/dm_i).

Note the +1 inside the logs couples to the mass scale; keep total scene mass
around 1e3..1e4 (density or the scene mass_scale knob) so loss magnitudes stay
in a useful range.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import LatticeMismatch, NegativeMass, SizeMismatch
from .sim import _tables


@dataclass
class TargetMassField:
    m_star: np.ndarray  # flat (res^dim,) nodal target masses
    res: int
    dim: int
    dx: float

    def shaped(self):
        return self.m_star.reshape((self.res,) * self.dim)


@dataclass
class LossReport:
    value: float
    kind: str
    accuracy: float | None = None  # 100 (1 - value/initial), set when initial known


def accuracy_pct(initial, final):
    """Morph accuracy in percent, 100 (1 - final/initial). None when the
    initial loss is zero and the ratio is undefined (0 -> 0 counts as 100)."""
    if initial == 0.0:
        return 100.0 if final == 0.0 else None
    return 100.0 * (1.0 - final / initial)


def rasterize_target(positions, masses, params):
    """Scatter target particle masses to the grid with the same cubic
    B-spline kernel P2G uses."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    gm = np.zeros(params.n_nodes)
    if positions.shape[0] > 0:
        base, w, _ = _tables(positions, params)
        K.rasterize_serial(base, w, masses, params.grid_res, params.dim, gm)
    return TargetMassField(m_star=gm, res=params.grid_res, dim=params.dim,
                           dx=params.dx)


def position_loss(x, x_star, initial=None):
    """Corresponded squared-distance loss. Returns (report, dL/dx)."""
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x.shape != x_star.shape:
        raise SizeMismatch(f"point clouds differ in shape: {x.shape} vs {x_star.shape}")
    grad = x - x_star
    value = 0.5 * float(np.sum(grad * grad))
    return LossReport(value, "position",
                      accuracy_pct(initial, value) if initial is not None else None), grad


def _as_field(m_star):
    return m_star.m_star if isinstance(m_star, TargetMassField) else np.asarray(m_star)


def mass_loss(m, m_star, initial=None):
    """Plain nodal-mass loss. Returns (report, nodal dL/dm)."""
    m = np.asarray(m, dtype=np.float64)
    ms = _as_field(m_star)
    if m.shape != ms.shape:
        raise LatticeMismatch(f"nodal fields differ in shape: {m.shape} vs {ms.shape}")
    grad = m - ms
    value = 0.5 * float(np.sum(grad * grad))
    return LossReport(value, "mass",
                      accuracy_pct(initial, value) if initial is not None else None), grad


def log_mass_loss(m, m_star, initial=None):
    """Outlier-damped log mass loss. Returns (report, nodal dL/dm)."""
    m = np.asarray(m, dtype=np.float64)
    ms = _as_field(m_star)
    if m.shape != ms.shape:
        raise LatticeMismatch(f"nodal fields differ in shape: {m.shape} vs {ms.shape}")
    if np.any(m < 0) or np.any(ms < 0):
        raise NegativeMass("log mass loss needs nonnegative nodal masses")
    d = np.log1p(m) - np.log1p(ms)
    value = 0.5 * float(np.sum(d * d))
    grad = d / (m + 1.0)
    return LossReport(value, "log_mass",
                      accuracy_pct(initial, value) if initial is not None else None), grad


def mass_gradient_to_positions(positions, masses, nodal_grad, params):
    """Chain a nodal-mass gradient to particle positions through the P2G
    weights: dL/dx_p = m_p sum_i grad(w_ip) dL/dm_i."""
    base, w, dw = _tables(np.ascontiguousarray(positions), params)
    out = np.empty_like(positions)
    K.nodal_to_particle_grad(base, w, dw, np.asarray(masses, dtype=np.float64),
                             np.ascontiguousarray(nodal_grad, dtype=np.float64),
                             params.inv_dx, params.grid_res, out)
    return out


LOSS_KINDS = ("position", "mass", "log_mass")


class PositionLoss:
    """Evaluator wrapper used by the optimizer: corresponded point targets."""

    kind = "position"

    def __init__(self, x_star):
        self.x_star = np.ascontiguousarray(x_star, dtype=np.float64)

    def evaluate(self, particles, params):
        report, grad = position_loss(particles.x, self.x_star)
        return report.value, grad

    def per_particle(self, particles, params):
        d = particles.x - self.x_star
        return 0.5 * np.sum(d * d, axis=1)


class MassLoss:
    """Evaluator wrapper for the nodal-mass losses (plain or log form)."""

    def __init__(self, target, log=True):
        self.target = target
        self.log = log
        self.kind = "log_mass" if log else "mass"

    def _rasterize(self, particles, params):
        return rasterize_target(particles.x, particles.m, params).m_star

    def evaluate(self, particles, params):
        m = self._rasterize(particles, params)
        fn = log_mass_loss if self.log else mass_loss
        report, nodal = fn(m, self.target)
        grad = mass_gradient_to_positions(particles.x, particles.m, nodal, params)
        return report.value, grad

    def per_particle(self, particles, params):
        m = self._rasterize(particles, params)
        ms = self.target.m_star
        if self.log:
            d = np.log1p(m) - np.log1p(ms)
        else:
            d = m - ms
        integrand = 0.5 * d * d
        base, w, _ = _tables(particles.x, params)
        out = np.empty(particles.n)
        K.sample_nodal(base, w, integrand, params.grid_res, params.dim, out)
        return out


def make_evaluator(kind, target, params=None):
    """Build a loss evaluator. `target` is a corresponded (n, dim) position
    array for the position loss, a TargetMassField (or target ParticleSet
    pieces) for the mass losses."""
    if kind == "position":
        return PositionLoss(target)
    if kind in ("mass", "log_mass"):
        if not isinstance(target, TargetMassField):
            raise TypeError("mass losses need a TargetMassField target")
        return MassLoss(target, log=(kind == "log_mass"))
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
