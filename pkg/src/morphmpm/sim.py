"""Forward MLS-MPM elastic simulator with per-particle control deformation
gradients.

One timestep is P1 -> P2G -> G -> G2P -> P2:

  P1   P = 2 mu (F_tot - R) + lam (J - 1) J F_tot^{-T},  F_tot = F + F_ctrl
  P2G  m_i = sum w m_p
       p_i = sum w (m_p v_p (1 - zeta dt) + G d_ip),  d_ip = x_i - x_p
       G   = (-3/dx^2) dt V0 P^T + m_p C
  G    v_i = (p_i + f_ext dt) / m_i   (above the mass floor, off sticky nodes)
  G2P  v_p = sum w v_i
       C_p = (3/dx^2) sum w v_i d_ip^T
  P2   x <- x + dt v_p
       F_half = (I + dt C_p) (F + F_ctrl)
       beta = [ ||F_half - F||_F > gamma ]
       F <- F_half if beta == 0 else F (kept bitwise)

The control deformation gradient F_ctrl only enters through F + F_ctrl, so
steering stress with it never overwrites the time-evolved F directly; it gets
absorbed into F by P2 whenever the gate is open.

`step` is a pure function of (particles, F_ctrl, params): no hidden state, so
a recorded tape can replay it exactly in deterministic mode.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from . import runtime
from .errors import OutOfDomain, SingularDeformation

DET_FLOOR = 1e-8        # det(F_tot) below this raises SingularDeformation
MASS_FLOOR_REL = 1e-12  # nodes lighter than this fraction of max(m_p) are empty
BC_MARGIN = 2           # sticky (zero velocity) nodes within this many cells of the boundary


@dataclass(frozen=True)
class SimParams:
    """Material and discretization parameters (SI-style units, dx defaults to
    1 so the default domain is [0, grid_res] per axis)."""
    dim: int = 3
    grid_res: int = 32
    dx: float = 1.0
    dt: float = 0.00833
    mu: float = 1.0e4
    lam: float = 1.0e4
    rho: float = 75.0
    zeta: float = 0.5
    gamma: float = 0.955
    f_ext: tuple = (0.0, 0.0, 0.0)
    post_smooth: bool = False  # optional continuous blend (1-gamma) F_new + gamma F_old

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if not (self.dt > 0 and self.dx > 0):
            raise ValueError("dt and dx must be positive")
        if self.mu < 0 or self.lam < 0 or self.rho <= 0:
            raise ValueError("mu, lam must be >= 0 and rho > 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must lie in [0, 1]")
        if self.zeta * self.dt >= 1.0:
            raise ValueError("zeta*dt must stay below 1 (momentum scale factor)")
        if self.grid_res < 8:
            raise ValueError("grid_res must be at least 8")
        if len(self.f_ext) != self.dim:
            raise ValueError("f_ext length must equal dim")
        object.__setattr__(self, "f_ext", tuple(float(c) for c in self.f_ext))

    @property
    def inv_dx(self):
        return 1.0 / self.dx

    @property
    def n_nodes(self):
        return self.grid_res ** self.dim

    @property
    def domain(self):
        return self.grid_res * self.dx

    def with_(self, **kw):
        return replace(self, **kw)


def default_params(dim=3, **kw):
    if dim == 2 and "f_ext" not in kw:
        kw["f_ext"] = (0.0, 0.0)
    return SimParams(dim=dim, **kw)


@dataclass
class ParticleSet:
    """State of the particle system. All arrays share leading length n."""
    x: np.ndarray        # (n, dim) positions
    v: np.ndarray        # (n, dim) velocities
    m: np.ndarray        # (n,) masses
    V0: np.ndarray       # (n,) initial volumes
    F: np.ndarray        # (n, dim, dim) time-evolved deformation gradients
    F_ctrl: np.ndarray   # (n, dim, dim) control deformation gradients
    C: np.ndarray        # (n, dim, dim) APIC affine velocity matrices

    @classmethod
    def rest(cls, x, m, V0, dim=None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        n, d = x.shape
        if dim is not None and d != dim:
            raise ValueError("position dimensionality does not match dim")
        eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        return cls(x=x, v=np.zeros((n, d)), m=np.asarray(m, dtype=np.float64),
                   V0=np.asarray(V0, dtype=np.float64), F=eye,
                   F_ctrl=np.zeros((n, d, d)), C=np.zeros((n, d, d)))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def copy(self):
        return ParticleSet(self.x.copy(), self.v.copy(), self.m.copy(),
                           self.V0.copy(), self.F.copy(), self.F_ctrl.copy(),
                           self.C.copy())

    def validate(self, params):
        n, d = self.x.shape
        if n == 0:
            raise ValueError("particle set is empty")
        if d != params.dim:
            raise ValueError("particle dim does not match params.dim")
        for name in ("v", "m", "V0", "F", "F_ctrl", "C"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"array length mismatch on {name}")
        if np.any(self.m <= 0) or np.any(self.V0 <= 0):
            raise ValueError("masses and volumes must be positive")
        u = self.x * params.inv_dx
        lo, hi = BC_MARGIN, params.grid_res - 1 - BC_MARGIN
        if np.any(u <= lo) or np.any(u >= hi):
            p = int(np.argmax(np.any((u <= lo) | (u >= hi), axis=1)))
            raise OutOfDomain(
                f"particle {p} at {self.x[p]} breaks the {BC_MARGIN}-cell domain margin",
                particle=p)
        return self


@dataclass
class Grid:
    """Nodal fields on the flattened cartesian lattice (node i at index*dx)."""
    mass: np.ndarray       # (res^dim,)
    momentum: np.ndarray   # (res^dim, dim)
    velocity: np.ndarray   # (res^dim, dim)
    valid: np.ndarray      # (res^dim,) uint8, 1 where velocity is defined
    res: int
    dim: int
    dx: float
    mass_floor: float = 0.0

    @classmethod
    def zeros(cls, params):
        m = params.n_nodes
        return cls(mass=np.zeros(m), momentum=np.zeros((m, params.dim)),
                   velocity=np.zeros((m, params.dim)),
                   valid=np.zeros(m, dtype=np.uint8),
                   res=params.grid_res, dim=params.dim, dx=params.dx)

    def shaped(self, name):
        """Return a field reshaped to (res,)*dim (+ trailing vector axis)."""
        arr = getattr(self, name)
        shape = (self.res,) * self.dim
        if arr.ndim == 2:
            shape = shape + (self.dim,)
        return arr.reshape(shape)


@dataclass
class StressResult:
    P: np.ndarray
    R: np.ndarray
    J: np.ndarray


def bspline_weight(d):
    """Tensor-product cubic B-spline weight at node offset d (units of dx).

    Accepts a scalar (1-D), or a length-dim vector; returns the product of the
    per-axis splines N(d) with N(x) = 1/2|x|^3 - x^2 + 2/3 on |x|<1,
    (2-|x|)^3/6 on 1<=|x|<2, 0 beyond.
    """
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    out = 1.0
    for c in d:
        a = abs(c)
        if a < 1.0:
            out *= 0.5 * a ** 3 - a ** 2 + 2.0 / 3.0
        elif a < 2.0:
            out *= (2.0 - a) ** 3 / 6.0
        else:
            return 0.0
    return float(out)


def _tables(x, params):
    n, dim = x.shape
    base = np.empty((n, dim), dtype=np.int64)
    w = np.empty((n, dim, 4))
    dw = np.empty((n, dim, 4))
    status = np.zeros(n, dtype=np.uint8)
    K.weight_tables(x, params.inv_dx, params.grid_res, base, w, dw, status)
    if status.any():
        p = int(np.argmax(status))
        raise OutOfDomain(f"kernel support of particle {p} at {x[p]} exits the grid",
                          particle=p)
    return base, w, dw


def pk1_stress(F_total, params):
    """Fixed-corotated PK1 stress of one matrix or a batch. Raises
    SingularDeformation when det drops below the floor."""
    F = np.asarray(F_total, dtype=np.float64)
    single = F.ndim == 2
    Fb = np.ascontiguousarray(F[None] if single else F)
    n, dim, _ = Fb.shape
    P = np.zeros((n, dim, dim))
    R = np.zeros((n, dim, dim))
    J = np.zeros(n)
    status = np.zeros(n, dtype=np.uint8)
    K.pk1_batch(Fb, params.mu, params.lam, DET_FLOOR, P, R, J, status)
    if status.any():
        p = int(np.argmax(status))
        raise SingularDeformation(
            f"det(F_total)={J[p]:.3e} below floor {DET_FLOOR:g} at particle {p}",
            particle=p, det=float(J[p]))
    if single:
        return StressResult(P=P[0], R=R[0], J=float(J[0]))
    return StressResult(P=P, R=R, J=J)


def _transfer_matrix(P, particles, params):
    # G = (-3/dx^2) dt V0 P^T + m C
    a = -3.0 * params.inv_dx ** 2
    return (a * params.dt * particles.V0[:, None, None] * np.swapaxes(P, 1, 2)
            + particles.m[:, None, None] * particles.C)


def _scatter(base, w, particles, mom_part, G, params, gm, gmom):
    if runtime.deterministic():
        K.p2g_serial(base, w, particles.x, mom_part, particles.m, G,
                     params.dx, params.grid_res, gm, gmom)
    else:
        K.p2g_fast(base, w, particles.x, mom_part, particles.m, G,
                   params.dx, params.grid_res, gm, gmom)


def p2g(particles, params):
    """Scatter particle mass and momentum to the grid."""
    base, w, _ = _tables(particles.x, params)
    stress = pk1_stress(particles.F + particles.F_ctrl, params)
    G = _transfer_matrix(stress.P, particles, params)
    mom_part = (1.0 - params.zeta * params.dt) * particles.m[:, None] * particles.v
    grid = Grid.zeros(params)
    _scatter(base, w, particles, mom_part, G, params, grid.mass, grid.momentum)
    grid.mass_floor = MASS_FLOOR_REL * float(particles.m.max())
    return grid


def _interior_mask(res, dim):
    idx = np.arange(res)
    ax = (idx >= BC_MARGIN) & (idx <= res - 1 - BC_MARGIN)
    mask = ax
    for _ in range(dim - 1):
        mask = mask[..., None] & ax
    return mask.reshape(-1)


_interior_cache = {}


def grid_update(grid, params):
    """Divide momentum by mass where defined; sticky boundary nodes and
    near-empty nodes keep zero velocity."""
    key = (grid.res, grid.dim)
    if key not in _interior_cache:
        _interior_cache[key] = _interior_mask(grid.res, grid.dim)
    interior = _interior_cache[key]
    valid = (grid.mass > grid.mass_floor) & interior
    fext = np.asarray(params.f_ext)
    grid.velocity[:] = 0.0
    gm = grid.mass[valid][:, None]
    grid.velocity[valid] = (grid.momentum[valid] + fext * params.dt) / gm
    grid.valid = valid.astype(np.uint8)
    return grid


def g2p(grid, particles, params):
    """Gather grid velocities back to particle velocity and APIC matrix."""
    base, w, _ = _tables(particles.x, params)
    out = particles.copy()
    K.g2p_gather(base, w, particles.x, grid.velocity, params.dx, params.inv_dx,
                 params.grid_res, out.v, out.C)
    return out


def p2_update(particles, params):
    """Advect positions and apply the gated deformation-gradient update.
    Returns (updated particles, beta flags)."""
    out = particles.copy()
    out.x = particles.x + params.dt * particles.v
    F_tot = particles.F + particles.F_ctrl
    F_half = F_tot + params.dt * np.matmul(particles.C, F_tot)
    diff = F_half - particles.F
    beta = (np.sqrt(np.sum(diff * diff, axis=(1, 2))) > params.gamma)
    if params.post_smooth:
        blended = (1.0 - params.gamma) * F_half + params.gamma * particles.F
        out.F = np.where(beta[:, None, None], particles.F, blended)
    else:
        out.F = np.where(beta[:, None, None], particles.F, F_half)
    return out, beta.astype(np.uint8)


@dataclass
class StepAux:
    """Forward intermediates one backward pass needs (kept by the tape)."""
    gm: np.ndarray
    gv: np.ndarray
    valid: np.ndarray
    beta: np.ndarray
    P: np.ndarray
    mass_floor: float


def _step_full(particles, F_ctrl, params):
    """One fused timestep sharing the weight tables across transfers.
    Returns (new state, StepAux). Raises OutOfDomain / SingularDeformation."""
    x, v, m, V0, F, C = (particles.x, particles.v, particles.m, particles.V0,
                         particles.F, particles.C)
    base, w, _ = _tables(x, params)
    F_tot = F + F_ctrl
    stress = pk1_stress(F_tot, params)
    G = _transfer_matrix(stress.P, particles, params)
    mom_part = (1.0 - params.zeta * params.dt) * m[:, None] * v
    grid = Grid.zeros(params)
    _scatter(base, w, particles, mom_part, G, params, grid.mass, grid.momentum)
    grid.mass_floor = MASS_FLOOR_REL * float(m.max())
    grid_update(grid, params)
    v_new = np.empty_like(v)
    C_new = np.empty_like(C)
    K.g2p_gather(base, w, x, grid.velocity, params.dx, params.inv_dx,
                 params.grid_res, v_new, C_new)
    x_new = x + params.dt * v_new
    F_half = F_tot + params.dt * np.matmul(C_new, F_tot)
    diff = F_half - F
    beta = (np.sqrt(np.sum(diff * diff, axis=(1, 2))) > params.gamma)
    if params.post_smooth:
        open_F = (1.0 - params.gamma) * F_half + params.gamma * F
    else:
        open_F = F_half
    F_new = np.where(beta[:, None, None], F, open_F)
    new = ParticleSet(x=x_new, v=v_new, m=m.copy(), V0=V0.copy(), F=F_new,
                      F_ctrl=np.zeros_like(F), C=C_new)
    aux = StepAux(gm=grid.mass, gv=grid.velocity, valid=grid.valid,
                  beta=beta.astype(np.uint8), P=stress.P,
                  mass_floor=grid.mass_floor)
    return new, aux


def step(particles, F_ctrl_n=None, params=None):
    """Advance one timestep. F_ctrl_n defaults to the set's own F_ctrl."""
    if params is None:
        raise TypeError("params is required")
    ctrl = particles.F_ctrl if F_ctrl_n is None else F_ctrl_n
    new, _ = _step_full(particles, ctrl, params)
    return new


def advance(particles, controls, n_steps, params, start=0, frame_hook=None):
    """Run n_steps timesteps without recording. `controls` maps 1-based step
    indices (offset by `start`) to (n, dim, dim) control arrays."""
    state = particles
    zero = None
    for k in range(1, n_steps + 1):
        ctrl = controls.get(start + k) if controls else None
        if ctrl is None:
            if zero is None:
                zero = np.zeros_like(state.F)
            ctrl = zero
        state, _ = _step_full(state, ctrl, params)
        if frame_hook is not None:
            frame_hook(start + k, state)
    return state
