"""numba kernels: forward MLS-MPM transfers and their hand-written adjoints.

Conventions shared by every kernel here:
  * grids are flattened C-order, idx = (i*res + j) in 2-D, ((i*res + j)*res + k) in 3-D
  * cubic B-spline stencil covers 4 nodes per axis starting at base = floor(x/dx) - 1
  * weight tables w/dw have shape (n, dim, 4); dw is d(weight)/df with f the
    fractional cell coordinate, so d(weight)/dx = dw * inv_dx (no extra sign)
  * scatter kernels come in a serial flavor (fixed particle order, bit
    deterministic) and a fast flavor (per-thread buffers reduced in thread
    order); pure per-particle maps are prange either way
  * kernels never raise; they write status flags and the wrappers in sim.py
    turn those into exceptions

Nothing in this file allocates per stencil node; per-particle temporaries are
plain scalars so the hot loops stay register-resident.
"""

import numpy as np
from numba import njit, prange, get_thread_id, get_num_threads

# status codes written by kernels
OK = 0
ERR_SUPPORT = 1   # kernel support exits the grid
ERR_SINGULAR = 2  # det(F) below floor


@njit(cache=True)
def _fill_w(f, w, dw):
    # 1-D cubic B-spline weights at the 4 covered nodes for fractional
    # coordinate f in [0,1); node offsets o=0..3 sit at distances
    # -(1+f), -f, 1-f, 2-f from the particle.
    omf = 1.0 - f
    w[0] = omf * omf * omf / 6.0
    w[1] = 0.5 * f * f * f - f * f + 2.0 / 3.0
    w[2] = 0.5 * omf * omf * omf - omf * omf + 2.0 / 3.0
    w[3] = f * f * f / 6.0
    dw[0] = -0.5 * omf * omf
    dw[1] = 1.5 * f * f - 2.0 * f
    dw[2] = -1.5 * omf * omf + 2.0 * omf
    dw[3] = 0.5 * f * f


@njit(cache=True, parallel=True)
def weight_tables(x, inv_dx, res, base, w, dw, status):
    n, dim = x.shape
    for p in prange(n):
        for a in range(dim):
            u = x[p, a] * inv_dx
            fl = np.floor(u)
            b = int(fl) - 1
            base[p, a] = b
            _fill_w(u - fl, w[p, a], dw[p, a])
            if b < 0 or b + 3 > res - 1:
                status[p] = ERR_SUPPORT


@njit(cache=True)
def _det(F):
    if F.shape[0] == 2:
        return F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    return (F[0, 0] * (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1])
            - F[0, 1] * (F[1, 0] * F[2, 2] - F[1, 2] * F[2, 0])
            + F[0, 2] * (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]))


@njit(cache=True)
def _inv_into(F, det, out):
    if F.shape[0] == 2:
        inv = 1.0 / det
        out[0, 0] = F[1, 1] * inv
        out[0, 1] = -F[0, 1] * inv
        out[1, 0] = -F[1, 0] * inv
        out[1, 1] = F[0, 0] * inv
    else:
        inv = 1.0 / det
        out[0, 0] = (F[1, 1] * F[2, 2] - F[1, 2] * F[2, 1]) * inv
        out[0, 1] = (F[0, 2] * F[2, 1] - F[0, 1] * F[2, 2]) * inv
        out[0, 2] = (F[0, 1] * F[1, 2] - F[0, 2] * F[1, 1]) * inv
        out[1, 0] = (F[1, 2] * F[2, 0] - F[1, 0] * F[2, 2]) * inv
        out[1, 1] = (F[0, 0] * F[2, 2] - F[0, 2] * F[2, 0]) * inv
        out[1, 2] = (F[0, 2] * F[1, 0] - F[0, 0] * F[1, 2]) * inv
        out[2, 0] = (F[1, 0] * F[2, 1] - F[1, 1] * F[2, 0]) * inv
        out[2, 1] = (F[0, 1] * F[2, 0] - F[0, 0] * F[2, 1]) * inv
        out[2, 2] = (F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]) * inv


@njit(cache=True)
def _polar(F, R, S):
    """Polar decomposition F = R S via SVD with sign correction
    R = U diag(1,..,det(U Vh)) Vh. Fills R and S, returns det(F)."""
    dim = F.shape[0]
    U, sv, Vh = np.linalg.svd(F)
    sgn = 1.0 if _det(U) * _det(Vh) > 0.0 else -1.0
    prod = 1.0
    for a in range(dim):
        prod *= sv[a]
    for i in range(dim):
        for j in range(dim):
            rij = 0.0
            sij = 0.0
            for k in range(dim):
                dk = sgn if k == dim - 1 else 1.0
                rij += U[i, k] * dk * Vh[k, j]
                sij += Vh[k, i] * (sv[k] * dk) * Vh[k, j]
            R[i, j] = rij
            S[i, j] = sij
    return sgn * prod


@njit(cache=True, parallel=True)
def pk1_batch(F_tot, mu, lam, det_floor, P, R_out, J_out, status):
    """Fixed-corotated first Piola-Kirchhoff stress per particle:
    P = 2 mu (F - R) + lam (J - 1) J F^{-T}."""
    n, dim, _ = F_tot.shape
    for p in prange(n):
        F = F_tot[p]
        R = np.empty((dim, dim))
        S = np.empty((dim, dim))
        J = _polar(F, R, S)
        J_out[p] = J
        if J < det_floor:
            status[p] = ERR_SINGULAR
            continue
        FinvT = np.empty((dim, dim))
        _inv_into(F, J, FinvT)
        g = lam * (J - 1.0) * J
        for i in range(dim):
            for j in range(dim):
                # FinvT holds F^{-1}; transpose on the fly
                P[p, i, j] = 2.0 * mu * (F[i, j] - R[i, j]) + g * FinvT[j, i]
                R_out[p, i, j] = R[i, j]


# ---------------------------------------------------------------------------
# P2G scatter: m_i = sum_p w m_p, p_i = sum_p w (m_p v_p (1-zeta dt) + G d_ip)
# with d_ip = x_i - x_p. mom_part = m_p v_p (1-zeta dt) and the transfer
# matrix G = (-3/dx^2) dt V0 P^T + m C are precomputed by the caller.
# ---------------------------------------------------------------------------

@njit(cache=True)
def p2g_serial(base, w, x, mom_part, mass, G, dx, res, gm, gmom):
    n, dim = x.shape
    if dim == 2:
        for p in range(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            mp = mass[p]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wt = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    gm[idx] += wt * mp
                    gmom[idx, 0] += wt * (mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1)
                    gmom[idx, 1] += wt * (mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1)
    else:
        for p in range(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            mp = mass[p]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wij = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        wt = wij * w[p, 2, k]
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        gm[idx] += wt * mp
                        gmom[idx, 0] += wt * (mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1 + G[p, 0, 2] * d2)
                        gmom[idx, 1] += wt * (mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1 + G[p, 1, 2] * d2)
                        gmom[idx, 2] += wt * (mom_part[p, 2] + G[p, 2, 0] * d0 + G[p, 2, 1] * d1 + G[p, 2, 2] * d2)


@njit(parallel=True)  # get_thread_id blocks on-disk caching
def p2g_fast(base, w, x, mom_part, mass, G, dx, res, gm, gmom):
    # per-thread grid buffers, reduced in thread order afterwards;
    # accumulation order differs from serial (documented fast-mode tolerance)
    n, dim = x.shape
    nt = get_num_threads()
    m = gm.shape[0]
    gm_t = np.zeros((nt, m))
    gmom_t = np.zeros((nt, m, dim))
    for p in prange(n):
        t = get_thread_id()
        if dim == 2:
            b0 = base[p, 0]
            b1 = base[p, 1]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wt = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    gm_t[t, idx] += wt * mass[p]
                    gmom_t[t, idx, 0] += wt * (mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1)
                    gmom_t[t, idx, 1] += wt * (mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1)
        else:
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wij = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        wt = wij * w[p, 2, k]
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        gm_t[t, idx] += wt * mass[p]
                        gmom_t[t, idx, 0] += wt * (mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1 + G[p, 0, 2] * d2)
                        gmom_t[t, idx, 1] += wt * (mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1 + G[p, 1, 2] * d2)
                        gmom_t[t, idx, 2] += wt * (mom_part[p, 2] + G[p, 2, 0] * d0 + G[p, 2, 1] * d1 + G[p, 2, 2] * d2)
    for idx in prange(m):
        for t in range(nt):
            gm[idx] += gm_t[t, idx]
            for a in range(dim):
                gmom[idx, a] += gmom_t[t, idx, a]


@njit(cache=True)
def rasterize_serial(base, w, mass, res, dim, gm):
    n = base.shape[0]
    if dim == 2:
        for p in range(n):
            for i in range(4):
                for j in range(4):
                    idx = (base[p, 0] + i) * res + (base[p, 1] + j)
                    gm[idx] += w[p, 0, i] * w[p, 1, j] * mass[p]
    else:
        for p in range(n):
            for i in range(4):
                for j in range(4):
                    wij = w[p, 0, i] * w[p, 1, j]
                    for k in range(4):
                        idx = ((base[p, 0] + i) * res + (base[p, 1] + j)) * res + (base[p, 2] + k)
                        gm[idx] += wij * w[p, 2, k] * mass[p]


# ---------------------------------------------------------------------------
# G2P gather: v_p = sum_i w v_i, C_p = (3/dx^2) sum_i w v_i d_ip^T
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def g2p_gather(base, w, x, gv, dx, inv_dx, res, v_out, C_out):
    n, dim = x.shape
    bfac = 3.0 * inv_dx * inv_dx
    if dim == 2:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            v0 = 0.0
            v1 = 0.0
            c00 = 0.0
            c01 = 0.0
            c10 = 0.0
            c11 = 0.0
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wt = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    g0 = gv[idx, 0]
                    g1 = gv[idx, 1]
                    v0 += wt * g0
                    v1 += wt * g1
                    c00 += wt * g0 * d0
                    c01 += wt * g0 * d1
                    c10 += wt * g1 * d0
                    c11 += wt * g1 * d1
            v_out[p, 0] = v0
            v_out[p, 1] = v1
            C_out[p, 0, 0] = bfac * c00
            C_out[p, 0, 1] = bfac * c01
            C_out[p, 1, 0] = bfac * c10
            C_out[p, 1, 1] = bfac * c11
    else:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            v0 = 0.0
            v1 = 0.0
            v2 = 0.0
            c00 = 0.0
            c01 = 0.0
            c02 = 0.0
            c10 = 0.0
            c11 = 0.0
            c12 = 0.0
            c20 = 0.0
            c21 = 0.0
            c22 = 0.0
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wij = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        wt = wij * w[p, 2, k]
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        g0 = gv[idx, 0]
                        g1 = gv[idx, 1]
                        g2 = gv[idx, 2]
                        v0 += wt * g0
                        v1 += wt * g1
                        v2 += wt * g2
                        c00 += wt * g0 * d0
                        c01 += wt * g0 * d1
                        c02 += wt * g0 * d2
                        c10 += wt * g1 * d0
                        c11 += wt * g1 * d1
                        c12 += wt * g1 * d2
                        c20 += wt * g2 * d0
                        c21 += wt * g2 * d1
                        c22 += wt * g2 * d2
            v_out[p, 0] = v0
            v_out[p, 1] = v1
            v_out[p, 2] = v2
            C_out[p, 0, 0] = bfac * c00
            C_out[p, 0, 1] = bfac * c01
            C_out[p, 0, 2] = bfac * c02
            C_out[p, 1, 0] = bfac * c10
            C_out[p, 1, 1] = bfac * c11
            C_out[p, 1, 2] = bfac * c12
            C_out[p, 2, 0] = bfac * c20
            C_out[p, 2, 1] = bfac * c21
            C_out[p, 2, 2] = bfac * c22


@njit(cache=True, parallel=True)
def sample_nodal(base, w, field, res, dim, out):
    # out[p] = sum_i w_ip field_i (used for per-particle loss channels)
    n = base.shape[0]
    for p in prange(n):
        acc = 0.0
        if dim == 2:
            for i in range(4):
                for j in range(4):
                    idx = (base[p, 0] + i) * res + (base[p, 1] + j)
                    acc += w[p, 0, i] * w[p, 1, j] * field[idx]
        else:
            for i in range(4):
                for j in range(4):
                    wij = w[p, 0, i] * w[p, 1, j]
                    for k in range(4):
                        idx = ((base[p, 0] + i) * res + (base[p, 1] + j)) * res + (base[p, 2] + k)
                        acc += wij * w[p, 2, k] * field[idx]
        out[p] = acc


@njit(cache=True, parallel=True)
def nodal_to_particle_grad(base, w, dw, mass, nodal_bar, inv_dx, res, out):
    """Chain a nodal-mass adjoint to particle positions:
    xbar_p[c] = m_p sum_i (d w_ip / d x_c) nodal_bar_i."""
    n, dim = base.shape
    for p in prange(n):
        if dim == 2:
            xb0 = 0.0
            xb1 = 0.0
            for i in range(4):
                for j in range(4):
                    idx = (base[p, 0] + i) * res + (base[p, 1] + j)
                    nb = nodal_bar[idx]
                    xb0 += dw[p, 0, i] * w[p, 1, j] * nb
                    xb1 += w[p, 0, i] * dw[p, 1, j] * nb
            out[p, 0] = mass[p] * xb0 * inv_dx
            out[p, 1] = mass[p] * xb1 * inv_dx
        else:
            xb0 = 0.0
            xb1 = 0.0
            xb2 = 0.0
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        idx = ((base[p, 0] + i) * res + (base[p, 1] + j)) * res + (base[p, 2] + k)
                        nb = nodal_bar[idx]
                        xb0 += dw[p, 0, i] * w[p, 1, j] * w[p, 2, k] * nb
                        xb1 += w[p, 0, i] * dw[p, 1, j] * w[p, 2, k] * nb
                        xb2 += w[p, 0, i] * w[p, 1, j] * dw[p, 2, k] * nb
            out[p, 0] = mass[p] * xb0 * inv_dx
            out[p, 1] = mass[p] * xb1 * inv_dx
            out[p, 2] = mass[p] * xb2 * inv_dx


# ---------------------------------------------------------------------------
# Adjoint of G2P. Forward: v'_p = sum w v_i, C'_p = b sum w v_i d^T with
# b = 3/dx^2 and d = x_i - x_p (weights and d both depend on x_p).
# Reverse, given vbar = dL/dv'_p and cbar = dL/dC'_p:
#   vbar_i  += w vbar + b w (cbar^T ... ) -> per node: w*vbar_a + b*w*sum_b cbar_ab d_b
#   xbar_p  += grad_w (vbar . v_i) + b grad_w (sum_ab cbar_ab v_a d_b)
#              - b w (sum_a cbar_ac v_a)          [d(d_b)/dx_c = -delta_bc]
# The grid scatter part is split from the pure per-particle map so the serial
# deterministic order only covers the scatter.
# ---------------------------------------------------------------------------

@njit(cache=True)
def g2p_backward_scatter(base, w, x, vbar, cbar, dx, inv_dx, res, gvbar):
    n, dim = x.shape
    bfac = 3.0 * inv_dx * inv_dx
    if dim == 2:
        for p in range(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wt = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    gvbar[idx, 0] += wt * (vbar[p, 0] + bfac * (cbar[p, 0, 0] * d0 + cbar[p, 0, 1] * d1))
                    gvbar[idx, 1] += wt * (vbar[p, 1] + bfac * (cbar[p, 1, 0] * d0 + cbar[p, 1, 1] * d1))
    else:
        for p in range(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wij = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        wt = wij * w[p, 2, k]
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        gvbar[idx, 0] += wt * (vbar[p, 0] + bfac * (cbar[p, 0, 0] * d0 + cbar[p, 0, 1] * d1 + cbar[p, 0, 2] * d2))
                        gvbar[idx, 1] += wt * (vbar[p, 1] + bfac * (cbar[p, 1, 0] * d0 + cbar[p, 1, 1] * d1 + cbar[p, 1, 2] * d2))
                        gvbar[idx, 2] += wt * (vbar[p, 2] + bfac * (cbar[p, 2, 0] * d0 + cbar[p, 2, 1] * d1 + cbar[p, 2, 2] * d2))


@njit(parallel=True)  # get_thread_id blocks on-disk caching
def g2p_backward_scatter_fast(base, w, x, vbar, cbar, dx, inv_dx, res, gvbar):
    n, dim = x.shape
    bfac = 3.0 * inv_dx * inv_dx
    nt = get_num_threads()
    m = gvbar.shape[0]
    buf = np.zeros((nt, m, dim))
    for p in prange(n):
        t = get_thread_id()
        if dim == 2:
            b0 = base[p, 0]
            b1 = base[p, 1]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wt = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    buf[t, idx, 0] += wt * (vbar[p, 0] + bfac * (cbar[p, 0, 0] * d0 + cbar[p, 0, 1] * d1))
                    buf[t, idx, 1] += wt * (vbar[p, 1] + bfac * (cbar[p, 1, 0] * d0 + cbar[p, 1, 1] * d1))
        else:
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            for i in range(4):
                wi = w[p, 0, i]
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    wij = wi * w[p, 1, j]
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        wt = wij * w[p, 2, k]
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        buf[t, idx, 0] += wt * (vbar[p, 0] + bfac * (cbar[p, 0, 0] * d0 + cbar[p, 0, 1] * d1 + cbar[p, 0, 2] * d2))
                        buf[t, idx, 1] += wt * (vbar[p, 1] + bfac * (cbar[p, 1, 0] * d0 + cbar[p, 1, 1] * d1 + cbar[p, 1, 2] * d2))
                        buf[t, idx, 2] += wt * (vbar[p, 2] + bfac * (cbar[p, 2, 0] * d0 + cbar[p, 2, 1] * d1 + cbar[p, 2, 2] * d2))
    for idx in prange(m):
        for t in range(nt):
            for a in range(dim):
                gvbar[idx, a] += buf[t, idx, a]


@njit(cache=True, parallel=True)
def g2p_backward_map(base, w, dw, x, gv, vbar, cbar, dx, inv_dx, res, xbar_acc):
    n, dim = x.shape
    bfac = 3.0 * inv_dx * inv_dx
    if dim == 2:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            xb0 = 0.0
            xb1 = 0.0
            for i in range(4):
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    g0 = gv[idx, 0]
                    g1 = gv[idx, 1]
                    wt = w[p, 0, i] * w[p, 1, j]
                    gw0 = dw[p, 0, i] * w[p, 1, j] * inv_dx
                    gw1 = w[p, 0, i] * dw[p, 1, j] * inv_dx
                    dot_v = vbar[p, 0] * g0 + vbar[p, 1] * g1
                    dot_c = (cbar[p, 0, 0] * g0 * d0 + cbar[p, 0, 1] * g0 * d1
                             + cbar[p, 1, 0] * g1 * d0 + cbar[p, 1, 1] * g1 * d1)
                    common = dot_v + bfac * dot_c
                    xb0 += gw0 * common - bfac * wt * (cbar[p, 0, 0] * g0 + cbar[p, 1, 0] * g1)
                    xb1 += gw1 * common - bfac * wt * (cbar[p, 0, 1] * g0 + cbar[p, 1, 1] * g1)
            xbar_acc[p, 0] += xb0
            xbar_acc[p, 1] += xb1
    else:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            xb0 = 0.0
            xb1 = 0.0
            xb2 = 0.0
            for i in range(4):
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        g0 = gv[idx, 0]
                        g1 = gv[idx, 1]
                        g2 = gv[idx, 2]
                        wt = w[p, 0, i] * w[p, 1, j] * w[p, 2, k]
                        gw0 = dw[p, 0, i] * w[p, 1, j] * w[p, 2, k] * inv_dx
                        gw1 = w[p, 0, i] * dw[p, 1, j] * w[p, 2, k] * inv_dx
                        gw2 = w[p, 0, i] * w[p, 1, j] * dw[p, 2, k] * inv_dx
                        dot_v = vbar[p, 0] * g0 + vbar[p, 1] * g1 + vbar[p, 2] * g2
                        dot_c = (cbar[p, 0, 0] * g0 * d0 + cbar[p, 0, 1] * g0 * d1 + cbar[p, 0, 2] * g0 * d2
                                 + cbar[p, 1, 0] * g1 * d0 + cbar[p, 1, 1] * g1 * d1 + cbar[p, 1, 2] * g1 * d2
                                 + cbar[p, 2, 0] * g2 * d0 + cbar[p, 2, 1] * g2 * d1 + cbar[p, 2, 2] * g2 * d2)
                        common = dot_v + bfac * dot_c
                        xb0 += gw0 * common - bfac * wt * (cbar[p, 0, 0] * g0 + cbar[p, 1, 0] * g1 + cbar[p, 2, 0] * g2)
                        xb1 += gw1 * common - bfac * wt * (cbar[p, 0, 1] * g0 + cbar[p, 1, 1] * g1 + cbar[p, 2, 1] * g2)
                        xb2 += gw2 * common - bfac * wt * (cbar[p, 0, 2] * g0 + cbar[p, 1, 2] * g1 + cbar[p, 2, 2] * g2)
            xbar_acc[p, 0] += xb0
            xbar_acc[p, 1] += xb1
            xbar_acc[p, 2] += xb2


# ---------------------------------------------------------------------------
# Adjoint of P2G. Forward per node: m_i += w m_p, p_i += w (q_p + G d) with
# q_p = m_p v_p (1-zeta dt). Reverse, given pbar_i = dL/dp_i, mbar_i = dL/dm_i:
#   vbar_p  = (1-zeta dt) m_p sum_i w pbar_i              (overwrite, sole path)
#   Gbar_p  = sum_i w pbar_i d^T
#   xbar_p += sum_i grad_w ((q_p + G d) . pbar_i + m_p mbar_i)
#             - sum_i w G^T pbar_i                        [d(d)/dx_p = -I]
# Pure gather over the particle's own stencil, no scatter, so it is a prange
# map in both determinism modes.
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def p2g_backward_map(base, w, dw, x, mom_part, mass, G, pbar, mbar, scale_v,
                     dx, inv_dx, res, vbar_out, Gbar_out, xbar_acc):
    n, dim = x.shape
    if dim == 2:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            vb0 = 0.0
            vb1 = 0.0
            gb00 = 0.0
            gb01 = 0.0
            gb10 = 0.0
            gb11 = 0.0
            xb0 = 0.0
            xb1 = 0.0
            for i in range(4):
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    d1 = (b1 + j) * dx - x[p, 1]
                    idx = (b0 + i) * res + (b1 + j)
                    pb0 = pbar[idx, 0]
                    pb1 = pbar[idx, 1]
                    wt = w[p, 0, i] * w[p, 1, j]
                    gw0 = dw[p, 0, i] * w[p, 1, j] * inv_dx
                    gw1 = w[p, 0, i] * dw[p, 1, j] * inv_dx
                    vb0 += wt * pb0
                    vb1 += wt * pb1
                    gb00 += wt * pb0 * d0
                    gb01 += wt * pb0 * d1
                    gb10 += wt * pb1 * d0
                    gb11 += wt * pb1 * d1
                    q0 = mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1
                    q1 = mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1
                    node_dot = q0 * pb0 + q1 * pb1 + mass[p] * mbar[idx]
                    xb0 += gw0 * node_dot - wt * (G[p, 0, 0] * pb0 + G[p, 1, 0] * pb1)
                    xb1 += gw1 * node_dot - wt * (G[p, 0, 1] * pb0 + G[p, 1, 1] * pb1)
            vbar_out[p, 0] = scale_v * mass[p] * vb0
            vbar_out[p, 1] = scale_v * mass[p] * vb1
            Gbar_out[p, 0, 0] = gb00
            Gbar_out[p, 0, 1] = gb01
            Gbar_out[p, 1, 0] = gb10
            Gbar_out[p, 1, 1] = gb11
            xbar_acc[p, 0] += xb0
            xbar_acc[p, 1] += xb1
    else:
        for p in prange(n):
            b0 = base[p, 0]
            b1 = base[p, 1]
            b2 = base[p, 2]
            vb0 = 0.0
            vb1 = 0.0
            vb2 = 0.0
            gb00 = 0.0
            gb01 = 0.0
            gb02 = 0.0
            gb10 = 0.0
            gb11 = 0.0
            gb12 = 0.0
            gb20 = 0.0
            gb21 = 0.0
            gb22 = 0.0
            xb0 = 0.0
            xb1 = 0.0
            xb2 = 0.0
            for i in range(4):
                d0 = (b0 + i) * dx - x[p, 0]
                for j in range(4):
                    d1 = (b1 + j) * dx - x[p, 1]
                    for k in range(4):
                        d2 = (b2 + k) * dx - x[p, 2]
                        idx = ((b0 + i) * res + (b1 + j)) * res + (b2 + k)
                        pb0 = pbar[idx, 0]
                        pb1 = pbar[idx, 1]
                        pb2 = pbar[idx, 2]
                        wt = w[p, 0, i] * w[p, 1, j] * w[p, 2, k]
                        gw0 = dw[p, 0, i] * w[p, 1, j] * w[p, 2, k] * inv_dx
                        gw1 = w[p, 0, i] * dw[p, 1, j] * w[p, 2, k] * inv_dx
                        gw2 = w[p, 0, i] * w[p, 1, j] * dw[p, 2, k] * inv_dx
                        vb0 += wt * pb0
                        vb1 += wt * pb1
                        vb2 += wt * pb2
                        gb00 += wt * pb0 * d0
                        gb01 += wt * pb0 * d1
                        gb02 += wt * pb0 * d2
                        gb10 += wt * pb1 * d0
                        gb11 += wt * pb1 * d1
                        gb12 += wt * pb1 * d2
                        gb20 += wt * pb2 * d0
                        gb21 += wt * pb2 * d1
                        gb22 += wt * pb2 * d2
                        q0 = mom_part[p, 0] + G[p, 0, 0] * d0 + G[p, 0, 1] * d1 + G[p, 0, 2] * d2
                        q1 = mom_part[p, 1] + G[p, 1, 0] * d0 + G[p, 1, 1] * d1 + G[p, 1, 2] * d2
                        q2 = mom_part[p, 2] + G[p, 2, 0] * d0 + G[p, 2, 1] * d1 + G[p, 2, 2] * d2
                        node_dot = q0 * pb0 + q1 * pb1 + q2 * pb2 + mass[p] * mbar[idx]
                        xb0 += gw0 * node_dot - wt * (G[p, 0, 0] * pb0 + G[p, 1, 0] * pb1 + G[p, 2, 0] * pb2)
                        xb1 += gw1 * node_dot - wt * (G[p, 0, 1] * pb0 + G[p, 1, 1] * pb1 + G[p, 2, 1] * pb2)
                        xb2 += gw2 * node_dot - wt * (G[p, 0, 2] * pb0 + G[p, 1, 2] * pb1 + G[p, 2, 2] * pb2)
            vbar_out[p, 0] = scale_v * mass[p] * vb0
            vbar_out[p, 1] = scale_v * mass[p] * vb1
            vbar_out[p, 2] = scale_v * mass[p] * vb2
            Gbar_out[p, 0, 0] = gb00
            Gbar_out[p, 0, 1] = gb01
            Gbar_out[p, 0, 2] = gb02
            Gbar_out[p, 1, 0] = gb10
            Gbar_out[p, 1, 1] = gb11
            Gbar_out[p, 1, 2] = gb12
            Gbar_out[p, 2, 0] = gb20
            Gbar_out[p, 2, 1] = gb21
            Gbar_out[p, 2, 2] = gb22
            xbar_acc[p, 0] += xb0
            xbar_acc[p, 1] += xb1
            xbar_acc[p, 2] += xb2


# ---------------------------------------------------------------------------
# Adjoint of the fixed-corotated stress. Given Pbar = dL/dP at F (=F+F_ctrl):
#   direct term      2 mu Pbar
#   rotation term    Rbar = -2 mu Pbar flows through dR:
#       3-D: Fbar += 2 R [q]x, A q = r, A = tr(S) I - S, r = axial(skew(R^T Rbar))
#       2-D: Fbar += (2 r / tr S) R K, K = [[0,-1],[1,0]], r = skew(R^T Rbar)_10
#   volume term      g(J) F^{-T} with g = lam (J-1) J:
#       Fbar += g'(J) J <Pbar, F^{-T}> F^{-T} - g F^{-T} Pbar^T F^{-T}
# The rotation identity comes from dR = R [omega]x with [A omega]x =
# 2 skew(R^T dF) for polar factors (standard result for d x d, d <= 3).
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def stress_backward(F_tot, Pbar, mu, lam, det_floor, Fbar_out, status):
    n, dim, _ = F_tot.shape
    for p in prange(n):
        F = F_tot[p]
        R = np.empty((dim, dim))
        S = np.empty((dim, dim))
        J = _polar(F, R, S)
        if J < det_floor:
            status[p] = ERR_SINGULAR
            continue
        Finv = np.empty((dim, dim))
        _inv_into(F, J, Finv)
        if dim == 2:
            # r = skew(R^T Rbar)_{10}; Rbar = -2 mu Pbar
            rtp10 = (R[0, 1] * Pbar[p, 0, 0] + R[1, 1] * Pbar[p, 1, 0])
            rtp01 = (R[0, 0] * Pbar[p, 0, 1] + R[1, 0] * Pbar[p, 1, 1])
            r = -2.0 * mu * 0.5 * (rtp10 - rtp01)
            trS = S[0, 0] + S[1, 1]
            coef = 2.0 * r / trS if trS > 1e-12 else 0.0
            rot00 = coef * R[0, 1]
            rot01 = -coef * R[0, 0]
            rot10 = coef * R[1, 1]
            rot11 = -coef * R[1, 0]
            g = lam * (J - 1.0) * J
            gp = lam * (2.0 * J - 1.0)
            # <Pbar, F^{-T}>; Finv holds F^{-1}
            dot = (Pbar[p, 0, 0] * Finv[0, 0] + Pbar[p, 0, 1] * Finv[1, 0]
                   + Pbar[p, 1, 0] * Finv[0, 1] + Pbar[p, 1, 1] * Finv[1, 1])
            c1 = gp * J * dot
            # M = F^{-T} Pbar^T F^{-T}: M_lk = sum_ij Finv_il Pbar_ji Finv_kj
            for l in range(2):
                for k in range(2):
                    m_lk = 0.0
                    for i in range(2):
                        for j in range(2):
                            m_lk += Finv[i, l] * Pbar[p, j, i] * Finv[k, j]
                    rot = rot00 if (l == 0 and k == 0) else (
                        rot01 if (l == 0 and k == 1) else (
                            rot10 if (l == 1 and k == 0) else rot11))
                    Fbar_out[p, l, k] = (2.0 * mu * Pbar[p, l, k] + rot
                                         + c1 * Finv[k, l] - g * m_lk)
        else:
            # r = axial(skew(R^T Rbar)), Rbar = -2 mu Pbar
            rb = -2.0 * mu
            w21 = 0.0
            w02 = 0.0
            w10 = 0.0
            for i in range(3):
                w21 += 0.5 * rb * (R[i, 2] * Pbar[p, i, 1] - R[i, 1] * Pbar[p, i, 2])
                w02 += 0.5 * rb * (R[i, 0] * Pbar[p, i, 2] - R[i, 2] * Pbar[p, i, 0])
                w10 += 0.5 * rb * (R[i, 1] * Pbar[p, i, 0] - R[i, 0] * Pbar[p, i, 1])
            # solve (tr(S) I - S) q = r with a symmetric 3x3 inverse
            a00 = S[1, 1] + S[2, 2]
            a11 = S[0, 0] + S[2, 2]
            a22 = S[0, 0] + S[1, 1]
            a01 = -S[0, 1]
            a02 = -S[0, 2]
            a12 = -S[1, 2]
            detA = (a00 * (a11 * a22 - a12 * a12)
                    - a01 * (a01 * a22 - a12 * a02)
                    + a02 * (a01 * a12 - a11 * a02))
            if np.abs(detA) > 1e-12:
                inv = 1.0 / detA
                q0 = inv * ((a11 * a22 - a12 * a12) * w21 + (a02 * a12 - a01 * a22) * w02 + (a01 * a12 - a02 * a11) * w10)
                q1 = inv * ((a12 * a02 - a01 * a22) * w21 + (a00 * a22 - a02 * a02) * w02 + (a01 * a02 - a00 * a12) * w10)
                q2 = inv * ((a01 * a12 - a02 * a11) * w21 + (a02 * a01 - a00 * a12) * w02 + (a00 * a11 - a01 * a01) * w10)
            else:
                q0 = 0.0
                q1 = 0.0
                q2 = 0.0
            # Fbar_rot = 2 R [q]x
            g = lam * (J - 1.0) * J
            gp = lam * (2.0 * J - 1.0)
            dot = 0.0
            for i in range(3):
                for j in range(3):
                    dot += Pbar[p, i, j] * Finv[j, i]
            c1 = gp * J * dot
            for l in range(3):
                rot0 = 2.0 * (R[l, 1] * q2 - R[l, 2] * q1)
                rot1 = 2.0 * (R[l, 2] * q0 - R[l, 0] * q2)
                rot2 = 2.0 * (R[l, 0] * q1 - R[l, 1] * q0)
                for k in range(3):
                    m_lk = 0.0
                    for i in range(3):
                        for j in range(3):
                            m_lk += Finv[i, l] * Pbar[p, j, i] * Finv[k, j]
                    rot = rot0 if k == 0 else (rot1 if k == 1 else rot2)
                    Fbar_out[p, l, k] = (2.0 * mu * Pbar[p, l, k] + rot
                                         + c1 * Finv[k, l] - g * m_lk)
