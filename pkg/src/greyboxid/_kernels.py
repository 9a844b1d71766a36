"""Compiled inner loops: discrete simulation, sensitivity propagation and
RK4 integration of physical truth systems.

All kernels are time-major and restricted to monomial displacement bases
with an explicit output equation; the thin wrappers in ``simulate`` and
``optimize`` fall back to reference Python implementations for the
general cases (velocity terms, custom functions, implicit output
feedback).
"""

import numpy as np
from numba import njit

__all__ = ["simulate_greybox", "propagate_sensitivities", "newton_rk4"]


@njit(cache=True)
def simulate_greybox(A, B, E, C, D, F, u, chan, expo, x0, div_bound):
    """Simulate x(t+1) = A x + B u + E g, y = C x + D u + F g.

    u : (T, m) time-major input. chan/expo describe the monomial basis
    g[a] = y[chan[a]]**expo[a]; the rows of F on basis channels must be
    zero (explicit output equation).

    Returns (x, y, g, ok, first_bad) with time-major trajectories.
    """
    n = A.shape[0]
    l = C.shape[0]
    s = E.shape[1]
    T = u.shape[0]
    x = np.zeros((T, n))
    y = np.zeros((T, l))
    g = np.zeros((T, s))
    xt = x0.copy()
    ok = True
    first_bad = -1
    for t in range(T):
        for i in range(n):
            x[t, i] = xt[i]
        yt = C @ xt + D @ u[t]
        for a in range(s):
            g[t, a] = yt[chan[a]] ** expo[a]
        if s > 0:
            yt = yt + F @ g[t]
        for i in range(l):
            y[t, i] = yt[i]
        xt = A @ xt + B @ u[t]
        if s > 0:
            xt = xt + E @ g[t]
        nrm = 0.0
        for i in range(n):
            v = abs(xt[i])
            if v > nrm:
                nrm = v
        if not (nrm <= div_bound):
            ok = False
            first_bad = t
            break
    return x, y, g, ok, first_bad


@njit(cache=True)
def propagate_sensitivities(A, E, C, F, x, y, ubar, chan, expo,
                            a_rows, a_cols, b_rows, b_cols,
                            c_rows, c_cols, d_rows, d_cols, keep):
    """Propagate output sensitivities of the grey-box recursion for every
    free parameter simultaneously.

    x, y, ubar : time-major base trajectories (T, n), (T, l), (T, m+s).
    The *_rows/*_cols arrays list the free entries of each matrix in the
    packed parameter order. Only the last ``keep`` samples of the output
    sensitivities are returned, shaped (keep, l, n_theta).
    """
    n = A.shape[0]
    l = C.shape[0]
    s = E.shape[1]
    T = x.shape[0]
    nA = a_rows.size
    nB = b_rows.size
    nC = c_rows.size
    nD = d_rows.size
    ntheta = nA + nB + nC + nD
    Xs = np.zeros((n, ntheta))
    out = np.zeros((keep, l, ntheta))
    EG = np.zeros((n, l))
    FG = np.zeros((l, l))
    for t in range(T):
        # gradient of the basis feedback at the current base output
        if s > 0:
            EG[:, :] = 0.0
            FG[:, :] = 0.0
            for a in range(s):
                c = chan[a]
                d = expo[a] * y[t, c] ** (expo[a] - 1)
                for i in range(n):
                    EG[i, c] += E[i, a] * d
                for i in range(l):
                    FG[i, c] += F[i, a] * d
        Ys = C @ Xs
        for p in range(nC):
            Ys[c_rows[p], nA + nB + p] += x[t, c_cols[p]]
        for p in range(nD):
            Ys[d_rows[p], nA + nB + nC + p] += ubar[t, d_cols[p]]
        if s > 0:
            # F rows on basis channels are zero, so the feedback correction
            # reads only rows of Ys that are already final
            Ys = Ys + FG @ Ys
        if t >= T - keep:
            out[t - (T - keep)] = Ys
        Xn = A @ Xs
        if s > 0:
            Xn = Xn + EG @ Ys
        for p in range(nA):
            Xn[a_rows[p], p] += x[t, a_cols[p]]
        for p in range(nB):
            Xn[b_rows[p], nA + p] += ubar[t, b_cols[p]]
        Xs = Xn
    return out


@njit(cache=True, inline="always")
def _newton_accel(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel, q, u_half,
                  iu, n_dof, f, dq):
    """Writes the state derivative of the Newton system into ``dq`` using
    the preallocated force buffer ``f`` (no allocations in the hot loop)."""
    for i in range(n_dof):
        fi = 0.0
        for j in range(Fmap.shape[1]):
            fi += Fmap[i, j] * u_half[iu, j]
        for j in range(n_dof):
            fi -= Cv[i, j] * q[n_dof + j] + K[i, j] * q[j]
        f[i] = fi
    for a in range(coef.size):
        if vel[a]:
            v = q[n_dof + chan[a]]
        else:
            v = q[chan[a]]
        f[rows[a]] -= coef[a] * v ** expo[a]
    for i in range(n_dof):
        dq[i] = q[n_dof + i]
        acc = 0.0
        for j in range(n_dof):
            acc += Minv[i, j] * f[j]
        dq[n_dof + i] = acc


@njit(cache=True)
def newton_rk4(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel, u_half,
               h, n_steps, decim, q0, div_bound):
    """Classical fixed-step RK4 for M y'' + Cv y' + K y + sum c_a g_a = F u.

    u_half : (2*n_steps + 1, m) input samples on the half-step grid.
    Every ``decim``-th state is recorded; the first record is the initial
    state. Returns (disp, velo, ok, first_bad) with (n_out, n_dof) arrays.
    """
    n_dof = Minv.shape[0]
    n_out = n_steps // decim
    disp = np.zeros((n_out, n_dof))
    velo = np.zeros((n_out, n_dof))
    q = q0.copy()
    qt = np.empty(2 * n_dof)
    f = np.empty(n_dof)
    k1 = np.empty(2 * n_dof)
    k2 = np.empty(2 * n_dof)
    k3 = np.empty(2 * n_dof)
    k4 = np.empty(2 * n_dof)
    ok = True
    first_bad = -1
    idx = 0
    for step in range(n_steps):
        if step % decim == 0:
            for i in range(n_dof):
                disp[idx, i] = q[i]
                velo[idx, i] = q[n_dof + i]
            idx += 1
        _newton_accel(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel,
                      q, u_half, 2 * step, n_dof, f, k1)
        for i in range(2 * n_dof):
            qt[i] = q[i] + 0.5 * h * k1[i]
        _newton_accel(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel,
                      qt, u_half, 2 * step + 1, n_dof, f, k2)
        for i in range(2 * n_dof):
            qt[i] = q[i] + 0.5 * h * k2[i]
        _newton_accel(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel,
                      qt, u_half, 2 * step + 1, n_dof, f, k3)
        for i in range(2 * n_dof):
            qt[i] = q[i] + h * k3[i]
        _newton_accel(Minv, Cv, K, Fmap, coef, rows, chan, expo, vel,
                      qt, u_half, 2 * step + 2, n_dof, f, k4)
        nrm = 0.0
        for i in range(2 * n_dof):
            q[i] = q[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i]
                                       + k4[i])
            v = abs(q[i])
            if v > nrm:
                nrm = v
        if not (nrm <= div_bound):
            ok = False
            first_bad = idx - 1
            break
    return disp, velo, ok, first_bad
