"""Compiled inner loops for the batched loop simulation and its adjoint.

The expressions mirror :mod:`troughcal.pde` exactly; numba only removes the
per-step numpy dispatch overhead. When numba is unavailable the adjoint
module falls back to the numpy implementation.

Coefficient pack (``coeffs``), a tuple of scalars:
    0 kappa_f   dt*h_fp*p_p/(c_vf*a_f)
    1 r_p       dt/(c_vp*a_p)
    2 r_g       dt/(c_vg*a_g)
    3 cf_fp     h_fp*p_p
    4 sig_p     eps_p*sigma*p_p
    5 sig_g     eps_g*sigma*p_g
    6 kp_ap     k_p*a_p
    7 hge_pg    h_ge*p_g
    8 p_p
"""

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco(args[0]) if args and callable(args[0]) else deco


def forward_window_np(win_f, win_p, win_g, u, t_in, t_e, t_s, hpg_seg,
                      dt, dx, coeffs, k0, k1):
    """Vectorized reference implementation of forward_window."""
    kappa_f, r_p, r_g, cf_fp, sig_p, sig_g, kp_ap, hge_pg, p_p = coeffs
    dx2 = dx * dx
    for k in range(k0, k1):
        w = k - k0
        tf, tp, tg = win_f[w], win_p[w], win_g[w]
        c = (u[:, k] * dt / dx)[:, None]
        up = np.empty_like(tf)
        up[:, 1:] = tf[:, :-1]
        up[:, 0] = t_in[k]
        win_f[w + 1] = tf - c * (tf - up) + kappa_f * (tp - tf)
        lap = np.empty_like(tp)
        lap[:, 1:-1] = tp[:, 2:] - 2.0 * tp[:, 1:-1] + tp[:, :-2]
        lap[:, 0] = tp[:, 1] - tp[:, 0]
        lap[:, -1] = tp[:, -2] - tp[:, -1]
        lap /= dx2
        tp4 = (tp * tp) * (tp * tp)
        tg4 = (tg * tg) * (tg * tg)
        ts4 = (t_s[k] * t_s[k]) * (t_s[k] * t_s[k])
        win_p[w + 1] = tp + r_p * (-cf_fp * (tp - tf)
                                   + hpg_seg * p_p * (tg - tp)
                                   + sig_p * (tg4 - tp4) + kp_ap * lap)
        win_g[w + 1] = tg + r_g * (-hpg_seg * p_p * (tg - tp)
                                   + hge_pg * (t_e[k] - tg)
                                   + sig_g * (ts4 - tg4))


def adjoint_window_np(win_f, win_p, win_g, u, t_in, hpg_seg, dt, dx, coeffs,
                      k0, k1, lam_f, lam_p, lam_g, resid, cells, seed_scale,
                      g_u, g_hpg_seg):
    """Vectorized reference implementation of adjoint_window."""
    kappa_f, r_p, r_g, cf_fp, sig_p, sig_g, kp_ap, hge_pg, p_p = coeffs
    dx2 = dx * dx
    hpp = hpg_seg * p_p
    for k in range(k1 - 1, k0 - 1, -1):
        w = k - k0
        tf, tp, tg = win_f[w], win_p[w], win_g[w]
        c = (u[:, k] * dt / dx)[:, None]
        up = np.empty_like(tf)
        up[:, 1:] = tf[:, :-1]
        up[:, 0] = t_in[k]
        g_u[:, k] = -np.sum(lam_f * (tf - up), axis=1) * dt / dx
        g_hpg_seg += (lam_p * r_p - lam_g * r_g) * p_p * (tg - tp)
        lap_l = np.empty_like(lam_p)
        lap_l[:, 1:-1] = lam_p[:, 2:] - 2.0 * lam_p[:, 1:-1] + lam_p[:, :-2]
        lap_l[:, 0] = lam_p[:, 1] - lam_p[:, 0]
        lap_l[:, -1] = lam_p[:, -2] - lam_p[:, -1]
        lap_l /= dx2
        new_f = lam_f * (1.0 - c - kappa_f) + lam_p * (r_p * cf_fp)
        new_f[:, :-1] += c * lam_f[:, 1:]
        new_p = (lam_f * kappa_f
                 + lam_p * (1.0 - r_p * (cf_fp + hpp
                                         + 4.0 * sig_p * tp ** 3))
                 + r_p * kp_ap * lap_l
                 + lam_g * (r_g * hpp))
        new_g = (lam_p * (r_p * (hpp + 4.0 * sig_p * tg ** 3))
                 + lam_g * (1.0 - r_g * (hpp + hge_pg
                                         + 4.0 * sig_g * tg ** 3)))
        lam_f[:] = new_f
        lam_p[:] = new_p
        lam_g[:] = new_g
        lam_f[:, cells] += seed_scale * resid[:, :, k]


@njit(cache=True)
def forward_window(win_f, win_p, win_g, u, t_in, t_e, t_s, hpg_seg,
                   dt, dx, coeffs, k0, k1):
    """Advance states over steps [k0, k1); win_*[0] holds the start state
    and win_*[k - k0 + 1] receives the state after step k."""
    kappa_f, r_p, r_g, cf_fp, sig_p, sig_g, kp_ap, hge_pg, p_p = coeffs
    n, m = win_f.shape[1], win_f.shape[2]
    dx2 = dx * dx
    for k in range(k0, k1):
        w = k - k0
        tin = t_in[k]
        te = t_e[k]
        ts = t_s[k]
        ts4 = (ts * ts) * (ts * ts)
        for i in range(n):
            c = u[i, k] * dt / dx
            for j in range(m):
                tf = win_f[w, i, j]
                tp = win_p[w, i, j]
                tg = win_g[w, i, j]
                up = tin if j == 0 else win_f[w, i, j - 1]
                win_f[w + 1, i, j] = tf - c * (tf - up) + kappa_f * (tp - tf)
                if j == 0:
                    lap = (win_p[w, i, 1] - tp) / dx2
                elif j == m - 1:
                    lap = (win_p[w, i, m - 2] - tp) / dx2
                else:
                    lap = (win_p[w, i, j + 1] - 2.0 * tp
                           + win_p[w, i, j - 1]) / dx2
                tp4 = (tp * tp) * (tp * tp)
                tg4 = (tg * tg) * (tg * tg)
                q_p = (-cf_fp * (tp - tf) + hpg_seg[i, j] * p_p * (tg - tp)
                       + sig_p * (tg4 - tp4) + kp_ap * lap)
                win_p[w + 1, i, j] = tp + r_p * q_p
                q_g = (-hpg_seg[i, j] * p_p * (tg - tp) + hge_pg * (te - tg)
                       + sig_g * (ts4 - tg4))
                win_g[w + 1, i, j] = tg + r_g * q_g


@njit(cache=True)
def adjoint_window(win_f, win_p, win_g, u, t_in, hpg_seg, dt, dx, coeffs,
                   k0, k1, lam_f, lam_p, lam_g, resid, cells, seed_scale,
                   g_u, g_hpg_seg):
    """Reverse sweep over steps [k1-1 .. k0].

    ``lam_*`` enter as the adjoint of state k1 (seed for k1 already applied)
    and leave as the adjoint of state k0 (seed applied). ``resid`` is
    (n, n_sensors, n_steps); ``g_u`` and ``g_hpg_seg`` are accumulated.
    """
    kappa_f, r_p, r_g, cf_fp, sig_p, sig_g, kp_ap, hge_pg, p_p = coeffs
    n, m = lam_f.shape
    ns = cells.shape[0]
    dx2 = dx * dx
    new_f = np.empty((n, m))
    new_p = np.empty((n, m))
    new_g = np.empty((n, m))
    for k in range(k1 - 1, k0 - 1, -1):
        w = k - k0
        tin = t_in[k]
        for i in range(n):
            c = u[i, k] * dt / dx
            gu = 0.0
            for j in range(m):
                tf = win_f[w, i, j]
                tp = win_p[w, i, j]
                tg = win_g[w, i, j]
                hpp = hpg_seg[i, j] * p_p
                tp3 = tp * tp * tp
                tg3 = tg * tg * tg
                up = tin if j == 0 else win_f[w, i, j - 1]
                gu -= lam_f[i, j] * (tf - up)
                # adjoint of the mirrored-end laplacian (self-adjoint)
                if j == 0:
                    lap_l = (lam_p[i, 1] - lam_p[i, 0]) / dx2
                elif j == m - 1:
                    lap_l = (lam_p[i, m - 2] - lam_p[i, m - 1]) / dx2
                else:
                    lap_l = (lam_p[i, j + 1] - 2.0 * lam_p[i, j]
                             + lam_p[i, j - 1]) / dx2
                f_next = lam_f[i, j + 1] if j < m - 1 else 0.0
                new_f[i, j] = (lam_f[i, j] * (1.0 - c - kappa_f)
                               + c * f_next
                               + lam_p[i, j] * (r_p * cf_fp))
                new_p[i, j] = (lam_f[i, j] * kappa_f
                               + lam_p[i, j] * (1.0 - r_p * (
                                   cf_fp + hpp + 4.0 * sig_p * tp3))
                               + r_p * kp_ap * lap_l
                               + lam_g[i, j] * (r_g * hpp))
                new_g[i, j] = (lam_p[i, j] * (r_p * (hpp + 4.0 * sig_p * tg3))
                               + lam_g[i, j] * (1.0 - r_g * (
                                   hpp + hge_pg + 4.0 * sig_g * tg3)))
                g_hpg_seg[i, j] += (lam_p[i, j] * r_p - lam_g[i, j] * r_g) \
                    * p_p * (tg - tp)
            g_u[i, k] = gu * dt / dx
            for j in range(m):
                lam_f[i, j] = new_f[i, j]
                lam_p[i, j] = new_p[i, j]
                lam_g[i, j] = new_g[i, j]
            for jj in range(ns):
                lam_f[i, cells[jj]] += seed_scale * resid[i, jj, k]


if not HAVE_NUMBA:  # pragma: no cover
    forward_window = forward_window_np
    adjoint_window = adjoint_window_np
