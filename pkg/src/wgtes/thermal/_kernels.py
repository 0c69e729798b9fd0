"""Compiled time-stepping kernels for the absorber/TES heat network.

The state variable is u = T_e**2 per node. In u the Wiedemann-Franz flux between
neighbours is linear, g * (u_i - u_j), and the stored electron energy of a node is
c * u / 2, so a conservative backward-Euler update balances energy exactly up to the
Newton tolerance.

Node arrays
-----------
c : gamma * V per node [J K^-2]
s : Sigma * V per node [W K^-5]
g : link conductances between node i and i+1 [W K^-2]
"""
import math

import numpy as np
from numba import njit

NEWTON_TOL = 1e-13
NEWTON_MAXIT = 60


@njit(cache=True, nogil=True)
def transition_resistance(temp, r_normal, t_c, width):
    z = (temp - t_c) / width
    if z >= 0.0:
        f = 1.0 / (1.0 + math.exp(-z))
    else:
        ez = math.exp(z)
        f = ez / (1.0 + ez)
    return r_normal * f, r_normal * f * (1.0 - f) / width


@njit(cache=True, nogil=True)
def joule_power(u_tes, i_old, dt, v_bias, r_shunt, r_normal, t_c, width, inductance):
    """Joule power in the TES and its derivative with respect to u_tes.

    With zero inductance the current follows the resistance instantly; otherwise the
    circuit ODE L dI/dt = V - I (R_sh + R) is advanced by backward Euler alongside.
    Returns (power, d power / d u_tes, new current, resistance).
    """
    temp = math.sqrt(u_tes)
    r, dr_dt = transition_resistance(temp, r_normal, t_c, width)
    if inductance <= 0.0:
        current = v_bias / (r + r_shunt)
        di_dr = -v_bias / (r + r_shunt) ** 2
    else:
        a = dt / inductance
        den = 1.0 + a * (r + r_shunt)
        current = (i_old + a * v_bias) / den
        di_dr = -(i_old + a * v_bias) * a / den**2
    power = current * current * r
    dp_dr = 2.0 * current * di_dr * r + current * current
    return power, dp_dr * dr_dt / (2.0 * temp), current, r


@njit(cache=True, nogil=True)
def solve_twisted(sub, diag, sup, rhs, twist):
    """Tridiagonal solve eliminating from both ends towards row ``twist``.

    Row i reads sub[i-1] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]. With the
    twist at the centre, a mirror-image system is processed by mirror-image floating
    point operations, so symmetric inputs give bitwise symmetric solutions.
    """
    n = diag.size
    cp = np.empty(n)
    dp = np.empty(n)
    for i in range(twist):
        if i == 0:
            den = diag[0]
            dp[0] = rhs[0] / den
        else:
            den = diag[i] - sub[i - 1] * cp[i - 1]
            dp[i] = (rhs[i] - sub[i - 1] * dp[i - 1]) / den
        cp[i] = sup[i] / den
    for i in range(n - 1, twist, -1):
        if i == n - 1:
            den = diag[i]
            dp[i] = rhs[i] / den
        else:
            den = diag[i] - sup[i] * cp[i + 1]
            dp[i] = (rhs[i] - sup[i] * dp[i + 1]) / den
        cp[i] = sub[i - 1] / den
    den_l = 0.0
    rhs_l = 0.0
    den_r = 0.0
    rhs_r = 0.0
    if twist > 0:
        den_l = sub[twist - 1] * cp[twist - 1]
        rhs_l = sub[twist - 1] * dp[twist - 1]
    if twist < n - 1:
        den_r = sup[twist] * cp[twist + 1]
        rhs_r = sup[twist] * dp[twist + 1]
    x = np.empty(n)
    x[twist] = (rhs[twist] - (rhs_l + rhs_r)) / (diag[twist] - (den_l + den_r))
    for i in range(twist - 1, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    for i in range(twist + 1, n):
        x[i] = dp[i] - cp[i] * x[i - 1]
    return x


@njit(cache=True, nogil=True)
def be_step(u_old, i_old, c, s, g, tp5, tes, dt, v_bias, r_shunt, r_normal, t_c,
            width, inductance, joule_on, fix_tes):
    """One backward-Euler step solved by Newton iteration.

    Returns (u_new, current_new, joule_power_new, ep_power_new, status) where status
    is 0 on success, 1 on Newton non-convergence and 2 on a non-finite iterate.
    """
    n = u_old.size
    u = u_old.copy()
    sub = np.empty(n - 1)
    sup = np.empty(n - 1)
    diag = np.empty(n)
    rhs = np.empty(n)
    inv2dt = 0.5 / dt
    status = 1
    current = i_old
    pj = 0.0
    for _ in range(NEWTON_MAXIT):
        for i in range(n):
            ui = u[i]
            r15 = ui * math.sqrt(ui)
            # both neighbour terms are summed as a pair so mirror nodes round alike
            fl = 0.0
            gl = 0.0
            fr = 0.0
            gr = 0.0
            if i > 0:
                fl = g[i - 1] * (u[i - 1] - ui)
                gl = g[i - 1]
            if i < n - 1:
                fr = g[i] * (u[i + 1] - ui)
                gr = g[i]
            diag[i] = c[i] * inv2dt + 2.5 * s[i] * r15 + (gl + gr)
            rhs[i] = (fl + fr) - (c[i] * inv2dt * (ui - u_old[i]) + s[i] * (ui * r15 - tp5))
        for i in range(n - 1):
            sub[i] = -g[i]
            sup[i] = -g[i]
        if joule_on:
            pj, dpj, current, _r = joule_power(u[tes], i_old, dt, v_bias, r_shunt,
                                               r_normal, t_c, width, inductance)
            rhs[tes] += pj
            diag[tes] -= dpj
        if fix_tes:
            diag[tes] = 1.0
            rhs[tes] = u_old[tes] - u[tes]
            if tes > 0:
                sub[tes - 1] = 0.0
            if tes < n - 1:
                sup[tes] = 0.0
        du = solve_twisted(sub, diag, sup, rhs, tes)
        # keep iterates physical: never step past 10 % of the current value downward
        scale = 1.0
        for i in range(n):
            if du[i] < -0.9 * u[i]:
                scale = min(scale, -0.9 * u[i] / du[i])
        err = 0.0
        finite = True
        for i in range(n):
            u[i] += scale * du[i]
            if not math.isfinite(u[i]):
                finite = False
            rel = abs(scale * du[i]) / u[i]
            if rel > err:
                err = rel
        if not finite:
            status = 2
            break
        if err < NEWTON_TOL and scale == 1.0:
            status = 0
            break
    if joule_on:
        pj, _d, current, _r = joule_power(u[tes], i_old, dt, v_bias, r_shunt,
                                          r_normal, t_c, width, inductance)
    pep = 0.0
    for i in range(n):
        pep += s[i] * (u[i] ** 2.5 - tp5)
    return u, current, pj, pep, status


@njit(cache=True, nogil=True)
def integrate(u0, i0, c, s, g, tp5, tes, v_bias, r_shunt, r_normal, t_c, width,
              inductance, joule_on, dt_sample, n_samples, dt_first, growth, dt_max,
              p_joule_ref, p_ep_ref, field):
    """Advance the network and sample the bias current on a uniform time grid.

    Internal steps start at ``dt_first`` and grow geometrically to ``dt_max``; the
    sample instants are always hit exactly. ``field`` is filled with temperatures at
    every sample when it has ``n_samples`` rows.

    Returns (current samples, final u, final current, integral of (P_joule - ref),
    integral of (P_ep - ref), status).
    """
    u = u0.copy()
    current = i0
    out = np.empty(n_samples)
    out[0] = current
    record = field.shape[0] == n_samples
    if record:
        for j in range(u.size):
            field[0, j] = math.sqrt(u[j])
    h = dt_first
    e_joule = 0.0
    e_ep = 0.0
    for k in range(1, n_samples):
        remaining = dt_sample
        while remaining > 0.0:
            step = min(h, remaining)
            if remaining - step < 1e-6 * step:
                step = remaining
            u, current, pj, pep, status = be_step(
                u, current, c, s, g, tp5, tes, step, v_bias, r_shunt, r_normal, t_c,
                width, inductance, joule_on, False)
            if status != 0:
                return out, u, current, e_joule, e_ep, status
            e_joule += step * (pj - p_joule_ref)
            e_ep += step * (pep - p_ep_ref)
            remaining -= step
            h = min(h * growth, dt_max)
        out[k] = current
        if record:
            for j in range(u.size):
                field[k, j] = math.sqrt(u[j])
    return out, u, current, e_joule, e_ep, 0
