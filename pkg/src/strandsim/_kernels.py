"""Hot numerical loops, JIT-compiled when numba is available.

Everything here is plain-loop numpy code so the same functions run (slowly)
without numba. The finite-volume march is unconditionally stable: the system
matrix V/dt + theta*M is strictly diagonally dominant for any step size.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco


@njit(cache=True)
def radiation_march(vols, betas, kappa, P, dtaus, thetas, keep_history):
    """Theta-scheme finite-volume march of a 1D conservation law.

    vols[i]   geometric measure of cell i (so mass_i = vols[i] * P[i])
    betas[j]  interface conductance D*omega(f_j)/(center spacing), j = 0..n;
              betas[0] and betas[n] must be 0 (boundary flux is kappa * P[0])
    kappa     effective absorption rate at the inner face (0 = reflecting)
    P         initial cell densities, overwritten in place
    dtaus     sub-step sizes; thetas the per-step implicitness (1 = BE, 0.5 = CN)

    Returns (history, survival, absorbed); history has one row per time knot
    when keep_history, else two rows (initial, final). survival[k] + absorbed[k]
    telescopes to survival[0] exactly, up to round-off.
    """
    n = P.shape[0]
    K = dtaus.shape[0]
    surv = np.empty(K + 1)
    absd = np.empty(K + 1)
    if keep_history:
        hist = np.empty((K + 1, n))
    else:
        hist = np.empty((2, n))
    s = 0.0
    for i in range(n):
        s += vols[i] * P[i]
        hist[0, i] = P[i]
    surv[0] = s
    absd[0] = 0.0

    mdiag = np.empty(n)
    for i in range(n):
        mdiag[i] = betas[i] + betas[i + 1]
    mdiag[0] += kappa

    low = np.empty(n)
    dia = np.empty(n)
    upp = np.empty(n)
    cp = np.empty(n)
    rhs = np.empty(n)
    last_dtau = -1.0
    last_theta = -1.0
    for k in range(K):
        dtau = dtaus[k]
        theta = thetas[k]
        if dtau != last_dtau or theta != last_theta:
            for i in range(n):
                dia[i] = vols[i] / dtau + theta * mdiag[i]
            for i in range(1, n):
                low[i] = -theta * betas[i]
            for i in range(n - 1):
                upp[i] = -theta * betas[i + 1]
            cp[0] = upp[0] / dia[0]
            for i in range(1, n - 1):
                cp[i] = upp[i] / (dia[i] - low[i] * cp[i - 1])
            last_dtau = dtau
            last_theta = theta
        om = 1.0 - theta
        p0_old = P[0]
        if om == 0.0:
            for i in range(n):
                rhs[i] = vols[i] / dtau * P[i]
        else:
            rhs[0] = (vols[0] / dtau - om * mdiag[0]) * P[0] + om * betas[1] * P[1]
            for i in range(1, n - 1):
                rhs[i] = (om * betas[i] * P[i - 1]
                          + (vols[i] / dtau - om * mdiag[i]) * P[i]
                          + om * betas[i + 1] * P[i + 1])
            rhs[n - 1] = (om * betas[n - 1] * P[n - 2]
                          + (vols[n - 1] / dtau - om * mdiag[n - 1]) * P[n - 1])
        rhs[0] = rhs[0] / dia[0]
        for i in range(1, n):
            rhs[i] = (rhs[i] - low[i] * rhs[i - 1]) / (dia[i] - low[i] * cp[i - 1])
        for i in range(n - 2, -1, -1):
            rhs[i] = rhs[i] - cp[i] * rhs[i + 1]
        for i in range(n):
            P[i] = rhs[i]
        absd[k + 1] = absd[k] + dtau * kappa * (theta * P[0] + om * p0_old)
        s = 0.0
        for i in range(n):
            s += vols[i] * P[i]
        surv[k + 1] = s
        if keep_history:
            for i in range(n):
                hist[k + 1, i] = P[i]
    if not keep_history:
        for i in range(n):
            hist[1, i] = P[i]
    return hist, surv, absd


@njit(cache=True)
def bd_radiation_walk(dim, D, sigma, r0, horizon, dt_bd, p_acc, test_radius,
                      n_trials, seed):
    """Fixed-step Brownian walks against a radiation boundary at sigma.

    On contact (radius below test_radius) the trial reacts with probability
    p_acc, otherwise the radius is mirrored about sigma. p_acc >= 1 means the
    boundary is absorbing (test_radius then carries the discrete-monitoring
    inflation). A walker more than 6 sigma-reach from contact for the
    remaining time cannot react (same 1e-9 truncation as the PDE grid), so
    the rest of its path collapses into one exact Gaussian jump. Returns
    (reacted flags, reaction time or nan, final radius or nan).
    """
    np.random.seed(seed)
    std = np.sqrt(2.0 * D * dt_bd)
    n_steps = int(np.ceil(horizon / dt_bd - 1e-12))
    # escape radius per step: contact unreachable within the remaining time
    esc = np.empty(n_steps)
    for k in range(n_steps):
        t_rem = horizon - (k + 1) * dt_bd
        esc[k] = test_radius + 6.0 * np.sqrt(2.0 * D * max(t_rem, 0.0))
    reacted = np.zeros(n_trials, np.int8)
    t_rx = np.full(n_trials, np.nan)
    r_fin = np.full(n_trials, np.nan)
    for tr in range(n_trials):
        x = r0
        y = 0.0
        z = 0.0
        alive = True
        for k in range(n_steps):
            x += std * np.random.normal()
            if dim >= 2:
                y += std * np.random.normal()
            if dim >= 3:
                z += std * np.random.normal()
            if dim == 1:
                rho = x
            elif dim == 2:
                rho = np.sqrt(x * x + y * y)
            else:
                rho = np.sqrt(x * x + y * y + z * z)
            if rho < test_radius:
                if p_acc >= 1.0 or np.random.random() < p_acc:
                    reacted[tr] = 1
                    t_rx[tr] = (k + 1) * dt_bd
                    alive = False
                    break
                mirrored = 2.0 * sigma - rho
                if mirrored <= 0.0:
                    mirrored = 1e-3 * sigma
                if dim == 1:
                    x = mirrored
                else:
                    f = mirrored / rho
                    x *= f
                    y *= f
                    if dim >= 3:
                        z *= f
                rho = mirrored
            if rho > esc[k]:
                t_rem = horizon - (k + 1) * dt_bd
                if t_rem > 0.0:
                    s_rem = np.sqrt(2.0 * D * t_rem)
                    x += s_rem * np.random.normal()
                    if dim >= 2:
                        y += s_rem * np.random.normal()
                    if dim >= 3:
                        z += s_rem * np.random.normal()
                break
        if alive:
            if dim == 1:
                r_fin[tr] = x
            elif dim == 2:
                r_fin[tr] = np.sqrt(x * x + y * y)
            else:
                r_fin[tr] = np.sqrt(x * x + y * y + z * z)
    return reacted, t_rx, r_fin


@njit(cache=True)
def bd_free_angle_walk(D, r0, horizon, dt_bd, n_trials, seed):
    """Free 3D walks from (r0, 0, 0); returns final radius and cos(angle)."""
    np.random.seed(seed)
    std = np.sqrt(2.0 * D * dt_bd)
    n_steps = int(np.ceil(horizon / dt_bd - 1e-12))
    r_fin = np.empty(n_trials)
    cos_fin = np.empty(n_trials)
    for tr in range(n_trials):
        x = r0
        y = 0.0
        z = 0.0
        for k in range(n_steps):
            x += std * np.random.normal()
            y += std * np.random.normal()
            z += std * np.random.normal()
        rho = np.sqrt(x * x + y * y + z * z)
        r_fin[tr] = rho
        cos_fin[tr] = x / rho if rho > 0.0 else 1.0
    return r_fin, cos_fin
