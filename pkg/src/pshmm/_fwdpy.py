"""Pure-numpy implementation of the forward-recursion kernels.

Fallback backend used when the compiled extension is unavailable (see
:mod:`pshmm.kernels`).  Semantics are identical to ``_fwdc``: both operate on
one track at a time, on densities that have already been rescaled so the
per-time-point maximum is 1.
"""

import numpy as np


def forward(P, Gam, delta):
    """Scaled forward recursion for a single track.

    Parameters
    ----------
    P : (T, N) array
        State-dependent densities, rescaled per time point (caller accounts
        for the rescaling constants separately).
    Gam : (T, N, N) array
        Transition matrices; ``Gam[0]`` is not used by the recursion.
    delta : (N,) array
        Initial state distribution.

    Returns
    -------
    loglik : float
        Sum of log scale factors.
    phi : (T, N) array
        Normalized forward variables.
    c : (T,) array
        Scale factors.
    """
    T, N = P.shape
    phi = np.empty((T, N))
    c = np.empty(T)
    u = delta * P[0]
    for t in range(T):
        if t > 0:
            u = (phi[t - 1] @ Gam[t]) * P[t]
        ct = u.sum()
        if not ct > 0.0:
            raise FloatingPointError(
                f"forward variable underflowed to zero at t={t}"
            )
        c[t] = ct
        phi[t] = u / ct
    return float(np.log(c).sum()), phi, c


def backward(P, Gam, delta, phi, c):
    """Reverse sweep of the scaled forward recursion.

    Accumulates adjoints of the log-likelihood with respect to the rescaled
    densities, the transition matrices and the initial distribution.

    Returns
    -------
    Pbar : (T, N) array
    Gambar : (T, N, N) array
    deltabar : (N,) array
    """
    T, N = P.shape
    Pbar = np.zeros_like(P)
    Gambar = np.zeros_like(Gam)
    phibar = np.zeros(N)
    for t in range(T - 1, 0, -1):
        ubar = (1.0 + phibar - phibar @ phi[t]) / c[t]
        a = phi[t - 1] @ Gam[t]
        Pbar[t] = ubar * a
        abar = ubar * P[t]
        Gambar[t] = np.outer(phi[t - 1], abar)
        phibar = Gam[t] @ abar
    ubar = (1.0 + phibar - phibar @ phi[0]) / c[0]
    Pbar[0] = ubar * delta
    deltabar = ubar * P[0]
    return Pbar, Gambar, deltabar
