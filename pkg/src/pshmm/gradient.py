"""Penalized objective, exact gradient, and finite-difference Hessian.

The gradient of the HMM part comes from the analytic reverse sweep in
:mod:`pshmm.model`; the penalty contributes ``S_lam @ theta`` exactly.  The
Hessian is obtained by central finite differences of the exact gradient, as
second-order differentiation through the dense recursion is deliberately
avoided.
"""

import numpy as np

FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


def grad_penalized_nll(hmm, obs, pen, theta):
    """Value and exact gradient of the penalized negative log-likelihood."""
    theta = np.asarray(theta, dtype=float)
    nll, g = hmm.nll_grad(theta, obs)
    St = pen.assemble() @ theta
    return nll + 0.5 * float(theta @ St), g + St


def hessian_fd(grad_fn, theta, step_scale=1.0):
    """Symmetrized central-difference Hessian of ``grad_fn``.

    ``h_i = cbrt(eps) * (1 + |theta_i|) * step_scale``.  On non-finite
    entries the step is enlarged tenfold once before giving up.
    """
    theta = np.asarray(theta, dtype=float)
    d = len(theta)
    H = np.empty((d, d))
    h = FD_STEP * (1.0 + np.abs(theta)) * step_scale
    for i in range(d):
        e = np.zeros(d)
        e[i] = h[i]
        H[i] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2.0 * h[i])
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        if step_scale > 1.0:
            raise FloatingPointError("non-finite Hessian entries after retry")
        return hessian_fd(grad_fn, theta, step_scale=10.0)
    return H


def hessian_penalized(hmm, obs, pen, theta_hat):
    """Penalized Hessian J_lam at an inner optimum, by finite differencing
    the exact gradient of the penalized negative log-likelihood."""
    S = pen.assemble()

    def grad_fn(theta):
        try:
            _, g = hmm.nll_grad(theta, obs)
        except FloatingPointError:
            return np.full_like(theta, np.nan)
        return g + S @ theta

    return hessian_fd(grad_fn, theta_hat)
