"""Full-model penalty assembly and the inner penalized fit.

The penalty on the flat coefficient vector is ``S_lam = sum_j lam_j * S_j``
where each block ``S_j`` acts on a contiguous index range.  Ranges of
different blocks may coincide exactly (tensor-product interactions share one
coefficient range between their two directional penalties) but must never
partially overlap.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


class InnerNonConvergenceError(RuntimeError):
    """Inner quasi-Newton fit failed; carries the best point seen."""

    def __init__(self, message, best=None, value=None):
        super().__init__(message)
        self.best = best
        self.value = value


@dataclass
class PenaltyBlock:
    """One penalty matrix with the coefficient range it acts on."""

    S: np.ndarray
    start: int
    stop: int
    label: str
    kind: str = "simple"  # 'simple' or 'tensor' (one of two coinciding blocks)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=float)
        if self.S.shape != (self.stop - self.start, self.stop - self.start):
            raise ValueError(
                f"penalty '{self.label}': matrix dimension does not match range"
            )

    @property
    def range(self):
        return slice(self.start, self.stop)


class PenaltyModel:
    """Penalty blocks plus current smoothing-parameter vector."""

    def __init__(self, blocks, lam, dim):
        self.blocks = list(blocks)
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (len(self.blocks),):
            raise ValueError("lambda vector length must equal number of blocks")
        if np.any(lam <= 0):
            raise ValueError("smoothing parameters must be positive")
        self.lam = lam
        self.dim = int(dim)
        self._check_ranges()

    def _check_ranges(self):
        ranges = sorted({(b.start, b.stop) for b in self.blocks})
        for (a1, b1), (a2, b2) in zip(ranges, ranges[1:]):
            if a2 < b1 and (a1, b1) != (a2, b2):
                raise ValueError(
                    f"partially overlapping penalty ranges [{a1},{b1}) and [{a2},{b2})"
                )
        for b in self.blocks:
            if b.stop > self.dim:
                raise ValueError("penalty range exceeds coefficient dimension")

    def range_groups(self):
        """Block indices grouped by (coinciding) coefficient range."""
        groups = {}
        for j, b in enumerate(self.blocks):
            groups.setdefault((b.start, b.stop), []).append(j)
        return groups

    def assemble(self, lam=None) -> np.ndarray:
        """Dense d x d penalty matrix; coinciding ranges summed."""
        lam = self.lam if lam is None else lam
        S = np.zeros((self.dim, self.dim))
        for lj, b in zip(lam, self.blocks):
            S[b.range, b.range] += lj * b.S
        return S

    def quadratic_forms(self, theta) -> np.ndarray:
        """Per-block quadratic forms q_j = theta' S_j theta."""
        q = np.empty(len(self.blocks))
        for j, b in enumerate(self.blocks):
            v = theta[b.range]
            q[j] = float(v @ b.S @ v)
            if q[j] < -1e-10 * max(1.0, float(v @ v)):
                raise ValueError(f"penalty block '{b.label}' is not PSD (q={q[j]})")
            q[j] = max(q[j], 0.0)
        return q

    def value(self, theta):
        """Total penalty sum_j lam_j q_j / 2 and the per-block q_j."""
        q = self.quadratic_forms(theta)
        return 0.5 * float(self.lam @ q), q


@dataclass
class InnerFit:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    n_iter: int
    n_evals: int
    converged: bool


def _newton_polish(fg, x, f, g, gtol, max_steps=15, fd_step=1e-6):
    """Damped Newton iteration on a central-difference Hessian of the exact
    gradient.  Returns (x, value, gradient, steps, converged)."""
    d = x.size
    for step_no in range(1, max_steps + 1):
        if np.abs(g).max() <= gtol * (1.0 + abs(f)):
            return x, f, g, step_no - 1, True
        H = np.empty((d, d))
        for i in range(d):
            h = fd_step * (1.0 + abs(x[i]))
            e = np.zeros(d)
            e[i] = h
            _, gp = fg(x + e)
            _, gm = fg(x - e)
            H[:, i] = (gp - gm) / (2.0 * h)
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        w = np.maximum(w, 1e-10 * max(float(w.max()), 1.0))
        direction = -(V @ ((V.T @ g) / w))
        slope = float(g @ direction)
        t = 1.0
        for _ in range(30):
            fn, gn = fg(x + t * direction)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                x, f, g = x + t * direction, fn, gn
                break
            t *= 0.5
        else:
            return x, f, g, step_no, False
    return x, f, g, max_steps, np.abs(g).max() <= gtol * (1.0 + abs(f))


def inner_fit(hmm, obs, pen: PenaltyModel, theta0, gtol=1e-7, maxiter=500):
    """Minimize the penalized negative log-likelihood with BFGS.

    Convergence: max-norm of the penalized gradient below
    ``gtol * (1 + |value|)``.  One restart (resetting the curvature
    approximation) is attempted on line-search failure before raising
    :class:`InnerNonConvergenceError` with the best point flagged.
    """
    S = pen.assemble()
    evals = [0]

    def fg(theta):
        evals[0] += 1
        try:
            nll, g = hmm.nll_grad(theta, obs)
        except FloatingPointError:
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(nll):
            return np.inf, np.zeros_like(theta)
        St = S @ theta
        return nll + 0.5 * float(theta @ St), g + St

    x0 = np.asarray(theta0, dtype=float)
    n_iter = 0
    res = None
    for attempt in range(2):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(
                fg, x0, jac=True, method="BFGS",
                options={"gtol": gtol, "maxiter": maxiter},
            )
        n_iter += res.nit
        gmax = np.abs(res.jac).max()
        if gmax <= gtol * (1.0 + abs(res.fun)):
            return InnerFit(res.x, float(res.fun), res.jac, n_iter, evals[0], True)
        x0 = res.x
    # quasi-Newton stalls when large smoothing parameters make the curvature
    # extremely anisotropic; polish with damped Newton steps on a
    # finite-difference Hessian of the exact gradient before giving up
    x, fval, grad, steps, ok = _newton_polish(fg, res.x, float(res.fun), res.jac, gtol)
    if ok:
        return InnerFit(x, fval, grad, n_iter + steps, evals[0], True)
    res.x, res.fun, res.jac = x, fval, grad
    raise InnerNonConvergenceError(
        f"inner BFGS did not converge (max|grad|={np.abs(res.jac).max():.3g}, "
        f"value={res.fun:.6g})",
        best=res.x,
        value=float(res.fun),
    )
