"""Smoothing-parameter selection by the extended Fellner-Schall method.

Outer loop: penalized inner fit (warm-started), finite-difference Hessian of
the exact gradient, multiplicative update of each smoothing parameter from
pseudo-inverse and inverse-Hessian traces, exponential damping, until the
approximate restricted-likelihood gradient is small.  Several penalty blocks
may share one smoothing parameter (mapping) or be held fixed.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import linalg
from .gradient import hessian_penalized
from .penalty import PenaltyModel, inner_fit

FIXED = "fixed"

Q_FLOOR = 1e-12
LAMBDA_CAP = 1e7
LAMBDA_FLOOR = 1e-8
DEGENERATE_TOL = 1e-5


@dataclass
class LambdaMap:
    """Per-block assignment: a shared group id, or ``FIXED`` to hold the
    block at its initial value."""

    assignment: list

    def __post_init__(self):
        if not any(a != FIXED for a in self.assignment):
            raise ValueError("at least one smoothing parameter must be free")

    @classmethod
    def identity(cls, n_blocks):
        return cls(list(range(n_blocks)))

    @property
    def free_groups(self):
        seen = []
        for a in self.assignment:
            if a != FIXED and a not in seen:
                seen.append(a)
        return seen

    def members(self, group):
        return [j for j, a in enumerate(self.assignment) if a == group]


@dataclass
class OuterTrace:
    lam: list = field(default_factory=list)
    grad: list = field(default_factory=list)
    inner_iters: list = field(default_factory=list)
    rll: list = field(default_factory=list)

    def to_jsonable(self):
        return {
            "lambda": [list(map(float, v)) for v in self.lam],
            "outer_gradient": [list(map(float, v)) for v in self.grad],
            "inner_iterations": list(map(int, self.inner_iters)),
            "restricted_loglik": list(map(float, self.rll)),
        }


@dataclass
class FitResult:
    theta: np.ndarray
    lam: np.ndarray
    penalty: PenaltyModel
    J: np.ndarray
    loglik: float
    edf: float
    aic: float
    bic: float
    trace: OuterTrace
    converged: bool
    n_outer: int
    lmap: LambdaMap = None


def default_lambda_init(blocks, simple=1e4, tensor=1e5):
    """1e4 for simple/marginal blocks, 1e5 for tensor-interaction blocks."""
    return np.array([tensor if b.kind == "tensor" else simple for b in blocks])


def outer_terms(pen: PenaltyModel, theta, J, rank_tol=linalg.DEFAULT_RANK_TOL):
    """Per-block q_j, tr(S_lam^- S_j) and tr(J^-1 S_j).

    S_lam is block diagonal across disjoint ranges, so its pseudo-inverse is
    taken range-group by range-group.
    """
    q = pen.quadratic_forms(theta)
    L = len(pen.blocks)
    trS = np.empty(L)
    trJ = np.empty(L)
    cf = sla.cho_factor(J, lower=True)
    for (a, b), idxs in pen.range_groups().items():
        A = np.zeros((b - a, b - a))
        for j in idxs:
            A += pen.lam[j] * pen.blocks[j].S
        Apinv = linalg.pseudo_inverse(A, rank_tol)
        E = np.zeros((pen.dim, b - a))
        E[a:b] = np.eye(b - a)
        Jinv_sub = sla.cho_solve(cf, E)[a:b]
        for j in idxs:
            trS[j] = linalg.trace_product(Apinv, pen.blocks[j].S)
            trJ[j] = float(np.sum(Jinv_sub * pen.blocks[j].S))
    return q, trS, trJ


def outer_gradient(pen, theta, J, lmap: LambdaMap, terms=None):
    """Approximate restricted-likelihood gradient per free group.

    g = -q/2 + tr(S_lam^- S_j)/2 - tr(J^-1 S_j)/2, summed over grouped
    blocks; the explicit dependence of the Hessian on lambda is dropped.
    """
    q, trS, trJ = terms if terms is not None else outer_terms(pen, theta, J)
    out = np.empty(len(lmap.free_groups))
    for gi, grp in enumerate(lmap.free_groups):
        m = lmap.members(grp)
        out[gi] = 0.5 * (trS[m].sum() - trJ[m].sum() - q[m].sum())
    return out


def lambda_update(pen, theta, J, lmap: LambdaMap, terms=None,
                  q_floor=Q_FLOOR, cap=LAMBDA_CAP, degenerate_out=None):
    """Fellner-Schall proposal; grouped blocks sum numerator and denominator
    terms, fixed blocks are untouched.  Near-null smooths (q below the floor)
    are capped at ``cap``; ``degenerate_out`` (a boolean array over free
    groups) reports which groups were capped that way rather than by a
    resolved ratio."""
    q, trS, trJ = terms if terms is not None else outer_terms(pen, theta, J)
    lam_new = pen.lam.copy()
    for gi, grp in enumerate(lmap.free_groups):
        m = lmap.members(grp)
        num = trS[m].sum() - trJ[m].sum()
        den = q[m].sum()
        lam_g = pen.lam[m[0]]
        # when the quadratic form is negligible relative to the trace scale,
        # num is a difference of near-identical traces and the ratio num/den
        # is noise around 1; snap such a block to the cap (effectively null)
        # unless the ratio decisively asks for less smoothing, which marks a
        # real effect still over-shrunk by its initialization
        scale = trS[m].sum()
        degenerate = den <= DEGENERATE_TOL * scale and num >= 0.5 * den
        if den <= q_floor or degenerate:
            prop = cap
            if degenerate_out is not None:
                degenerate_out[gi] = True
        else:
            prop = lam_g * num / den
        prop = min(max(prop, LAMBDA_FLOOR), cap)
        lam_new[m] = prop
    if np.any(lam_new <= 0):
        raise RuntimeError("non-positive smoothing-parameter proposal")
    return lam_new


def restricted_loglik_value(loglik, pen: PenaltyModel, theta, J,
                            rank_tol=linalg.DEFAULT_RANK_TOL):
    """Laplace-approximate restricted log-likelihood (up to a constant).

    The penalty enters with a negative sign; the conjugate Gaussian model,
    for which the Laplace approximation is exact, pins this convention down
    (see tests).
    """
    pen_val, _ = pen.value(theta)
    lpd = 0.0
    for (a, b), idxs in pen.range_groups().items():
        A = np.zeros((b - a, b - a))
        for j in idxs:
            A += pen.lam[j] * pen.blocks[j].S
        lpd += linalg.log_pdet(A, rank_tol)
    sign, logdetJ = np.linalg.slogdet(J)
    if sign <= 0:
        raise np.linalg.LinAlgError("penalized Hessian not positive definite")
    return float(loglik - pen_val + 0.5 * lpd - 0.5 * logdetJ)


def _normalize_groups(pen, lmap):
    # blocks sharing a group share one lambda value from the start
    for grp in lmap.free_groups:
        m = lmap.members(grp)
        pen.lam[m] = pen.lam[m[0]]


def qreml(hmm, obs, pen: PenaltyModel, theta0=None, lmap=None, alpha=0.3,
          outer_tol=1e-4, max_outer=200, inner_gtol=1e-7, inner_maxiter=500,
          verbose=False):
    """Full fit: iterate inner penalized fits and Fellner-Schall updates.

    Terminates when the damped update stagnates: the largest per-group
    ``|log(lam_new / lam_old)|`` falls below ``outer_tol``, which bounds each
    group's relative fixed-point residual ``|proposal/lam - 1|``.  (An
    absolute threshold on the outer gradient itself is scale-dependent: the
    gradient in lambda units behaves like 1/lambda.)  Damping:
    ``lam_new = (1 - alpha) * proposal + alpha * lam_old``.
    """
    theta = np.asarray(
        hmm.default_theta(obs) if theta0 is None else theta0, dtype=float
    )
    trace = OuterTrace()

    if not pen.blocks:
        fit = inner_fit(hmm, obs, pen, theta, gtol=inner_gtol, maxiter=inner_maxiter)
        J = linalg.nearest_pd(hessian_penalized(hmm, obs, pen, fit.theta))
        ll = -fit.value
        d = hmm.dim
        return FitResult(fit.theta, pen.lam, pen, J, ll, d,
                         -2 * ll + 2 * d, -2 * ll + np.log(obs.T) * d,
                         trace, True, 0, lmap)

    if lmap is None:
        lmap = LambdaMap.identity(len(pen.blocks))
    _normalize_groups(pen, lmap)

    converged = False
    n_groups = len(lmap.free_groups)
    alpha_g = np.full(n_groups, alpha)
    prev_logstep = np.zeros(n_groups)
    fit = J = None
    terms = None
    for it in range(1, max_outer + 1):
        fit = inner_fit(hmm, obs, pen, theta, gtol=inner_gtol, maxiter=inner_maxiter)
        theta = fit.theta
        J = linalg.nearest_pd(hessian_penalized(hmm, obs, pen, theta))
        terms = outer_terms(pen, theta, J)
        g = outer_gradient(pen, theta, J, lmap, terms)
        pen_val, _ = pen.value(theta)
        ll = -fit.value + pen_val
        rll = restricted_loglik_value(ll, pen, theta, J)
        trace.lam.append(pen.lam.copy())
        trace.grad.append(g.copy())
        trace.inner_iters.append(fit.n_iter)
        trace.rll.append(rll)
        gmax = np.abs(g).max()
        degen = np.zeros(n_groups, dtype=bool)
        prop = lambda_update(pen, theta, J, lmap, terms, degenerate_out=degen)
        if verbose:
            print(f"[outer {it:3d}] max|g|={gmax:.3e}  rll={rll:.6f}  "
                  f"lam={np.array2string(pen.lam, precision=3)}  "
                  f"prop={np.array2string(prop, precision=3)}")
        lam_next = pen.lam.copy()
        resid = np.zeros(n_groups)
        for gi, grp in enumerate(lmap.free_groups):
            m = lmap.members(grp)
            # a degenerate block (trace-noise ratio, no information in the
            # quadratic form) holds its current value until every resolved
            # block has settled; capping it immediately perturbs the coupled
            # blocks' trajectories and can steer them into an inferior
            # stationary point of the criterion
            if degen[gi] and pen.lam[m[0]] < LAMBDA_CAP:
                lam_next[m] = pen.lam[m]
                prev_logstep[gi] = 0.0
                continue
            # per-group adaptive damping: the fixed-point iteration can fall
            # into a period-2 limit cycle around an interior optimum; deepen
            # the damping whenever the update direction alternates
            logstep = np.log(prop[m[0]] / pen.lam[m[0]])
            if prev_logstep[gi] * logstep < 0:
                alpha_g[gi] = 1.0 - 0.5 * (1.0 - alpha_g[gi])
            else:
                alpha_g[gi] = max(alpha, 1.0 - 1.5 * (1.0 - alpha_g[gi]))
            prev_logstep[gi] = logstep
            lam_next[m] = (1.0 - alpha_g[gi]) * prop[m[0]] + alpha_g[gi] * pen.lam[m[0]]
            # a proposal pinned at the cap marks an effectively null smooth;
            # jump straight to the cap instead of closing the remaining gap
            # geometrically over many damped iterations
            if prop[m[0]] >= LAMBDA_CAP:
                lam_next[m] = LAMBDA_CAP
            if not (pen.lam[m[0]] >= LAMBDA_CAP and prop[m[0]] >= LAMBDA_CAP):
                resid[gi] = abs(logstep)
        # convergence on the fixed-point residual |log(proposal/lambda)| per
        # group, scaled by the base damping so the threshold keeps the same
        # meaning whatever the current adaptive damping happens to be; groups
        # pinned at the cap count as resolved
        step = (1.0 - alpha) * (resid.max() if n_groups else 0.0)
        if step < outer_tol:
            pending = [gi for gi, grp in enumerate(lmap.free_groups)
                       if degen[gi]
                       and pen.lam[lmap.members(grp)[0]] < LAMBDA_CAP]
            if not pending:
                converged = True
                break
            # resolved blocks have stalled: release the held degenerate
            # blocks to the cap and let the loop re-settle around them
            for gi in pending:
                m = lmap.members(lmap.free_groups[gi])
                lam_next[m] = LAMBDA_CAP
                prev_logstep[gi] = 0.0
                alpha_g[gi] = alpha
        pen.lam = lam_next

    _, _, trJ = terms
    edf = hmm.dim - float(pen.lam @ trJ)
    pen_val, _ = pen.value(theta)
    ll = -fit.value + pen_val
    aic = -2 * ll + 2 * edf
    bic = -2 * ll + np.log(obs.T) * edf
    return FitResult(theta, pen.lam.copy(), pen, J, ll, edf, aic, bic,
                     trace, converged, len(trace.lam), lmap)


@dataclass
class SdReport:
    groups: list
    lam: np.ndarray
    var_lam: np.ndarray
    sd_lam: np.ndarray
    sigma2: np.ndarray
    sd_sigma2: np.ndarray
    hessian: np.ndarray
    invertible: bool

    def to_jsonable(self):
        return {
            "groups": [str(g) for g in self.groups],
            "lambda": list(map(float, self.lam)),
            "sd_lambda": list(map(float, self.sd_lam)),
            "sigma2": list(map(float, self.sigma2)),
            "sd_sigma2": list(map(float, self.sd_sigma2)),
            "invertible": bool(self.invertible),
        }


def delta_var_sigma2(lam, var_lam):
    """Delta method for sigma^2 = 1/lambda: Var(sigma^2) = Var(lambda)/lambda^4."""
    lam = np.asarray(lam, dtype=float)
    return np.asarray(var_lam, dtype=float) / lam**4


def sdreport_outer(hmm, obs, pen, fit: FitResult, lmap=None, rel_step=1e-3,
                   inner_gtol=1e-7, inner_maxiter=500):
    """Covariance of the estimated smoothing parameters (and of the implied
    variances 1/lambda) by finite differencing the approximate outer
    gradient: one warm-started penalized refit per free lambda component."""
    lmap = lmap or fit.lmap or LambdaMap.identity(len(pen.blocks))
    groups = lmap.free_groups
    G = len(groups)
    lam_hat = np.array([pen.lam[lmap.members(g)[0]] for g in groups])
    g0 = outer_gradient(pen, fit.theta, fit.J, lmap)
    H = np.empty((G, G))
    base_lam = pen.lam.copy()
    for gi, grp in enumerate(groups):
        m = lmap.members(grp)
        h = rel_step * lam_hat[gi]
        pen.lam = base_lam.copy()
        pen.lam[m] = lam_hat[gi] + h
        refit = inner_fit(hmm, obs, pen, fit.theta, gtol=inner_gtol,
                          maxiter=inner_maxiter)
        Jp = linalg.nearest_pd(hessian_penalized(hmm, obs, pen, refit.theta))
        gp = outer_gradient(pen, refit.theta, Jp, lmap)
        H[:, gi] = (gp - g0) / h
    pen.lam = base_lam
    H = 0.5 * (H + H.T)
    try:
        cov = np.linalg.inv(-H)
        var = np.diag(cov).copy()
        invertible = True
        if np.any(var <= 0):
            raise np.linalg.LinAlgError("negative variance from outer Hessian")
    except np.linalg.LinAlgError:
        invertible = False
        with np.errstate(divide="ignore", invalid="ignore"):
            var = np.where(np.diag(H) < 0, -1.0 / np.diag(H), np.nan)
    sd_lam = np.sqrt(var)
    var_s2 = delta_var_sigma2(lam_hat, var)
    return SdReport(groups, lam_hat, var, sd_lam, 1.0 / lam_hat,
                    np.sqrt(var_s2), H, invertible)
