import numpy as np
import pytest

from pshmm import bases, linalg
from pshmm.model import HmmModel, ObservationTable
from pshmm.penalty import PenaltyBlock, PenaltyModel
from pshmm.qreml import (
    FIXED,
    LambdaMap,
    default_lambda_init,
    delta_var_sigma2,
    lambda_update,
    outer_gradient,
    outer_terms,
    qreml,
    restricted_loglik_value,
    sdreport_outer,
)


def rand_psd(rng, n, r=None):
    A = rng.normal(size=(n, r or n))
    return A @ A.T


# ---------------------------------------------------------------------------
# Analytic building blocks

@pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
def test_lone_block_trace_identity(lam):
    """lam * tr(S_lam^- S_j) equals rank(S_j) when the block is alone."""
    rng = np.random.default_rng(80)
    for r in (3, 5, 7):
        S = rand_psd(rng, 7, r)
        pen = PenaltyModel([PenaltyBlock(S, 0, 7, "s")], np.array([lam]), 7)
        theta = rng.normal(size=7)
        J = rand_psd(rng, 7) + np.eye(7)
        _, trS, _ = outer_terms(pen, theta, J)
        assert lam * trS[0] == pytest.approx(r, abs=1e-8)


def test_outer_terms_oracle():
    """q, tr(S_lam^- S_j), tr(J^-1 S_j) against direct dense computations."""
    rng = np.random.default_rng(81)
    S1 = rand_psd(rng, 4)
    S2 = rand_psd(rng, 4)
    S3 = rand_psd(rng, 3, 2)
    blocks = [
        PenaltyBlock(S1, 0, 4, "t:1", "tensor"),
        PenaltyBlock(S2, 0, 4, "t:2", "tensor"),
        PenaltyBlock(S3, 4, 7, "s"),
    ]
    lam = np.array([0.5, 2.0, 3.0])
    pen = PenaltyModel(blocks, lam, 8)
    theta = rng.normal(size=8)
    J = rand_psd(rng, 8) + np.eye(8)
    q, trS, trJ = outer_terms(pen, theta, J)
    Slam = pen.assemble()
    Jinv = np.linalg.inv(J)
    for j, b in enumerate(blocks):
        v = theta[b.range]
        assert q[j] == pytest.approx(v @ b.S @ v, rel=1e-10)
        Sfull = np.zeros((8, 8))
        Sfull[b.range, b.range] = b.S
        Sg = Slam[b.range, b.range]
        ref = np.trace(np.linalg.pinv(Sg) @ b.S)
        assert trS[j] == pytest.approx(ref, rel=1e-8)
        assert trJ[j] == pytest.approx(np.trace(Jinv @ Sfull), rel=1e-8)


def test_lambda_update_closed_form():
    rng = np.random.default_rng(82)
    S = rand_psd(rng, 5, 4)
    lam = np.array([2.5])
    pen = PenaltyModel([PenaltyBlock(S, 0, 5, "s")], lam.copy(), 5)
    theta = rng.normal(size=5)
    J = rand_psd(rng, 5) + np.eye(5)
    lmap = LambdaMap.identity(1)
    q, trS, trJ = outer_terms(pen, theta, J)
    expected = min(max(lam[0] * (trS[0] - trJ[0]) / q[0], 1e-8), 1e7)
    got = lambda_update(pen, theta, J, lmap)
    assert got[0] == pytest.approx(expected, rel=1e-12)
    # a case where the raw proposal is interior: inflate the signal
    theta2 = 10.0 * theta
    q2, trS2, trJ2 = outer_terms(pen, theta2, J)
    raw = lam[0] * (trS2[0] - trJ2[0]) / q2[0]
    if 1e-8 < raw < 1e7:
        got2 = lambda_update(pen, theta2, J, lmap)
        assert got2[0] == pytest.approx(raw, rel=1e-12)


def test_lambda_update_grouping_and_fixed():
    rng = np.random.default_rng(83)
    S = np.eye(3)
    blocks = [PenaltyBlock(S, 3 * k, 3 * k + 3, f"b{k}") for k in range(3)]
    pen = PenaltyModel(blocks, np.array([2.0, 2.0, 7.0]), 9)
    theta = rng.normal(size=9)
    J = rand_psd(rng, 9) + np.eye(9)
    lmap = LambdaMap(["g", "g", FIXED])
    q, trS, trJ = outer_terms(pen, theta, J)
    new = lambda_update(pen, theta, J, lmap)
    grouped = 2.0 * ((trS[0] + trS[1]) - (trJ[0] + trJ[1])) / (q[0] + q[1])
    assert new[0] == pytest.approx(grouped, rel=1e-12)
    assert new[1] == pytest.approx(grouped, rel=1e-12)
    assert new[2] == 7.0  # fixed block untouched


def test_lambda_update_null_smooth_capped():
    S = np.eye(3)
    pen = PenaltyModel([PenaltyBlock(S, 0, 3, "s")], np.array([10.0]), 3)
    theta = np.zeros(3)  # q = 0: no signal in the block
    J = np.eye(3)
    new = lambda_update(pen, theta, J, LambdaMap.identity(1))
    assert new[0] == pytest.approx(1e7)


def test_lambda_map_validation():
    with pytest.raises(ValueError, match="free"):
        LambdaMap([FIXED, FIXED])
    m = LambdaMap(["a", FIXED, "a", "b"])
    assert m.free_groups == ["a", "b"]
    assert m.members("a") == [0, 2]


def test_default_lambda_init_kinds():
    blocks = [
        PenaltyBlock(np.eye(2), 0, 2, "s", "simple"),
        PenaltyBlock(np.eye(2), 2, 4, "t:1", "tensor"),
    ]
    assert np.array_equal(default_lambda_init(blocks), [1e4, 1e5])


def test_delta_var_sigma2():
    assert delta_var_sigma2(np.array([2.0]), np.array([8.0]))[0] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# Restricted-likelihood value: conjugate Gaussian oracle

@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_restricted_loglik_matches_gaussian_marginal(lam):
    """For y = X beta + e with unit noise and beta ~ N(0, (lam S)^-1), the
    Laplace approximation is exact; the value must equal the closed-form
    marginal log-likelihood."""
    rng = np.random.default_rng(84)
    n, d = 40, 6
    X = rng.normal(size=(n, d))
    S = rand_psd(rng, d) + 0.5 * np.eye(d)  # full rank
    y = rng.normal(size=n)
    J = X.T @ X + lam * S
    theta_hat = np.linalg.solve(J, X.T @ y)
    r = y - X @ theta_hat
    ll_hat = -0.5 * n * np.log(2 * np.pi) - 0.5 * float(r @ r)
    pen = PenaltyModel([PenaltyBlock(S, 0, d, "s")], np.array([lam]), d)
    got = restricted_loglik_value(ll_hat, pen, theta_hat, J)
    Sigma = np.eye(n) + X @ np.linalg.inv(lam * S) @ X.T
    sign, logdet = np.linalg.slogdet(Sigma)
    marginal = -0.5 * (n * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(Sigma, y))
    assert got == pytest.approx(marginal, abs=1e-8)


def test_outer_gradient_zero_at_reml_optimum():
    """On the Gaussian toy, the Fellner-Schall gradient vanishes where the
    exact marginal likelihood is maximal over lambda."""
    rng = np.random.default_rng(85)
    n, d = 60, 5
    X = rng.normal(size=(n, d))
    S = np.eye(d)
    beta = rng.normal(0.0, 0.7, d)
    y = X @ beta + rng.normal(size=n)

    def marginal(lam):
        Sigma = np.eye(n) + X @ X.T / lam
        sign, logdet = np.linalg.slogdet(Sigma)
        return -0.5 * (logdet + y @ np.linalg.solve(Sigma, y))

    lams = np.exp(np.linspace(-3, 5, 400))
    vals = [marginal(l) for l in lams]
    lam_star = lams[int(np.argmax(vals))]
    pen = PenaltyModel([PenaltyBlock(S, 0, d, "s")], np.array([lam_star]), d)
    J = X.T @ X + lam_star * S
    theta_hat = np.linalg.solve(J, X.T @ y)
    g = outer_gradient(pen, theta_hat, J, LambdaMap.identity(1))
    # gradient w.r.t. log-lambda vanishes at the grid optimum (grid tolerance)
    assert abs(g[0]) < 0.05


# ---------------------------------------------------------------------------
# End-to-end outer iteration on a small model

@pytest.fixture(scope="module")
def small_fit():
    rng = np.random.default_rng(86)
    T = 600
    z = rng.uniform(0.0, 24.0, T)
    terms = {
        (1, 2): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
        (2, 1): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
    }
    hmm = HmmModel(2, [("y0", "normal")], terms)
    truth = np.zeros(hmm.dim)
    truth[hmm.block("y0.mean").slice] = [-2.0, 2.0]
    truth[hmm.block("1->2.icpt").start] = -2.0
    truth[hmm.block("2->1.icpt").start] = -2.0
    obs, _ = hmm.simulate(truth, {"z": z}, [], seed=6)
    blocks = hmm.penalty_blocks()
    pen = PenaltyModel(blocks, default_lambda_init(blocks), hmm.dim)
    fit = qreml(hmm, obs, pen, outer_tol=1e-3)
    return hmm, obs, pen, fit


def test_qreml_converges(small_fit):
    hmm, obs, pen, fit = small_fit
    assert fit.converged
    assert fit.n_outer >= 1
    assert len(fit.trace.lam) == fit.n_outer
    assert np.abs(fit.trace.grad[-1]).max() < 1e-3


def test_qreml_edf_and_criteria(small_fit):
    hmm, obs, pen, fit = small_fit
    assert 0 < fit.edf <= hmm.dim
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * fit.edf, rel=1e-12)
    assert fit.bic == pytest.approx(-2 * fit.loglik + np.log(obs.T) * fit.edf, rel=1e-12)
    # curvature at the optimum is positive definite after the repair step
    assert np.linalg.eigvalsh(fit.J).min() > 0


def test_qreml_shared_map_keeps_lambdas_equal():
    rng = np.random.default_rng(87)
    T = 500
    z = rng.uniform(0.0, 24.0, T)
    terms = {
        (1, 2): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
        (2, 1): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
    }
    hmm = HmmModel(2, [("y0", "normal")], terms)
    truth = np.zeros(hmm.dim)
    truth[hmm.block("y0.mean").slice] = [-2.0, 2.0]
    truth[hmm.block("1->2.icpt").start] = -2.0
    truth[hmm.block("2->1.icpt").start] = -1.0
    obs, _ = hmm.simulate(truth, {"z": z}, [], seed=7)
    blocks = hmm.penalty_blocks()
    pen = PenaltyModel(blocks, np.array([1e4, 1e2]), hmm.dim)
    fit = qreml(hmm, obs, pen, lmap=LambdaMap(["g", "g"]), outer_tol=1e-3)
    assert fit.lam[0] == fit.lam[1]


def test_qreml_unpenalized_fast_path():
    rng = np.random.default_rng(88)
    hmm = HmmModel(2, [("y0", "normal")], {})
    z = rng.uniform(size=300)
    truth = np.zeros(hmm.dim)
    truth[hmm.block("y0.mean").slice] = [-2.0, 2.0]
    truth[hmm.block("1->2.icpt").start] = -1.5
    truth[hmm.block("2->1.icpt").start] = -1.5
    obs, _ = hmm.simulate(truth, {"z": z}, [], seed=8)
    pen = PenaltyModel([], np.zeros(0), hmm.dim)
    fit = qreml(hmm, obs, pen)
    assert fit.converged and fit.n_outer == 0
    assert fit.edf == hmm.dim


def test_sdreport_on_small_fit(small_fit):
    hmm, obs, pen, fit = small_fit
    rep = sdreport_outer(hmm, obs, pen, fit)
    assert len(rep.groups) == 2
    assert np.all(rep.sigma2 > 0)
    if rep.invertible:
        assert np.all(np.isfinite(rep.sd_lam))
    assert np.allclose(rep.sd_sigma2, rep.sd_lam / rep.lam**2, rtol=1e-10)
    # smoothing parameters unchanged by the probe refits
    assert np.array_equal(pen.lam, fit.lam)
