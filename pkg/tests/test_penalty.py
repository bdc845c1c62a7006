import numpy as np
import pytest

from pshmm import bases
from pshmm.model import HmmModel, ObservationTable
from pshmm.penalty import (
    InnerNonConvergenceError,
    PenaltyBlock,
    PenaltyModel,
    inner_fit,
)


def two_blocks(dim=10):
    rng = np.random.default_rng(70)
    S1 = np.eye(3)
    A = rng.normal(size=(4, 4))
    S2 = A @ A.T
    return [
        PenaltyBlock(S1, 2, 5, "a"),
        PenaltyBlock(S2, 5, 9, "b"),
    ], dim


def test_assemble_block_diagonal():
    blocks, dim = two_blocks()
    pen = PenaltyModel(blocks, np.array([2.0, 3.0]), dim)
    S = pen.assemble()
    assert S.shape == (dim, dim)
    assert np.allclose(S[2:5, 2:5], 2.0 * blocks[0].S)
    assert np.allclose(S[5:9, 5:9], 3.0 * blocks[1].S)
    assert S[:2].sum() == 0 and S[9:].sum() == 0
    assert np.allclose(S, S.T)


def test_coinciding_ranges_sum():
    S1, S2 = np.eye(3), 2.0 * np.eye(3)
    pen = PenaltyModel(
        [PenaltyBlock(S1, 0, 3, "t:1", "tensor"), PenaltyBlock(S2, 0, 3, "t:2", "tensor")],
        np.array([1.0, 4.0]), 3,
    )
    assert np.allclose(pen.assemble(), np.eye(3) * (1.0 + 8.0))
    assert pen.range_groups() == {(0, 3): [0, 1]}


def test_partial_overlap_rejected():
    with pytest.raises(ValueError, match="overlap"):
        PenaltyModel(
            [PenaltyBlock(np.eye(3), 0, 3, "a"), PenaltyBlock(np.eye(3), 2, 5, "b")],
            np.ones(2), 6,
        )


def test_range_exceeding_dim_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        PenaltyModel([PenaltyBlock(np.eye(3), 0, 3, "a")], np.ones(1), 2)


def test_nonpositive_lambda_rejected():
    with pytest.raises(ValueError, match="positive"):
        PenaltyModel([PenaltyBlock(np.eye(2), 0, 2, "a")], np.array([0.0]), 2)


def test_quadratic_forms():
    blocks, dim = two_blocks()
    pen = PenaltyModel(blocks, np.array([2.0, 3.0]), dim)
    theta = np.arange(dim, dtype=float)
    q = pen.quadratic_forms(theta)
    assert q[0] == pytest.approx(theta[2:5] @ blocks[0].S @ theta[2:5])
    assert q[1] == pytest.approx(theta[5:9] @ blocks[1].S @ theta[5:9])
    val, q2 = pen.value(theta)
    assert val == pytest.approx(0.5 * (2.0 * q[0] + 3.0 * q[1]))
    assert np.array_equal(q, q2)


def test_indefinite_penalty_detected():
    pen = PenaltyModel([PenaltyBlock(np.diag([1.0, -1.0]), 0, 2, "bad")],
                       np.ones(1), 2)
    with pytest.raises(ValueError, match="not PSD"):
        pen.quadratic_forms(np.array([0.0, 5.0]))


def test_block_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        PenaltyBlock(np.eye(3), 0, 2, "a")


def small_fit_problem(T=150):
    rng = np.random.default_rng(71)
    z = rng.uniform(0.0, 24.0, T)
    terms = {
        (1, 2): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
        (2, 1): [bases.center_columns(bases.build_cyclic(z, 6, 24.0))],
    }
    hmm = HmmModel(2, [("y0", "normal")], terms)
    truth = hmm.default_theta(
        ObservationTable({"y0": rng.normal(size=T)}, {"z": z}, [])
    )
    truth[hmm.block("y0.mean").slice] = [-1.5, 1.5]
    obs, _ = hmm.simulate(truth, {"z": z}, [], seed=5)
    blocks = hmm.penalty_blocks()
    pen = PenaltyModel(blocks, np.full(len(blocks), 100.0), hmm.dim)
    return hmm, obs, pen


def test_inner_fit_reaches_stationary_point():
    hmm, obs, pen = small_fit_problem()
    theta0 = hmm.default_theta(obs)
    fit = inner_fit(hmm, obs, pen, theta0)
    assert fit.converged
    assert np.abs(fit.grad).max() <= 1e-7 * (1.0 + abs(fit.value))
    # value is no worse than the start
    S = pen.assemble()
    v0 = -hmm.loglik(theta0, obs) + 0.5 * theta0 @ S @ theta0
    assert fit.value < v0


def test_inner_fit_nonconvergence_carries_best_point():
    hmm, obs, pen = small_fit_problem()
    theta0 = hmm.default_theta(obs)
    with pytest.raises(InnerNonConvergenceError) as exc:
        inner_fit(hmm, obs, pen, theta0, gtol=0.0, maxiter=2)
    assert exc.value.best is not None
    assert np.isfinite(exc.value.value)


def test_inner_fit_gtol_is_relative():
    hmm, obs, pen = small_fit_problem()
    fit = inner_fit(hmm, obs, pen, hmm.default_theta(obs), gtol=1e-5)
    assert np.abs(fit.grad).max() <= 1e-5 * (1.0 + abs(fit.value))
