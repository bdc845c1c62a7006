import itertools

import numpy as np
import pytest

from pshmm.model import HmmModel, ObservationTable


def brute_loglik(delta, gammas, dens):
    """Likelihood by exhaustive summation over all latent state paths.

    ``gammas[t]`` governs the transition into time t (gammas[0] unused),
    ``dens[t, i]`` is the observation density at time t in state i.
    """
    T, N = dens.shape
    total = 0.0
    for path in itertools.product(range(N), repeat=T):
        p = delta[path[0]] * dens[0, path[0]]
        for t in range(1, T):
            p *= gammas[t][path[t - 1], path[t]] * dens[t, path[t]]
        total += p
    return np.log(total)


def random_stochastic(rng, n):
    G = rng.uniform(0.05, 1.0, (n, n))
    return G / G.sum(axis=1, keepdims=True)


def make_obs(rng, T, families=("normal",), tracks=None, missing=0.0):
    """Observation table with random draws per stream family."""
    streams = {}
    for k, fam in enumerate(families):
        name = f"y{k}"
        if fam == "normal":
            x = rng.normal(0.0, 1.0, T)
        elif fam == "gamma":
            x = rng.gamma(2.0, 1.0, T)
        elif fam == "von_mises":
            x = rng.vonmises(0.0, 1.0, T)
        elif fam == "poisson":
            x = rng.poisson(3.0, T).astype(float)
        elif fam == "negative_binomial":
            x = rng.negative_binomial(5, 0.5, T).astype(float)
        elif fam == "bernoulli":
            x = rng.integers(0, 2, T).astype(float)
        else:
            raise ValueError(fam)
        if missing > 0:
            x[rng.uniform(size=T) < missing] = np.nan
        streams[name] = x
    cov = {"z": rng.uniform(0.0, 1.0, T)}
    return ObservationTable(streams, cov, tracks or [])


def intercept_model(n_states, families, delta_mode="stationary"):
    return HmmModel(
        n_states, [(f"y{k}", f) for k, f in enumerate(families)],
        {}, delta_mode=delta_mode,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
