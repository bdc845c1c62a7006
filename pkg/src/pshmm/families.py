"""State-dependent distribution families.

Each family exposes its working-scale parameterization (names + link), the
log-density, and the score with respect to the *natural* parameters; link
chaining is handled by the caller.  All functions are vectorized over the
observation vector.
"""

import numpy as np
from scipy import special

TWO_PI = 2.0 * np.pi


def _link_forward(link: str, w):
    if link == "log":
        return np.exp(w)
    if link == "logit":
        return special.expit(w)
    return w


def _link_deriv(link: str, w, natural):
    # d natural / d working
    if link == "log":
        return natural
    if link == "logit":
        return natural * (1.0 - natural)
    return np.ones_like(np.asarray(natural, dtype=float))


class Family:
    """Base class; subclasses define param_names/links and density code."""

    name: str
    param_names: tuple
    links: tuple

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def natural(self, working):
        """Map working-scale parameter rows to natural scale."""
        return [
            _link_forward(link, w) for link, w in zip(self.links, working)
        ]

    def natural_deriv(self, working, natural):
        return [
            _link_deriv(link, w, nat)
            for link, w, nat in zip(self.links, working, natural)
        ]

    def logpdf(self, x, params):
        raise NotImplementedError

    def score(self, x, params):
        """List of d log p / d natural-param arrays, one per parameter."""
        raise NotImplementedError

    def sample(self, rng, params, size):
        raise NotImplementedError

    def default_start(self, x, state, n_states):
        """Crude moment-flavoured working-scale start values per state."""
        raise NotImplementedError


class Gamma(Family):
    name = "gamma"
    param_names = ("shape", "scale")
    links = ("log", "log")

    def logpdf(self, x, params):
        a, s = params
        return (a - 1.0) * np.log(x) - x / s - special.gammaln(a) - a * np.log(s)

    def score(self, x, params):
        a, s = params
        da = np.log(x) - np.log(s) - special.digamma(a)
        ds = x / s**2 - a / s
        return [da, ds]

    def sample(self, rng, params, size):
        a, s = params
        return rng.gamma(shape=a, scale=s, size=size)

    def default_start(self, x, state, n_states):
        m = np.nanmean(x) * (0.5 + state / max(n_states - 1, 1))
        v = np.nanvar(x) + 1e-8
        shape = max(m**2 / v, 0.1)
        return [np.log(shape), np.log(m / shape)]


class VonMises(Family):
    name = "von_mises"
    param_names = ("mu", "kappa")
    links = ("identity", "log")

    def logpdf(self, x, params):
        mu, kappa = params
        # log I0 via the exponentially scaled Bessel function for stability
        return kappa * np.cos(x - mu) - np.log(TWO_PI) - (
            np.log(special.i0e(kappa)) + kappa
        )

    def score(self, x, params):
        mu, kappa = params
        dmu = kappa * np.sin(x - mu)
        dkappa = np.cos(x - mu) - special.i1e(kappa) / special.i0e(kappa)
        return [dmu, dkappa]

    def sample(self, rng, params, size):
        mu, kappa = params
        return rng.vonmises(mu=mu, kappa=kappa, size=size)

    def default_start(self, x, state, n_states):
        return [0.0, np.log(0.5 + state)]


class NegativeBinomial(Family):
    """Negative binomial parameterized by size (dispersion) and mean."""

    name = "negative_binomial"
    param_names = ("size", "mean")
    links = ("log", "log")

    def logpdf(self, x, params):
        r, m = params
        return (
            special.gammaln(x + r)
            - special.gammaln(r)
            - special.gammaln(x + 1.0)
            + r * (np.log(r) - np.log(r + m))
            + x * (np.log(m) - np.log(r + m))
        )

    def score(self, x, params):
        r, m = params
        dr = (
            special.digamma(x + r)
            - special.digamma(r)
            + np.log(r)
            + 1.0
            - np.log(r + m)
            - (r + x) / (r + m)
        )
        dm = x / m - (r + x) / (r + m)
        return [dr, dm]

    def sample(self, rng, params, size):
        r, m = params
        p = r / (r + m)
        return rng.negative_binomial(n=r, p=p, size=size).astype(float)

    def default_start(self, x, state, n_states):
        m = max(np.nanmean(x), 0.5) * (0.5 + state / max(n_states - 1, 1))
        return [np.log(2.0), np.log(m)]


class Normal(Family):
    name = "normal"
    param_names = ("mean", "sd")
    links = ("identity", "log")

    def logpdf(self, x, params):
        mu, sd = params
        return -0.5 * np.log(TWO_PI) - np.log(sd) - 0.5 * ((x - mu) / sd) ** 2

    def score(self, x, params):
        mu, sd = params
        z = (x - mu) / sd
        return [z / sd, (z**2 - 1.0) / sd]

    def sample(self, rng, params, size):
        mu, sd = params
        return rng.normal(loc=mu, scale=sd, size=size)

    def default_start(self, x, state, n_states):
        mu = np.nanmean(x) + np.nanstd(x) * (state - (n_states - 1) / 2)
        return [mu, np.log(np.nanstd(x) + 1e-8)]


class Poisson(Family):
    name = "poisson"
    param_names = ("mean",)
    links = ("log",)

    def logpdf(self, x, params):
        (mu,) = params
        return x * np.log(mu) - mu - special.gammaln(x + 1.0)

    def score(self, x, params):
        (mu,) = params
        return [x / mu - 1.0]

    def sample(self, rng, params, size):
        (mu,) = params
        return rng.poisson(lam=mu, size=size).astype(float)

    def default_start(self, x, state, n_states):
        m = max(np.nanmean(x), 0.2) * (0.5 + state / max(n_states - 1, 1))
        return [np.log(m)]


class Bernoulli(Family):
    name = "bernoulli"
    param_names = ("prob",)
    links = ("logit",)

    def logpdf(self, x, params):
        (p,) = params
        return x * np.log(p) + (1.0 - x) * np.log1p(-p)

    def score(self, x, params):
        (p,) = params
        return [x / p - (1.0 - x) / (1.0 - p)]

    def sample(self, rng, params, size):
        (p,) = params
        return (rng.random(size) < p).astype(float)

    def default_start(self, x, state, n_states):
        p = min(max(np.nanmean(x), 0.05), 0.95)
        return [special.logit(p) + 0.5 * (state - (n_states - 1) / 2)]


FAMILIES = {
    f.name: f
    for f in (Gamma(), VonMises(), NegativeBinomial(), Normal(), Poisson(), Bernoulli())
}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown state-dependent family '{name}'") from None
