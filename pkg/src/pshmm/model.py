"""Model assembly: coefficient layout, transition link, stable forward
log-likelihood over tracks, exact gradients, decoding and simulation.

The flat parameter vector ``theta`` is laid out as

* per stream, per working parameter: one value per state (unpenalized),
* per off-diagonal t.p.m. entry: an intercept (unpenalized) followed by the
  coefficient blocks of its smooth terms (penalized),
* optionally ``N - 1`` initial-distribution logits (``delta_mode='estimated'``).

Gradients are exact: a reverse sweep through the scaled forward recursion
(see :mod:`pshmm.kernels`) yields adjoints of the rescaled densities, the
transition matrices and the initial distribution, which are then chained
analytically through the multinomial-logit link, the design matrices, the
family score functions and the working-scale links.  The per-time rescaling
constants cancel exactly in the gradient, so they are treated as fixed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .families import get_family


@dataclass
class ObservationTable:
    """Typed observation container: per-stream values (NaN = missing),
    covariate columns, and contiguous track ranges partitioning the rows."""

    streams: dict
    covariates: dict
    tracks: list  # list of (start, stop)

    @property
    def T(self) -> int:
        return len(next(iter(self.streams.values())))

    def __post_init__(self):
        T = self.T
        for name, v in {**self.streams, **self.covariates}.items():
            if len(v) != T:
                raise ValueError(f"column '{name}' has length {len(v)} != {T}")
        if not self.tracks:
            self.tracks = [(0, T)]
        starts = [a for a, _ in self.tracks]
        stops = [b for _, b in self.tracks]
        if starts[0] != 0 or stops[-1] != T or any(
            stops[k] != starts[k + 1] for k in range(len(self.tracks) - 1)
        ):
            raise ValueError("track ranges must partition the rows contiguously")


@dataclass
class LayoutBlock:
    name: str
    start: int
    stop: int
    penalized: bool = False

    @property
    def slice(self):
        return slice(self.start, self.stop)

    @property
    def size(self):
        return self.stop - self.start


class HmmModel:
    """Hidden Markov model with penalized-spline transition predictors.

    Parameters
    ----------
    n_states : int
    streams : list of (name, family_name)
    entry_terms : dict mapping (i, j) 1-based off-diagonal entries to lists
        of :class:`~pshmm.bases.DesignBlock`; entries not present are
        intercept-only.  Every off-diagonal entry always has an intercept.
    delta_mode : 'stationary' | 'uniform' | 'estimated'
    """

    def __init__(self, n_states, streams, entry_terms=None, delta_mode="stationary"):
        if n_states < 1:
            raise ValueError("need at least one state")
        if delta_mode not in ("stationary", "uniform", "estimated"):
            raise ValueError(f"unknown delta_mode '{delta_mode}'")
        self.N = int(n_states)
        self.streams = [(name, get_family(fam)) for name, fam in streams]
        self.entries = [
            (i, j)
            for i in range(1, self.N + 1)
            for j in range(1, self.N + 1)
            if i != j
        ]
        entry_terms = entry_terms or {}
        for key in entry_terms:
            if key not in self.entries:
                raise ValueError(f"invalid t.p.m. entry {key}")
        self.entry_terms = {e: list(entry_terms.get(e, [])) for e in self.entries}
        self.delta_mode = delta_mode
        self._build_layout()

    # -- layout -----------------------------------------------------------

    def _build_layout(self):
        blocks = []
        pos = 0

        def add(name, size, penalized=False):
            nonlocal pos
            blocks.append(LayoutBlock(name, pos, pos + size, penalized))
            pos += size
            return blocks[-1]

        for name, fam in self.streams:
            for p in fam.param_names:
                add(f"{name}.{p}", self.N)
        for e in self.entries:
            lab = f"{e[0]}->{e[1]}"
            add(f"{lab}.icpt", 1)
            for k, term in enumerate(self.entry_terms[e]):
                add(f"{lab}.term{k}", term.ncol, penalized=True)
        if self.delta_mode == "estimated" and self.N > 1:
            add("delta.logits", self.N - 1)
        self.layout = blocks
        self.dim = pos
        self._by_name = {b.name: b for b in blocks}

    def block(self, name) -> LayoutBlock:
        return self._by_name[name]

    def penalty_blocks(self):
        """All (S, start, stop, label) penalty pieces implied by the terms."""
        from .penalty import PenaltyBlock

        out = []
        for e in self.entries:
            lab = f"{e[0]}->{e[1]}"
            for k, term in enumerate(self.entry_terms[e]):
                b = self.block(f"{lab}.term{k}")
                kind = "tensor" if len(term.penalties) > 1 else "simple"
                for S, plab in term.penalties:
                    out.append(PenaltyBlock(S, b.start, b.stop, f"{lab}:{plab}", kind))
        return out

    # -- parameter access -------------------------------------------------

    def stream_working(self, theta):
        """Working-scale parameters per stream: array (n_params, N)."""
        out = []
        for name, fam in self.streams:
            rows = [theta[self.block(f"{name}.{p}").slice] for p in fam.param_names]
            out.append(np.array(rows))
        return out

    def natural_params(self, theta):
        """Natural-scale parameters per stream (list of per-param arrays)."""
        out = []
        for (name, fam), w in zip(self.streams, self.stream_working(theta)):
            out.append(fam.natural(list(w)))
        return out

    def default_theta(self, obs: ObservationTable) -> np.ndarray:
        """Moment-flavoured starting values; smooth coefficients start at 0,
        intercepts at -2 (sticky chain)."""
        theta = np.zeros(self.dim)
        for name, fam in self.streams:
            x = np.asarray(obs.streams[name], dtype=float)
            for i in range(self.N):
                start = fam.default_start(x[~np.isnan(x)], i, self.N)
                for p, v in zip(fam.param_names, start):
                    theta[self.block(f"{name}.{p}").start + i] = v
        for e in self.entries:
            theta[self.block(f"{e[0]}->{e[1]}.icpt").start] = -2.0
        return theta

    # -- linear predictors and t.p.m. -------------------------------------

    def etas(self, theta, term_designs=None):
        """T x E matrix of transition linear predictors.

        ``term_designs`` defaults to the training designs stored in the
        terms; pass re-evaluated matrices for prediction grids.
        """
        designs = term_designs or {
            e: [t.X for t in self.entry_terms[e]] for e in self.entries
        }
        T = next(
            (Xs[0].shape[0] for Xs in designs.values() if Xs), None
        )
        if T is None:
            raise ValueError("cannot infer T from intercept-only model; pass T")
        return self._etas_with_T(theta, designs, T)

    def _etas_with_T(self, theta, designs, T):
        eta = np.zeros((T, len(self.entries)))
        for ei, e in enumerate(self.entries):
            lab = f"{e[0]}->{e[1]}"
            eta[:, ei] = theta[self.block(f"{lab}.icpt").start]
            for k, X in enumerate(designs[e]):
                beta = theta[self.block(f"{lab}.term{k}").slice]
                eta[:, ei] += X @ beta
        return eta

    def gammas_from_etas(self, eta):
        """Row-stochastic transition matrices from predictors (diagonal
        reference category, max-subtraction for overflow safety)."""
        if not np.all(np.isfinite(eta)):
            raise ValueError("non-finite transition predictors")
        T = eta.shape[0]
        H = np.zeros((T, self.N, self.N))
        for ei, (i, j) in enumerate(self.entries):
            H[:, i - 1, j - 1] = eta[:, ei]
        H -= H.max(axis=2, keepdims=True)
        G = np.exp(H)
        G /= G.sum(axis=2, keepdims=True)
        return G

    def _etabar_from_gambar(self, G, Gambar):
        """Chain adjoints of the t.p.m. through the multinomial-logit link."""
        inner = (Gambar * G).sum(axis=2, keepdims=True)
        Hbar = G * (Gambar - inner)
        etabar = np.empty((G.shape[0], len(self.entries)))
        for ei, (i, j) in enumerate(self.entries):
            etabar[:, ei] = Hbar[:, i - 1, j - 1]
        return etabar

    def gammas(self, theta, term_designs=None, T=None):
        if term_designs is not None and T is not None:
            eta = self._etas_with_T(theta, term_designs, T)
        elif T is not None and all(not v for v in self.entry_terms.values()):
            eta = self._etas_with_T(
                theta, {e: [] for e in self.entries}, T
            )
        else:
            eta = self.etas(theta, term_designs)
        return self.gammas_from_etas(eta)

    # -- densities --------------------------------------------------------

    def _log_densities(self, theta, obs, with_score=False):
        T = obs.T
        logP = np.zeros((T, self.N))
        cache = []
        for (name, fam), w in zip(self.streams, self.stream_working(theta)):
            x = np.asarray(obs.streams[name], dtype=float)
            miss = np.isnan(x)
            xs = np.where(miss, 1.0, x)
            nat = fam.natural(list(w))
            per_state = []
            for i in range(self.N):
                params = [np.atleast_1d(p)[i] for p in nat]
                lp = fam.logpdf(xs, params)
                lp = np.where(miss, 0.0, lp)
                logP[:, i] += lp
                if with_score:
                    sc = fam.score(xs, params)
                    dnat = fam.natural_deriv(
                        [np.atleast_1d(v)[i] for v in w], params
                    )
                    per_state.append(
                        [np.where(miss, 0.0, s) * d for s, d in zip(sc, dnat)]
                    )
            cache.append(per_state)
        return logP, cache

    # -- initial distribution ---------------------------------------------

    def _delta(self, theta, G_first):
        if self.delta_mode == "uniform" or self.N == 1:
            return np.full(self.N, 1.0 / self.N), None
        if self.delta_mode == "estimated":
            z = np.concatenate([[0.0], theta[self.block("delta.logits").slice]])
            z = z - z.max()
            d = np.exp(z)
            d /= d.sum()
            return d, None
        M = np.eye(self.N) - G_first + 1.0
        delta = np.linalg.solve(M.T, np.ones(self.N))
        return delta, M

    def _delta_backprop(self, theta, deltabar, delta, M, Gambar_first, grad):
        if self.delta_mode == "uniform" or self.N == 1:
            return
        if self.delta_mode == "estimated":
            inner = deltabar @ delta
            zbar = delta * (deltabar - inner)
            grad[self.block("delta.logits").slice] += zbar[1:]
            return
        # delta = 1' M^{-1}: adjoint of Gamma at the first time point
        w = np.linalg.solve(M, deltabar)
        Gambar_first += np.outer(delta, w)

    # -- likelihood and gradient ------------------------------------------

    def loglik(self, theta, obs: ObservationTable) -> float:
        return self._forward(theta, obs, want_grad=False)[0]

    def nll_grad(self, theta, obs: ObservationTable):
        """Negative log-likelihood and its exact gradient."""
        ll, grad = self._forward(theta, obs, want_grad=True)
        return -ll, -grad

    def _forward(self, theta, obs, want_grad):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}")
        T = obs.T
        logP, score_cache = self._log_densities(theta, obs, with_score=want_grad)
        m = logP.max(axis=1)
        P = np.exp(logP - m[:, None])
        designs = {e: [t.X for t in self.entry_terms[e]] for e in self.entries}
        eta = self._etas_with_T(theta, designs, T)
        G = self.gammas_from_etas(eta)

        ll = float(m.sum())
        grad = np.zeros(self.dim) if want_grad else None
        logPbar = np.empty_like(P) if want_grad else None
        Gambar = np.zeros_like(G) if want_grad else None

        # tracks evaluated in order; summation order is deterministic
        for a, b in obs.tracks:
            Pt = np.ascontiguousarray(P[a:b])
            Gt = np.ascontiguousarray(G[a:b])
            delta, M = self._delta(theta, G[a])
            try:
                ll_t, phi, c = kernels.forward(Pt, Gt, delta)
            except FloatingPointError as err:
                raise FloatingPointError(f"track [{a},{b}): {err}") from err
            ll += ll_t
            if want_grad:
                Pbar, Gbar, deltabar = kernels.backward(Pt, Gt, delta, phi, c)
                logPbar[a:b] = Pbar * Pt
                Gambar[a:b] = Gbar
                self._delta_backprop(theta, deltabar, delta, M, Gambar[a], grad)

        if not want_grad:
            return ll, None

        # density adjoints -> stream working parameters
        for (name, fam), per_state in zip(self.streams, score_cache):
            for i in range(self.N):
                for p, dval in zip(fam.param_names, per_state[i]):
                    grad[self.block(f"{name}.{p}").start + i] += float(
                        logPbar[:, i] @ dval
                    )

        # t.p.m. adjoints -> intercepts and smooth coefficients
        etabar = self._etabar_from_gambar(G, Gambar)
        for ei, e in enumerate(self.entries):
            lab = f"{e[0]}->{e[1]}"
            grad[self.block(f"{lab}.icpt").start] += etabar[:, ei].sum()
            for k, X in enumerate(designs[e]):
                grad[self.block(f"{lab}.term{k}").slice] += X.T @ etabar[:, ei]
        return ll, grad

    # -- decoding and simulation ------------------------------------------

    def viterbi(self, theta, obs: ObservationTable):
        """Most likely state sequence (1-based); exact ties break to the
        lower state index."""
        theta = np.asarray(theta, dtype=float)
        logP, _ = self._log_densities(theta, obs)
        designs = {e: [t.X for t in self.entry_terms[e]] for e in self.entries}
        eta = self._etas_with_T(theta, designs, obs.T)
        G = self.gammas_from_etas(eta)
        with np.errstate(divide="ignore"):
            logG = np.log(G)
        states = np.empty(obs.T, dtype=int)
        for a, b in obs.tracks:
            delta, _ = self._delta(theta, G[a])
            with np.errstate(divide="ignore"):
                v = np.log(delta) + logP[a]
            back = np.empty((b - a, self.N), dtype=int)
            for t in range(a + 1, b):
                cand = v[:, None] + logG[t]
                back[t - a] = cand.argmax(axis=0)
                v = cand.max(axis=0) + logP[t]
            s = int(v.argmax())
            states[b - 1] = s
            for t in range(b - 1, a, -1):
                s = back[t - a, s]
                states[t - 1] = s
        return states + 1

    def simulate(self, theta, covariates, tracks, seed=None, term_designs=None):
        """Simulate states and observations at the given covariate values.

        Returns (ObservationTable, states).  Reproducible given ``seed``.
        """
        from .bases import evaluate_basis

        theta = np.asarray(theta, dtype=float)
        rng = np.random.default_rng(seed)
        T = len(next(iter(covariates.values()))) if covariates else None
        if T is None:
            raise ValueError("simulate needs at least one covariate column")
        tracks = tracks or [(0, T)]
        if term_designs is None:
            term_designs = {
                e: [evaluate_basis(t.basis, covariates) for t in self.entry_terms[e]]
                for e in self.entries
            }
        eta = self._etas_with_T(theta, term_designs, T)
        G = self.gammas_from_etas(eta)
        nat = self.natural_params(theta)
        states = np.empty(T, dtype=int)
        for a, b in tracks:
            delta, _ = self._delta(theta, G[a])
            states[a] = rng.choice(self.N, p=delta)
            for t in range(a + 1, b):
                states[t] = rng.choice(self.N, p=G[t, states[t - 1]])
        data = {}
        for (name, fam), params in zip(self.streams, nat):
            x = np.empty(T)
            for i in range(self.N):
                mask = states == i
                pi = [np.atleast_1d(p)[i] for p in params]
                x[mask] = fam.sample(rng, pi, int(mask.sum()))
            data[name] = x
        obs = ObservationTable(data, dict(covariates), list(tracks))
        return obs, states + 1


def periodic_stationary(gammas):
    """Periodically stationary distributions of an L-cycle of stochastic
    matrices; satisfies delta[t] @ gammas[(t+1) % L] = delta[(t+1) % L]."""
    gammas = [np.asarray(g, dtype=float) for g in gammas]
    L = len(gammas)
    N = gammas[0].shape[0]
    B = np.eye(N)
    for t in list(range(1, L)) + [0]:
        B = B @ gammas[t]
    M = np.eye(N) - B + 1.0
    try:
        d0 = np.linalg.solve(M.T, np.ones(N))
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(
            f"cycle product not irreducible/aperiodic: {err}"
        ) from err
    out = [d0]
    for t in range(1, L):
        out.append(out[-1] @ gammas[t])
    return out
