"""Data ingestion and the on-disk result document.

CSV input: a header row naming the stream, covariate and (optional) track
columns.  Empty cells and ``NA`` in stream columns mark missing observations;
covariate columns must be complete.  Rows belonging to one track must be
contiguous.

Results are stored as a single JSON document carrying the fitted
coefficients, smoothing parameters, basis descriptions (knots, centering
offsets, constraint transforms) and the penalized curvature matrix, so that
predictions with pointwise intervals can be produced without refitting and
the reported log-likelihood can be reproduced from the document plus the
training data.
"""

import csv
import json

import numpy as np

from .bases import DesignBlock
from .model import HmmModel, ObservationTable
from .penalty import PenaltyModel
from .qreml import FIXED, LambdaMap

RESULT_FORMAT = "pshmm-result"
RESULT_VERSION = 1
_MISSING = {"", "na", "nan", "null", "none"}


class DataError(ValueError):
    pass


def _parse_cell(text, column, row):
    s = text.strip()
    if s.lower() in _MISSING:
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise DataError(
            f"row {row}: non-numeric value '{text}' in column '{column}'"
        ) from None


def ingest_csv(path, stream_names, covariate_names, track=None) -> ObservationTable:
    """Read observations from a CSV file into an :class:`ObservationTable`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        needed = list(stream_names) + list(covariate_names) + ([track] if track else [])
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}; header is {header}")
        idx = {c: header.index(c) for c in needed}
        cols = {c: [] for c in needed}
        track_ids = []
        for r, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            for c in needed:
                if c == track:
                    track_ids.append(row[idx[c]].strip())
                else:
                    cols[c].append(_parse_cell(row[idx[c]], c, r))
    T = len(cols[needed[0]])
    if T == 0:
        raise DataError(f"{path}: no data rows")
    streams = {c: np.asarray(cols[c]) for c in stream_names}
    covariates = {c: np.asarray(cols[c]) for c in covariate_names}
    for c, v in covariates.items():
        if np.isnan(v).any():
            r = int(np.flatnonzero(np.isnan(v))[0])
            raise DataError(f"covariate column '{c}' has a missing value (data row {r + 1})")
    tracks = []
    if track:
        seen = {}
        for t, tid in enumerate(track_ids):
            if not tracks or tid != track_ids[t - 1]:
                if tid in seen:
                    raise DataError(
                        f"track id '{tid}' reappears at data row {t + 1}; "
                        "rows of one track must be contiguous"
                    )
                seen[tid] = True
                tracks.append([t, t + 1])
            else:
                tracks[-1][1] = t + 1
        tracks = [tuple(ab) for ab in tracks]
    return ObservationTable(streams, covariates, tracks)


# ---------------------------------------------------------------------------
# Result document

def _labelled_theta(hmm: HmmModel, theta):
    return {b.name: [float(v) for v in theta[b.slice]] for b in hmm.layout}


def build_result(config, hmm: HmmModel, pen: PenaltyModel, lmap, fit,
                 data_path=None, config_path=None, obs=None, sdrep=None):
    """Assemble the JSON-serializable result document for a finished fit."""
    natural = {}
    for (name, fam), params in zip(hmm.streams, hmm.natural_params(fit.theta)):
        natural[name] = {
            p: [float(v) for v in np.atleast_1d(vals)]
            for p, vals in zip(fam.param_names, params)
        }
    assignment = lmap.assignment if lmap is not None else []
    penalties = []
    for j, b in enumerate(pen.blocks):
        penalties.append({
            "label": b.label,
            "start": b.start,
            "stop": b.stop,
            "kind": b.kind,
            "lambda": float(fit.lam[j]),
            "group": str(assignment[j]) if assignment else b.label,
            "S": np.asarray(b.S).tolist(),
        })
    terms = {}
    for e in hmm.entries:
        lab = f"{e[0]}->{e[1]}"
        items = []
        for k, term in enumerate(hmm.entry_terms[e]):
            blk = hmm.block(f"{lab}.term{k}")
            items.append({
                "label": term.penalties[0][1].rsplit(":", 1)[0]
                if len(term.penalties) > 1 else
                (term.penalties[0][1] if term.penalties else f"term{k}"),
                "start": blk.start,
                "stop": blk.stop,
                "basis": term.basis,
            })
        terms[lab] = items
    doc = {
        "format": RESULT_FORMAT,
        "version": RESULT_VERSION,
        "config": config.to_jsonable(),
        "paths": {"config": config_path, "data": data_path},
        "data": {"T": int(obs.T), "n_tracks": len(obs.tracks)} if obs is not None else None,
        "fit": {
            "loglik": float(fit.loglik),
            "edf": float(fit.edf),
            "aic": float(fit.aic),
            "bic": float(fit.bic),
            "converged": bool(fit.converged),
            "n_outer": int(fit.n_outer),
        },
        "theta": _labelled_theta(hmm, fit.theta),
        "natural_params": natural,
        "penalties": penalties,
        "terms": terms,
        "J": np.asarray(fit.J).tolist(),
        "trace": fit.trace.to_jsonable(),
        "sdreport": sdrep.to_jsonable() if sdrep is not None else None,
    }
    return doc


def write_result(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_result(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != RESULT_FORMAT:
        raise DataError(f"{path}: not a fit result document")
    return doc


def theta_from_result(doc):
    """Flat coefficient vector in layout order, plus the layout itself."""
    hmm = _skeleton(doc)
    theta = np.empty(hmm.dim)
    for b in hmm.layout:
        vals = doc["theta"][b.name]
        if len(vals) != b.size:
            raise DataError(f"result block '{b.name}' has wrong length")
        theta[b.slice] = vals
    return theta, hmm


def _skeleton(doc) -> HmmModel:
    """Model with one-row placeholder designs; layout and bases are exact."""
    cfg = doc["config"]
    n = int(cfg["states"])
    streams = list(cfg["streams"].items())
    entry_terms = {}
    for lab, items in doc["terms"].items():
        i, j = (int(v) for v in lab.split("->"))
        blocks = []
        for it in items:
            ncol = it["stop"] - it["start"]
            blocks.append(DesignBlock(np.zeros((1, ncol)), [], it["basis"]))
        entry_terms[(i, j)] = blocks
    return HmmModel(n, streams, entry_terms, delta_mode=cfg["delta"])


def model_from_result(doc, obs: ObservationTable):
    """Rebuild the full model and penalty structure at the training data,
    reusing the stored bases so the log-likelihood reproduces exactly."""
    from .bases import evaluate_basis

    cfg = doc["config"]
    pen_by_range = {}
    for p in doc["penalties"]:
        pen_by_range.setdefault((p["start"], p["stop"]), []).append(p)
    entry_terms = {}
    for lab, items in doc["terms"].items():
        i, j = (int(v) for v in lab.split("->"))
        blocks = []
        for it in items:
            X = evaluate_basis(it["basis"], obs.covariates)
            plist = [
                (np.asarray(p["S"]), p["label"].split(":", 1)[1])
                for p in pen_by_range.get((it["start"], it["stop"]), [])
            ]
            blocks.append(DesignBlock(X, plist, it["basis"]))
        entry_terms[(i, j)] = blocks
    hmm = HmmModel(int(cfg["states"]), list(cfg["streams"].items()),
                   entry_terms, delta_mode=cfg["delta"])
    blocks = hmm.penalty_blocks()
    lam = []
    assignment = []
    stored = {p["label"]: p for p in doc["penalties"]}
    for b in blocks:
        p = stored[b.label]
        lam.append(p["lambda"])
        assignment.append(FIXED if p["group"] == FIXED else p["group"])
    pen = PenaltyModel(blocks, np.asarray(lam), hmm.dim) if blocks else None
    lmap = None
    if assignment and any(a != FIXED for a in assignment):
        lmap = LambdaMap(assignment)
    return hmm, pen, lmap


# ---------------------------------------------------------------------------
# Prediction from a result document

def parse_grid_spec(spec):
    """Parse ``var=a:b:n`` / ``var=value`` fragments (comma- or
    repeat-separated) into a grid dictionary of equal-length columns."""
    fixed = {}
    ranged = {}
    for frag in spec:
        for part in str(frag).split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise DataError(f"bad grid fragment '{part}' (expected var=...)")
            var, rhs = part.split("=", 1)
            var = var.strip()
            if ":" in rhs:
                pieces = rhs.split(":")
                if len(pieces) != 3:
                    raise DataError(f"bad grid range '{part}' (expected var=start:stop:count)")
                try:
                    a, b, n = float(pieces[0]), float(pieces[1]), int(pieces[2])
                except ValueError:
                    raise DataError(f"bad grid range '{part}'") from None
                if n < 2:
                    raise DataError(f"grid '{part}': count must be >= 2")
                ranged[var] = np.linspace(a, b, n)
            else:
                try:
                    fixed[var] = float(rhs)
                except ValueError:
                    raise DataError(f"bad grid value '{part}'") from None
    if len(ranged) > 1:
        raise DataError(
            f"only one covariate may vary along the grid, got {sorted(ranged)}"
        )
    if not ranged:
        raise DataError("grid needs one varying covariate (var=start:stop:count)")
    (var, vals), = ranged.items()
    grid = {var: vals}
    for k, v in fixed.items():
        grid[k] = np.full(len(vals), v)
    return var, grid


def predict_transitions(doc, grid, draws=0, seed=0, level=0.95):
    """Transition matrices and periodically stationary probabilities on a
    covariate grid, with optional pointwise posterior intervals.

    The ordered grid is treated as one cycle of the transition process when
    forming stationary probabilities.  ``draws`` > 0 samples coefficient
    vectors from a Gaussian centered at the fit with covariance the inverse
    penalized curvature.
    """
    from .bases import basis_covariates
    from .model import periodic_stationary

    theta, hmm = theta_from_result(doc)
    needed = set()
    for items in doc["terms"].values():
        for it in items:
            needed |= basis_covariates(it["basis"])
    missing = sorted(needed - set(grid))
    if missing:
        raise DataError(f"grid does not set covariates {missing}")
    L = len(next(iter(grid.values())))

    def gam_of(th):
        from .bases import evaluate_basis

        designs = {
            e: [evaluate_basis(t.basis, grid) for t in hmm.entry_terms[e]]
            for e in hmm.entries
        }
        eta = hmm._etas_with_T(th, designs, L)
        G = hmm.gammas_from_etas(eta)
        delta = np.array(periodic_stationary(list(G)))
        return G, delta

    G, delta = gam_of(theta)
    out = {"gamma": G, "stationary": delta}
    if draws > 0:
        J = np.asarray(doc["J"])
        cov = np.linalg.inv(J)
        cov = 0.5 * (cov + cov.T)
        rng = np.random.default_rng(seed)
        w, V = np.linalg.eigh(cov)
        A = V * np.sqrt(np.clip(w, 0.0, None))
        Gs = np.empty((draws,) + G.shape)
        Ds = np.empty((draws,) + delta.shape)
        for m in range(draws):
            th = theta + A @ rng.standard_normal(hmm.dim)
            try:
                Gs[m], Ds[m] = gam_of(th)
            except np.linalg.LinAlgError:
                Gs[m], Ds[m] = G, delta
        alpha = 0.5 * (1.0 - level)
        out["gamma_lo"] = np.quantile(Gs, alpha, axis=0)
        out["gamma_hi"] = np.quantile(Gs, 1.0 - alpha, axis=0)
        out["stationary_lo"] = np.quantile(Ds, alpha, axis=0)
        out["stationary_hi"] = np.quantile(Ds, 1.0 - alpha, axis=0)
    return out
