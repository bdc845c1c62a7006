"""Design matrices, penalty matrices and constraint transforms for smooths.

Four marginal basis kinds are supported:

* ``bspline``  -- P-spline: B-spline design with a difference penalty,
* ``cyclic``   -- cyclic cubic regression spline (value parameterization,
  integrated squared second derivative penalty),
* ``random_effect`` -- one-hot indicators with an identity penalty,
* ``radial2d`` -- low-rank thin-plate-type isotropic smooth of two
  coordinates.

A :class:`DesignBlock` bundles the evaluated design matrix, its penalties and
a serializable description (``basis``) sufficient to re-evaluate the block on
new data.  Sum-to-zero constraints are absorbed by column centering followed
by dropping one redundant column; tensor-product interactions are row-wise
Kronecker products carrying one penalty per marginal direction.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.interpolate import BSpline


@dataclass
class DesignBlock:
    """One smooth term: design matrix, penalties and basis description."""

    X: np.ndarray
    penalties: list  # list of (PSD matrix, label)
    basis: dict      # serializable; see evaluate_basis

    @property
    def ncol(self) -> int:
        return self.X.shape[1]


def _quantile_knots(z, n, lo=None, hi=None):
    probs = np.linspace(0.0, 1.0, n)
    knots = np.quantile(z, probs)
    if lo is not None:
        knots[0] = lo
    if hi is not None:
        knots[-1] = hi
    if np.any(np.diff(knots) <= 0):
        # degenerate quantiles (ties in z): fall back to a uniform grid
        knots = np.linspace(knots[0], knots[-1], n)
    return knots


# ---------------------------------------------------------------------------
# B-spline basis with difference penalty

def _bspline_design(z, knots, degree):
    """Design matrix with linear extrapolation outside the boundary knots."""
    t = np.asarray(knots, dtype=float)
    K = len(t) - degree - 1
    a, b = t[degree], t[-degree - 1]
    z = np.asarray(z, dtype=float)
    inside = np.clip(z, a, b)
    X = BSpline.design_matrix(inside, t, degree).toarray()
    below = z < a
    above = z > b
    if below.any() or above.any():
        spl = BSpline(t, np.eye(K), degree)
        for mask, edge in ((below, a), (above, b)):
            if mask.any():
                B0 = spl(edge)
                B1 = spl.derivative()(edge)
                X[mask] = B0[None, :] + (z[mask] - edge)[:, None] * B1[None, :]
    return X


def build_bspline(z, K, degree=3, penalty_order=2, var="z", label=None):
    """P-spline design block with ``K`` basis functions.

    Knots are quantile-based; the penalty is the squared ``penalty_order``-th
    difference of the coefficients (rank ``K - penalty_order``).
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite covariate values")
    if K < degree + 2:
        raise ValueError(f"K={K} too small for degree {degree} (need >= {degree + 2})")
    interior = _quantile_knots(z, K - degree + 1)
    t = np.concatenate(
        [np.repeat(interior[0], degree), interior, np.repeat(interior[-1], degree)]
    )
    D = np.diff(np.eye(K), n=penalty_order, axis=0)
    S = D.T @ D
    basis = {
        "kind": "bspline",
        "var": var,
        "knots": t.tolist(),
        "degree": degree,
        "penalty_order": penalty_order,
    }
    X = _bspline_design(z, t, degree)
    return DesignBlock(X, [(S, label or f"s({var})")], basis)


# ---------------------------------------------------------------------------
# Cyclic cubic regression spline

def _cyclic_matrices(knots, period):
    """Cyclic tridiagonal matrices linking knot values to knot curvatures."""
    k = np.asarray(knots, dtype=float)
    K = len(k)
    h = np.diff(np.append(k, k[0] + period))
    B = np.zeros((K, K))
    D = np.zeros((K, K))
    for j in range(K):
        jp = (j + 1) % K
        jm = (j - 1) % K
        B[j, j] = (h[jm] + h[j]) / 3.0
        B[j, jp] += h[j] / 6.0
        B[jp, j] += h[j] / 6.0
        D[j, j] = -(1.0 / h[jm] + 1.0 / h[j])
        D[j, jp] += 1.0 / h[j]
        D[j, jm] += 1.0 / h[jm]
    return B, D, h


def _cyclic_design(z, knots, period):
    k = np.asarray(knots, dtype=float)
    K = len(k)
    B, D, h = _cyclic_matrices(k, period)
    BinvD = np.linalg.solve(B, D)
    # wrap points into [k0, k0 + period)
    zz = np.mod(np.asarray(z, dtype=float) - k[0], period) + k[0]
    edges = np.append(k, k[0] + period)
    idx = np.clip(np.searchsorted(edges, zz, side="right") - 1, 0, K - 1)
    X = np.zeros((len(zz), K))
    hj = h[idx]
    d1 = edges[idx + 1] - zz
    d2 = zz - edges[idx]
    am = d1 / hj
    ap = d2 / hj
    cm = (d1**3 / hj - hj * d1) / 6.0
    cp = (d2**3 / hj - hj * d2) / 6.0
    rows = np.arange(len(zz))
    X[rows, idx] += am
    X[rows, (idx + 1) % K] += ap
    X += cm[:, None] * BinvD[idx]
    X += cp[:, None] * BinvD[(idx + 1) % K]
    return X


def build_cyclic(z, K, period, var="z", label=None):
    """Cyclic cubic regression spline with ``K`` distinct knots.

    The coefficients are the function values at the knots, so wrap-around
    continuity of the function and its first two derivatives holds by
    construction.  The penalty is the exact integrated squared second
    derivative, with rank ``K - 1`` (constants unpenalized).
    """
    z = np.asarray(z, dtype=float)
    if K < 3:
        raise ValueError("cyclic basis needs K >= 3")
    if period <= 0:
        raise ValueError("period must be positive")
    if np.any(z < 0) or np.any(z >= period):
        raise ValueError("cyclic covariate outside [0, period)")
    knots = _quantile_knots(z, K + 1)[:-1]
    if np.any(np.diff(knots) <= 0) or knots[-1] >= period:
        knots = np.linspace(0.0, period, K, endpoint=False)
    B, D, _ = _cyclic_matrices(knots, period)
    Binv = np.linalg.inv(B)
    S = D.T @ Binv @ D
    S = 0.5 * (S + S.T)
    basis = {
        "kind": "cyclic",
        "var": var,
        "knots": knots.tolist(),
        "period": float(period),
    }
    X = _cyclic_design(z, knots, period)
    return DesignBlock(X, [(S, label or f"s({var})")], basis)


# ---------------------------------------------------------------------------
# Random-effect basis

def build_random_effect(group, K_groups, var="group", label=None):
    """One-hot indicator design with identity penalty (i.i.d. random effect).

    Group labels must be integers in ``1..K_groups``.
    """
    g = np.asarray(group)
    if np.any(g < 1) or np.any(g > K_groups):
        raise ValueError("group labels outside 1..K_groups")
    X = np.zeros((len(g), K_groups))
    X[np.arange(len(g)), g.astype(int) - 1] = 1.0
    basis = {"kind": "random_effect", "var": var, "levels": int(K_groups)}
    return DesignBlock(X, [(np.eye(K_groups), label or f"re({var})")], basis)


# ---------------------------------------------------------------------------
# Low-rank thin-plate-type radial smooth of two coordinates

def _tps_eta(r):
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** 2 * np.log(r[pos])
    return out


def _farthest_point_knots(xy, K):
    pts = np.unique(xy, axis=0)
    if len(pts) < K:
        raise ValueError(f"K={K} exceeds number of distinct locations ({len(pts)})")
    centroid = pts.mean(axis=0)
    start = int(np.argmin(((pts - centroid) ** 2).sum(axis=1)))
    chosen = [start]
    d = np.sqrt(((pts - pts[start]) ** 2).sum(axis=1))
    for _ in range(K - 1):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1)))
    return pts[chosen]


def _radial_structure(knots):
    knots = np.asarray(knots, dtype=float)
    K = len(knots)
    r = np.sqrt(((knots[:, None, :] - knots[None, :, :]) ** 2).sum(-1))
    E = _tps_eta(r)
    T = np.column_stack([np.ones(K), knots])
    if np.linalg.matrix_rank(T) < 3:
        raise ValueError("degenerate (collinear) knot locations")
    Z = sla.null_space(T.T)  # K x (K-3), orthonormal
    return E, T, Z


def _radial_design(xy, knots, Z):
    xy = np.asarray(xy, dtype=float)
    r = np.sqrt(((xy[:, None, :] - np.asarray(knots)[None, :, :]) ** 2).sum(-1))
    Exk = _tps_eta(r)
    return np.column_stack([Exk @ Z, np.ones(len(xy)), xy])


def build_radial_2d(xy, K, vars=("x", "y"), knots=None, label=None):
    """Low-rank isotropic smooth: ``K - 3`` penalized radial basis functions
    (thin-plate kernel at space-filling knots, affine part projected out) plus
    an unpenalized affine null space {1, x, y}.
    """
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError("xy must be a 2-column matrix")
    if K < 4:
        raise ValueError("radial_2d basis needs K >= 4")
    if knots is None:
        knots = _farthest_point_knots(xy, K)
    knots = np.asarray(knots, dtype=float)
    E, _, Z = _radial_structure(knots)
    Spen = Z.T @ E @ Z
    Spen = 0.5 * (Spen + Spen.T)
    S = np.zeros((K, K))
    S[: K - 3, : K - 3] = Spen
    basis = {
        "kind": "radial2d",
        "vars": list(vars),
        "knots": knots.tolist(),
        "null_basis": Z.tolist(),
    }
    X = _radial_design(xy, knots, Z)
    return DesignBlock(X, [(S, label or f"s({vars[0]},{vars[1]})")], basis)


# ---------------------------------------------------------------------------
# Constraint absorption and tensor products

def center_columns(block: DesignBlock) -> DesignBlock:
    """Absorb the sum-to-zero constraint.

    Subtracts column means (making fitted values orthogonal to the constant)
    and drops one redundant column: the column zeroed by centering if one
    exists, otherwise the last column (valid because the constant lies in the
    span, so the centered columns satisfy one exact linear dependence).
    """
    X = block.X
    means = X.mean(axis=0)
    Xc = X - means
    scale = max(np.abs(X).max(), 1.0)
    norms = np.sqrt((Xc**2).sum(axis=0))
    drop = int(np.argmin(norms))
    if norms[drop] > 1e-8 * scale:
        if np.abs(Xc.sum(axis=1)).max() > 1e-6 * scale:
            raise ValueError("constant function not in span; cannot center")
        drop = X.shape[1] - 1
    keep = [j for j in range(X.shape[1]) if j != drop]
    penalties = [(S[np.ix_(keep, keep)], lab) for S, lab in block.penalties]
    basis = {
        "kind": "centered",
        "inner": block.basis,
        "col_means": means.tolist(),
        "drop": drop,
    }
    return DesignBlock(Xc[:, keep], penalties, basis)


def row_kron(X1, X2):
    n = X1.shape[0]
    return (X1[:, :, None] * X2[:, None, :]).reshape(n, -1)


def tensor_design(b1: DesignBlock, b2: DesignBlock, label=None) -> DesignBlock:
    """Tensor-product interaction of two marginal blocks.

    The design is the row-wise Kronecker product; the two penalties
    ``S1 (x) I`` and ``I (x) S2`` act on the same coefficient range so that
    smoothness is controlled separately per marginal direction.
    """
    if b1.X.shape[0] != b2.X.shape[0]:
        raise ValueError("marginal blocks have different row counts")
    if len(b1.penalties) != 1 or len(b2.penalties) != 1:
        raise ValueError("tensor marginals must carry exactly one penalty each")
    S1, lab1 = b1.penalties[0]
    S2, lab2 = b2.penalties[0]
    p1, p2 = b1.ncol, b2.ncol
    lab = label or f"ti({lab1},{lab2})"
    penalties = [
        (np.kron(S1, np.eye(p2)), f"{lab}:1"),
        (np.kron(np.eye(p1), S2), f"{lab}:2"),
    ]
    basis = {"kind": "tensor", "b1": b1.basis, "b2": b2.basis}
    return DesignBlock(row_kron(b1.X, b2.X), penalties, basis)


def anova_decomposition(b1: DesignBlock, b2: DesignBlock, label=None):
    """Centered main effects plus the tensor interaction of the centered
    marginals; together with an intercept this spans the full tensor product
    of the uncentered marginals."""
    c1 = center_columns(b1)
    c2 = center_columns(b2)
    return [c1, c2, tensor_design(c1, c2, label=label)]


# ---------------------------------------------------------------------------
# Re-evaluation on new data

def basis_covariates(basis: dict):
    """Set of covariate names a basis description depends on."""
    kind = basis["kind"]
    if kind == "centered":
        return basis_covariates(basis["inner"])
    if kind == "tensor":
        return basis_covariates(basis["b1"]) | basis_covariates(basis["b2"])
    if kind == "radial2d":
        return set(basis["vars"])
    return {basis["var"]}


def evaluate_basis(basis: dict, data) -> np.ndarray:
    """Evaluate a (possibly centered/tensor) basis description on new data.

    ``data`` maps covariate names to 1-d arrays of equal length.  Stored
    knots, centering offsets and constraint transforms are reused so fitted
    models re-evaluate bit-stably.
    """
    kind = basis["kind"]
    if kind == "bspline":
        return _bspline_design(
            np.asarray(data[basis["var"]], dtype=float),
            np.asarray(basis["knots"]),
            basis["degree"],
        )
    if kind == "cyclic":
        return _cyclic_design(
            np.asarray(data[basis["var"]], dtype=float),
            np.asarray(basis["knots"]),
            basis["period"],
        )
    if kind == "random_effect":
        g = np.asarray(data[basis["var"]]).astype(int)
        K = basis["levels"]
        if np.any(g < 1) or np.any(g > K):
            raise ValueError("group labels outside 1..levels")
        X = np.zeros((len(g), K))
        X[np.arange(len(g)), g - 1] = 1.0
        return X
    if kind == "radial2d":
        xv, yv = basis["vars"]
        xy = np.column_stack(
            [np.asarray(data[xv], dtype=float), np.asarray(data[yv], dtype=float)]
        )
        return _radial_design(xy, np.asarray(basis["knots"]), np.asarray(basis["null_basis"]))
    if kind == "centered":
        X = evaluate_basis(basis["inner"], data)
        X = X - np.asarray(basis["col_means"])
        keep = [j for j in range(X.shape[1]) if j != basis["drop"]]
        return X[:, keep]
    if kind == "tensor":
        return row_kron(
            evaluate_basis(basis["b1"], data), evaluate_basis(basis["b2"], data)
        )
    raise ValueError(f"unknown basis kind '{kind}'")
