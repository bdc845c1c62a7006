"""Model-specification files: YAML config with a small formula grammar.

A config declares the number of states, the state-dependent family per data
stream, a formula per off-diagonal transition entry, and fitting options.
Formulas are sums of terms::

    1                                   intercept only
    s(tday, bs=cc, k=12, period=24)     cyclic cubic spline
    s(z, bs=bs, k=10)                   P-spline (degree/order optional)
    s(id, bs=re)                        i.i.d. random effect
    s(x, y, bs=tp, k=50)                isotropic low-rank 2-d smooth
    te(s(...), s(...))                  full tensor product
    ti(s(...), s(...))                  pure interaction (centered marginals)

An intercept is always present.  Following the usual basis-dimension
bookkeeping, a cyclic ``k`` yields ``k - 1`` coefficients before centering
(one lost to the wrap-around), so ``s(..., bs=cc, k=12)`` contributes 10
coefficients after the sum-to-zero constraint.
"""

import re

import numpy as np
import yaml

from . import bases
from .families import FAMILIES
from .model import HmmModel
from .penalty import PenaltyModel
from .qreml import FIXED, LambdaMap, default_lambda_init


class ConfigError(ValueError):
    pass


class FormulaError(ConfigError):
    def __init__(self, formula, pos, message):
        super().__init__(f"formula error at column {pos}: {message}\n  {formula}\n  {' ' * pos}^")
        self.pos = pos


TOP_KEYS = {"states", "streams", "transitions", "track", "delta", "seed",
            "fit", "lambda", "simulate"}
FIT_KEYS = {"alpha", "outer_tol", "max_outer", "inner_tol", "max_inner"}
DELTA_ALIASES = {
    "stationary": "stationary",
    "stationary_at_first_covariates": "stationary",
    "uniform": "uniform",
    "estimated": "estimated",
}


# ---------------------------------------------------------------------------
# Formula parsing

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")
_NUMBER = re.compile(r"[-+]?\d+(\.\d+)?([eE][-+]?\d+)?")


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def error(self, message):
        raise FormulaError(self.text, self.pos, message)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected '{ch}'")
        self.pos += 1

    def ident(self):
        self.skip_ws()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            self.error("expected identifier")
        self.pos = m.end()
        return m.group(0)

    def number(self):
        self.skip_ws()
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            self.error("expected number")
        self.pos = m.end()
        txt = m.group(0)
        return float(txt) if any(c in txt for c in ".eE") else int(txt)

    def parse(self):
        terms = []
        while True:
            terms.append(self.term())
            if self.peek() == "+":
                self.pos += 1
                continue
            break
        self.skip_ws()
        if self.pos != len(self.text):
            self.error("unexpected trailing input")
        return [t for t in terms if t is not None]

    def term(self):
        if self.peek() == "1":
            self.pos += 1
            return None  # intercept is implicit
        name = self.ident()
        if name == "s":
            return self.smooth()
        if name in ("te", "ti"):
            return self.tensor(name)
        self.error(f"unknown term '{name}' (expected 1, s, te or ti)")

    def smooth(self):
        self.expect("(")
        vars_ = [self.ident()]
        opts = {}
        while self.peek() == ",":
            self.pos += 1
            self.skip_ws()
            mark = self.pos
            name = self.ident()
            if self.peek() == "=":
                self.pos += 1
                if name == "bs":
                    opts[name] = self.ident()
                elif name in ("k", "degree", "order"):
                    opts[name] = int(self.number())
                elif name == "period":
                    opts[name] = float(self.number())
                else:
                    self.pos = mark
                    self.error(f"unknown option '{name}'")
            else:
                vars_.append(name)
        self.expect(")")
        bs = opts.get("bs", "bs")
        if bs not in ("bs", "cc", "re", "tp"):
            self.error(f"unknown basis '{bs}'")
        if bs == "tp":
            if len(vars_) != 2:
                self.error("bs=tp needs exactly two covariates")
        elif len(vars_) != 1:
            self.error(f"bs={bs} takes exactly one covariate")
        if bs == "cc" and "period" not in opts:
            self.error("cyclic term without period")
        if bs in ("bs", "cc", "tp") and "k" not in opts:
            self.error(f"bs={bs} requires k")
        return {"type": "s", "vars": vars_, "bs": bs, **opts}

    def tensor(self, kind):
        self.expect("(")
        m1 = self.marginal()
        self.expect(",")
        m2 = self.marginal()
        self.expect(")")
        return {"type": kind, "margins": [m1, m2]}

    def marginal(self):
        name = self.ident()
        if name != "s":
            self.error("tensor marginals must be s(...) terms")
        return self.smooth()


def parse_formula(text):
    """Parse a transition formula into a list of term descriptions."""
    return _Parser(str(text)).parse()


def term_label(ast):
    if ast["type"] == "s":
        return f"s({','.join(ast['vars'])})"
    inner = ",".join(v for m in ast["margins"] for v in m["vars"])
    return f"{ast['type']}({inner})"


def formula_covariates(terms):
    out = []
    for t in terms:
        margins = t["margins"] if t["type"] in ("te", "ti") else [t]
        for m in margins:
            for v in m["vars"]:
                if v not in out:
                    out.append(v)
    return out


# ---------------------------------------------------------------------------
# Config document

class ModelConfig:
    """Validated configuration document."""

    def __init__(self, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            self.n_states = int(raw["states"])
        except KeyError:
            raise ConfigError("missing required key 'states'") from None
        if self.n_states < 1:
            raise ConfigError("states must be >= 1")
        streams = raw.get("streams") or {}
        if not streams:
            raise ConfigError("at least one stream is required")
        self.streams = []
        for name, fam in streams.items():
            fam_name = fam["family"] if isinstance(fam, dict) else str(fam)
            if fam_name not in FAMILIES:
                raise ConfigError(
                    f"stream '{name}': unknown family '{fam_name}' "
                    f"(choose from {sorted(FAMILIES)})"
                )
            self.streams.append((str(name), fam_name))
        self.formulas = {}
        for key, text in (raw.get("transitions") or {}).items():
            m = re.fullmatch(r"\s*(\d+)\s*->\s*(\d+)\s*", str(key))
            if not m:
                raise ConfigError(f"bad transition key '{key}' (expected 'i->j')")
            i, j = int(m.group(1)), int(m.group(2))
            if not (1 <= i <= self.n_states and 1 <= j <= self.n_states) or i == j:
                raise ConfigError(f"transition '{key}' is not an off-diagonal entry")
            self.formulas[(i, j)] = parse_formula(text)
        delta = str(raw.get("delta", "stationary"))
        if delta not in DELTA_ALIASES:
            raise ConfigError(f"unknown delta mode '{delta}'")
        self.delta_mode = DELTA_ALIASES[delta]
        self.track = raw.get("track")
        self.seed = raw.get("seed", 0)
        fit = raw.get("fit") or {}
        unknown = set(fit) - FIT_KEYS
        if unknown:
            raise ConfigError(f"unknown fit keys: {sorted(unknown)}")
        self.alpha = float(fit.get("alpha", 0.3))
        self.outer_tol = float(fit.get("outer_tol", 1e-4))
        self.max_outer = int(fit.get("max_outer", 200))
        self.inner_tol = float(fit.get("inner_tol", 1e-7))
        self.max_inner = int(fit.get("max_inner", 500))
        lam = raw.get("lambda") or {}
        unknown = set(lam) - {"init", "map"}
        if unknown:
            raise ConfigError(f"unknown lambda keys: {sorted(unknown)}")
        self.lambda_init = {str(k): float(v) for k, v in (lam.get("init") or {}).items()}
        self.lambda_map = {str(k): str(v) for k, v in (lam.get("map") or {}).items()}
        self.simulate = raw.get("simulate") or {}

    @property
    def covariates(self):
        out = []
        for terms in self.formulas.values():
            for v in formula_covariates(terms):
                if v not in out:
                    out.append(v)
        return out

    def to_jsonable(self):
        return {
            "states": self.n_states,
            "streams": {n: f for n, f in self.streams},
            "transitions": {
                f"{i}->{j}": " + ".join(_ast_to_text(t) for t in terms) or "1"
                for (i, j), terms in self.formulas.items()
            },
            "delta": self.delta_mode,
            "track": self.track,
            "seed": self.seed,
        }


def _ast_to_text(ast):
    if ast["type"] == "s":
        parts = list(ast["vars"]) + [f"bs={ast['bs']}"]
        for key in ("k", "period", "degree", "order"):
            if key in ast:
                v = ast[key]
                parts.append(f"{key}={int(v) if float(v).is_integer() else v}")
        return f"s({', '.join(parts)})"
    inner = ", ".join(_ast_to_text(m) for m in ast["margins"])
    return f"{ast['type']}({inner})"


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
    return ModelConfig(raw)


# ---------------------------------------------------------------------------
# Term construction from data

def _build_marginal(ast, data, center):
    vars_ = ast["vars"]
    bs = ast["bs"]
    label = term_label(ast)
    if bs == "bs":
        blk = bases.build_bspline(
            np.asarray(data[vars_[0]], dtype=float), ast["k"],
            degree=ast.get("degree", 3), penalty_order=ast.get("order", 2),
            var=vars_[0], label=label,
        )
    elif bs == "cc":
        blk = bases.build_cyclic(
            np.asarray(data[vars_[0]], dtype=float), ast["k"] - 1,
            ast["period"], var=vars_[0], label=label,
        )
    elif bs == "re":
        g = np.asarray(data[vars_[0]]).astype(int)
        levels = ast.get("k", int(g.max()))
        blk = bases.build_random_effect(g, levels, var=vars_[0], label=label)
        center = center and False  # random effects identified by shrinkage
    else:  # tp
        xy = np.column_stack(
            [np.asarray(data[v], dtype=float) for v in vars_]
        )
        blk = bases.build_radial_2d(xy, ast["k"], vars=tuple(vars_), label=label)
    return bases.center_columns(blk) if center else blk


def build_term(ast, data):
    """DesignBlock for one formula term evaluated at the data."""
    if ast["type"] == "s":
        return _build_marginal(ast, data, center=True)
    label = term_label(ast)
    center = ast["type"] == "ti"
    m1 = _build_marginal(ast["margins"][0], data, center=center)
    m2 = _build_marginal(ast["margins"][1], data, center=center)
    return bases.tensor_design(m1, m2, label=label)


def build_model(config: ModelConfig, obs):
    """Construct (HmmModel, PenaltyModel, LambdaMap) from a config and data."""
    missing = [v for v in config.covariates if v not in obs.covariates]
    if missing:
        raise ConfigError(f"data is missing covariate columns: {missing}")
    for name, _ in config.streams:
        if name not in obs.streams:
            raise ConfigError(f"data is missing stream column '{name}'")
    entry_terms = {
        entry: [build_term(t, obs.covariates) for t in terms]
        for entry, terms in config.formulas.items()
    }
    hmm = HmmModel(config.n_states, config.streams, entry_terms,
                   delta_mode=config.delta_mode)
    blocks = hmm.penalty_blocks()
    lam = default_lambda_init(blocks)
    for j, b in enumerate(blocks):
        if b.label in config.lambda_init:
            lam[j] = config.lambda_init[b.label]
    known = {b.label for b in blocks}
    unknown = set(config.lambda_map) | set(config.lambda_init)
    unknown -= known
    if unknown:
        raise ConfigError(
            f"lambda settings reference unknown penalties: {sorted(unknown)}; "
            f"available: {sorted(known)}"
        )
    assignment = []
    for b in blocks:
        tag = config.lambda_map.get(b.label, b.label)
        assignment.append(FIXED if tag.lower() in ("fixed", "na") else tag)
    pen = PenaltyModel(blocks, lam, hmm.dim)
    lmap = LambdaMap(assignment) if blocks else None
    return hmm, pen, lmap
