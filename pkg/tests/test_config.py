import numpy as np
import pytest

from pshmm.config import (
    ConfigError,
    FormulaError,
    ModelConfig,
    build_model,
    formula_covariates,
    parse_formula,
    term_label,
)
from pshmm.model import ObservationTable
from pshmm.qreml import FIXED


# ---------------------------------------------------------------------------
# Formula grammar

def test_parse_intercept_only():
    assert parse_formula("1") == []


def test_parse_simple_smooth():
    (t,) = parse_formula("s(tday, bs=cc, k=12, period=24)")
    assert t == {"type": "s", "vars": ["tday"], "bs": "cc", "k": 12, "period": 24.0}
    assert term_label(t) == "s(tday)"


def test_parse_sum_of_terms():
    terms = parse_formula("1 + s(a, bs=bs, k=8) + s(b, bs=re)")
    assert [t["vars"] for t in terms] == [["a"], ["b"]]
    assert formula_covariates(terms) == ["a", "b"]


def test_parse_tensor_interaction():
    (t,) = parse_formula("ti(s(u, bs=cc, k=8, period=1), s(v, bs=cc, k=8, period=1))")
    assert t["type"] == "ti"
    assert [m["vars"] for m in t["margins"]] == [["u"], ["v"]]
    assert term_label(t) == "ti(u,v)"


def test_parse_bivariate_thinplate():
    (t,) = parse_formula("s(x, y, bs=tp, k=30)")
    assert t["vars"] == ["x", "y"]


@pytest.mark.parametrize("formula,msg", [
    ("s(tday, bs=cc, k=10)", "period"),
    ("s(x, bs=zz, k=5)", "unknown basis"),
    ("s(x, bs=bs)", "requires k"),
    ("s(x, y, bs=cc, k=5, period=1)", "exactly one"),
    ("s(x, bs=tp, k=9)", "two covariates"),
    ("foo(x)", "unknown term"),
    ("s(x, bs=bs, k=5) + ", "identifier"),
    ("s(x, bs=bs, k=5) junk", "trailing"),
    ("ti(x, s(y, bs=cc, k=5, period=1))", "marginals"),
    ("s(x, frobnicate=3)", "unknown option"),
])
def test_parse_errors_with_position(formula, msg):
    with pytest.raises(FormulaError, match=msg) as exc:
        parse_formula(formula)
    assert "column" in str(exc.value)
    assert "^" in str(exc.value)  # caret marks the offending position


# ---------------------------------------------------------------------------
# Config document

def base_raw():
    return {
        "states": 2,
        "streams": {"step": "gamma"},
        "transitions": {"1->2": "s(tday, bs=cc, k=12, period=24)", "2->1": "1"},
    }


def test_config_minimal():
    cfg = ModelConfig(base_raw())
    assert cfg.n_states == 2
    assert cfg.streams == [("step", "gamma")]
    assert (1, 2) in cfg.formulas and cfg.formulas[(2, 1)] == []
    assert cfg.delta_mode == "stationary"
    assert cfg.covariates == ["tday"]


def test_config_rejects_unknown_keys():
    raw = base_raw()
    raw["bogus"] = 1
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig(raw)


def test_config_rejects_unknown_family():
    raw = base_raw()
    raw["streams"] = {"step": "weibull"}
    with pytest.raises(ConfigError, match="weibull"):
        ModelConfig(raw)


def test_config_rejects_bad_transition_keys():
    raw = base_raw()
    raw["transitions"] = {"1->1": "1"}
    with pytest.raises(ConfigError, match="off-diagonal"):
        ModelConfig(raw)
    raw["transitions"] = {"0->2": "1"}
    with pytest.raises(ConfigError, match="off-diagonal"):
        ModelConfig(raw)
    raw["transitions"] = {"onetwo": "1"}
    with pytest.raises(ConfigError, match="bad transition key"):
        ModelConfig(raw)


def test_config_delta_aliases():
    raw = base_raw()
    raw["delta"] = "stationary_at_first_covariates"
    assert ModelConfig(raw).delta_mode == "stationary"
    raw["delta"] = "nonsense"
    with pytest.raises(ConfigError, match="delta"):
        ModelConfig(raw)


def test_config_round_trip_normalizes():
    cfg = ModelConfig(base_raw())
    again = ModelConfig({**base_raw(), **cfg.to_jsonable()})
    assert again.to_jsonable() == cfg.to_jsonable()  # idempotent after one pass


# ---------------------------------------------------------------------------
# Model construction

def make_obs(T=300, seed=90):
    rng = np.random.default_rng(seed)
    return ObservationTable(
        {"step": rng.gamma(2.0, 1.0, T)},
        {"tday": rng.uniform(0.0, 24.0, T)},
        [],
    )


def test_build_model_k_mapping():
    cfg = ModelConfig(base_raw())
    hmm, pen, lmap = build_model(cfg, make_obs())
    # cyclic k=12 -> 11 knots -> 10 coefficients after centering
    assert hmm.block("1->2.term0").size == 10
    assert len(pen.blocks) == 1
    assert pen.blocks[0].label == "1->2:s(tday)"
    assert pen.lam[0] == 1e4


def test_build_model_anova_lambda_init():
    raw = base_raw()
    raw["streams"] = {"y": "normal"}
    raw["transitions"] = {
        "1->2": "s(u, bs=cc, k=8, period=1) + s(v, bs=cc, k=8, period=1)"
                " + ti(s(u, bs=cc, k=8, period=1), s(v, bs=cc, k=8, period=1))",
    }
    cfg = ModelConfig(raw)
    rng = np.random.default_rng(91)
    obs = ObservationTable(
        {"y": rng.normal(size=200)},
        {"u": rng.uniform(0, 1, 200), "v": rng.uniform(0, 1, 200)},
        [],
    )
    hmm, pen, lmap = build_model(cfg, obs)
    labels = [b.label for b in pen.blocks]
    assert labels == ["1->2:s(u)", "1->2:s(v)", "1->2:ti(u,v):1", "1->2:ti(u,v):2"]
    assert list(pen.lam) == [1e4, 1e4, 1e5, 1e5]
    assert [b.kind for b in pen.blocks] == ["simple", "simple", "tensor", "tensor"]


def test_build_model_lambda_overrides_and_map():
    raw = base_raw()
    raw["transitions"] = {
        "1->2": "s(tday, bs=cc, k=12, period=24)",
        "2->1": "s(tday, bs=cc, k=12, period=24)",
    }
    raw["lambda"] = {
        "init": {"1->2:s(tday)": 50.0},
        "map": {"1->2:s(tday)": "shared", "2->1:s(tday)": "shared"},
    }
    cfg = ModelConfig(raw)
    hmm, pen, lmap = build_model(cfg, make_obs())
    assert pen.lam[0] == 50.0
    assert lmap.assignment == ["shared", "shared"]


def test_build_model_fixed_lambda():
    raw = base_raw()
    raw["transitions"] = {
        "1->2": "s(tday, bs=cc, k=12, period=24)",
        "2->1": "s(tday, bs=cc, k=12, period=24)",
    }
    raw["lambda"] = {"map": {"2->1:s(tday)": "fixed"}}
    cfg = ModelConfig(raw)
    _, _, lmap = build_model(cfg, make_obs())
    assert lmap.assignment == ["1->2:s(tday)", FIXED]


def test_build_model_unknown_lambda_label():
    raw = base_raw()
    raw["lambda"] = {"init": {"nope": 1.0}}
    with pytest.raises(ConfigError, match="nope"):
        build_model(ModelConfig(raw), make_obs())


def test_build_model_missing_covariate_column():
    cfg = ModelConfig(base_raw())
    rng = np.random.default_rng(92)
    obs = ObservationTable({"step": rng.gamma(2.0, 1.0, 50)}, {}, [])
    with pytest.raises(ConfigError, match="tday"):
        build_model(cfg, obs)


def test_build_model_missing_stream_column():
    cfg = ModelConfig(base_raw())
    rng = np.random.default_rng(93)
    obs = ObservationTable(
        {"other": rng.normal(size=50)}, {"tday": rng.uniform(0, 24, 50)}, []
    )
    with pytest.raises(ConfigError, match="step"):
        build_model(cfg, obs)
