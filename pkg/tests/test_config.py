import numpy as np
import pytest

from reithom import config, operators
from reithom.errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def test_defaults_build_reference_operator():
    cfg = config.default_config()
    assert cfg.dim == 1 and cfg.n == 128 and cfg.steps == 128
    assert cfg.epsilons == (0.25, 0.125, 0.0625)
    assert cfg.q_mode == "table" and cfg.h_mode == "z-only"
    ref = operators.reference_linear(1)
    pts = np.linspace(0.0, 1.0, 7)[:, None]
    assert np.array_equal(cfg.op.cpoly(pts), ref.cpoly(pts))
    assert np.array_equal(cfg.op.gpoly(pts), ref.gpoly(pts))
    assert cfg.nf.p == 2.0
    assert cfg.source_spec == {"kind": "constant", "value": 1.0, "ramp": 1.0}
    f = cfg.source()
    xs = np.zeros((3, 1))
    assert np.allclose(f(xs, 0.5), 0.5)
    assert np.allclose(f(xs, 1.0), 1.0)
    assert cfg.cell_xi == (1.0,)


def test_constant_source_without_ramp_is_scalar():
    cfg = config.config_from_dict({"source": {"kind": "constant", "value": 3.0, "ramp": 0.0}})
    assert cfg.source() == 3.0


def test_explicit_operator_matches_preset():
    data = {
        "operator": {
            "kind": "linear",
            "c": {"const": 2.0, "modes": [{"k": [1], "sin_amp": 1.0}]},
            "gamma": {"const": 2.0, "modes": [{"k": [1], "sin_amp": 1.0}]},
        },
    }
    cfg = config.config_from_dict(data)
    ref = operators.reference_linear(1)
    pts = np.linspace(0.0, 1.0, 11)[:, None]
    assert np.array_equal(cfg.op.cpoly(pts), ref.cpoly(pts))
    assert np.array_equal(cfg.op.gpoly(pts), ref.gpoly(pts))
    assert cfg.operator_spec["kind"] == "linear"
    assert cfg.operator_spec["c"]["modes"][0]["k"] == [1]


def test_power_preset_uses_nfunction_p():
    cfg = config.config_from_dict({
        "operator": {"preset": "reference-power"},
        "nfunction": {"kind": "power", "p": 3.0},
    })
    assert cfg.op.kind == "power-law"
    assert cfg.op.nf.p == 3.0
    assert cfg.nfunction_spec == {"kind": "power", "p": 3.0}


def test_sine_source_and_dim2_probe():
    cfg = config.config_from_dict({
        "grid": {"d": 2, "n": 16, "n_tau": 4},
        "operator": {"preset": "identity", "dim": 2},
        "source": {"kind": "sine", "value": 2.0},
    })
    f = cfg.source()
    x = np.array([[0.5, 0.5]])
    assert abs(f(x, 0.3)[0] - 2.0 * 0.3) <= 1e-14
    assert cfg.cell_xi == (1.0, 1.0)


def test_validation_rejects_bad_values():
    with pytest.raises(ConfigError, match="unknown key"):
        config.config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="strictly decreasing"):
        config.config_from_dict({"epsilons": [0.125, 0.25]})
    with pytest.raises(ConfigError, match=r"\(0, 1\]"):
        config.config_from_dict({"epsilons": [2.0, 1.0]})
    with pytest.raises(ConfigError, match="q_mode"):
        config.config_from_dict({"q_mode": "tables"})
    with pytest.raises(ConfigError, match="odd"):
        config.config_from_dict({"effective": {"n_xi": 8}})
    with pytest.raises(ConfigError, match="preset"):
        config.config_from_dict({"operator": {"preset": "nope"}})
    with pytest.raises(ConfigError, match="entries"):
        config.config_from_dict({
            "operator": {"kind": "linear",
                         "c": {"modes": [{"k": [1, 1], "sin_amp": 1.0}]},
                         "gamma": {"const": 1.0}},
        })
    with pytest.raises(ConfigError, match="quadratic"):
        config.config_from_dict({
            "operator": {"kind": "linear", "c": {"const": 1.0},
                         "gamma": {"const": 1.0}},
            "nfunction": {"kind": "power", "p": 3.0},
        })
    with pytest.raises(ConfigError, match="does not match grid.d"):
        config.config_from_dict({"operator": {"preset": "identity", "dim": 2}})
    with pytest.raises(ConfigError, match="cell.xi"):
        config.config_from_dict({"cell": {"xi": [1.0, 0.0]}})
    with pytest.raises(ConfigError, match="ramp"):
        config.config_from_dict({"source": {"kind": "constant", "ramp": -1.0}})


def test_toml_round_trip(tmp_path):
    cfg = config.config_from_dict({
        "seed": 7,
        "operator": {"preset": "reference-power"},
        "nfunction": {"kind": "power", "p": 3.0},
        "grid": {"n": 64, "M": 32},
    })
    path = tmp_path / "run.toml"
    config.write_resolved_config(cfg, path)
    text1 = path.read_text()
    reloaded = config.load_config(path)
    assert reloaded.resolved() == cfg.resolved()
    config.write_resolved_config(reloaded, path)
    assert path.read_text() == text1


def test_dump_handles_nested_modes():
    cfg = config.config_from_dict({
        "operator": {
            "kind": "power",
            "c": {"const": 1.5, "modes": [{"k": [2], "cos_amp": 0.25}]},
            "gamma": {"const": 2.0, "modes": [{"k": [1], "sin_amp": 1.0}]},
        },
        "nfunction": {"kind": "power", "p": 2.5},
    })
    text = config.dump_toml(cfg.resolved())
    parsed = tomllib.loads(text)
    assert parsed == cfg.resolved()
    assert parsed["operator"]["c"]["modes"][0]["cos_amp"] == 0.25


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config.load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("epsilons = [0.25,\n")
    with pytest.raises(ConfigError, match="malformed"):
        config.load_config(bad)
