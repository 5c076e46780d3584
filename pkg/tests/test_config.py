import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.config import (
    FieldExpr,
    bundled_scenario_path,
    load_scenario,
    parse_text,
    scenario_from_text,
)
from semiclassical_control.errors import ConfigError
from semiclassical_control.spectral import PeriodicGrid

MINIMAL = """
scenario.name = t
spec.T = 1.0
spec.g0 = "const:1.0"
spec.ghat0 = "const:1.0"
"""

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
modes = st.dictionaries(st.integers(1, 8), finite, max_size=4)


class TestFieldExpr:
    def test_parse_values(self):
        f = FieldExpr.parse('"const:1.0 + cos:1:0.1 - sin:2:0.5"')
        x = PeriodicGrid(16).x
        assert np.allclose(f.values(PeriodicGrid(16)), 1.0 + 0.1 * np.cos(x) - 0.5 * np.sin(2 * x))

    def test_bare_numbers_and_repeats(self):
        f = FieldExpr.parse("2 + cos:1:0.5 + cos:1:0.25 - 0.5")
        assert f.const == 1.5
        assert f.cos == ((1, 0.75),)

    @given(c=finite, cos=modes, sin=modes)
    @settings(max_examples=60)
    def test_str_round_trip(self, c, cos, sin):
        f = FieldExpr(c, tuple(sorted(cos.items())), tuple(sorted(sin.items())))
        assert FieldExpr.parse(str(f)) == f

    @pytest.mark.parametrize("bad", ["", "cos:0:1", "cos:1", "tan:1:1", "1 2", "const:1 cos:1:1"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            FieldExpr.parse(bad)

    def test_coeff_layout(self):
        c = FieldExpr.parse("sin:1:2 + cos:2:3").coeffs()
        assert c.tolist() == [[2.0, 0.0], [0.0, 3.0]]


class TestParsing:
    def test_comments_and_quotes(self):
        raw = parse_text('a.b = "x # not a comment"  # comment\n\n# full line\nc.d = 2')
        assert raw == {"a.b": '"x # not a comment"', "c.d": "2"}

    @pytest.mark.parametrize(
        "text",
        [
            "novalue",
            "nosection = 1",
            "a.b = 1\na.b = 2",
        ],
    )
    def test_syntax_errors(self, text):
        with pytest.raises(ConfigError):
            parse_text(text)

    def test_defaults_filled(self):
        sc = scenario_from_text(MINIMAL)
        assert sc["spec.k"] == 3
        assert sc["synthesis.osc_schedule"] == (4, 8, 16, 32)

    @pytest.mark.parametrize(
        "extra, msg",
        [
            ("spec.bogus = 1", "unknown key"),
            ("numerics.grid = 100", "power of two"),
            ("spec.eps = abc", "expected a number"),
            ("semiclassical.enabled = maybe", "boolean"),
        ],
    )
    def test_value_errors(self, extra, msg):
        with pytest.raises(ConfigError, match=msg):
            scenario_from_text(MINIMAL + extra + "\n")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="missing"):
            scenario_from_text("scenario.name = t\nspec.T = 1\n")

    def test_invalid_spec_becomes_config_error(self):
        sc = scenario_from_text(MINIMAL.replace('spec.ghat0 = "const:1.0"', 'spec.ghat0 = "const:1.5"'))
        with pytest.raises(ConfigError, match="mass"):
            sc.target_spec()


class TestScenario:
    def test_text_round_trip_preserves_hash(self):
        sc = load_scenario(bundled_scenario_path("retarget_small"))
        again = scenario_from_text(sc.to_text())
        assert again.content_hash() == sc.content_hash()

    def test_hash_changes_with_values(self):
        sc = scenario_from_text(MINIMAL)
        assert sc.with_values(seeds__seed=1).content_hash() != sc.content_hash()

    @pytest.mark.parametrize("name", ["identity", "retarget_small"])
    def test_bundled_scenarios_load(self, name):
        spec = load_scenario(bundled_scenario_path(name)).target_spec()
        assert spec.grid.n_points == 256

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "missing.cfg")
