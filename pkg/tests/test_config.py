import pytest
import yaml

from cogrelay.config import (
    ConfigError,
    default_config_path,
    from_mapping,
    load_config,
    parse_text,
    validate_file,
    validate_mapping,
)
from cogrelay.experiment import ExperimentConfig
from cogrelay.simcore import ModelParams


def default_mapping():
    return yaml.safe_load(default_config_path().read_text())


def paths(diags):
    return {d.path for d in diags}


def test_bundled_default_is_valid():
    assert validate_file(default_config_path()) == []


def test_default_matches_published_parameters():
    cfg = load_config()
    assert cfg.model == ModelParams.defaults(lambda_p=0.5)
    base = ExperimentConfig()
    assert (cfg.penalty_k, cfg.omegas, cfg.scheme, cfg.hyper) == \
        (base.penalty_k, base.omegas, base.scheme, base.hyper)
    assert cfg.lambda_p_grid == base.lambda_p_grid
    assert cfg.oracle.train_horizon == 3_000_000


def test_discount_of_one_rejected():
    data = default_mapping()
    data["learning"]["gamma"] = 1.0
    diags = validate_mapping(data)
    assert paths(diags) == {"learning.gamma"}
    assert "discount must be < 1 to ensure convergence of the sum" in diags[0].message


def test_missing_key_named():
    data = default_mapping()
    del data["model"]["channels"]["sp"]["q"]
    assert paths(validate_mapping(data)) == {"model.channels.sp.q"}


def test_unknown_key_named():
    data = default_mapping()
    data["reward"]["bonus"] = 1
    assert paths(validate_mapping(data)) == {"reward.bonus"}


def test_every_problem_reported_at_once():
    data = default_mapping()
    data["model"]["arrivals"]["pe"]["beta"] = 1.5
    data["experiment"]["replications"] = 0
    data["experiment"]["modes"] = ["cooperative", "selfish"]
    assert paths(validate_mapping(data)) == {
        "model.arrivals.pe.beta", "experiment.replications", "experiment.modes"}


def test_thresholds_must_fit_capacities():
    data = default_mapping()
    data["model"]["capacities"]["se"] = 10
    assert paths(validate_mapping(data)) == {"levels.thresholds"}


def test_threshold_count_must_match_levels():
    data = default_mapping()
    data["levels"]["n_levels"] = 3
    assert paths(validate_mapping(data)) == {"levels.thresholds"}


def test_schema_version_guard():
    data = default_mapping()
    data["schema_version"] = 2
    assert paths(validate_mapping(data)) == {"schema_version"}


def test_parse_error_reports_position():
    with pytest.raises(ConfigError) as err:
        parse_text("model:\n  lambda_p: [0.5\nreward: 1\n")
    msg = str(err.value)
    assert "parse error at line" in msg and "column" in msg


def test_booleans_are_not_numbers():
    data = default_mapping()
    data["model"]["lambda_p"] = True
    assert paths(validate_mapping(data)) == {"model.lambda_p"}


def test_exponent_notation_accepted():
    data = default_mapping()
    data["oracle"]["tol"] = "1e-9"
    assert from_mapping(data).oracle.tol == 1e-9


def test_from_mapping_raises_with_diagnostics():
    data = default_mapping()
    data["learning"]["alpha"] = 0
    with pytest.raises(ConfigError) as err:
        from_mapping(data)
    assert paths(err.value.diagnostics) == {"learning.alpha"}
