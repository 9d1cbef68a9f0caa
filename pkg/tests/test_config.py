import pytest

from shockadjoint.core.config import (
    WORKERS_ENV,
    ExperimentConfig,
    config_from_dict,
    load_config,
    resolve_database_url,
    resolve_workers,
)
from shockadjoint.core.errors import ConfigError


def test_scalar_defaults():
    config = ExperimentConfig()
    eps = config.resolved_eps_list()
    assert config.selected_model == "scalar"
    assert len(eps) == 7
    assert eps[0] == pytest.approx(0.05)
    assert eps[-1] == pytest.approx(0.05 / 64)
    assert config.resolved_bc_policy() == "dirichlet-zero"
    assert config.policy_warnings() == []


def test_euler_defaults():
    config = config_from_dict({"experiment": {"model": "euler-nozzle"}})
    eps = config.resolved_eps_list()
    assert len(eps) == 5
    assert eps[0] == pytest.approx(0.004)
    assert config.resolved_bc_policy() == "linearized-characteristic"


def test_explicit_lists_win():
    config = config_from_dict({
        "viscosity": {"eps_list": [0.1, 0.02], "bc_policy": "linearized-characteristic"},
        "perturbation": {"nu_list": [0.01, 0.001]},
    })
    assert config.resolved_eps_list() == [0.1, 0.02]
    assert config.perturbation.resolved_nu_list() == [0.01, 0.001]
    assert config.resolved_bc_policy() == "linearized-characteristic"


@pytest.mark.parametrize("data", [
    {"viscosity": {"epss": 1.0}},
    {"unknown": {}},
    {"viscosity": {"eps_list": []}},
    {"viscosity": {"eps_list": [0.01, 0.02]}},
    {"viscosity": {"eps_list": [0.01, -0.005]}},
    {"viscosity": {"theta": 1.5}},
    {"viscosity": {"theta_sensitivity": [0.0, 0.1]}},
    {"viscosity": {"bc_policy": "periodic"}},
    {"perturbation": {"nu_list": [0.001, 0.01]}},
    {"experiment": {"model": "shallow-water"}},
    {"experiment": {"workers": 0}},
    {"euler": {"gamma": 1.0}},
])
def test_invalid_config_raises(data):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.exit_code == 2


def test_under_resolved_grid_policy_warns():
    config = config_from_dict({"viscosity": {"kappa": 3.0}})
    warnings = config.policy_warnings()
    assert len(warnings) == 1
    assert "layer under-resolved" in warnings[0]


def test_load_config_from_toml(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(
        '[experiment]\nmodel = "scalar"\nseed = 7\n\n'
        '[viscosity]\neps_list = [0.05, 0.025, 0.0125]\n'
    )
    config = load_config(str(path))
    assert config.experiment.seed == 7
    assert config.resolved_eps_list() == [0.05, 0.025, 0.0125]


def test_load_config_without_path_gives_defaults():
    assert load_config(None) == ExperimentConfig()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"))


def test_unparsable_config_file(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[viscosity\nkappa = 8\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    config = config_from_dict({"experiment": {"workers": 2}})
    assert resolve_workers(config) == (3, f"env:{WORKERS_ENV}")


def test_workers_from_config():
    config = config_from_dict({"experiment": {"workers": 2}})
    assert resolve_workers(config) == (2, "config")


def test_workers_default_to_cpu_count():
    workers, source = resolve_workers(ExperimentConfig())
    assert workers >= 1
    assert source == "cpu_count"


@pytest.mark.parametrize("value", ["many", "0"])
def test_bad_worker_environment(monkeypatch, value):
    monkeypatch.setenv(WORKERS_ENV, value)
    with pytest.raises(ConfigError):
        resolve_workers(ExperimentConfig())


def test_default_database_lives_in_output_dir(tmp_path):
    url = resolve_database_url(tmp_path)
    assert url.startswith("sqlite:///")
    assert url.endswith("ledger.sqlite")
