"""Deployment registry, UE drops and seed derivation."""

import numpy as np
import pytest

from otdoa_uncertainty import scenario, seeding
from otdoa_uncertainty.errors import ConfigError


def test_indoor_open_office_layout():
    d = scenario.build_indoor_open_office()
    assert d.n_bs == 12
    assert all(z == 3.0 for _, _, z in d.bs_positions)
    assert d.ue_height == 1.5
    first_row = [x for x, y, _ in d.bs_positions if y == 15.0]
    assert np.all(np.diff(first_row) == 20.0)
    assert all(d.contains((x, y)) for x, y, _ in d.bs_positions)


def test_registry_lookup():
    assert scenario.get_deployment("indoor-open-office") == scenario.build_indoor_open_office()
    with pytest.raises(ConfigError, match="Unknown deployment"):
        scenario.get_deployment("outdoor-macro")


def test_drops_stay_inside_footprint():
    d = scenario.build_indoor_open_office()
    points = scenario.drop_ues(d, 1000, seed=3)
    assert points.shape == (1000, 2)
    assert all(d.contains(p) for p in points)


def test_drops_are_deterministic():
    d = scenario.build_indoor_open_office()
    assert np.array_equal(scenario.drop_ues(d, 1, seed=9), scenario.drop_ues(d, 1, seed=9))


def test_drops_are_uniform_on_average():
    d = scenario.build_indoor_open_office()
    mean = scenario.drop_ues(d, 10000, seed=4).mean(axis=0)
    np.testing.assert_allclose(mean, d.centroid, rtol=0.05)


def test_drop_count_must_be_positive():
    with pytest.raises(ConfigError):
        scenario.drop_ues(scenario.build_indoor_open_office(), 0, seed=1)


@pytest.mark.parametrize(
    "positions",
    [
        ((0.0, 0.0, 3.0), (50.0, 0.0, 3.0)),  # outside a 40 m footprint
        ((0.0, 0.0, 3.0), (10.0, 0.0, 2.0)),  # height mismatch
        ((0.0, 0.0, 3.0), (0.0, 0.0, 3.0)),  # duplicate
        (),
    ],
)
def test_invalid_deployments(positions):
    with pytest.raises(ConfigError):
        scenario.Deployment(positions, area_width=40.0, area_length=40.0, bs_height=3.0, ue_height=1.5)


def test_scenario_from_file_keys():
    config = scenario.ScenarioConfig.from_mapping({"n_ues": 10, "noise_std_s": 1e-9, "los_model": "always-los"})
    assert config.n_ues == 10
    assert config.noise_std == 1e-9
    assert config.los_model is scenario.LosModel.ALWAYS_LOS


def test_scenario_rejects_bad_values():
    with pytest.raises(ConfigError, match="Unknown"):
        scenario.ScenarioConfig.from_mapping({"n_ue": 10})
    with pytest.raises(ConfigError, match="los_model"):
        scenario.ScenarioConfig(los_model="sometimes")
    with pytest.raises(ConfigError):
        scenario.ScenarioConfig(noise_std=-1.0)


def test_derived_seeds_depend_on_root_and_label():
    assert seeding.derive_seed(2021, "drop") == seeding.derive_seed(2021, "drop")
    assert seeding.derive_seed(2021, "drop") != seeding.derive_seed(2021, "noise")
    assert seeding.derive_seed(2021, "drop") != seeding.derive_seed(2022, "drop")
    assert 0 <= seeding.derive_seed(0, "x") < 2**63


def test_streams_are_keyed_by_index():
    a = seeding.stream(5, 3).random(4)
    assert np.array_equal(a, seeding.stream(5, 3).random(4))
    assert not np.array_equal(a, seeding.stream(5, 4).random(4))
