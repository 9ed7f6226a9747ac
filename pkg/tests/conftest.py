"""Shared fixtures for the otdoa-uncertainty test suite.

The square deployment is small enough for exact hand checks (4 BSs on the corners
of a 40 m x 40 m room); the noiseless scenario makes ToAs equal to the 3D flight
time so solver round trips are exact.
"""

import pytest

from otdoa_uncertainty import radio_sim
from otdoa_uncertainty.scenario import Deployment, LosModel, ScenarioConfig


@pytest.fixture
def square():
    return Deployment(
        bs_positions=((0.0, 0.0, 3.0), (40.0, 0.0, 3.0), (40.0, 40.0, 3.0), (0.0, 40.0, 3.0)),
        area_width=40.0,
        area_length=40.0,
        bs_height=3.0,
        ue_height=1.5,
    )


@pytest.fixture
def noiseless():
    return ScenarioConfig(n_ues=50, rng_seed=7, noise_std=0.0, nlos_excess_mean=0.0, los_model=LosModel.ALWAYS_LOS)


@pytest.fixture
def small_dataset(square, noiseless):
    return radio_sim.generate_dataset(square, noiseless, noiseless.rng_seed)


@pytest.fixture
def write_config(tmp_path):
    """Write a TOML run configuration into tmp_path and return its path."""

    def write(text):
        path = tmp_path / "run.toml"
        path.write_text(text)
        return path

    return write
