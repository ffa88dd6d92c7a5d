"""Tests for the experiment config format."""

import math
from pathlib import Path

import pytest

from config import SEED_ENV_VAR, ExperimentConfig, load_config, parse_config, with_overrides
from errors import ConfigError

SAMPLE = """\
# small dirichlet sweep
n = 20
k = 2
epsilons = 0.5, 1, inf
delta = 1e-6
repetitions = 3
seed = 42
partition = dirichlet
alpha_dir = 0.3
transport = socket
oracle.sigma_loss = 0.1
oracle.good = 0, 3
grid.learning_rate = 0.1, 0.01, 0.001
grid.momentum = 0, 0.9
"""


def test_parse_sample_config():
    config = parse_config(SAMPLE)
    assert config.n == 20
    assert config.k == 2
    assert config.epsilons == (0.5, 1.0, math.inf)
    assert config.delta == 1e-6
    assert config.partition == "dirichlet"
    assert config.transport == "socket"
    assert config.p == 6
    assert config.grid[1] == {"learning_rate": 0.1, "momentum": 0.9}
    assert config.good_candidates() == frozenset({0, 3})
    assert [b.epsilon for b in config.budgets()] == [0.5, 1.0, math.inf]


def test_defaults_use_hundred_candidate_grid():
    config = parse_config("seed = 1\n")
    assert config == ExperimentConfig(seed=1)
    assert config.p == 100
    assert config.epsilons == (0.1, 0.25, 0.5, 1.0, 3.0, math.inf)
    assert config.delta == 1e-5
    assert config.k == 5
    assert config.repetitions == 20
    assert config.good_candidates() == frozenset(range(5))


def test_anonymous_grid_size():
    assert parse_config("grid.size = 7\nk = 1\n").p == 7


@pytest.mark.parametrize(
    "text, line, field",
    [
        ("n = 5\nbogus = 1\n", 2, "bogus"),
        ("n = five\n", 1, "n"),
        ("n = 5\n\n# comment\nk 3\n", 4, None),
        ("k = 1\nk = 2\n", 2, "k"),
        ("transport = carrier\n", 1, "transport"),
        ("grid.size = 3\ngrid.lr = 0.1\n", 1, "grid.size"),
        ("grid.size = 0\n", 1, "grid.size"),
    ],
)
def test_parse_errors_name_line_and_field(text, line, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_config(text, Path("exp.cfg"))
    assert excinfo.value.line == line
    assert excinfo.value.field == field
    assert str(excinfo.value).startswith(f"exp.cfg:{line}")


@pytest.mark.parametrize(
    "text, field",
    [
        ("grid.size = 4\nk = 5\n", "k"),
        ("delta = 1.5\n", "delta"),
        ("epsilons = 0, 1\n", "epsilons"),
        ("dropout_tolerance = 0.6\nnoncompliant_fraction = 0.5\n", "noncompliant_fraction"),
        ("oracle = table\n", "oracle.table"),
        ("grid.size = 3\nk = 1\noracle.good = 0, 7\n", "oracle.good"),
    ],
)
def test_validation_errors_point_at_key(text, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_config(text)
    assert excinfo.value.field == field
    assert excinfo.value.line is not None or field == "oracle.table"


def test_seed_comes_from_environment(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "77")
    assert parse_config("n = 5\n").seed == 77
    assert parse_config("seed = 3\n").seed == 3


def test_bad_environment_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV_VAR, "not-a-number")
    with pytest.raises(ConfigError, match=SEED_ENV_VAR):
        parse_config("n = 5\n")


def test_relative_paths_resolve_against_config_directory(tmp_path):
    path = tmp_path / "exp" / "run.cfg"
    path.parent.mkdir()
    path.write_text("oracle = table\noracle.table = losses.csv\ndataset.path = ../items.csv\n", encoding="utf-8")
    config = load_config(path)
    assert config.table_path == path.parent / "losses.csv"
    assert config.dataset_path == path.parent / "../items.csv"
    assert config.source == path


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "absent.cfg")


def test_overrides_are_revalidated():
    config = parse_config("seed = 1\nrepetitions = 4\n")
    updated = with_overrides(config, seed=9, repetitions=None, transport="socket")
    assert (updated.seed, updated.repetitions, updated.transport) == (9, 4, "socket")
    with pytest.raises(ConfigError):
        with_overrides(config, workers=0)
