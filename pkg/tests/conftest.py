import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS


@pytest.fixture(scope="session")
def table1_cfg():
    from gridl1.config import load_config
    return load_config(CONFIGS / "table1_radial.toml")


@pytest.fixture(scope="session")
def table1_topology(table1_cfg):
    return table1_cfg.grid


@pytest.fixture(scope="session")
def table1_models(table1_topology):
    from gridl1.network import linearize_all
    return linearize_all(table1_topology)


@pytest.fixture(scope="session")
def table1_report(table1_cfg):
    from gridl1.cli import certify_config
    report, _, _ = certify_config(table1_cfg)
    return report
