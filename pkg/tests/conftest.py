import sys
from pathlib import Path
import pytest

# Make imports work no matter where pytest is started from
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# imported after fixing sys.path
import database
from services import grid_service, kernel_service
from services import velocity_service as vel
from services.solver_service import LambdaPolicy, SolverConfig


@pytest.fixture(autouse=True)
def sandbox_db(tmp_path, monkeypatch):
    """
    For every test point the run registry at a throwaway sqlite file and build the tables.
    """
    db_file = tmp_path / "sqlite_test.db"
    monkeypatch.setattr(database, "DATABASE", str(db_file), raising=False)
    database.init_database()

    # sanity check to check tests are using the temp DB
    assert str(database.DATABASE).endswith("sqlite_test.db")

    # tmp_path is cleaned by pytest
    yield


@pytest.fixture
def jam_datum():
    """q0 = 1/4 + 1/2 on [-0.5, 0.5]."""
    return grid_service.piecewise_constant([-0.5, 0.5], [0.25, 0.75, 0.25])


@pytest.fixture
def small_config(jam_datum):
    """Preset velocities on a short, coarse run."""
    return SolverConfig(
        grid=grid_service.make_grid(-2.0, 3.0, 0.01),
        kernel=kernel_service.linear_decreasing(0.5),
        v1=vel.greenshields_squared(),
        v2=vel.estimation(0.0),
        initial=jam_datum,
        final_time=0.1,
        lambda_policy=LambdaPolicy.PRESET,
    )


@pytest.fixture
def write_toml(tmp_path):
    """Write a config file and return its path."""
    def _write(text, name="scenario.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write
