import pytest

from geomtl.worldgen import DataConfig, build_world

SMALL = dict(n_titles=60, population=8000, n_random_users=1500, n_active_upsample=300, n_test_users=800,
             min_test_users_per_territory=20, daily_positives=150)


def small_config(**over) -> DataConfig:
    return DataConfig(**{**SMALL, **over})


@pytest.fixture(scope="session")
def small_world():
    return build_world(small_config(), seed=0)


@pytest.fixture(scope="session")
def default_worlds():
    # the full desk world for three seeds; shared because each build takes ~1.5 s
    return {s: build_world(DataConfig(), seed=s) for s in (0, 1, 2)}


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
