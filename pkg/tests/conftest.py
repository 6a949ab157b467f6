import pytest

# A run small enough to train every variant in seconds.
TINY = [
    "model.height=16", "model.width=16", "model.depth=2",
    "data.n_train=2", "data.n_test=2", "data.train_length=8", "data.test_length=24",
    "data.anomaly_duration=6", "data.size_min=3", "data.size_max=5",
    "train.epochs=2",
]


def tiny_flags():
    out = []
    for item in TINY:
        out += ["--set", item]
    return out


@pytest.fixture
def tiny():
    return tiny_flags()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full-size models (tens of minutes)")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
