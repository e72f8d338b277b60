import numpy as np
import pytest

from divkd import corpus, model


@pytest.fixture(scope="session")
def toy():
    return corpus.generate_toy_corpus(120, seed=7)


@pytest.fixture(scope="session")
def small_cfg(toy):
    return model.config_for_corpus(toy, hidden_dim=8, embed_dim=6, latent_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


def pytest_collection_modifyitems(config, items):
    # the slow toy-scale experiment goes last so fast failures surface first
    items.sort(key=lambda it: it.get_closest_marker("slow") is not None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = item.config._criteria.get(num, (title, True))
    item.config._criteria[num] = (title, prev[1] and ok and not rep.skipped)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(config._criteria):
        title, ok = config._criteria[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}")
