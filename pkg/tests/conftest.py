import pytest
from hypothesis import HealthCheck, settings

from cachenet.harness import StreamConfig, gen_dataset
from cachenet.submodels import CacheNet

settings.register_profile("default", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    failed = report.failed
    prev = _acceptance.get(number, (title, True))
    _acceptance[number] = (title, prev[1] and not failed and report.outcome != "skipped")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        report.acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok = _acceptance[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")


SMALL_STREAM = StreamConfig(num_classes=4, input_dim=10, latent_dim=3, samples_per_class=60,
                            frames=300, run_length=20, seed=3)


@pytest.fixture(scope="session")
def small_model():
    X, y = gen_dataset(SMALL_STREAM)
    return CacheNet(z_dim=4, vae_hidden=16, vae_hidden2=8, trunk_widths=(12,), epochs=4,
                    batch_size=32, random_state=3).fit(X, y)


@pytest.fixture(scope="session")
def small_bundle(small_model):
    return small_model.to_bundle()
