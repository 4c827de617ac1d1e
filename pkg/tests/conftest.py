import pytest

from vatt.config import RunConfig
from vatt.data import SyntheticCorpus, SyntheticSpec
from vatt.model import HeadsConfig, ModelConfig, ShareMode, agnostic, build_model
from vatt.numerics import Rng


def desk_model_config(share: str = "specific", d_va: int = 64, d_vt: int = 32) -> ModelConfig:
    """Tiny encoders on the 8x32x32 synthetic clips with desk-scale buckets."""
    kw = dict(heads=HeadsConfig(d_va, d_vt), video_buckets=(2, 2, 2), audio_buckets=8, vocab=512)
    return agnostic("tiny", **kw) if share == "agnostic" else ModelConfig(ShareMode.SPECIFIC, **kw)


@pytest.fixture
def desk_spec() -> SyntheticSpec:
    return SyntheticSpec(stream_length=6)


@pytest.fixture
def desk_corpus(desk_spec) -> SyntheticCorpus:
    return SyntheticCorpus(desk_spec, 24, Rng(0, "corpus"))


@pytest.fixture
def desk_model():
    return build_model(desk_model_config(), rng=Rng(0, "model"))


@pytest.fixture
def run_config():
    return RunConfig.parse("seed = 3\n")


# ------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    n, title = mark
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if report.when == "call":
        entry["tests"] += 1
    if report.failed or (report.when == "call" and not report.passed):
        entry["ok"] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']} ({e['tests']} tests)")
