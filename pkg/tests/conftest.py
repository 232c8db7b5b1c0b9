import numpy as np
import pytest

from tgd import autodiff as ad
from tgd.model import Seq2SeqConfig, init_seq2seq


def make_model(vocab=5, seed=0, hidden=6, sharpen=3.0, dtype=np.float64, src_vocab=7):
    """Small random translation model; ``sharpen`` scales the output layer."""
    cfg = Seq2SeqConfig(src_vocab, vocab, emb_dim=4, hidden=hidden, att_dim=5, readout_dim=6, max_len_decode=12)
    with ad.precision("extended" if dtype == np.float64 else "standard"):
        params = init_seq2seq(cfg, seed=seed, dtype=dtype)
    params.arrays["out.W"] *= sharpen
    return params


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture(autouse=True)
def _reset_precision():
    ad.set_precision("standard")
    yield
    ad.set_precision("standard")


# ------------------------------------------------------ acceptance reporting

_CRITERIA: dict[int, dict] = {}
_NOTES: dict[int, list] = {}


@pytest.fixture
def note(request):
    """Attach a line of measurements to the current criterion's summary."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        _NOTES.setdefault(mark.args[0], []).append(text)

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    info = getattr(report, "criterion", None)
    if info is None:
        return
    n, title = info
    row = _CRITERIA.setdefault(n, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        row["seen"] = True
        row["ok"] = row["ok"] and report.outcome == "passed"


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
        row = _CRITERIA[n]
        status = "PASS" if row["ok"] and row["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {row['title']}")
        for text in _NOTES.get(n, []):
            terminalreporter.write_line(f"    {text}")
