import re

import pytest
import torch

from speakerflow.mixing import Corpus, synthetic_noise_corpus, synthetic_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    synthetic_toy_corpus(4, 3, root / "speech", seed=0)
    synthetic_noise_corpus(3, root / "noise", seed=0)
    return root


@pytest.fixture(scope="session")
def corpus(toy_corpus_dir):
    return Corpus.load(toy_corpus_dir / "speech" / "corpus.jsonl")


@pytest.fixture(scope="session")
def noise_corpus(toy_corpus_dir):
    return Corpus.load(toy_corpus_dir / "noise" / "corpus.jsonl")


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}
_CRITERION = re.compile(r"test_acceptance\.py::.*test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    detail = "; ".join(v for k, v in report.user_properties if k == "detail")
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if n not in _ACCEPTANCE or status == "FAIL":
            _ACCEPTANCE[n] = (status, detail)
    elif report.skipped:
        _ACCEPTANCE[n] = ("SKIP", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
