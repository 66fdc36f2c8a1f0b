import numpy as np
import pytest

from xfrn.model import build_planted_fixture


@pytest.fixture(scope="session")
def fixture0():
    return build_planted_fixture(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def capture_run(model, sentences, path, pair_ids):
    """Write a capture run for ``sentences[lang][pair]`` over ``pair_ids``."""
    from xfrn.corpus import sample_id
    from xfrn.model import forward_capture
    from xfrn.store import write_capture_run

    texts, sids, langs, pids = [], [], [], []
    for lang, fn in sentences.items():
        for p in pair_ids:
            texts.append(fn(p))
            sids.append(sample_id(lang, p))
            langs.append(lang)
            pids.append(p)
    recs = forward_capture(model, texts, sample_ids=sids, languages=langs, pair_indices=pids)
    return write_capture_run(model.manifest(), recs, path)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; fails the test when the check or its runtime budget fails."""
    import time

    start = time.perf_counter()

    def report(number, passed: bool, detail: str, budget_s: float, status: str | None = None):
        elapsed = time.perf_counter() - start
        ok = bool(passed) and elapsed <= budget_s
        word = status or ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {word}  {detail}  [{elapsed:.1f}s, budget {budget_s:g}s]"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
