import numpy as np
import pytest

from ecgtransfer.wfdb import PhysicalRecord


def sine_record(record_id="r", fs=500, seconds=10.0, freq=5.0, amp=1.0, seed=0):
    rng = np.random.default_rng(seed)
    n = int(round(fs * seconds))
    t = np.arange(n) / fs
    phases = rng.uniform(0, 2 * np.pi, 12)
    sig = amp * np.sin(2 * np.pi * freq * t[None, :] + phases[:, None])
    sig += 0.05 * rng.standard_normal((12, n))
    return PhysicalRecord(record_id, sig, float(fs))


@pytest.fixture
def make_record():
    return sine_record


# -- acceptance summary: one line per criterion at the end of the run

ACCEPTANCE = {}


@pytest.fixture
def accept(request):
    def record(n, ok, detail):
        ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
        return ok
    return record


def pytest_runtest_logreport(report):
    if report.when == "setup" and report.skipped and "test_acceptance" in report.nodeid:
        n = report.nodeid.rsplit("criterion_", 1)[-1].split("_")[0]
        if n.isdigit():
            ACCEPTANCE[int(n)] = ("SKIP", str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {detail}")
