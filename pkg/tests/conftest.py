"""Shared fixtures: session-scoped deterministic keys, plus a terminal summary
that prints one pass/fail line per acceptance criterion."""

import random

import pytest

from pprq import paillier


@pytest.fixture(scope="session")
def primes512():
    return paillier.generate_primes(512, random.Random(0x5EED))


@pytest.fixture(scope="session")
def key512(primes512):
    """(pk, sk) with a 512-bit modulus, deterministic across the session."""
    return paillier.keypair_from_primes(*primes512)


@pytest.fixture(scope="session")
def threshold512(primes512):
    """(pk, share1, share2) built from the same primes as key512, so the
    standard secret key is an oracle for the threshold one."""
    return paillier.threshold_from_primes(*primes512, random.Random(0x7357))


@pytest.fixture(scope="session")
def key1024():
    return paillier.keygen(1024, random.Random(0x1024))


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


# -- acceptance summary ------------------------------------------------------

_acceptance_reports: list = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _acceptance_reports.append(report)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_reports:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for report in sorted(_acceptance_reports, key=lambda r: r.nodeid):
        name = report.nodeid.split("::")[-1]
        status = "PASS" if report.passed else "FAIL"
        tr.write_line(f"[{status}] {name} ({report.duration:.1f}s)")
