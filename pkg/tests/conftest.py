import ipaddress
import socket
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def _is_loopback(address) -> bool:
    if not isinstance(address, tuple):
        return True  # unix sockets
    host = address[0]
    if host == "localhost":
        return True
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return False


@pytest.fixture(autouse=True, scope="session")
def loopback_only():
    """Fail any test that tries to reach a host other than this machine."""
    original = socket.socket.connect

    def guarded(self, address):
        if not _is_loopback(address):
            raise RuntimeError(f"network access attempted: {address!r}")
        return original(self, address)

    socket.socket.connect = guarded
    yield
    socket.socket.connect = original


def pytest_configure(config):
    config.stash[_acceptance_key] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    lines = request.config.stash[_acceptance_key]

    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
