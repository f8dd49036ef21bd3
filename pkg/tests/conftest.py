import json

import pytest

from attestbox.attestation import ProxyState, TrustBundle
from attestbox.client import ClientIdentity, connect
from attestbox.deploy import GUEST_DIR, create_fixture
from attestbox.isolate import ProcessIsolate
from attestbox.proxy import LocalProxy
from attestbox.server import RuntimeServer


@pytest.fixture(scope="session")
def trust():
    return TrustBundle.generate()


@pytest.fixture
def guest_bytes():
    return lambda name: (GUEST_DIR / f"{name}.wasm").read_bytes()


@pytest.fixture
def make_fixture(tmp_path, trust):
    counter = iter(range(1000))

    def make(guest="wordcount", **kw):
        kw.setdefault("server_endpoint", "127.0.0.1:0")
        return create_fixture(tmp_path / f"fx{next(counter)}", guest, trust=trust, **kw)

    return make


@pytest.fixture
def policy_doc(make_fixture):
    """A valid policy as a JSON-compatible dict."""
    fx = make_fixture()
    return json.loads(fx.policy_path.read_text())


class Running:
    def __init__(self, fx, server, endpoint, proxy_state):
        self.fx = fx
        self.server = server
        self.endpoint = endpoint
        self.proxy_state = proxy_state

    def identity(self, pid):
        return ClientIdentity.load(self.fx.cert(pid), self.fx.key(pid))

    def connect(self, pid, policy=None, **kw):
        return connect(policy or self.fx.policy, self.identity(pid), endpoint=self.endpoint, **kw)


@pytest.fixture
def running(trust):
    """Start an in-process runtime for a fixture; stopped at teardown."""
    servers = []

    def start(fx, *, measurement=None, proxy_state=None):
        state = proxy_state or ProxyState(trust.root_key, trust.root_cert, trust.device_ca_cert)
        isolate = ProcessIsolate(trust.device, measurement=measurement or fx.policy.runtime_measurement)
        srv = RuntimeServer(fx.policy, isolate, LocalProxy(state))
        srv.boot()
        endpoint = srv.listen()
        srv.start()
        servers.append(srv)
        return Running(fx, srv, endpoint, state)

    yield start
    for srv in servers:
        srv.stop()


# -- acceptance summary ------------------------------------------------------

_VERDICTS = {}
_RANK = {"PASS": 0, "NOT ASSESSABLE": 1, "FAIL": 2}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    if report.skipped:
        verdict = "NOT ASSESSABLE"
    elif report.failed:
        verdict = "FAIL"
    else:
        verdict = "PASS"
    title_, worst, details = _VERDICTS.get(number, (title, "PASS", []))
    if _RANK[verdict] > _RANK[worst]:
        worst = verdict
    detail = getattr(item, "criterion_detail", "")
    if detail:
        details.append(detail)
    _VERDICTS[number] = (title_, worst, details)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, verdict, details = _VERDICTS[number]
        line = f"criterion {number}: {verdict:<14} {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(details)}]" if details else ""))
