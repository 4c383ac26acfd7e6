import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gather_excite.data import load_cifar, make_synthetic_cifar  # noqa: E402
from gather_excite.models import ArchSpec  # noqa: E402

_ACCEPT = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    key = (str(mark.args[0]), mark.args[1])
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL"
        _ACCEPT.setdefault(key, []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    def order(item):
        cid = item[0][0]
        digits = "".join(ch for ch in cid if ch.isdigit())
        return int(digits or 0), cid

    for (cid, title), runs in sorted(_ACCEPT.items(), key=order):
        statuses = {s for _, s, _ in runs}
        status = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        tr.write_line(f"{status}  criterion {cid}: {title}")
        for name, s, detail in runs:
            tr.write_line(f"        {s:4s} {name}" + (f"  [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    make_synthetic_cifar(root, n_train=1000, n_test=300, seed=0)
    return root


@pytest.fixture(scope="session")
def synth_train(synth_root):
    return load_cifar(synth_root, "cifar10", "train")


@pytest.fixture(scope="session")
def synth_test(synth_root):
    return load_cifar(synth_root, "cifar10", "test")


@pytest.fixture
def tiny_arch():
    # 3 stages of one pre-activation basic block, channels 4/8/16
    return ArchSpec.cifar_resnet(8, width_divisor=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
