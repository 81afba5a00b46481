import sys

import numpy as np
import pytest

from nvscope.controller import run_sweep
from nvscope.physics import NvParameters
from nvscope.simulator import LoopbackTransport, SimulatedDevice, default_state
from nvscope.spectrum import SweepPlan


def simulate(b_mt=0.0, seed=0, noise_mv=1.0, plan=None, params=None):
    """Sweep the in-process simulator the same way the CLI does."""
    params = params or NvParameters()
    device = SimulatedDevice(default_state(params, b_mt, noise_mv, seed))
    return run_sweep(LoopbackTransport(device), plan or SweepPlan())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class PtySimulator:
    """Simulator served on a pseudo-terminal from a background thread."""

    def __init__(self, b_mt=0.0, seed=0, noise_mv=1.0, params=None):
        import os
        import threading
        import tty

        from nvscope.simulator import serve_fd

        self.master, self.slave = os.openpty()
        tty.setraw(self.slave)
        self.path = os.ttyname(self.slave)
        device = SimulatedDevice(default_state(params or NvParameters(), b_mt, noise_mv, seed))
        self.stop = threading.Event()
        self.thread = threading.Thread(target=serve_fd, args=(device, self.master, self.stop, 0.01), daemon=True)
        self.thread.start()

    def close(self):
        import os

        self.stop.set()
        self.thread.join(timeout=2)
        os.close(self.master)
        os.close(self.slave)


@pytest.fixture
def pty_simulator():
    made = []

    def start(**kwargs):
        sim = PtySimulator(**kwargs)
        made.append(sim)
        return sim

    yield start
    for sim in made:
        sim.close()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
