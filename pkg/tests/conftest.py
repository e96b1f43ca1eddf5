import pytest
import torch

from darvrp.policy import PolicyConfig, init_params
from darvrp.vrplib import GenSpec, generate_instance

torch.set_num_threads(1)

SMALL = PolicyConfig(embedding_dim=16, heads=2, encoder_layers=1, ff_hidden=32)


def random_instance(n, seed, capacity=30, demand_high=9):
    return generate_instance(GenSpec(n, 1, demand_high, capacity, seed=seed), name=f"r{n}-{seed}")


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_params():
    return init_params(SMALL, seed=0)


_REPORT = {}


def report(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _REPORT[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_REPORT):
            terminalreporter.write_line(_REPORT[number])
