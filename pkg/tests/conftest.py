from __future__ import annotations

import numpy as np
import pytest

from mplab.config import from_dict
from mplab.data import DomainBatch, generate_domains, make_domain_specs
from mplab.models import ParameterSet
from mplab.tensor import Tensor, mean, mul, precision, sub

# Reduced network and data sizes so unit tests run in seconds.
SMALL_HFN = {"stem_channels": 4, "channels": [4, 8, 8], "blocks": [1, 1, 1], "fusion_width": 8,
             "input_size": 32, "pixel_map_size": 4}
SMALL_DATA = {"resolution": 32, "domains": 3, "per_class": 6}


def small_config(**sections):
    raw = {"hfn": dict(SMALL_HFN), "data": dict(SMALL_DATA), "extractor": {"hidden_channels": 4},
           "train": {"iterations": 3, "log_interval": 1, "eval_interval": 0}}
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return from_dict(raw)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_domains():
    specs = make_domain_specs(SMALL_DATA["domains"], 11, SMALL_DATA["resolution"])
    return generate_domains(specs, SMALL_DATA["per_class"], 11)


class ScalarToy:
    """L = mean((theta * phi * x - y)^2) with scalar phi and theta; build under the f64 fixture."""

    def __init__(self, phi: float = 1.0, theta: float = 1.0) -> None:
        self.phi_params = ParameterSet()
        self.theta_params = ParameterSet()
        self.phi_params.add("phi", np.array([phi]))
        self.theta_params.add("theta", np.array([theta]))

    @property
    def phi(self) -> float:
        return float(self.phi_params["phi"].data[0])

    @property
    def theta(self) -> float:
        return float(self.theta_params["theta"].data[0])

    def loss(self, batch, phi_stats: bool, theta_stats: bool):
        x = Tensor(np.asarray(batch.images, dtype=np.float64))
        y = Tensor(np.asarray(batch.labels, dtype=np.float64))
        w = mul(self.theta_params["theta"], self.phi_params["phi"])
        r = sub(mul(w, x), y)
        return mean(mul(r, r))


class FixedSampler:
    """Always returns the same one-sample batch, whatever domains are asked for."""

    def __init__(self, x: float = 1.0, y: float = 0.0) -> None:
        self.x, self.y = x, y
        self.calls: list[list[str]] = []

    def sample(self, names):
        self.calls.append(list(names))
        return DomainBatch(np.array([self.x]), np.array([self.y]), np.array(list(names)[:1]), {})


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
