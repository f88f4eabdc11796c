import numpy as np
import pytest
import torch

from exprflow.toyfaces import ExpressionParams, IdentityParams


@pytest.fixture(autouse=True)
def _fixed_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def ident():
    return IdentityParams(hue=0.3, aspect=1.0, eye_spacing=0.35, hair_height=0.15)


@pytest.fixture
def smile():
    return ExpressionParams(mouth_curve=0.8, eye_open=0.6, brow_angle=0.2)


def random_identity(rng):
    return IdentityParams(
        float(rng.uniform(0, 1)), float(rng.uniform(0.7, 1.3)),
        float(rng.uniform(0.25, 0.45)), float(rng.uniform(0, 0.3)),
    )


def random_expression(rng):
    return ExpressionParams(float(rng.uniform(-1, 1)), float(rng.uniform(0.2, 1)), float(rng.uniform(-1, 1)))


# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
