from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


def central_difference(f, param, h: float = 1e-5) -> np.ndarray:
    """d f() / d param by central differences, perturbing ``param.value`` in place."""
    out = np.zeros_like(param.value)
    for idx in np.ndindex(param.shape):
        old = param.value[idx]
        param.value[idx] = old + h
        up = f()
        param.value[idx] = old - h
        down = f()
        param.value[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
