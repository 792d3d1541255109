import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mudd.config import ModelConfig  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CORPUS = ROOT / "data" / "shakespeare.txt"


def perturb(model, scale: float = 0.05, seed: int = 123, only_da: bool = True):
    """Add Gaussian noise to parameters so the DA paths carry signal."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters().items():
        if only_da and not name.startswith("da."):
            continue
        p.data = p.data + (scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def tiny_config(**kw) -> ModelConfig:
    base = dict(L=2, D=16, H=2, V=32, T_max=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    status: dict[str, bool] = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            crit = nodeid.split("test_criterion_")[1][:2]
            status[crit] = status.get(crit, True) and key == "passed"
    if not status:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(status):
        terminalreporter.write_line(f"criterion {int(crit):2d}: {'PASS' if status[crit] else 'FAIL'}")
