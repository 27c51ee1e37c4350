# backend/tests/conftest.py
"""Shared fixtures. The run registry points at a throwaway sqlite file."""

import os
import sys
import tempfile
from pathlib import Path

# repo root on sys.path so `ope_pipeline` and `backend` import without installing
ROOT = Path(__file__).resolve().parents[2]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

_TMP = Path(tempfile.mkdtemp(prefix="robust_ope_tests_"))
os.environ["DATABASE_URL"] = f"sqlite:///{_TMP / 'runs.db'}"
os.environ.setdefault("OPE_RESULTS_DIR", str(_TMP / "results"))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from ope_pipeline.mdp_model.environments import healthcare_management, machine_replacement  # noqa: E402
from ope_pipeline.mdp_model.mdp_core import FiniteMdp  # noqa: E402


@pytest.fixture
def mrp() -> FiniteMdp:
    return machine_replacement()


@pytest.fixture
def hmp() -> FiniteMdp:
    return healthcare_management()


def random_mdp(rng: np.random.Generator, n_states: int = 3, n_actions: int = 2, gamma: float = 0.9) -> FiniteMdp:
    P = rng.random((n_states, n_actions, n_states)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    R = rng.random((n_states, n_actions))
    d0 = rng.random(n_states) + 0.1
    return FiniteMdp(P, R, gamma, d0 / d0.sum(), name="random")


@pytest.fixture
def make_random_mdp():
    return random_mdp
