import os

# Bit-reproducibility checks assume single-threaded BLAS; must precede numpy import.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from affectrl.lm import GPT, LmConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return GPT(LmConfig(vocab_size=11, d_model=16, n_layers=2, n_heads=2, max_seq_len=16), seed=3)


ACCEPTANCE_TITLES = {
    1: "chain-rule sequence log-probability",
    2: "gradient integrity",
    3: "circumplex reward properties",
    4: "KL-shaped reward identities",
    5: "reward-model learnability",
    6: "end-to-end PPO uplift",
    7: "KL-control behaviour",
    8: "oracle consistency and KL estimator",
    9: "byte-identical reruns",
}


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} NOT RUN: {title}")
