import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptmem.config import TrainConfig  # noqa: E402
from promptmem.training import generate_data  # noqa: E402

TINY = {
    "data.canvas": 32, "data.n_source": 8, "data.n_target": 8, "data.n_val": 4,
    "model.dim": 16, "model.ffn": 32, "model.heads": 2, "model.queries": 6,
    "model.enc_layers": 1, "model.dec_layers": 1,
    "pdm.input.N": 4, "pdm.token.N": 4, "pdm.query.N": 4, "pdm.M": 2, "pdm.L": 2, "pdm.border": 2,
    "burn_in.epochs": 2, "burn_in.decay_epoch": 1, "burn_in.warmup_steps": 0,
    "adapt.epochs": 2, "adapt.decay_epoch": 1, "adapt.threshold": 0.2, "seeds": "0",
}


def tiny_config(root, out, **extra) -> TrainConfig:
    return TrainConfig().update({**TINY, "data.root": str(root), "out": str(out), **extra})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_data(tiny_config(root, root / "unused"))
    return root


# acceptance lines, printed once at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
