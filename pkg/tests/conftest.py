import numpy as np
import pytest
import torch

from mtl_vision.network import ModelConfig
from mtl_vision.synthetic import make_dataset


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(width=0.125, depth=0.33, num_protos=4, vocab_size=20, dec_layers=1, dec_heads=2,
                dec_dim=16, dec_ffn=32, max_caption_len=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def scenes():
    return make_dataset(16, seed=3, size=64, max_objects=3, captions_per_image=2)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
