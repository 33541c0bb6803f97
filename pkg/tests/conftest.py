import sys

import numpy as np
import pytest
import torch

from maskdiff.config import RunConfig
from maskdiff.model import ModelConfig, TimeConditionedEncoder
from maskdiff.toygrammar import generate
from maskdiff.tokenizer import train_bpe


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    corpus, pairs = generate(64, 200, seed=0)
    (root / "corpus.txt").write_text("\n".join(corpus) + "\n")
    (root / "pairs.tsv").write_text("\n".join(f"{g}\t{b}" for g, b in pairs) + "\n")
    return root


@pytest.fixture(scope="session")
def toy_vocab(toy_data):
    return train_bpe((toy_data / "corpus.txt").read_text().splitlines(), 512)


def tiny_config(tmp_path, toy_data, **overrides) -> RunConfig:
    """A model small enough that a few dozen steps take about a second."""
    params = dict(
        seed=7, corpus=str(toy_data / "corpus.txt"), out_dir=str(tmp_path / "run"),
        layers=1, hidden_dim=32, heads=2, ffn_dim=64, timestep_dim=16,
        batch_size=8, seq_len=16, max_steps=30, lr=1e-3,
    )
    params.update(overrides)
    return RunConfig(**params)


@pytest.fixture
def random_model():
    torch.manual_seed(0)
    cfg = ModelConfig(layers=2, hidden_dim=32, heads=4, ffn_dim=64, vocab_size=50,
                      max_seq_len=24, timestep_dim=16)
    model = TimeConditionedEncoder(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.2)
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
