import csv
import math

import pytest
import torch

from maskdiff.errors import DataError
from maskdiff.eval import (
    eval_time,
    minimal_pair_accuracy,
    pair_credit,
    pll_of_ids,
    pseudo_log_likelihood,
    read_pairs,
    score_sentence,
)
from maskdiff.model import UNCONDITIONED_T, ModelConfig, TimeConditionedEncoder
from maskdiff.schedules import Cosine, Linear


class UniformModel:
    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def __call__(self, tokens, t):
        return torch.zeros(*tokens.shape, self.vocab_size)


@pytest.fixture
def toy_model(toy_vocab):
    torch.manual_seed(3)
    cfg = ModelConfig(layers=2, hidden_dim=32, heads=4, ffn_dim=64, vocab_size=len(toy_vocab),
                      max_seq_len=32, timestep_dim=16)
    model = TimeConditionedEncoder(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.2)
    return model.eval()


def test_single_token_pll(random_model):
    ids = [7]
    pll = pll_of_ids(random_model, ids, 4, 0.3)
    with torch.no_grad():
        logits = random_model(torch.tensor([[4]]), torch.tensor([0.3]))
    assert pll == torch.log_softmax(logits[0, 0].double(), -1)[7].item()


def test_batched_matches_reference_bit_for_bit(random_model):
    g = torch.Generator().manual_seed(0)
    for L in (1, 2, 5, 13, 24):
        ids = torch.randint(5, 50, (L,), generator=g).tolist()
        for t in (0.0, 0.4):
            assert pll_of_ids(random_model, ids, 4, t) == pll_of_ids(random_model, ids, 4, t, batched=False)


def test_pll_is_deterministic(random_model):
    ids = [5, 9, 11, 30, 2]
    assert pll_of_ids(random_model, ids, 4, 0.2) == pll_of_ids(random_model, ids, 4, 0.2)


def test_uniform_model_pll(toy_vocab):
    text = "the old boys find the house ."
    L = len(toy_vocab.encode(text))
    pll = pseudo_log_likelihood(text, UniformModel(len(toy_vocab)), toy_vocab)
    assert pll == pytest.approx(-L * math.log(len(toy_vocab)), rel=1e-12)


def test_eval_time():
    assert eval_time("none", 7, Cosine()) == UNCONDITIONED_T
    t = eval_time("single-token", 8, Linear())
    assert t == pytest.approx(1 / 8)
    t = eval_time("single-token", 8, Cosine())
    assert Cosine().masking_rate(t) == pytest.approx(1 / 8, abs=1e-9)
    with pytest.raises(ValueError):
        eval_time("sometimes", 8, Cosine())


def test_conditioning_only_changes_t(toy_model, toy_vocab):
    with torch.no_grad():
        toy_model.time_mlp[2].weight.zero_()
    text = "a small girl sees the garden ."
    a = pseudo_log_likelihood(text, toy_model, toy_vocab, "none", schedule=Cosine())
    b = pseudo_log_likelihood(text, toy_model, toy_vocab, "single-token", schedule=Cosine())
    assert a == b


def test_length_overflow(toy_model, toy_vocab):
    with pytest.raises(DataError):
        score_sentence("the cat " * 40, toy_model, toy_vocab)


def test_unknown_tokens_are_flagged(toy_model, toy_vocab):
    assert score_sentence("the zebra€ .", toy_model, toy_vocab).has_unk
    assert not score_sentence("the cat .", toy_model, toy_vocab).has_unk


def test_pair_credit():
    assert pair_credit(-1.0, -2.0) == 1.0
    assert pair_credit(-2.0, -1.0) == 0.0
    assert pair_credit(-1.5, -1.5) == 0.5


def test_identical_pairs_score_half(tmp_path, toy_model, toy_vocab):
    path = tmp_path / "p.tsv"
    path.write_text("the cat .\tthe cat .\n")
    assert minimal_pair_accuracy(path, toy_model, toy_vocab) == 0.5


def test_uniform_model_ties(tmp_path, toy_data, toy_vocab):
    pairs = read_pairs(toy_data / "pairs.tsv")
    same = [p for p in pairs if len(toy_vocab.encode(p.good)) == len(toy_vocab.encode(p.bad))]
    path = tmp_path / "p.tsv"
    path.write_text("".join(f"{p.good}\t{p.bad}\n" for p in same))
    assert minimal_pair_accuracy(path, UniformModel(len(toy_vocab)), toy_vocab) == 0.5


def test_order_invariance_and_report(tmp_path, toy_data, toy_model, toy_vocab):
    lines = (toy_data / "pairs.tsv").read_text().splitlines()[:30]
    fwd, rev = tmp_path / "f.tsv", tmp_path / "r.tsv"
    fwd.write_text("\n".join(lines) + "\n")
    rev.write_text("\n".join(reversed(lines)) + "\n")
    report = tmp_path / "report.csv"
    a = minimal_pair_accuracy(fwd, toy_model, toy_vocab, report_path=report)
    b = minimal_pair_accuracy(rev, toy_model, toy_vocab)
    assert a == b and 0 <= a <= 1
    with open(report) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    assert list(rows[0]) == ["line", "good", "bad", "pll_good", "pll_bad", "margin", "credit", "unk"]
    r = rows[0]
    assert float(r["margin"]) == float(r["pll_good"]) - float(r["pll_bad"])


def test_pairs_file_parsing(tmp_path):
    path = tmp_path / "p.tsv"
    path.write_text("# header comment\n\ngood one\tbad one\n")
    (pair,) = read_pairs(path)
    assert (pair.good, pair.bad, pair.line) == ("good one", "bad one", 3)
    path.write_text("a\tb\nno tab here\n")
    with pytest.raises(DataError, match=":2:"):
        read_pairs(path)
    path.write_text("# only comments\n")
    with pytest.raises(DataError):
        read_pairs(path)
