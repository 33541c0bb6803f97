"""Pseudo-log-likelihood scoring and minimal-pair accuracy.

A sentence's PLL is ``sum_l log p(x_l | x with only position l masked)``.
The model is any callable ``model(tokens, t) -> logits`` with tokens of shape
``(B, L)`` and ``t`` of shape ``(B,)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError
from .model import UNCONDITIONED_T, row_invariant_matmul
from .schedules import Schedule
from .tokenizer import UNK_ID, Vocab

CONDITIONING_MODES = ("none", "single-token")


@dataclass
class SentenceScore:
    pll: float
    length: int
    has_unk: bool


@dataclass
class MinimalPair:
    good: str
    bad: str
    line: int = 0


def eval_time(conditioning: str, length: int, schedule: Schedule | None, tau: float = 1.0) -> float:
    """Diffusion time used when scoring a sentence of ``length`` tokens."""
    if conditioning == "none":
        return UNCONDITIONED_T
    if conditioning == "single-token":
        if schedule is None:
            raise ValueError("single-token conditioning needs the training schedule")
        rate = min(max(1.0 / length, schedule.clamp_eps), 1.0 - schedule.clamp_eps)
        return float(schedule.time_for_rate(rate, tau))
    raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}, got {conditioning!r}")


@torch.no_grad()
def pll_of_ids(model, ids, mask_id: int, t: float, batched: bool = True) -> float:
    """PLL of a token sequence.

    ``batched=False`` is the reference: one forward pass per position. The
    batched path scores all positions in one pass and agrees bit for bit.
    """
    with row_invariant_matmul():
        terms = _pll_terms(model, ids, mask_id, t, batched)
    # left-to-right summation so both paths round identically
    total = 0.0
    for term in terms:
        total += term
    return total


def _pll_terms(model, ids, mask_id, t, batched):
    ids = torch.as_tensor(ids, dtype=torch.long)
    L = ids.shape[0]
    if L == 0:
        raise ValueError("cannot score an empty sentence")
    positions = torch.arange(L)
    if batched:
        # row l is the sentence with only position l masked
        probe = ids.repeat(L, 1)
        probe[positions, positions] = mask_id
        logits = model(probe, torch.full((L,), t))
        logp = F.log_softmax(logits[positions, positions].double(), dim=-1)
        terms = logp[positions, ids].tolist()
    else:
        terms = []
        for pos in range(L):
            probe = ids.clone()[None]
            probe[0, pos] = mask_id
            logits = model(probe, torch.full((1,), t))
            logp = F.log_softmax(logits[0, pos].double(), dim=-1)
            terms.append(float(logp[ids[pos]]))
    return terms


def score_sentence(
    sentence: str,
    model,
    vocab: Vocab,
    conditioning: str = "none",
    schedule: Schedule | None = None,
    tau: float = 1.0,
    max_len: int | None = None,
    batched: bool = True,
) -> SentenceScore:
    ids = vocab.encode(sentence)
    if not ids:
        raise DataError(f"sentence {sentence!r} tokenizes to nothing")
    if max_len is None:
        max_len = getattr(getattr(model, "cfg", None), "max_seq_len", None)
    if max_len is not None and len(ids) > max_len:
        raise DataError(f"sentence of {len(ids)} tokens exceeds max_seq_len {max_len}")
    t = eval_time(conditioning, len(ids), schedule, tau)
    pll = pll_of_ids(model, ids, vocab.mask_id, t, batched=batched)
    return SentenceScore(pll=pll, length=len(ids), has_unk=UNK_ID in ids)


def pseudo_log_likelihood(sentence: str, model, vocab: Vocab, conditioning: str = "none", **kwargs) -> float:
    return score_sentence(sentence, model, vocab, conditioning, **kwargs).pll


def read_pairs(path: str | Path) -> list[MinimalPair]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read pairs file {path}: {exc}") from None
    pairs = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}:{lineno}: expected 'good<TAB>bad' with both sides nonempty")
        pairs.append(MinimalPair(parts[0], parts[1], lineno))
    if not pairs:
        raise DataError(f"{path}: no pairs found")
    return pairs


def pair_credit(pll_good: float, pll_bad: float) -> float:
    if pll_good > pll_bad:
        return 1.0
    if pll_good == pll_bad:
        return 0.5
    return 0.0


def minimal_pair_accuracy(
    pairs_path: str | Path,
    model,
    vocab: Vocab,
    conditioning: str = "none",
    schedule: Schedule | None = None,
    tau: float = 1.0,
    report_path: str | Path | None = None,
) -> float:
    pairs = read_pairs(pairs_path)
    cache: dict[str, SentenceScore] = {}

    def score(text):
        if text not in cache:
            cache[text] = score_sentence(text, model, vocab, conditioning, schedule, tau)
        return cache[text]

    credits = []
    rows = []
    for pair in pairs:
        good, bad = score(pair.good), score(pair.bad)
        credit = pair_credit(good.pll, bad.pll)
        credits.append(credit)
        rows.append({
            "line": pair.line, "good": pair.good, "bad": pair.bad,
            "pll_good": repr(good.pll), "pll_bad": repr(bad.pll),
            "margin": repr(good.pll - bad.pll), "credit": credit,
            "unk": int(good.has_unk or bad.has_unk),
        })
    if report_path is not None:
        with open(report_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return float(np.mean(credits))
