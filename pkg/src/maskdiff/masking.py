"""Frequency-informed masking and absorbing-state corruption.

Token weights come from corpus frequency ranks (rarer token, larger weight),
min-max normalised into ``[eps_w, 1 - eps_w]``. For each sequence the
softened weights ``s = w**p`` are rescaled so their mean over maskable
positions equals the target masking rate:

* ``mu > rate``:  ``probs = s * rate / mu``
* otherwise:      ``probs = 1 - (1 - s) * alpha / (1 - mu)``, ``alpha = 1 - rate``

Both branches keep every probability in [0, 1] and preserve weight order.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_WEIGHT_EPS = 1e-4


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class FrequencyTable:
    counts: dict[int, int]
    base_weight: dict[int, float]
    weight_eps: float = DEFAULT_WEIGHT_EPS

    def weight(self, token_id: int) -> float:
        # tokens never seen in the corpus count as the rarest
        return self.base_weight.get(token_id, 1.0 - self.weight_eps)

    def weight_array(self, vocab_size: int) -> np.ndarray:
        """Dense lookup table indexed by token id."""
        out = np.full(vocab_size, 1.0 - self.weight_eps)
        for tok, w in self.base_weight.items():
            if tok < vocab_size:
                out[tok] = w
        return out

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{self.counts[tok]}\n" for tok in sorted(self.counts)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, weight_eps: float = DEFAULT_WEIGHT_EPS) -> "FrequencyTable":
        counts = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MaskingError(f"{path}:{lineno}: expected 'token_id<TAB>count'")
            try:
                tok, count = int(parts[0]), int(parts[1])
            except ValueError:
                raise MaskingError(f"{path}:{lineno}: non-integer field") from None
            if count < 0:
                raise MaskingError(f"{path}:{lineno}: negative count")
            counts[tok] = count
        return table_from_counts(counts, weight_eps)


def table_from_counts(counts: dict[int, int], weight_eps: float = DEFAULT_WEIGHT_EPS) -> FrequencyTable:
    if len(counts) < 2:
        raise MaskingError("need at least two distinct token ids to rank frequencies")
    if not (0.0 < weight_eps < 0.5):
        raise MaskingError("weight_eps must lie in (0, 0.5)")
    # most frequent first; equal counts ordered by ascending id
    order = sorted(counts, key=lambda tok: (-counts[tok], tok))
    n = len(order)
    span = 1.0 - 2.0 * weight_eps
    weights = {tok: weight_eps + span * rank / (n - 1) for rank, tok in enumerate(order)}
    return FrequencyTable(counts=dict(counts), base_weight=weights, weight_eps=weight_eps)


def build_frequency_table(
    token_stream: Iterable[int],
    exclude: Iterable[int] = (),
    weight_eps: float = DEFAULT_WEIGHT_EPS,
) -> FrequencyTable:
    """Count tokens (skipping ``exclude``, e.g. special ids) and rank them."""
    skip = set(exclude)
    counts = Counter(tok for tok in token_stream if tok not in skip)
    if not counts:
        raise MaskingError("token stream is empty")
    return table_from_counts(dict(counts), weight_eps)


def curriculum_power(tau: float, p_max: float) -> float:
    """Linear ramp of the softening power from 0 to ``p_max``."""
    if not (0.0 <= tau <= 1.0):
        raise MaskingError(f"tau must lie in [0, 1], got {tau}")
    if not (0.0 <= p_max < 1.0):
        raise MaskingError(f"p_max must lie in [0, 1), got {p_max}")
    return tau * p_max


def conditional_scaling(weights: np.ndarray, p: float, target_rate: float) -> np.ndarray:
    """Map base weights to masking probabilities with mean ``target_rate``."""
    if not (0.0 < target_rate < 1.0):
        raise MaskingError(f"target_rate must lie in (0, 1), got {target_rate}")
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise MaskingError("no maskable positions")
    s = w**p
    mu = s.mean()
    if mu > target_rate:
        probs = s * (target_rate / mu)
    elif mu < 1.0:
        alpha = 1.0 - target_rate
        probs = 1.0 - (1.0 - s) * (alpha / (1.0 - mu))
    else:
        probs = np.full_like(s, target_rate)
    return np.clip(probs, 0.0, 1.0)


@dataclass
class MaskPlan:
    probs: np.ndarray
    maskable: np.ndarray
    target_rate: float
    power: float


@dataclass
class CorruptedSequence:
    tokens: np.ndarray
    mask_indicator: np.ndarray
    original: np.ndarray = field(repr=False)


def sequence_mask_probs(
    table: FrequencyTable | np.ndarray | None,
    tokens: Sequence[int],
    maskable: Sequence[bool],
    p: float,
    target_rate: float,
) -> MaskPlan:
    """Per-position masking probabilities for one sequence.

    ``table`` may be a :class:`FrequencyTable`, a dense weight array indexed by
    token id, or ``None`` for uniform masking.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = np.asarray(maskable, dtype=bool)
    if tokens.shape != maskable.shape:
        raise MaskingError("tokens and maskable must have the same length")
    if not maskable.any():
        raise MaskingError("sequence has no maskable positions")
    probs = np.zeros(tokens.shape, dtype=np.float64)
    if table is None:
        probs[maskable] = target_rate
        if not (0.0 < target_rate < 1.0):
            raise MaskingError(f"target_rate must lie in (0, 1), got {target_rate}")
    else:
        if isinstance(table, FrequencyTable):
            w = np.array([table.weight(int(tok)) for tok in tokens[maskable]])
        else:
            w = np.asarray(table)[tokens[maskable]]
        probs[maskable] = conditional_scaling(w, p, target_rate)
    return MaskPlan(probs=probs, maskable=maskable, target_rate=target_rate, power=p)


def apply_mask(
    plan: MaskPlan, original: Sequence[int], rng: np.random.Generator, mask_id: int
) -> CorruptedSequence:
    original = np.asarray(original, dtype=np.int64)
    if original.shape != plan.probs.shape:
        raise MaskingError("plan and sequence lengths differ")
    if np.any(original == mask_id):
        raise MaskingError(f"mask id {mask_id} appears in the uncorrupted sequence")
    hit = rng.random(original.shape) < plan.probs
    tokens = np.where(hit, mask_id, original)
    return CorruptedSequence(tokens=tokens, mask_indicator=hit, original=original)
