"""Character-level BPE with whitespace pre-tokenisation.

Text is split into units of the form ``" ?\\S+"`` plus any leftover single
whitespace characters. A leading space is rewritten to the boundary marker
``▁`` so it can take part in merges; decoding turns it back into a
space, which makes ``decode(encode(s)) == s`` exact for text built from
characters seen during training. The marker itself is reserved and should
not appear in input text.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
BOUNDARY = "▁"
VOCAB_HEADER = "#maskdiff-bpe v1"

_PRETOKEN = re.compile(r" ?\S+|\s")


class TokenizerError(ValueError):
    pass


def pretokenize(text: str) -> list[str]:
    return [unit.replace(" ", BOUNDARY) for unit in _PRETOKEN.findall(text)]


@dataclass
class Vocab:
    alphabet: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(init=False)
    id_to_token: list[str] = field(init=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _cache: dict[str, list[int]] = field(init=False, repr=False, default_factory=dict)

    pad_id = PAD_ID
    unk_id = UNK_ID
    cls_id = CLS_ID
    sep_id = SEP_ID
    mask_id = MASK_ID

    def __post_init__(self):
        self.id_to_token = list(SPECIAL_TOKENS) + list(self.alphabet)
        self.id_to_token += [a + b for a, b in self.merges]
        self.token_to_id = {}
        for i, tok in enumerate(self.id_to_token):
            # a merge can reproduce an existing string; keep the first id
            self.token_to_id.setdefault(tok, i)
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))

    def _encode_unit(self, unit: str) -> list[int]:
        cached = self._cache.get(unit)
        if cached is not None:
            return cached
        # unknown characters are kept as None so they never merge
        symbols: list[str | None] = [c if c in self.token_to_id else None for c in unit]
        while len(symbols) > 1:
            best, best_rank = -1, None
            for i in range(len(symbols) - 1):
                a, b = symbols[i], symbols[i + 1]
                if a is None or b is None:
                    continue
                rank = self._ranks.get((a, b))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = i, rank
            if best_rank is None:
                break
            pair = (symbols[best], symbols[best + 1])
            merged: list[str | None] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    merged.append(pair[0] + pair[1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        ids = [UNK_ID if s is None else self.token_to_id[s] for s in symbols]
        self._cache[unit] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for unit in pretokenize(text):
            ids.extend(self._encode_unit(unit))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode`. UNK renders as U+FFFD, other specials vanish."""
        parts = []
        n = len(self.id_to_token)
        for i in ids:
            i = int(i)
            if not (0 <= i < n):
                raise TokenizerError(f"token id {i} out of range for vocab of size {n}")
            if i == UNK_ID:
                parts.append("�")
            elif i >= len(SPECIAL_TOKENS):
                parts.append(self.id_to_token[i])
        return "".join(parts).replace(BOUNDARY, " ")

    # -- persistence ---------------------------------------------------------
    def to_text(self) -> str:
        lines = [VOCAB_HEADER, "[specials]"]
        lines += [f"{i}\t{tok}" for i, tok in enumerate(SPECIAL_TOKENS)]
        lines.append("[alphabet]")
        lines += [json.dumps(c) for c in self.alphabet]
        lines.append("[merges]")
        lines += [json.dumps([a, b]) for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        lines = text.splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise TokenizerError("not a vocabulary file (missing header)")
        section = None
        alphabet: list[str] = []
        merges: list[tuple[str, str]] = []
        specials: list[str] = []
        for lineno, line in enumerate(lines[1:], 2):
            if line in ("[specials]", "[alphabet]", "[merges]"):
                section = line
                continue
            try:
                if section == "[specials]":
                    specials.append(line.split("\t", 1)[1])
                elif section == "[alphabet]":
                    alphabet.append(json.loads(line))
                elif section == "[merges]":
                    a, b = json.loads(line)
                    merges.append((a, b))
                else:
                    raise TokenizerError("content outside a section")
            except (ValueError, IndexError) as exc:
                raise TokenizerError(f"vocab line {lineno}: {exc}") from None
        if tuple(specials) != SPECIAL_TOKENS:
            raise TokenizerError(f"unexpected special tokens {specials}")
        return cls(alphabet=alphabet, merges=merges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _merge_word(word: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(word):
        if i < len(word) - 1 and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[str], vocab_size: int) -> Vocab:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair. Training stops at
    ``vocab_size`` or when no pair occurs at least twice.
    """
    word_freq: Counter[str] = Counter()
    for text in corpus:
        word_freq.update(pretokenize(text))
    if not word_freq:
        raise TokenizerError("empty corpus")
    alphabet = sorted({c for w in word_freq for c in w})
    base = len(SPECIAL_TOKENS) + len(alphabet)
    if vocab_size < base:
        raise TokenizerError(
            f"vocab_size {vocab_size} is below alphabet + specials ({base})"
        )

    words = {tuple(w): f for w, f in word_freq.items()}
    merges: list[tuple[str, str]] = []
    while base + len(merges) < vocab_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for word, freq in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best = min(pairs, key=lambda pr: (-pairs[pr], pr))
        if pairs[best] < 2:
            break
        merges.append(best)
        merged: dict[tuple[str, ...], int] = {}
        for word, freq in words.items():
            new = _merge_word(word, best) if best[0] in word else word
            merged[new] = merged.get(new, 0) + freq
        words = merged
    return Vocab(alphabet=alphabet, merges=merges)
