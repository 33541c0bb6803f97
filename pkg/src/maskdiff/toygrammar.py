"""Tiny agreement grammar used for smoke training and minimal-pair checks.

Sentences look like ``the small dog chases the red ball .``; the subject
noun and verb agree in number. Ungrammatical twins break agreement, swap
adjective and noun, or move the verb.

    python -m maskdiff.toygrammar data/   # writes toy_corpus.txt, toy_pairs.tsv
"""

from __future__ import annotations

import random
import sys
from pathlib import Path

NOUNS = [("dog", "dogs"), ("cat", "cats"), ("bird", "birds"), ("child", "children"),
         ("teacher", "teachers"), ("farmer", "farmers"), ("girl", "girls"), ("boy", "boys")]
VERBS = [("chases", "chase"), ("likes", "like"), ("sees", "see"), ("finds", "find"),
         ("helps", "help"), ("follows", "follow")]
ADJECTIVES = ["small", "happy", "old", "red", "quiet", "big"]
OBJECTS = ["the ball", "a tree", "the house", "a river", "the garden", "a box"]
DETS = ["the", "a"]


def _sentence(rng: random.Random) -> dict:
    noun = rng.randrange(len(NOUNS))
    plural = rng.random() < 0.5
    return {
        "det": "the" if plural else rng.choice(DETS),
        "adj": rng.choice(ADJECTIVES),
        "noun": noun,
        "plural": plural,
        "verb": rng.randrange(len(VERBS)),
        "obj": rng.choice(OBJECTS),
    }


def render(s: dict, plural_verb: bool | None = None, swap_adj: bool = False, verb_first: bool = False) -> str:
    noun = NOUNS[s["noun"]][int(s["plural"])]
    pv = s["plural"] if plural_verb is None else plural_verb
    verb = VERBS[s["verb"]][int(pv)]
    np_ = f"{noun} {s['adj']}" if swap_adj else f"{s['adj']} {noun}"
    if verb_first:
        return f"{s['det']} {verb} {np_} {s['obj']} ."
    return f"{s['det']} {np_} {verb} {s['obj']} ."


def _distance(a: list[str], b: list[str]) -> int:
    return sum(x != y for x, y in zip(a, b)) + abs(len(a) - len(b))


def generate(
    n_sentences: int = 64, n_pairs: int = 200, seed: int = 0, min_distance: int = 3
) -> tuple[list[str], list[tuple[str, str]]]:
    """Training sentences and held-in (good, bad) pairs built from them.

    Any two sentences differ in at least ``min_distance`` words, so hiding
    fewer than that many words never makes a memorised sentence ambiguous.
    """
    rng = random.Random(seed)
    sentences, kept = [], []
    for _ in range(200_000):
        if len(sentences) == n_sentences:
            break
        s = _sentence(rng)
        words = render(s).split()
        if all(_distance(words, other) >= min_distance for other in kept):
            kept.append(words)
            sentences.append(s)
    else:
        raise ValueError(f"could not draw {n_sentences} sentences {min_distance} words apart")
    corruptions = [
        lambda s: render(s, plural_verb=not s["plural"]),
        lambda s: render(s, swap_adj=True),
        lambda s: render(s, verb_first=True),
        lambda s: render(s, plural_verb=not s["plural"], swap_adj=True),
    ]
    pairs = []
    for k in range(n_pairs):
        s = sentences[k % n_sentences]
        pairs.append((render(s), corruptions[(k // n_sentences) % len(corruptions)](s)))
    return [render(s) for s in sentences], pairs


def write(out_dir: str | Path, n_sentences: int = 64, n_pairs: int = 200, seed: int = 0) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus, pairs = generate(n_sentences, n_pairs, seed)
    (out / "toy_corpus.txt").write_text("\n".join(corpus) + "\n", encoding="utf-8")
    lines = ["# good<TAB>bad, generated by maskdiff.toygrammar"]
    lines += [f"{g}\t{b}" for g, b in pairs]
    (out / "toy_pairs.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    write(sys.argv[1] if len(sys.argv) > 1 else ".")
