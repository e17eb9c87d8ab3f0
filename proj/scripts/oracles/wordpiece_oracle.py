#!/usr/bin/env python3
"""Naive WordPiece trainer used to freeze expected merge sequences.

Recounts every pair from scratch each round and compares scores as exact
fractions, so it shares no code or data structures with the C++ trainer.

usage: wordpiece_oracle.py SENTENCES_FILE VOCAB_SIZE > merges.txt
"""

import sys
import unicodedata
from collections import Counter
from fractions import Fraction

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def pretokenize(text):
    words, cur = [], ""
    for ch in text:
        if ch.isspace():
            if cur:
                words.append(cur)
            cur = ""
        elif ch != "'" and unicodedata.category(ch).startswith("P"):
            if cur:
                words.append(cur)
            words.append(ch)
            cur = ""
        else:
            cur += ch
    if cur:
        words.append(cur)
    return words


def merged(left, right):
    return left + (right[2:] if right.startswith("##") else right)


def train(counts, vocab_size):
    alphabet = sorted({c for w in counts for c in w})
    vocab = SPECIALS + alphabet + ["##" + c for c in alphabet]
    known = set(vocab)
    segs = {w: [w[0]] + ["##" + c for c in w[1:]] for w in counts}
    merges = []
    while len(vocab) < vocab_size:
        piece_f, pair_f = Counter(), Counter()
        for w, f in counts.items():
            s = segs[w]
            for p in s:
                piece_f[p] += f
            for a, b in zip(s, s[1:]):
                pair_f[(a, b)] += f
        if not pair_f:
            break
        score = {ab: Fraction(f, piece_f[ab[0]] * piece_f[ab[1]]) for ab, f in pair_f.items()}
        top = max(score.values())
        # Ties: lexicographically smallest merged string, compared as UTF-8 bytes.
        best = min((ab for ab, v in score.items() if v == top), key=lambda ab: merged(*ab).encode("utf-8"))
        new = merged(*best)
        merges.append(new)
        if new not in known:
            known.add(new)
            vocab.append(new)
        for w, s in segs.items():
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == best:
                    out.append(new)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            segs[w] = out
    return merges


def main():
    counts = Counter()
    with open(sys.argv[1], encoding="utf-8") as f:
        for line in f:
            counts.update(pretokenize(line))
    for m in train(counts, int(sys.argv[2])):
        print(m)


if __name__ == "__main__":
    main()
