"""Small text fixtures shared by the index, evaluation and acceptance tests."""
import math
import string
from collections import Counter

from regent.text import CONTINUATION, SPECIAL_TOKENS, Vocabulary, analyze, query_stems

LETTERS = string.ascii_lowercase

# words that exist only as pieces force multi-subword spans ("playing",
# "players", "cats", "rainforest", ...)
PIECES = ["play", "##ing", "##ers", "##ed", "cat", "rain", "##forest", "dog", "the"]

TEN_DOCS = {
    "d01": "The cat is playing in the rainforest",
    "d02": "Dogs and cats played together",
    "d03": "A rainforest holds many players",
    "d04": "the the the",
    "d05": "Cats cats cats everywhere, playing",
    "d06": "Quiet dog sleeping",
    "d07": "Rain fell on the forest and the rainforest",
    "d08": "Players play; the cat watched",
    "d09": "No match here at all",
    "d10": "playing playing playing cat dog rainforest",
}

QUERIES = {
    "q1": "cat playing",
    "q2": "rainforest players",
    "q3": "the dogs",
    "q4": "playing cats in the rain",
}


def piece_vocab() -> Vocabulary:
    return Vocabulary(list(SPECIAL_TOKENS) + list(LETTERS) + [CONTINUATION + c for c in LETTERS] + PIECES)


def brute_bm25(docs, query, k1=1.2, b=0.75):
    """Closed-form Okapi BM25 straight from stem counts."""
    bags = {d: Counter(t.stem for t in analyze(text) if t.stem) for d, text in docs.items()}
    N = len(bags)
    avgdl = sum(sum(c.values()) for c in bags.values()) / N
    out = {}
    for d, bag in bags.items():
        dl = sum(bag.values())
        s = 0.0
        for stem in set(query_stems(query)):
            tf = bag[stem]
            if not tf:
                continue
            df = sum(1 for c in bags.values() if c[stem])
            idf = math.log(1 + (N - df + 0.5) / (df + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
        if s:
            out[d] = s
    return out
