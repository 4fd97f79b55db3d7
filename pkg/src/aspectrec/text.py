"""Query-string normalization, tokenization, stemming and edit distance."""

import re
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"[^\W_]+(?:'[^\W_]+)?", re.UNICODE)

# Fixed list so that similarity values do not drift with library versions.
STOP_WORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can did do does doing down
    during each few for from further had has have having he her here hers
    herself him himself his how i if in into is it its itself just me more
    most my myself no nor not now of off on once only or other our ours
    ourselves out over own same she should so some such than that the their
    theirs them themselves then there these they this those through to too
    under until up very was we were what when where which while who whom why
    will with you your yours yourself yourselves
    """.split()
)

_STEMMER = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


def normalize_query(text):
    """Lowercase and collapse whitespace."""
    return _WS.sub(" ", text.strip().lower())


def tokenize(text):
    return _TOKEN.findall(text.lower())


@lru_cache(maxsize=65536)
def stem(token):
    return _STEMMER.stem(token)


def content_terms(text):
    """Stemmed tokens with stop words removed."""
    return [stem(t) for t in tokenize(text) if t not in STOP_WORDS]


def ascii_ratio(text):
    """Share of characters that are ASCII letters, digits or spaces."""
    if not text:
        return 0.0
    ok = sum(1 for ch in text if ch.isascii() and (ch.isalnum() or ch == " "))
    return ok / len(text)


def levenshtein(a, b):
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def contains_phrase(query, phrase):
    """True when ``phrase`` occurs in ``query`` on whole-token boundaries."""
    return f" {phrase} " in f" {query} "


def strip_phrase(query, phrase):
    """Remove every whole-token occurrence of ``phrase`` from ``query``."""
    out = f" {query} ".replace(f" {phrase} ", " ")
    return normalize_query(out)
