"""Text-to-attribute classification via deterministic lexical embeddings.

Phrases are tokenized, stemmed by a 10-rule suffix stemmer, and embedded as
the L2-normalized mean of per-token hash vectors (sha256-seeded, so identical
on every platform and run). A request phrase is assigned the attribute class
of the predefined lexicon phrase with the highest cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
import re
from importlib import resources

import numpy as np

EMBED_DIM = 64

STOPWORDS = frozenset(
    "a an the and or with of in on at for to is are was were be this that it its "
    "has have had my your their very some wearing".split()
)
assert len(STOPWORDS) == 30

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def stem(token):
    """10-rule suffix stemmer: plural, adverb, participle, superlative, final-e."""
    t = token
    if len(t) > 4 and t.endswith("ies"):
        t = t[:-3] + "y"
    elif len(t) > 4 and t.endswith("sses"):
        t = t[:-2]
    elif len(t) > 3 and t.endswith("s") and not t.endswith(("ss", "us", "is")):
        t = t[:-1]
    if len(t) > 5 and t.endswith("ness"):
        t = t[:-4]
    if len(t) > 4 and t.endswith("ly"):
        t = t[:-2]
    stripped = False
    if len(t) > 5 and t.endswith("ing"):
        t, stripped = t[:-3], True
    elif len(t) > 4 and t.endswith("ed"):
        t, stripped = t[:-2], True
    elif len(t) > 4 and t.endswith("est"):
        t, stripped = t[:-3], True
    if stripped and len(t) > 2 and t[-1] == t[-2] and t[-1] not in "aeiou":
        t = t[:-1]
    if len(t) > 3 and t.endswith("e"):
        t = t[:-1]
    return t


def tokenize(phrase):
    tokens = _TOKEN_RE.findall(phrase.lower())
    return [stem(t) for t in tokens if t not in STOPWORDS]


def _token_vector(token):
    digest = hashlib.sha256(b"paperdoll-token:" + token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(EMBED_DIM)


def embed_text(phrase):
    """Unit-norm embedding of a phrase; raises on stopword-only input."""
    tokens = tokenize(phrase)
    if not tokens:
        raise ValueError("no content tokens")
    vec = np.mean([_token_vector(t) for t in tokens], axis=0)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("no content tokens")
    return vec / norm


class Lexicon:
    """Predefined phrases per attribute class, with cached embeddings."""

    def __init__(self, table):
        self.table = {
            attr: {int(cls): list(phrases) for cls, phrases in classes.items()}
            for attr, classes in table.items()
        }
        for attr, classes in self.table.items():
            for cls, phrases in classes.items():
                if len(phrases) < 2:
                    raise ValueError(f"{attr} class {cls} needs >= 2 phrases")
        self._cache = {
            attr: [
                (cls, phrase, embed_text(phrase))
                for cls in sorted(classes)
                for phrase in classes[cls]
            ]
            for attr, classes in self.table.items()
        }

    @property
    def attributes(self):
        return sorted(self.table)

    @classmethod
    def from_file(cls, path):
        return cls(json.loads(open(path, encoding="utf-8").read()))

    @classmethod
    def default(cls):
        text = resources.files("paperdoll.data").joinpath("lexicon.json").read_text()
        return cls(json.loads(text))


def classify_attribute(phrase, attribute, lexicon, min_similarity=None):
    """Return (class id, cosine similarity) of the best-matching lexicon phrase.

    Ties resolve to the lower class id. With `min_similarity` set, a best score
    below the threshold raises instead of classifying.
    """
    if attribute not in lexicon.table:
        raise KeyError(f"unknown attribute: {attribute}")
    vec = embed_text(phrase)
    best_cls, best_score = None, -np.inf
    for cls, _, pvec in lexicon._cache[attribute]:
        score = float(vec @ pvec)
        if score > best_score or (score == best_score and cls < best_cls):
            best_cls, best_score = cls, score
    if min_similarity is not None and best_score < min_similarity:
        raise ValueError(
            f"no lexicon phrase for '{attribute}' within similarity {min_similarity}"
        )
    return best_cls, best_score


def shape_attrs_from_text(phrase, lexicon):
    """Classify the three garment-shape attributes from one phrase."""
    return {
        "sleeve_length": classify_attribute(phrase, "sleeve_length", lexicon)[0],
        "lower_length": classify_attribute(phrase, "lower_length", lexicon)[0],
        "neckline": classify_attribute(phrase, "neckline", lexicon)[0],
    }


def texture_attrs_from_text(phrase, lexicon):
    """Classify upper/lower textures; comma-separated clauses bind in order.

    One clause sets both garments; with two, the first binds the upper garment
    and the second the lower.
    """
    clauses = [c for c in (s.strip() for s in phrase.split(",")) if c]
    if not clauses:
        raise ValueError("no content tokens")
    upper = classify_attribute(clauses[0], "texture", lexicon)[0]
    lower = classify_attribute(clauses[-1], "texture", lexicon)[0] if len(clauses) > 1 else upper
    return {"upper_texture": upper, "lower_texture": lower}
