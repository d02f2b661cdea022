"""Vocabulary, caption cleaning/tokenization and the toy text encoder."""

import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import Module

SUMMARY = "<sum>"
PAD = "<pad>"

NOUNS = ("circle", "square", "triangle", "diamond")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
RELATIONS = ("above", "below", "left", "right", "and")


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids; SUMMARY is 0 and PAD is the last id."""

    nouns: tuple = NOUNS
    adjectives: tuple = tuple(COLORS)
    relations: tuple = RELATIONS
    tokens: tuple = field(init=False)

    def __post_init__(self):
        toks = (SUMMARY, *self.nouns, *self.adjectives, *self.relations, PAD)
        if len(set(toks)) != len(toks):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    def __len__(self):
        return len(self.tokens)

    @property
    def summary_id(self):
        return 0

    @property
    def pad_id(self):
        return len(self.tokens) - 1

    def id(self, token):
        try:
            return self._index[token]
        except KeyError:
            raise LookupError(f"token {token!r} not in vocabulary") from None

    def word(self, idx):
        if not 0 <= idx < len(self.tokens):
            raise LookupError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, words, n_y):
        """SUMMARY + word ids, padded with PAD to exactly ``n_y``."""
        ids = [self.summary_id] + [self.id(w) for w in words]
        if len(ids) > n_y:
            raise ContractError(f"caption of {len(ids)} tokens exceeds n_y={n_y}")
        return ids + [self.pad_id] * (n_y - len(ids))

    def decode(self, ids):
        return [self.word(i) for i in ids if i not in (self.summary_id, self.pad_id)]

    def tokenize(self, text, n_y):
        return self.encode(clean_text(text).lower().split(), n_y)

    def null_caption(self, n_y):
        """Caption used for the unconditional branch: SUMMARY then PADs."""
        return [self.summary_id] + [self.pad_id] * (n_y - 1)


DEFAULT_VOCAB = Vocabulary()


def load_word_list(name):
    """Word lists shipped with the package: ``"adjectives"`` or ``"verbs"``."""
    text = resources.files("pathdiff.resources").joinpath(f"{name}.txt").read_text()
    return [w.strip() for w in text.splitlines() if w.strip()]


_TAG = re.compile(r"<[^>]*>")
_EMAIL = re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
_URL = re.compile(r"(?:\b[a-zA-Z][a-zA-Z0-9+.-]*://|\bwww\.)\S*")


def clean_text(raw):
    """Strip HTML tags, e-mail addresses and URLs; collapse whitespace.

    Rules are reapplied until nothing changes, so the result is a fixpoint.
    """
    prev = None
    s = raw
    while s != prev:
        prev = s
        s = _TAG.sub(" ", s)
        s = _EMAIL.sub(" ", s)
        s = _URL.sub(" ", s)
        s = " ".join(s.split())
    return s


class TextEncoder(Module):
    """Learned token table plus learned position table."""

    def __init__(self, vocab_size, n_y, d_y, rng):
        self.vocab_size = vocab_size
        self.n_y = n_y
        self.token_table = T.Tensor(rng.uniform(-1.0, 1.0, size=(vocab_size, d_y)), requires_grad=True)
        self.position_table = T.Tensor(rng.uniform(-0.5, 0.5, size=(n_y, d_y)), requires_grad=True)
        self.pad_id = vocab_size - 1

    def __call__(self, caption):
        ids = np.asarray(caption, dtype=np.int64)
        if ids.shape != (self.n_y,):
            raise ContractError(f"caption must have exactly n_y={self.n_y} ids, got {ids.shape}")
        bad = (ids < 0) | (ids >= self.vocab_size)
        if bad.any():
            raise LookupError(f"token ids {ids[bad].tolist()} outside vocabulary of size {self.vocab_size}")
        return T.getitem(self.token_table, ids) + self.position_table

    def pad_mask(self, caption):
        return np.asarray(caption) == self.pad_id


def encode_text(encoder, caption):
    return encoder(caption)
