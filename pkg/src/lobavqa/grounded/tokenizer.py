"""Closed word-level vocabulary for template questions and grounded responses."""
from __future__ import annotations

import re
from typing import Iterable, Sequence

from ..corpus import (ABNORMAL_ANSWER, CLOSED_TEMPLATES, NORMAL_ANSWER, OPEN_TEMPLATE)
from ..geometry import ANATOMIES

PAD, BOS, EOS, SEG = "<PAD>", "<BOS>", "<EOS>", "<SEG>"
SPECIALS = (PAD, BOS, EOS, SEG)

LOCALIZATION = "The location of the {anatomy} is at <SEG>."

_TOKEN = re.compile(r"<[A-Z]+>|[A-Za-z]+|[^\sA-Za-z]")
_NO_SPACE_BEFORE = {".", ",", "?", "/"}
_NO_SPACE_AFTER = {"/"}


class VocabularyError(KeyError):
    pass


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text)


def build_vocab(disease_labels: Iterable[str]) -> list[str]:
    """Specials first, then every word the templates, anatomies and labels can produce."""
    templates = list(CLOSED_TEMPLATES) + [OPEN_TEMPLATE, NORMAL_ANSWER, ABNORMAL_ANSWER, LOCALIZATION]
    texts = [re.sub(r"\{\w+\}", " ", t) for t in templates]
    texts += list(ANATOMIES) + list(disease_labels) + ["Yes. No. , and"]
    words = {w for t in texts for w in split_words(t)} - set(SPECIALS)
    return list(SPECIALS) + sorted(words)


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks special token {s}")

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def seg_id(self) -> int:
        return self.index[SEG]

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in split_words(text):
            if w not in self.index:
                raise VocabularyError(f"out-of-vocabulary word {w!r}")
            ids.append(self.index[w])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = ""
        prev = None
        for i in ids:
            w = self.vocab[int(i)]
            if w in (PAD, BOS, EOS):
                continue
            if out and w not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
                out += " "
            out += w
            prev = w
        return out


def grounded_response(anatomy: str, answer: str) -> str:
    """Training target: localization sentence first, then the answer sentence."""
    sentence = answer if answer.endswith(".") else answer + "."
    return f"{LOCALIZATION.format(anatomy=anatomy)} {sentence}"
