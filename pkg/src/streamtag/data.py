"""Dataset ingestion, tagging-scheme conversion and synthetic task generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, ParseError
from .nn import atomic_write_text


@dataclass(frozen=True)
class TaggedSentence:
    """Token sequence with gold labels and optional per-token 0/1 indicators."""

    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    indicators: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) < 1 or len(self.tokens) != len(self.labels):
            raise InputError("tokens and labels must have equal length >= 1")
        if self.indicators is not None and len(self.indicators) != len(self.tokens):
            raise InputError("indicators must match token count")

    def __len__(self) -> int:
        return len(self.tokens)


UNK_TOKEN = "<unk>"
UNK_ID = 0


class Vocabulary:
    """Dense token and label id tables; token id 0 is reserved for unknowns."""

    def __init__(self, tokens: Sequence[str], labels: Sequence[str]):
        if not tokens or tokens[0] != UNK_TOKEN:
            tokens = [UNK_TOKEN] + [t for t in tokens if t != UNK_TOKEN]
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.id_to_label = list(labels)
        self.label_to_id = {l: i for i, l in enumerate(self.id_to_label)}

    @property
    def n_tokens(self) -> int:
        return len(self.id_to_token)

    @property
    def n_labels(self) -> int:
        return len(self.id_to_label)

    def encode_tokens(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.token_to_id.get(t, UNK_ID) for t in tokens],
                        dtype=np.int64)

    def encode_labels(self, labels: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self.label_to_id[l] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"label {exc.args[0]!r} not in label table") from exc

    def decode_labels(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_label[int(i)] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": self.id_to_token, "labels": self.id_to_label}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["labels"])


def build_vocab(sentences: Sequence[TaggedSentence]) -> Vocabulary:
    """Token/label tables from a training split; unseen tokens map to UNK."""
    tokens: dict[str, None] = {}
    labels: dict[str, None] = {}
    for s in sentences:
        for t in s.tokens:
            tokens.setdefault(t, None)
        for l in s.labels:
            labels.setdefault(l, None)
    return Vocabulary([UNK_TOKEN] + list(tokens), list(labels))


# -- CoNLL column files --------------------------------------------------------

def read_conll(
    path: str,
    token_col: int = 0,
    tag_col: int = 1,
    indicator_col: int | None = None,
) -> list[TaggedSentence]:
    """Whitespace-separated column file; blank lines end sentences.

    Lines starting with ``-DOCSTART-`` are skipped. A non-blank line missing
    one of the requested columns is a parse error reporting the line number.
    """
    sentences: list[TaggedSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    flags: list[int] = []

    def flush():
        if tokens:
            ind = tuple(flags) if indicator_col is not None else None
            sentences.append(TaggedSentence(tuple(tokens), tuple(tags), ind))
            tokens.clear()
            tags.clear()
            flags.clear()

    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("-DOCSTART-"):
                continue
            parts = line.split()
            needed = max(token_col, tag_col,
                         indicator_col if indicator_col is not None else 0)
            if len(parts) <= needed:
                raise ParseError(
                    f"{path}:{lineno}: expected at least {needed + 1} columns, "
                    f"got {len(parts)}: {line!r}")
            tokens.append(parts[token_col])
            tags.append(parts[tag_col])
            if indicator_col is not None:
                flags.append(int(parts[indicator_col]))
    flush()
    return sentences


def write_conll(path: str, sentences: Sequence[TaggedSentence]) -> None:
    lines = []
    for s in sentences:
        for i, (tok, tag) in enumerate(zip(s.tokens, s.labels)):
            if s.indicators is not None:
                lines.append(f"{tok} {tag} {s.indicators[i]}")
            else:
                lines.append(f"{tok} {tag}")
        lines.append("")
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- tagging schemes -------------------------------------------------------------

def _repair_bio(labels: Sequence[str]) -> tuple[list[str], int]:
    """Standard repair: an I-X continuing nothing of type X becomes B-X."""
    out: list[str] = []
    repairs = 0
    prev_type: str | None = None
    for tag in labels:
        if tag == "O" or "-" not in tag:
            out.append("O" if tag == "O" else tag)
            prev_type = None
            continue
        prefix, typ = tag.split("-", 1)
        if prefix == "I" and prev_type != typ:
            out.append(f"B-{typ}")
            repairs += 1
        else:
            out.append(tag)
        prev_type = typ
    return out, repairs


def convert_scheme(labels: Sequence[str], src: str, dst: str) -> tuple[list[str], int]:
    """Convert between BIO and BIOES, repairing ill-formed input.

    Returns the converted labels and the number of repaired positions.
    BIO -> BIOES turns single-token spans into S- and span-final I- into E-;
    the inverse restores the original labels.
    """
    src, dst = src.upper(), dst.upper()
    for scheme in (src, dst):
        if scheme not in ("BIO", "BIOES"):
            raise ConfigurationError(f"unknown tagging scheme {scheme!r}")
    if src == dst:
        return list(labels), 0
    if src == "BIOES":
        out: list[str] = []
        repairs = 0
        for tag in labels:
            if tag == "O" or "-" not in tag:
                out.append(tag)
                continue
            prefix, typ = tag.split("-", 1)
            if prefix == "S":
                out.append(f"B-{typ}")
            elif prefix == "E":
                out.append(f"I-{typ}")
            else:
                out.append(tag)
        out, repairs = _repair_bio(out)
        return out, repairs
    bio, repairs = _repair_bio(labels)
    n = len(bio)
    out = []
    for i, tag in enumerate(bio):
        if tag == "O" or "-" not in tag:
            out.append(tag)
            continue
        prefix, typ = tag.split("-", 1)
        next_continues = i + 1 < n and bio[i + 1] == f"I-{typ}"
        if prefix == "B":
            out.append(f"B-{typ}" if next_continues else f"S-{typ}")
        else:
            out.append(f"I-{typ}" if next_continues else f"E-{typ}")
    return out, repairs


# -- synthetic tasks ----------------------------------------------------------------

ALPHABET = tuple("abcdefghijklmnopqrstuvwxyz")
MARKER = "!"


def _check_lengths(length_range: tuple[int, int]) -> tuple[int, int]:
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"bad length range {length_range}")
    return lo, hi


def gen_lookahead(
    n_sentences: int,
    length_range: tuple[int, int] = (6, 18),
    marker_prob: float = 0.1,
    window: int = 3,
    seed: int = 0,
) -> list[TaggedSentence]:
    """Tagging task whose labels depend on up to ``window`` future tokens.

    Each position is independently the marker token with probability
    ``marker_prob``; markers are labeled B-MRK, a non-marker is B-PRE when a
    marker occurs within the next ``window`` positions and O otherwise.
    Deterministic given the seed (per-sentence derived seeds).
    """
    if not (0.0 <= marker_prob < 1.0):
        raise ConfigurationError(f"marker_prob must be in [0, 1), got {marker_prob}")
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    lo, hi = _check_lengths(length_range)
    sentences = []
    for i in range(n_sentences):
        rng = np.random.default_rng(seed + i)
        n = int(rng.integers(lo, hi + 1))
        letters = rng.integers(0, len(ALPHABET), size=n)
        is_marker = rng.random(n) < marker_prob
        tokens = tuple(MARKER if is_marker[j] else ALPHABET[letters[j]]
                       for j in range(n))
        labels = tuple(lookahead_label(is_marker, j, window) for j in range(n))
        sentences.append(TaggedSentence(tokens, labels))
    return sentences


def lookahead_label(is_marker: Sequence[bool], i: int, window: int) -> str:
    if is_marker[i]:
        return "B-MRK"
    upcoming = is_marker[i + 1: i + 1 + window]
    return "B-PRE" if any(upcoming) else "O"


def gen_local(
    n_sentences: int,
    length_range: tuple[int, int] = (6, 18),
    seed: int = 0,
) -> list[TaggedSentence]:
    """Control task solvable from the prefix: B-DUP when a token repeats its
    predecessor, O otherwise."""
    lo, hi = _check_lengths(length_range)
    sentences = []
    for i in range(n_sentences):
        rng = np.random.default_rng(seed + i)
        n = int(rng.integers(lo, hi + 1))
        letters = rng.integers(0, len(ALPHABET), size=n)
        tokens = tuple(ALPHABET[l] for l in letters)
        labels = tuple(
            "B-DUP" if j > 0 and tokens[j] == tokens[j - 1] else "O"
            for j in range(n))
        sentences.append(TaggedSentence(tokens, labels))
    return sentences


def split_dataset(
    sentences: Sequence[TaggedSentence],
) -> tuple[list[TaggedSentence], list[TaggedSentence], list[TaggedSentence]]:
    """80/10/10 split by sentence index."""
    n = len(sentences)
    n_train = (n * 8) // 10
    n_dev = (n * 9) // 10 - n_train
    train = list(sentences[:n_train])
    dev = list(sentences[n_train:n_train + n_dev])
    test = list(sentences[n_train + n_dev:])
    return train, dev, test


def write_dataset_manifest(path: str, params: dict) -> None:
    atomic_write_text(path, json.dumps(params, indent=2) + "\n")


def read_dataset_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
