"""Conversion between BIO annotation, chunked text and label id sequences.

A chunked transcript marks each concept with a per-tag opening symbol placed
directly before the first word of the chunk, and a single closing symbol
shared by all tags placed directly after its last word::

    i would like to book <amount>three</> double rooms

with ``<amount>`` and ``</>`` standing for single code points.
Opening and closing symbols are code points from the Unicode private use
area, assigned in inventory order. The star unit (U+2605) stands for any
run of characters outside every chunk.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

from .errors import (
    EncodingError,
    ConfigError,
    InventoryMismatchError,
    MalformedBioError,
    MalformedChunkError,
    ParseError,
)

logger = logging.getLogger(__name__)

BLANK = "<blank>"
STAR = "\u2605"
SEPARATOR = " "
CLOSE_SYMBOL = "\ue000"
OPEN_BASE = 0xE001
OUTSIDE = "O"

DEFAULT_GRAPHEMES = "abcdefghijklmnopqrstuvwxyz' "

BioTranscript = List[Tuple[str, str]]


@dataclass(frozen=True)
class TagInventory:
    tags: Tuple[str, ...]

    def __post_init__(self):
        tags = tuple(self.tags)
        object.__setattr__(self, "tags", tags)
        if len(set(tags)) != len(tags):
            raise InventoryMismatchError("duplicate tag names in inventory")
        if OPEN_BASE + len(tags) > 0xF8FF:
            raise InventoryMismatchError("too many tags for the private use range")
        for t in tags:
            if not t or any(c.isspace() for c in t):
                raise InventoryMismatchError(f"invalid tag name {t!r}")

    @property
    def closing_symbol(self) -> str:
        return CLOSE_SYMBOL

    def opening_symbol(self, tag: str) -> str:
        try:
            return chr(OPEN_BASE + self.tags.index(tag))
        except ValueError:
            raise InventoryMismatchError(f"tag {tag!r} is not in the inventory") from None

    @property
    def opening_symbols(self) -> Tuple[str, ...]:
        return tuple(chr(OPEN_BASE + i) for i in range(len(self.tags)))

    def tag_of(self, symbol: str) -> Optional[str]:
        i = ord(symbol) - OPEN_BASE
        if 0 <= i < len(self.tags):
            return self.tags[i]
        return None

    def is_tag_symbol(self, ch: str) -> bool:
        return ch == CLOSE_SYMBOL or self.tag_of(ch) is not None

    def __len__(self):
        return len(self.tags)

    def to_text(self) -> str:
        lines = [f"{t}\t{_escape(self.opening_symbol(t))}" for t in self.tags]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str, path=None) -> "TagInventory":
        tags = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            tag = parts[0]
            if len(parts) > 1:
                expected = chr(OPEN_BASE + len(tags))
                if _unescape(parts[1]) != expected:
                    raise ParseError(f"tag {tag!r} has symbol {parts[1]}, expected "
                                     f"{_escape(expected)}", lineno, path)
            tags.append(tag)
        return cls(tuple(tags))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "TagInventory":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), path)


def _escape(unit: str) -> str:
    if unit == BLANK:
        return unit
    if unit.isprintable() and not unit.isspace() and unit != "\\" and ord(unit) < 0xE000:
        return unit
    return "\\u%04x" % ord(unit)


def _unescape(text: str) -> str:
    if text == BLANK:
        return text
    if text.startswith("\\u") and len(text) == 6:
        return chr(int(text[2:], 16))
    if len(text) != 1:
        raise ValueError(f"bad unit {text!r}")
    return text


@dataclass(frozen=True)
class Vocabulary:
    """Ordered output units: blank, graphemes, opening tags, closing tag, star."""

    graphemes: str = DEFAULT_GRAPHEMES
    inventory: Optional[TagInventory] = None
    star: bool = False
    units: Tuple[str, ...] = field(init=False, repr=False, compare=False)
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.graphemes)) != len(self.graphemes):
            raise ConfigError("duplicate graphemes")
        if SEPARATOR not in self.graphemes:
            raise ConfigError("the word separator must be a grapheme")
        units = [BLANK] + list(self.graphemes)
        if self.inventory is not None and len(self.inventory):
            units += list(self.inventory.opening_symbols) + [CLOSE_SYMBOL]
        if self.star:
            units.append(STAR)
        if len(set(units)) != len(units):
            raise ConfigError("graphemes collide with tag or star symbols")
        object.__setattr__(self, "units", tuple(units))
        object.__setattr__(self, "_index", {u: i for i, u in enumerate(units)})

    blank = 0

    def __len__(self):
        return len(self.units)

    def __contains__(self, unit):
        return unit in self._index

    def index(self, unit: str) -> int:
        return self._index[unit]

    @property
    def has_tags(self) -> bool:
        return self.inventory is not None and len(self.inventory) > 0

    @property
    def star_id(self) -> int:
        if not self.star:
            raise ConfigError("vocabulary has no star unit")
        return len(self.units) - 1

    @property
    def close_id(self) -> Optional[int]:
        return self._index.get(CLOSE_SYMBOL)

    @property
    def n_graphemes(self) -> int:
        return len(self.graphemes)

    def is_open(self, i: int) -> bool:
        return self.has_tags and 1 + self.n_graphemes <= i < 1 + self.n_graphemes + len(self.inventory)

    def with_star(self) -> "Vocabulary":
        return Vocabulary(self.graphemes, self.inventory, True)

    def to_text(self) -> str:
        lines = ["# e2eslu vocabulary v1"]
        for i, u in enumerate(self.units):
            if i == 0:
                kind, extra = "blank", ""
            elif u == STAR and self.star and i == len(self.units) - 1:
                kind, extra = "star", ""
            elif u == CLOSE_SYMBOL and self.has_tags:
                kind, extra = "close", ""
            elif self.is_open(i):
                kind, extra = "open", "\t" + self.inventory.tag_of(u)
            else:
                kind, extra = "grapheme", ""
            lines.append(f"{kind}\t{_escape(u)}{extra}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, path=None) -> "Vocabulary":
        graphemes, tags, star = [], [], False
        seen_blank = False
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                kind, unit = parts[0], _unescape(parts[1])
            except (IndexError, ValueError):
                raise ParseError(f"malformed vocabulary line {line!r}", lineno, path) from None
            if kind == "blank":
                if seen_blank or graphemes:
                    raise ParseError("blank must be the first unit", lineno, path)
                seen_blank = True
            elif kind == "grapheme":
                if tags:
                    raise ParseError("grapheme after tag symbols", lineno, path)
                graphemes.append(unit)
            elif kind == "open":
                if len(parts) < 3:
                    raise ParseError("opening symbol without tag name", lineno, path)
                if unit != chr(OPEN_BASE + len(tags)):
                    raise ParseError(f"unexpected code point for tag {parts[2]!r}", lineno, path)
                tags.append(parts[2])
            elif kind == "close":
                if unit != CLOSE_SYMBOL:
                    raise ParseError("unexpected closing symbol", lineno, path)
            elif kind == "star":
                star = True
            else:
                raise ParseError(f"unknown unit kind {kind!r}", lineno, path)
        if not seen_blank:
            raise ParseError("vocabulary has no blank", None, path)
        inv = TagInventory(tuple(tags)) if tags else None
        return cls("".join(graphemes), inv, star)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), path)


@dataclass(frozen=True)
class ConceptChunk:
    tag: str
    value: str
    position: int


def normalize_separators(text: str) -> str:
    return SEPARATOR.join(w for w in text.split(SEPARATOR) if w)


def bio_to_chunk(bio: Sequence[Tuple[str, str]], inv: TagInventory) -> str:
    words = []
    current = None
    for k, (word, label) in enumerate(bio):
        if not word or SEPARATOR in word or any(inv.is_tag_symbol(c) for c in word):
            raise MalformedBioError(f"invalid word {word!r} at token {k}")
        if label == OUTSIDE:
            kind, tag = OUTSIDE, None
        else:
            kind, _, tag = label.partition("-")
            if kind not in ("B", "I") or not tag:
                raise MalformedBioError(f"invalid BIO label {label!r} at token {k}")
            inv.opening_symbol(tag)
        if kind == "I" and current != tag:
            raise MalformedBioError(f"I-{tag} at token {k} does not continue a {tag} chunk")
        if current is not None and kind != "I":
            words[-1] += CLOSE_SYMBOL
            current = None
        if kind == "B":
            word = inv.opening_symbol(tag) + word
            current = tag
        words.append(word)
    if current is not None:
        words[-1] += CLOSE_SYMBOL
    return SEPARATOR.join(words)


def chunk_to_bio(text: str, inv: TagInventory) -> BioTranscript:
    """Strict inverse of :func:`bio_to_chunk`; raises on any malformation."""
    bio = []
    current = None
    if not text:
        return bio
    for k, token in enumerate(text.split(SEPARATOR)):
        first = False
        if token and inv.tag_of(token[0]) is not None:
            if current is not None:
                raise MalformedChunkError(f"nested opening symbol in token {k}")
            current = inv.tag_of(token[0])
            first = True
            token = token[1:]
        closes = token.endswith(CLOSE_SYMBOL)
        if closes:
            if current is None:
                raise MalformedChunkError(f"orphan closing symbol in token {k}")
            token = token[:-1]
        if not token or any(inv.is_tag_symbol(c) for c in token):
            raise MalformedChunkError(f"misplaced tag symbol or empty word at token {k}")
        if current is None:
            bio.append((token, OUTSIDE))
        else:
            bio.append((token, ("B-" if first else "I-") + current))
        if closes:
            current = None
    if current is not None:
        raise MalformedChunkError("unclosed chunk at end of text")
    return bio


def encode(text: str, vocab: Vocabulary) -> List[int]:
    ids = []
    for pos, ch in enumerate(text):
        try:
            ids.append(vocab.index(ch))
        except KeyError:
            raise EncodingError(ch, pos) from None
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Render ids as text; blanks render as nothing."""
    return "".join(vocab.units[i] for i in ids if i != vocab.blank)


def star_map(ids: Sequence[int], vocab: Vocabulary) -> List[int]:
    """Keep chunk contents (opening through closing symbol), replace each
    maximal run of outside units by a single star."""
    star = vocab.star_id
    close = vocab.close_id
    out = []
    inside = False
    for i in ids:
        if vocab.is_open(i):
            if inside:
                raise MalformedChunkError("nested opening symbol in label sequence")
            inside = True
            out.append(i)
        elif i == close:
            if not inside:
                raise MalformedChunkError("orphan closing symbol in label sequence")
            inside = False
            out.append(i)
        elif inside:
            out.append(i)
        elif not out or out[-1] != star:
            out.append(star)
    if inside:
        raise MalformedChunkError("unclosed chunk in label sequence")
    return out


def star_map_text(text: str, vocab: Vocabulary) -> str:
    return decode(star_map(encode(text, vocab), vocab), vocab)


def parse_chunks_with_repairs(text: str, inv: TagInventory) -> Tuple[List[ConceptChunk], int]:
    """Total parse of possibly malformed decoder output.

    Repairs: an unclosed chunk is closed at the end of the string, an orphan
    closing symbol is dropped, and an opening symbol inside an open chunk
    closes the current chunk first. Returns the chunks and the repair count.
    """
    chunks = []
    repairs = 0
    tag = None
    buf = []

    def close():
        value = normalize_separators("".join(buf))
        if not value:
            logger.debug("empty value for chunk %s at position %d", tag, len(chunks))
        chunks.append(ConceptChunk(tag, value, len(chunks)))

    for ch in text:
        opened = inv.tag_of(ch)
        if opened is not None:
            if tag is not None:
                repairs += 1
                close()
            tag, buf = opened, []
        elif ch == CLOSE_SYMBOL:
            if tag is None:
                repairs += 1
                continue
            close()
            tag = None
        elif tag is not None:
            buf.append(ch)
    if tag is not None:
        repairs += 1
        close()
    return chunks, repairs


def parse_chunks(text: str, inv: TagInventory) -> List[ConceptChunk]:
    return parse_chunks_with_repairs(text, inv)[0]


def plain_text(text: str, inv: Optional[TagInventory] = None) -> str:
    """Strip tag and star symbols and normalize separators."""
    def keep(c):
        if c == STAR or c == CLOSE_SYMBOL:
            return False
        if inv is not None:
            return inv.tag_of(c) is None
        return not (OPEN_BASE <= ord(c) <= 0xF8FF)
    return normalize_separators("".join(c for c in text if keep(c)))


def bio_entities(bio: Sequence[Tuple[str, str]]) -> List[Tuple[str, str]]:
    """(tag, value) pairs of the maximal B/I runs of a BIO transcript."""
    out = []
    for word, label in bio:
        if label.startswith("B-"):
            out.append([label[2:], [word]])
        elif label.startswith("I-"):
            out[-1][1].append(word)
    return [(t, SEPARATOR.join(ws)) for t, ws in out]
