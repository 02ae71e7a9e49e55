"""Deterministic synthetic corpora of concept-annotated utterances.

Each sentence is rendered from a slot-bearing template. Its features are
per-character prototype vectors repeated ``frames_per_char`` times, shifted
by the speaker's offset vector, plus Gaussian noise. The speaker's offset is
also published as that speaker's adaptation vector, so speaker-adaptive
training has a recoverable oracle signal.

Prototypes depend only on ``acoustic_seed`` and the alphabet, so corpora for
different tasks (ASR, NER, SF) share the same "acoustics" and transfer
between them is meaningful.
"""
from __future__ import annotations

import json
import logging
import os
import re
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParseError, SpecError
from .tagcodec import (
    DEFAULT_GRAPHEMES,
    OUTSIDE,
    SEPARATOR,
    TagInventory,
    bio_entities,
    bio_to_chunk,
    parse_chunks_with_repairs,
)

logger = logging.getLogger(__name__)

SLOT_RE = re.compile(r"\{([^}]+)\}")
FEATURE_MAGIC = b"F32M"
SPLITS = ("train", "dev", "test")


@dataclass
class Template:
    pattern: str
    weight: float = 1.0

    def slots(self) -> List[str]:
        return SLOT_RE.findall(self.pattern)


@dataclass
class GeneratorSpec:
    seed: int = 0
    task: str = "sf"
    alphabet: str = DEFAULT_GRAPHEMES
    tags: Tuple[str, ...] = ()
    templates: List[Template] = field(default_factory=list)
    lexicon: Dict[str, List[str]] = field(default_factory=dict)
    frames_per_char: int = 2
    feature_dim: int = 16
    acoustic_seed: int = 0
    n_speakers: int = 8
    n_heldout_speakers: int = 0
    offset_scale: float = 0.0
    noise_std: float = 0.1

    def __post_init__(self):
        self.tags = tuple(self.tags)
        self.templates = [t if isinstance(t, Template) else Template(**t) for t in self.templates]

    @property
    def inventory(self) -> TagInventory:
        return TagInventory(self.tags)

    def validate(self):
        if not self.templates:
            raise SpecError("generator spec has no templates")
        if self.frames_per_char < 1 or self.feature_dim < 1 or self.n_speakers < 1:
            raise SpecError("frames_per_char, feature_dim and n_speakers must be >= 1")
        alphabet = set(self.alphabet)
        for t in self.templates:
            if t.weight <= 0:
                raise SpecError(f"template {t.pattern!r} has non-positive weight")
            literal = SLOT_RE.sub("", t.pattern)
            bad = set(literal) - alphabet
            if bad:
                raise SpecError(f"template {t.pattern!r} uses characters {sorted(bad)} outside the alphabet")
            for tag in t.slots():
                if tag not in self.tags:
                    raise SpecError(f"template slot {{{tag}}} is not in the tag inventory")
                if not self.lexicon.get(tag):
                    raise SpecError(f"no lexicon values for tag {tag!r}")
        for tag, values in self.lexicon.items():
            for v in values:
                if set(v) - alphabet or not v.strip():
                    raise SpecError(f"lexicon value {v!r} for {tag!r} is empty or outside the alphabet")

    def to_dict(self):
        d = asdict(self)
        d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_dict(cls, d) -> "GeneratorSpec":
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_dict(json.load(f))
            except (TypeError, ValueError) as e:
                raise SpecError(f"{path}: {e}") from None


@dataclass
class Utterance:
    id: str
    speaker: str
    transcript: str
    chunked: str
    bio: List[Tuple[str, str]]
    features: np.ndarray
    speaker_vector: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    task: str
    splits: Dict[str, List[Utterance]]
    speaker_vectors: Dict[str, np.ndarray]
    tags: Tuple[str, ...] = ()

    def __getitem__(self, split) -> List[Utterance]:
        return self.splits[split]

    @property
    def inventory(self) -> TagInventory:
        return TagInventory(self.tags)


# -- generation -------------------------------------------------------------------

def prototypes(alphabet: str, dim: int, acoustic_seed: int) -> Dict[str, np.ndarray]:
    """Per-character prototype vectors; a character's vector depends only on
    its code point and the acoustic seed."""
    out = {}
    for ch in alphabet:
        rng = np.random.default_rng([acoustic_seed, ord(ch)])
        out[ch] = rng.normal(size=dim)
    return out


def speaker_offsets(spec: GeneratorSpec, rng) -> Dict[str, np.ndarray]:
    names = [f"spk{i:03d}" for i in range(spec.n_speakers + spec.n_heldout_speakers)]
    return {n: rng.normal(scale=spec.offset_scale, size=spec.feature_dim) if spec.offset_scale > 0
            else np.zeros(spec.feature_dim) for n in names}


def render(template: Template, lexicon, rng) -> List[Tuple[str, str]]:
    bio = []
    for piece in re.split(r"(\{[^}]+\})", template.pattern):
        m = SLOT_RE.fullmatch(piece)
        if m:
            tag = m.group(1)
            values = lexicon[tag]
            words = values[int(rng.integers(len(values)))].split()
            bio += [(w, ("B-" if k == 0 else "I-") + tag) for k, w in enumerate(words)]
        else:
            bio += [(w, OUTSIDE) for w in piece.split()]
    return bio


def synthesize_features(text: str, protos, frames_per_char, offset, noise_std, rng) -> np.ndarray:
    base = np.stack([protos[c] for c in text])
    x = np.repeat(base, frames_per_char, axis=0) + offset
    if noise_std > 0:
        x = x + rng.normal(scale=noise_std, size=x.shape)
    return x.astype(np.float32)


def generate(spec: GeneratorSpec, sizes: Dict[str, int]) -> Corpus:
    spec.validate()
    for split, n in sizes.items():
        if n < 1:
            raise SpecError(f"split {split!r} must have at least one utterance")
    rng = np.random.default_rng(spec.seed)
    protos = prototypes(spec.alphabet, spec.feature_dim, spec.acoustic_seed)
    offsets = speaker_offsets(spec, rng)
    train_pool = sorted(offsets)[:spec.n_speakers]
    heldout_pool = sorted(offsets)[spec.n_speakers:] or train_pool
    weights = np.array([t.weight for t in spec.templates], dtype=float)
    weights /= weights.sum()
    inv = spec.inventory
    splits = {}
    for split in sizes:
        pool = train_pool if split == "train" else heldout_pool
        utts = []
        for k in range(sizes[split]):
            template = spec.templates[int(rng.choice(len(spec.templates), p=weights))]
            bio = render(template, spec.lexicon, rng)
            transcript = SEPARATOR.join(w for w, _ in bio)
            speaker = pool[int(rng.integers(len(pool)))]
            feats = synthesize_features(transcript, protos, spec.frames_per_char,
                                        offsets[speaker], spec.noise_std, rng)
            utts.append(Utterance(f"{spec.task}-{split}-{k:05d}", speaker, transcript,
                                  bio_to_chunk(bio, inv), bio, feats,
                                  offsets[speaker].astype(np.float32)))
        splits[split] = utts
    return Corpus(spec.task, splits, {s: v.astype(np.float32) for s, v in offsets.items()}, spec.tags)


def nearest_prototype_frames(features: np.ndarray, spec: GeneratorSpec, offset=None) -> str:
    """Frame-wise nearest-prototype labels (the separability oracle)."""
    protos = prototypes(spec.alphabet, spec.feature_dim, spec.acoustic_seed)
    chars = list(protos)
    table = np.stack([protos[c] for c in chars])
    x = np.asarray(features, dtype=float)
    if offset is not None:
        x = x - offset
    d = ((x[:, None, :] - table[None]) ** 2).sum(-1)
    return "".join(chars[i] for i in d.argmin(axis=1))


def expected_tag_rates(spec: GeneratorSpec) -> Dict[str, float]:
    """Expected chunks per utterance for each tag under the template mixture."""
    w = np.array([t.weight for t in spec.templates], dtype=float)
    w /= w.sum()
    rates = Counter()
    for p, t in zip(w, spec.templates):
        for tag in t.slots():
            rates[tag] += p
    return dict(rates)


# -- files -----------------------------------------------------------------------------

def write_features(path, x: np.ndarray):
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<II", *x.shape))
        f.write(x.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12 or head[:4] != FEATURE_MAGIC:
            raise ParseError("not a feature matrix file", None, path)
        T, D = struct.unpack("<II", head[4:])
        data = f.read()
    if len(data) != 4 * T * D:
        raise ParseError(f"feature file holds {len(data)} bytes, header says {T}x{D}", None, path)
    return np.frombuffer(data, dtype="<f4").reshape(T, D).astype(np.float32)


def write_corpus(corpus: Corpus, out_dir, spec: Optional[GeneratorSpec] = None):
    os.makedirs(out_dir, exist_ok=True)
    if spec is not None:
        spec.save(os.path.join(out_dir, "spec.json"))
    TagInventory(corpus.tags).save(os.path.join(out_dir, "tags.txt"))
    with open(os.path.join(out_dir, "speakers.tsv"), "w", encoding="utf-8") as f:
        for name in sorted(corpus.speaker_vectors):
            vec = corpus.speaker_vectors[name]
            f.write(name + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
    for split, utts in corpus.splits.items():
        feat_dir = os.path.join(out_dir, "feats", split)
        os.makedirs(feat_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w", encoding="utf-8") as f:
            for u in utts:
                rel = os.path.join("feats", split, u.id + ".f32")
                write_features(os.path.join(out_dir, rel), u.features)
                rec = {"id": u.id, "speaker": u.speaker, "transcript": u.transcript,
                       "chunked": u.chunked, "bio": [list(t) for t in u.bio], "features": rel}
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_speaker_table(path) -> Dict[str, np.ndarray]:
    table = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if not parts[0]:
                continue
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float32)
            except ValueError:
                raise ParseError("non-numeric speaker vector entry", lineno, path) from None
    return table


def read_split(path, base_dir, speaker_vectors=None, inv: Optional[TagInventory] = None) -> List[Utterance]:
    utts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bio = [tuple(t) for t in rec["bio"]]
                u = Utterance(rec["id"], rec["speaker"], rec["transcript"], rec["chunked"], bio,
                              read_features(os.path.join(base_dir, rec["features"])))
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"malformed corpus record: {e}", lineno, path) from None
            if inv is not None and parse_chunks_with_repairs(u.chunked, inv)[1]:
                raise ParseError("chunked transcript needs repairs", lineno, path)
            if speaker_vectors is not None and u.speaker in speaker_vectors:
                u.speaker_vector = speaker_vectors[u.speaker]
            utts.append(u)
    return utts


def load_corpus(corpus_dir, splits: Sequence[str] = SPLITS) -> Corpus:
    spk_path = os.path.join(corpus_dir, "speakers.tsv")
    vectors = read_speaker_table(spk_path) if os.path.exists(spk_path) else {}
    tags_path = os.path.join(corpus_dir, "tags.txt")
    inv = TagInventory.load(tags_path) if os.path.exists(tags_path) else TagInventory(())
    task = "corpus"
    spec_path = os.path.join(corpus_dir, "spec.json")
    if os.path.exists(spec_path):
        with open(spec_path, encoding="utf-8") as f:
            task = json.load(f).get("task", task)
    out = {}
    for split in splits:
        p = os.path.join(corpus_dir, f"{split}.jsonl")
        if os.path.exists(p):
            out[split] = read_split(p, corpus_dir, vectors, inv)
    if not out:
        raise ParseError("no split files found", None, corpus_dir)
    return Corpus(task, out, vectors, inv.tags)


# -- statistics ------------------------------------------------------------------------

@dataclass
class CorpusStats:
    task: str
    split: str
    n_utterances: int
    n_frames: int
    n_speakers: int
    n_chunks: int
    concept_counts: Dict[str, int]

    def row(self):
        return {"task": self.task, "split": self.split, "utterances": self.n_utterances,
                "frames": self.n_frames, "speakers": self.n_speakers, "chunks": self.n_chunks}


def corpus_stats(utts: Sequence[Utterance], task: str = "", split: str = "") -> CorpusStats:
    counts = Counter()
    for u in utts:
        for tag, _ in bio_entities(u.bio):
            counts[tag] += 1
    return CorpusStats(task, split, len(utts), sum(u.n_frames for u in utts),
                       len({u.speaker for u in utts}), sum(counts.values()), dict(counts))


# -- presets -----------------------------------------------------------------------------

NUMBERS = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]
CITIES = ["paris", "lyon", "nice", "marseille", "toulouse", "lille", "nantes", "bordeaux",
          "rennes", "dijon"]
DATES = ["tomorrow", "monday", "friday", "next week", "the weekend", "tonight", "sunday",
         "the fifth of may", "saturday night"]

SF1_TAGS = ("command", "room/number", "room/type", "location/city", "time/date", "price/max")
SF2_TAGS = ("command", "show/name", "seat/number", "time/date")
NER_TAGS = ("person", "function", "organization", "location", "product", "amount", "time", "event")

LEXICON = {
    "command": ["i would like to book", "i want to reserve", "book", "please reserve", "i need"],
    "room/number": NUMBERS[:5],
    "room/type": ["double rooms", "single rooms", "twin rooms", "suites", "double room", "single room"],
    "location/city": CITIES,
    "time/date": DATES,
    "price/max": ["less than fifty euros", "under eighty euros", "at most a hundred euros",
                  "less than sixty euros"],
    "show/name": ["hamlet", "the misanthrope", "carmen", "the miser", "cyrano", "phedre"],
    "seat/number": NUMBERS,
    "person": ["marie curie", "victor hugo", "jean dupont", "claire martin", "paul durand"],
    "function": ["the president", "the minister", "the mayor", "a journalist", "the director"],
    "organization": ["the senate", "radio france", "the city council", "the union"],
    "location": CITIES + ["france", "europe"],
    "product": ["the new train", "a phone", "the airbus", "the magazine"],
    "amount": ["three", "ten", "two hundred", "a thousand", "fifty"],
    "time": ["yesterday", "today", "this morning", "last year", "in may"],
    "event": ["the festival", "the elections", "the strike", "the match"],
}

SF1_TEMPLATES = [
    Template("{command} {room/number} {room/type} in {location/city} for {time/date}", 3),
    Template("{command} a {room/type} in {location/city}", 2),
    Template("do you have {room/type} for {time/date}", 2),
    Template("{command} {room/number} {room/type} for {price/max}", 2),
    Template("a hotel in {location/city} {time/date}", 1),
    Template("something in {location/city} for {price/max}", 1),
]
SF2_TEMPLATES = [
    Template("{command} {seat/number} seats for {show/name} {time/date}", 3),
    Template("is {show/name} playing {time/date}", 2),
    Template("{command} {seat/number} tickets for {show/name}", 2),
    Template("what time is {show/name} on {time/date}", 1),
]
NER_TEMPLATES = [
    Template("{person} met {function} in {location} {time}", 3),
    Template("{organization} announced {event} for {time}", 2),
    Template("{amount} people bought {product} in {location}", 2),
    Template("{function} of {organization} spoke about {event}", 2),
    Template("{person} visited {location}", 1),
]


def preset(name: str, seed: int = 0, **overrides) -> GeneratorSpec:
    """Ready-made specs: ``sf1`` (target slot filling), ``sf2`` (auxiliary),
    ``sf12`` (joint, combined tag set), ``ner`` and ``asr`` (transcripts of
    every domain)."""
    if name == "sf1":
        tags, templates = SF1_TAGS, SF1_TEMPLATES
    elif name == "sf2":
        tags, templates = SF2_TAGS, SF2_TEMPLATES
    elif name == "sf12":
        tags = SF1_TAGS + tuple(t for t in SF2_TAGS if t not in SF1_TAGS)
        templates = SF1_TEMPLATES + SF2_TEMPLATES
    elif name == "ner":
        tags, templates = NER_TAGS, NER_TEMPLATES
    elif name == "asr":
        tags = SF1_TAGS + tuple(t for t in SF2_TAGS + NER_TAGS if t not in SF1_TAGS)
        templates = SF1_TEMPLATES + SF2_TEMPLATES + NER_TEMPLATES
    else:
        raise SpecError(f"unknown preset {name!r}")
    lexicon = {t: LEXICON[t] for t in tags}
    spec = GeneratorSpec(seed=seed, task=name, tags=tags, templates=[Template(t.pattern, t.weight) for t in templates],
                         lexicon=lexicon)
    for k, v in overrides.items():
        if not hasattr(spec, k):
            raise SpecError(f"unknown generator field {k!r}")
        setattr(spec, k, v)
    return spec
