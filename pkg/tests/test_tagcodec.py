import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2eslu.errors import (
    ConfigError,
    EncodingError,
    InventoryMismatchError,
    MalformedBioError,
    MalformedChunkError,
    ParseError,
)
from e2eslu.tagcodec import (
    CLOSE_SYMBOL,
    STAR,
    ConceptChunk,
    TagInventory,
    Vocabulary,
    bio_entities,
    bio_to_chunk,
    chunk_to_bio,
    decode,
    encode,
    parse_chunks,
    parse_chunks_with_repairs,
    plain_text,
    star_map,
    star_map_text,
)

NER = TagInventory(("amount", "location/city", "time/date"))
O_AMT, O_LOC, O_TIME = NER.opening_symbols
C = CLOSE_SYMBOL
MIXED = Vocabulary(string.ascii_letters + "' ", NER, star=True)

BOOKING_BIO = [("I", "O"), ("would", "O"), ("like", "O"), ("to", "O"), ("book", "O"),
               ("three", "B-amount"), ("double", "O"), ("rooms", "O"), ("in", "O"),
               ("Paris", "B-location/city"), ("for", "O"), ("tomorrow", "B-time/date")]
BOOKING_CHUNKED = (f"I would like to book {O_AMT}three{C} double rooms in "
                   f"{O_LOC}Paris{C} for {O_TIME}tomorrow{C}")
BOOKING_STAR = f"{STAR}{O_AMT}three{C}{STAR}{O_LOC}Paris{C}{STAR}{O_TIME}tomorrow{C}"


# -- inventory and vocabulary ---------------------------------------------------------

def test_inventory_symbols_distinct_and_outside_alphabet():
    syms = NER.opening_symbols
    assert len(set(syms)) == len(syms)
    assert C not in syms
    assert not set(syms) & set(string.printable)


def test_inventory_rejects_duplicates():
    with pytest.raises(InventoryMismatchError):
        TagInventory(("a", "a"))


def test_vocabulary_layout():
    v = Vocabulary("ab ", TagInventory(("x", "y")), star=True)
    assert v.units[0] == "<blank>"
    assert v.units[1:4] == ("a", "b", " ")
    assert v.units[4:6] == TagInventory(("x", "y")).opening_symbols
    assert v.units[6] == C
    assert v.units[7] == STAR and v.star_id == 7
    assert len(set(v.units)) == len(v.units)


def test_vocabulary_without_star_has_no_star_id():
    with pytest.raises(ConfigError):
        Vocabulary("ab ").star_id


def test_vocabulary_text_roundtrip(tmp_path):
    p = tmp_path / "v.txt"
    MIXED.save(p)
    assert Vocabulary.load(p) == MIXED
    assert Vocabulary.load(p).units == MIXED.units
    text = p.read_text(encoding="utf-8")
    assert all(ch.isprintable() for line in text.splitlines() for ch in line.replace("\t", ""))


def test_vocabulary_file_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("grapheme\ta\n", encoding="utf-8")
    with pytest.raises(ParseError):
        Vocabulary.load(p)


def test_inventory_text_roundtrip(tmp_path):
    p = tmp_path / "tags.txt"
    NER.save(p)
    assert TagInventory.load(p) == NER


# -- bio_to_chunk / chunk_to_bio ------------------------------------------------------

def test_booking_sentence_to_chunks():
    assert bio_to_chunk(BOOKING_BIO, NER) == BOOKING_CHUNKED


def test_booking_chunks_back_to_bio():
    assert chunk_to_bio(BOOKING_CHUNKED, NER) == BOOKING_BIO


def test_all_outside_unchanged():
    assert bio_to_chunk([("hello", "O"), ("world", "O")], NER) == "hello world"
    assert chunk_to_bio("hello world", NER) == [("hello", "O"), ("world", "O")]


def test_single_chunk_token():
    assert bio_to_chunk([("Paris", "B-location/city")], NER) == f"{O_LOC}Paris{C}"


def test_multiword_chunk():
    bio = [("next", "B-time/date"), ("week", "I-time/date")]
    assert bio_to_chunk(bio, NER) == f"{O_TIME}next week{C}"
    assert chunk_to_bio(f"{O_TIME}next week{C}", NER) == bio


def test_adjacent_chunks_of_same_tag():
    bio = [("one", "B-amount"), ("two", "B-amount")]
    text = bio_to_chunk(bio, NER)
    assert text == f"{O_AMT}one{C} {O_AMT}two{C}"
    assert chunk_to_bio(text, NER) == bio


def test_unknown_tag_is_inventory_mismatch():
    with pytest.raises(InventoryMismatchError):
        bio_to_chunk([("x", "B-person")], NER)


def test_orphan_inside_label_rejected():
    with pytest.raises(MalformedBioError):
        bio_to_chunk([("x", "I-amount")], NER)
    with pytest.raises(MalformedBioError):
        bio_to_chunk([("x", "B-amount"), ("y", "I-time/date")], NER)


def test_unclosed_chunk_rejected():
    with pytest.raises(MalformedChunkError):
        chunk_to_bio(f"book {O_AMT}three", NER)


def test_nested_chunk_rejected():
    with pytest.raises(MalformedChunkError):
        chunk_to_bio(f"{O_AMT}a {O_LOC}b{C}{C}", NER)


# -- encode / decode ------------------------------------------------------------------

def test_encode_direct_lookup():
    v = Vocabulary("ab ")
    assert encode("ab", v) == [1, 2]
    assert encode("", v) == []


def test_encode_unknown_character_names_it():
    with pytest.raises(EncodingError) as e:
        encode("a?", Vocabulary("ab "))
    assert "?" in str(e.value)


def test_encode_covers_tag_symbols():
    ids = encode(BOOKING_CHUNKED, MIXED)
    assert MIXED.index(O_AMT) in ids and MIXED.close_id in ids
    assert 0 not in ids
    assert decode(ids, MIXED) == BOOKING_CHUNKED


# -- star_map -------------------------------------------------------------------------

def test_star_map_worked_example():
    assert star_map_text(BOOKING_CHUNKED, MIXED) == BOOKING_STAR


def test_star_map_no_tags_is_single_star():
    assert star_map(encode("hello world", MIXED), MIXED) == [MIXED.star_id]


def test_star_map_single_chunk_unchanged():
    ids = encode(f"{O_LOC}Paris{C}", MIXED)
    assert star_map(ids, MIXED) == ids


def test_star_map_needs_star_unit():
    v = Vocabulary(string.ascii_letters + "' ", NER)
    with pytest.raises(ConfigError):
        star_map(encode("ab", v), v)


def test_star_map_rejects_unbalanced():
    with pytest.raises(MalformedChunkError):
        star_map(encode(f"a {O_AMT}b", MIXED), MIXED)
    with pytest.raises(MalformedChunkError):
        star_map(encode(f"a{C}", MIXED), MIXED)


def test_star_map_empty_sequence():
    assert star_map([], MIXED) == []


# -- parse_chunks ---------------------------------------------------------------------

def test_parse_chunks_booking():
    got = parse_chunks(BOOKING_CHUNKED, NER)
    assert [(c.tag, c.value) for c in got] == [("amount", "three"), ("location/city", "Paris"),
                                               ("time/date", "tomorrow")]
    assert [c.position for c in got] == [0, 1, 2]


def test_parse_chunks_auto_closes():
    chunks, repairs = parse_chunks_with_repairs(f"book {O_AMT}three rooms", NER)
    assert [(c.tag, c.value) for c in chunks] == [("amount", "three rooms")]
    assert repairs == 1


def test_parse_chunks_drops_orphan_close():
    chunks, repairs = parse_chunks_with_repairs(f"book three{C} rooms", NER)
    assert chunks == [] and repairs == 1


def test_parse_chunks_open_inside_open_closes_first():
    chunks, repairs = parse_chunks_with_repairs(f"{O_AMT}three {O_LOC}Paris{C}", NER)
    assert [(c.tag, c.value) for c in chunks] == [("amount", "three"), ("location/city", "Paris")]
    assert repairs == 1


def test_parse_chunks_normalizes_separators():
    chunks = parse_chunks(f"{O_TIME} next   week {C}", NER)
    assert chunks == [ConceptChunk("time/date", "next week", 0)]


def test_plain_text_strips_symbols():
    assert plain_text(BOOKING_CHUNKED, NER) == " ".join(w for w, _ in BOOKING_BIO)


# -- properties -----------------------------------------------------------------------

WORDS = st.text(alphabet="abcdefgh'", min_size=1, max_size=6)
TAGS = list(NER.tags)


@st.composite
def bio_sentences(draw):
    n = draw(st.integers(0, 12))
    out, prev = [], "O"
    for _ in range(n):
        choices = ["O"] + [f"B-{t}" for t in TAGS]
        if prev != "O":
            choices.append("I-" + prev[2:])
        lab = draw(st.sampled_from(choices))
        out.append((draw(WORDS), lab))
        prev = lab
    return out


@settings(max_examples=300, deadline=None)
@given(bio_sentences())
def test_roundtrip_property(bio):
    text = bio_to_chunk(bio, NER)
    assert chunk_to_bio(text, NER) == bio
    chunks, repairs = parse_chunks_with_repairs(text, NER)
    assert repairs == 0
    assert [(c.tag, c.value) for c in chunks] == bio_entities(bio)
    assert plain_text(text, NER) == " ".join(w for w, _ in bio)


@settings(max_examples=300, deadline=None)
@given(bio_sentences())
def test_star_map_properties(bio):
    text = bio_to_chunk(bio, NER)
    ids = encode(text, MIXED)
    out = star_map(ids, MIXED)
    assert len(out) <= len(ids)
    inside, depth = [], 0
    for i in ids:
        u = MIXED.units[i]
        if u in NER.opening_symbols:
            depth = 1
            inside.append(True)
        elif u == C:
            depth = 0
            inside.append(True)
        else:
            inside.append(depth == 1)
    runs = sum(1 for k, f in enumerate(inside) if not f and (k == 0 or inside[k - 1]))
    assert out.count(MIXED.star_id) == runs
    # applying the chunk-preservation rule again changes nothing
    again = star_map([i for i in out if i != MIXED.star_id], MIXED)
    chunk_only = [i for i in out if i != MIXED.star_id]
    if chunk_only:
        assert [i for i in again if i != MIXED.star_id] == chunk_only
    # chunks survive verbatim
    assert parse_chunks(decode(out, MIXED), NER) == parse_chunks(text, NER)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ab " + O_AMT + O_LOC + C, max_size=20))
def test_parse_chunks_total(text):
    chunks, repairs = parse_chunks_with_repairs(text, NER)
    assert repairs >= 0
    assert all(c.tag in NER.tags for c in chunks)
    assert [c.position for c in chunks] == list(range(len(chunks)))
