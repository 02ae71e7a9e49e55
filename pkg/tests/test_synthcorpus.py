import filecmp
import os

import numpy as np
import pytest

from e2eslu.errors import ParseError, SpecError
from e2eslu.synthcorpus import (
    GeneratorSpec,
    Template,
    corpus_stats,
    expected_tag_rates,
    generate,
    load_corpus,
    nearest_prototype_frames,
    preset,
    prototypes,
    read_features,
    write_corpus,
    write_features,
)
from e2eslu.tagcodec import parse_chunks_with_repairs

SIZES = {"train": 40, "dev": 10, "test": 10}


def small_spec(**kw):
    return GeneratorSpec(seed=3, task="toy", alphabet="abcdefgh ", tags=("x", "y"),
                         templates=[Template("ab {x} cd", 3), Template("{y} {x}", 1)],
                         lexicon={"x": ["ef", "gh ab"], "y": ["dd"]}, **kw)


def test_noise_free_features_repeat_prototypes():
    spec = small_spec(noise_std=0.0, frames_per_char=3)
    corpus = generate(spec, {"train": 5})
    protos = prototypes(spec.alphabet, spec.feature_dim, spec.acoustic_seed)
    for u in corpus["train"]:
        expected = np.repeat(np.stack([protos[c] for c in u.transcript]), 3, axis=0).astype(np.float32)
        assert np.array_equal(u.features, expected)
        assert u.n_frames == 3 * len(u.transcript)


def test_generation_is_deterministic(tmp_path):
    a = generate(preset("sf1", seed=7), SIZES)
    b = generate(preset("sf1", seed=7), SIZES)
    for split in SIZES:
        assert [u.chunked for u in a[split]] == [u.chunked for u in b[split]]
        assert all(np.array_equal(x.features, y.features) for x, y in zip(a[split], b[split]))
    write_corpus(a, tmp_path / "a", preset("sf1", seed=7))
    write_corpus(b, tmp_path / "b", preset("sf1", seed=7))
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmp(tmp_path / "a" / "feats" / "dev" / os.listdir(tmp_path / "a" / "feats" / "dev")[0],
                       tmp_path / "b" / "feats" / "dev" / os.listdir(tmp_path / "b" / "feats" / "dev")[0],
                       shallow=False)


def test_different_seeds_differ():
    a = generate(preset("sf1", seed=1), {"train": 20})
    b = generate(preset("sf1", seed=2), {"train": 20})
    assert [u.chunked for u in a["train"]] != [u.chunked for u in b["train"]]


def test_file_roundtrip_is_exact(tmp_path):
    spec = preset("sf1", seed=2, offset_scale=0.5)
    corpus = generate(spec, SIZES)
    write_corpus(corpus, tmp_path, spec)
    back = load_corpus(tmp_path)
    assert back.task == "sf1" and back.tags == corpus.tags
    for split in SIZES:
        for u, v in zip(corpus[split], back[split]):
            assert (u.id, u.speaker, u.transcript, u.chunked, u.bio) == (v.id, v.speaker, v.transcript,
                                                                          v.chunked, v.bio)
            assert np.array_equal(u.features, v.features)
            assert np.array_equal(u.speaker_vector, v.speaker_vector)


def test_speaker_offsets_shift_feature_means():
    spec = small_spec(noise_std=0.05, offset_scale=1.0, n_speakers=2)
    corpus = generate(spec, {"train": 200})
    protos = prototypes(spec.alphabet, spec.feature_dim, spec.acoustic_seed)
    resid = {}
    for u in corpus["train"]:
        base = np.repeat(np.stack([protos[c] for c in u.transcript]), spec.frames_per_char, axis=0)
        resid.setdefault(u.speaker, []).append(u.features - base)
    means = {s: np.concatenate(r).mean(axis=0) for s, r in resid.items()}
    assert len(means) == 2
    s0, s1 = sorted(means)
    np.testing.assert_allclose(means[s0] - means[s1],
                               corpus.speaker_vectors[s0] - corpus.speaker_vectors[s1], atol=0.02)


def test_heldout_speakers_only_in_dev_and_test():
    corpus = generate(preset("sf1", seed=0, n_speakers=4, n_heldout_speakers=2, offset_scale=0.5), SIZES)
    train_spk = {u.speaker for u in corpus["train"]}
    other_spk = {u.speaker for s in ("dev", "test") for u in corpus[s]}
    assert not train_spk & other_spk
    assert len(train_spk) <= 4 and len(other_spk) <= 2


def test_chunked_transcripts_need_no_repairs():
    for name in ("sf1", "sf2", "sf12", "ner"):
        spec = preset(name, seed=0)
        corpus = generate(spec, {"train": 100})
        assert all(parse_chunks_with_repairs(u.chunked, spec.inventory)[1] == 0 for u in corpus["train"])


def test_asr_preset_covers_every_domain():
    asr = preset("asr")
    for name in ("sf1", "sf2", "ner"):
        assert set(preset(name).tags) <= set(asr.tags)
        assert preset(name).alphabet == asr.alphabet


def test_corpus_stats_are_consistent():
    spec = preset("ner", seed=1)
    corpus = generate(spec, {"train": 300})
    stats = corpus_stats(corpus["train"], "ner", "train")
    assert stats.n_chunks == sum(stats.concept_counts.values())
    assert stats.n_utterances == 300
    assert stats.n_frames == sum(u.n_frames for u in corpus["train"])
    assert 1 <= stats.n_speakers <= spec.n_speakers
    assert stats.row()["chunks"] == stats.n_chunks


def test_template_weights_set_concept_rates():
    spec = small_spec()
    n = 4000
    corpus = generate(spec, {"train": n})
    counts = corpus_stats(corpus["train"]).concept_counts
    rates = expected_tag_rates(spec)
    assert rates == {"x": 1.0, "y": 0.25}
    assert counts["x"] == n
    # y appears in the weight-1 template only: binomial(n, 1/4), sd about 27
    assert abs(counts["y"] - n * 0.25) < 5 * np.sqrt(n * 0.25 * 0.75)


@pytest.mark.parametrize("noise,floor", [(0.1, 1.0), (0.5, 0.999)])
def test_frames_are_separable_at_documented_noise(noise, floor):
    spec = preset("sf1", seed=0, noise_std=noise)
    corpus = generate(spec, {"train": 200})
    hits = total = 0
    for u in corpus["train"]:
        truth = "".join(c * spec.frames_per_char for c in u.transcript)
        guess = nearest_prototype_frames(u.features, spec)
        hits += sum(a == b for a, b in zip(truth, guess))
        total += len(truth)
    assert hits / total >= floor


def test_spec_validation():
    with pytest.raises(SpecError):
        small_spec(frames_per_char=0).validate()
    bad_slot = small_spec()
    bad_slot.templates.append(Template("{z}"))
    with pytest.raises(SpecError):
        bad_slot.validate()
    bad_char = small_spec()
    bad_char.templates.append(Template("zz {x}"))
    with pytest.raises(SpecError):
        bad_char.validate()
    bad_weight = small_spec()
    bad_weight.templates[0].weight = 0
    with pytest.raises(SpecError):
        bad_weight.validate()
    with pytest.raises(SpecError):
        preset("nope")
    with pytest.raises(SpecError):
        preset("sf1", colour="red")
    with pytest.raises(SpecError):
        generate(small_spec(), {"train": 0})


def test_spec_json_roundtrip(tmp_path):
    spec = small_spec(offset_scale=0.3)
    spec.save(tmp_path / "s.json")
    assert GeneratorSpec.load(tmp_path / "s.json") == spec


def test_malformed_split_line_reports_line_number(tmp_path):
    spec = small_spec()
    write_corpus(generate(spec, {"train": 3}), tmp_path, spec)
    path = tmp_path / "train.jsonl"
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[1] = lines[1][:20]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as e:
        load_corpus(tmp_path)
    assert e.value.line == 2


def test_feature_file_corruption(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_features(tmp_path / "f.f32", x)
    assert np.array_equal(read_features(tmp_path / "f.f32"), x)
    data = (tmp_path / "f.f32").read_bytes()
    (tmp_path / "g.f32").write_bytes(data[:-1])
    with pytest.raises(ParseError):
        read_features(tmp_path / "g.f32")
    (tmp_path / "h.f32").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        read_features(tmp_path / "h.f32")
