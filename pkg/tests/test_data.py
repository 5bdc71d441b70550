import json
import os

import numpy as np
import pytest

from conftest import tone
from pipmn import dsp
from pipmn.data import (TEST, TRAIN, VAL, FeatureIndex, IndexEntry, ManifestError, batches,
                        load_segments, load_split, make_split, materialize_features,
                        read_index, read_manifest)


def write_manifest(tmp_path, lines, name="m.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


def ten_rows(labels=("a", "b")):
    return ["clip_id,file_path,labels"] + [f"c{i},x{i}.wav,{labels[i % len(labels)]}"
                                            for i in range(10)]


# --- manifest ---------------------------------------------------------------------

def test_manifest_parses_and_sorts_vocabulary(tmp_path):
    m = read_manifest(write_manifest(tmp_path, [
        "clip_id,file_path,labels,duration_s",
        "a,sub/a.wav,siren,4.0",
        "b,/abs/b.wav,dog;car,",
    ]))
    assert m.vocabulary == ["car", "dog", "siren"]
    assert m.rows[1].labels == ["dog", "car"]
    assert m.rows[0].duration_s == 4.0 and m.rows[1].duration_s is None
    assert m.path_of(m.rows[0]) == str(tmp_path / "sub" / "a.wav")
    assert m.path_of(m.rows[1]) == "/abs/b.wav"


@pytest.mark.parametrize("lines,msg", [
    (["clip_id,labels", "a,x"], ":1: missing columns"),
    (["clip_id,file_path,labels,extra", "a,b,c,d"], ":1: unknown columns"),
    (["clip_id,file_path,labels", "a,a.wav,x", "a,b.wav,y"], ":3: duplicate clip_id"),
    (["clip_id,file_path,labels", "a,a.wav,x", ",b.wav,y"], ":3: empty clip_id"),
    (["clip_id,file_path,labels", "a,a.wav,x", "b,b.wav,"], ":3: empty label"),
    (["clip_id,file_path,labels", "a,a.wav,x;;y"], ":2: empty label"),
    (["clip_id,file_path,labels", "a,a.wav,x", "b,b.wav,x"], "at least 2 distinct"),
])
def test_manifest_errors_name_the_line(tmp_path, lines, msg):
    with pytest.raises(ManifestError, match=msg):
        read_manifest(write_manifest(tmp_path, lines))


# --- split ----------------------------------------------------------------------------

def test_split_ten_clips_is_8_1_1(tmp_path):
    s = make_split(read_manifest(write_manifest(tmp_path, ten_rows())), seed=0)
    assert s.counts() == {TRAIN: 8, VAL: 1, TEST: 1}


def test_split_floors_small_splits(tmp_path):
    rows = ["clip_id,file_path,labels"] + [f"c{i},x.wav,{'ab'[i % 2]}" for i in range(27)]
    s = make_split(read_manifest(write_manifest(tmp_path, rows)), seed=0)
    assert s.counts() == {TRAIN: 23, VAL: 2, TEST: 2}


def test_split_deterministic_and_seed_sensitive(tmp_path):
    rows = ["clip_id,file_path,labels"] + [f"c{i},x.wav,{'ab'[i % 2]}" for i in range(50)]
    m = read_manifest(write_manifest(tmp_path, rows))
    assert make_split(m, 3).assignment == make_split(m, 3).assignment
    assert make_split(m, 3).assignment != make_split(m, 4).assignment


def test_small_manifest_goes_to_train(tmp_path):
    m = read_manifest(write_manifest(tmp_path, ten_rows()[:4]))
    assert make_split(m).counts() == {TRAIN: 3, VAL: 0, TEST: 0}


# --- segments and cache -------------------------------------------------------------

def test_thirty_second_clip_gives_seven_segments(tmp_path):
    dsp.write_wav(tmp_path / "g.wav", tone(30.0, 440), dsp.SAMPLE_RATE)
    segs = load_segments(tmp_path / "g.wav")
    assert len(segs) == 7
    assert all(len(s.samples) == 88200 for s in segs)


def test_other_rate_is_resampled(tmp_path):
    dsp.write_wav(tmp_path / "r.wav", tone(4.0, 440, rate=44100), 44100)
    segs = load_segments(tmp_path / "r.wav")
    assert len(segs) == 1 and segs[0].sample_rate == dsp.SAMPLE_RATE


@pytest.fixture
def materialized(audio_corpus, tmp_path):
    m = read_manifest(audio_corpus)
    split = make_split(m, seed=0)
    cache = tmp_path / "cache"
    index, summary = materialize_features(m, split, cache)
    return m, split, cache, index, summary


def test_materialize_writes_segments_and_index(materialized):
    m, split, cache, index, summary = materialized
    assert summary.ok and summary.extracted == 10 and summary.cached == 0
    pipf = sorted(p for p in os.listdir(cache) if p.endswith(".pipf"))
    assert len(pipf) == 10
    assert dsp.read_pipf(cache / pipf[0]).shape == (399, 100)
    assert index.vocabulary == ["high", "low"]
    on_disk = read_index(cache)
    assert on_disk.entries == index.entries
    assert json.loads((cache / "vocab.json").read_text())["vocabulary"] == ["high", "low"]


def test_split_integrity(materialized):
    m, split, cache, index, _ = materialized
    for e in index.entries:
        assert e.split == split.assignment[e.clip_id]
    clips = {s: {e.clip_id for e in index.split(s)} for s in (TRAIN, VAL, TEST)}
    assert not clips[TRAIN] & clips[VAL] and not clips[TRAIN] & clips[TEST]
    assert not clips[VAL] & clips[TEST]


def test_labels_are_class_indices(materialized):
    m, _, _, index, _ = materialized
    by_id = m.by_id()
    for e in index.entries:
        assert [index.vocabulary[i] for i in e.labels] == by_id[e.clip_id].labels


def test_warm_cache_does_no_extraction(materialized, monkeypatch):
    m, split, cache, index, _ = materialized

    def boom(*a, **k):
        raise AssertionError("extraction on a warm cache")

    monkeypatch.setattr(dsp, "extract", boom)
    again, summary = materialize_features(m, split, cache)
    assert summary.extracted == 0 and summary.cached == 10 and summary.ok
    assert again.entries == index.entries


def test_failures_are_recorded_not_raised(audio_corpus, tmp_path):
    (tmp_path / "clip3.wav").write_bytes(b"not audio")
    os.remove(tmp_path / "clip5.wav")
    m = read_manifest(audio_corpus)
    index, summary = materialize_features(m, make_split(m), tmp_path / "cache", workers=3)
    assert len(summary.failures) == 2 and not summary.ok
    assert any("clip3.wav" in f for f in summary.failures)
    assert summary.extracted == 8
    assert {e.clip_id for e in index.entries} == {f"c{i}" for i in range(10)} - {"c3", "c5"}


def test_other_feature_kinds(audio_corpus, tmp_path):
    m = read_manifest(audio_corpus)
    index, _ = materialize_features(m, make_split(m), tmp_path / "mf", kind="mfcc50")
    assert index.kind == "mfcc50"
    assert dsp.read_pipf(index.path_of(index.entries[0])).shape == (399, 50)
    assert read_index(tmp_path / "mf").kind == "mfcc50"


# --- batching --------------------------------------------------------------------------

@pytest.fixture
def fake_index(tmp_path):
    entries = []
    for i in range(300):
        name = f"s{i:03d}.pipf"
        dsp.write_pipf(tmp_path / name, np.full((4, 3), i, dtype=np.float32))
        entries.append(IndexEntry(name, f"c{i}", TRAIN, [i % 3, (i + 1) % 3]))
    return FeatureIndex(entries, ["x", "y", "z"], str(tmp_path))


def test_batches_sizes(fake_index):
    out = list(batches(fake_index, TRAIN, 128, seed=1, epoch=1))
    assert [len(y) for _, y in out] == [128, 128, 44]
    assert out[0][0].shape == (128, 4, 3)
    ids = np.concatenate([x[:, 0, 0] for x, _ in out]).astype(int)
    assert sorted(ids) == list(range(300))


def test_batch_order_depends_on_seed_and_epoch_only(fake_index):
    def first(seed, epoch):
        return next(batches(fake_index, TRAIN, 128, seed=seed, epoch=epoch))[0][:, 0, 0]
    np.testing.assert_array_equal(first(1, 1), first(1, 1))
    assert not np.array_equal(first(1, 1), first(1, 2))
    assert not np.array_equal(first(1, 1), first(2, 1))


def test_multilabel_targets(fake_index):
    x, y = load_split(fake_index, TRAIN, multilabel=True)
    assert y.shape == (300, 3)
    np.testing.assert_array_equal(y[0], [1, 1, 0])
    _, y1 = load_split(fake_index, TRAIN)
    assert y1[:4].tolist() == [0, 1, 2, 0]


def test_empty_split_raises(fake_index):
    with pytest.raises(ValueError, match="empty"):
        next(batches(fake_index, VAL))
    with pytest.raises(ValueError, match="empty"):
        load_split(fake_index, TEST)
