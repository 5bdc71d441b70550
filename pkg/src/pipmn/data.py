"""Manifests, clip-level splits, the PIPF feature cache and batch streaming.

Manifest CSV columns: ``clip_id,file_path,labels`` (labels separated by ``;``),
optionally ``duration_s``. Relative file paths resolve against the manifest's
directory.

The cache directory holds one PIPF file per 4 s segment, ``index.jsonl`` with
one ``{segment_path, clip_id, split, labels}`` object per segment (labels are
class indices into ``vocab.json``), and ``vocab.json``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = "train", "val", "test"
REQUIRED_COLUMNS = ("clip_id", "file_path", "labels")
OPTIONAL_COLUMNS = ("duration_s",)


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    clip_id: str
    file_path: str
    labels: list
    duration_s: float | None = None


@dataclass
class Manifest:
    rows: list
    vocabulary: list
    root: str = "."

    def path_of(self, row: ManifestRow) -> str:
        return row.file_path if os.path.isabs(row.file_path) else os.path.join(self.root, row.file_path)

    def by_id(self):
        return {r.clip_id: r for r in self.rows}


def read_manifest(path) -> Manifest:
    rows, seen = [], {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}:1: missing columns {missing}")
        unknown = [c for c in header if c not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
        if unknown:
            raise ManifestError(f"{path}:1: unknown columns {unknown}")
        for lineno, rec in enumerate(reader, start=2):
            cid = (rec["clip_id"] or "").strip()
            if not cid:
                raise ManifestError(f"{path}:{lineno}: empty clip_id")
            if cid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {cid!r} (first at line {seen[cid]})")
            seen[cid] = lineno
            labels = [s.strip() for s in (rec["labels"] or "").split(";")]
            if not labels or any(not s for s in labels):
                raise ManifestError(f"{path}:{lineno}: empty label")
            dur = rec.get("duration_s")
            rows.append(ManifestRow(cid, rec["file_path"].strip(), labels,
                                    float(dur) if dur not in (None, "") else None))
    vocab = sorted({lab for r in rows for lab in r.labels})
    if len(vocab) < 2:
        raise ManifestError(f"{path}: need at least 2 distinct labels, found {vocab}")
    return Manifest(rows, vocab, root=str(Path(path).resolve().parent))


@dataclass
class SplitAssignment:
    assignment: dict
    seed: int

    def clips(self, split):
        return [c for c, s in self.assignment.items() if s == split]

    def counts(self):
        return {s: len(self.clips(s)) for s in (TRAIN, VAL, TEST)}


def make_split(m: Manifest, seed: int = 0) -> SplitAssignment:
    """Seeded clip-level 80/10/10 split; val and test sizes are floored, so
    manifests under ten clips go entirely to train."""
    n = len(m.rows)
    if n == 0:
        raise ValueError("manifest has no clips")
    ids = [r.clip_id for r in m.rows]
    order = np.random.default_rng(seed).permutation(n)
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = TRAIN if rank < n_train else VAL if rank < n_train + n_val else TEST
    return SplitAssignment(out, seed)


# ---------------------------------------------------------------------------
# feature cache


@dataclass
class IndexEntry:
    segment_path: str
    clip_id: str
    split: str
    labels: list

    def to_json(self):
        return json.dumps({"segment_path": self.segment_path, "clip_id": self.clip_id,
                           "split": self.split, "labels": self.labels}, sort_keys=True)


@dataclass
class FeatureIndex:
    entries: list
    vocabulary: list
    root: str
    kind: str = "stack"

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def path_of(self, e: IndexEntry):
        return os.path.join(self.root, e.segment_path)


@dataclass
class MaterializeSummary:
    extracted: int = 0
    cached: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures


def load_segments(path, target_hz=dsp.SAMPLE_RATE, seconds=4.0):
    w = dsp.load_wav(path)
    if w.sample_rate != target_hz:
        w = dsp.resample(w, target_hz)
    return dsp.segment_clip(w, seconds)


def _segment_name(clip_id, i):
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in clip_id)
    return f"{safe}__{i:03d}.pipf"


def _cached_segments(cache_dir, clip_id):
    out, i = [], 0
    while os.path.exists(os.path.join(cache_dir, _segment_name(clip_id, i))):
        out.append(_segment_name(clip_id, i))
        i += 1
    return out


def _materialize_clip(m, row, cache_dir, kind):
    """(segment names, n extracted, n cached); raises on unreadable audio."""
    done = os.path.join(cache_dir, _segment_name(row.clip_id, 0) + ".done")
    if os.path.exists(done):
        return _cached_segments(cache_dir, row.clip_id), 0, 1
    segs = load_segments(m.path_of(row))
    names = []
    for i, seg in enumerate(segs):
        name = _segment_name(row.clip_id, i)
        dsp.write_pipf(os.path.join(cache_dir, name), dsp.extract(seg, kind))
        names.append(name)
    # marker written last so a crashed clip is redone on the next run
    with open(done, "w") as fh:
        fh.write(str(len(names)))
    return names, 1, 0


def materialize_features(m: Manifest, split: SplitAssignment, cache_dir, kind="stack",
                         workers=1) -> tuple[FeatureIndex, MaterializeSummary]:
    """Segment and extract every clip into ``cache_dir``; failures are recorded, not raised.

    Clips whose segments are already cached are not re-extracted.
    """
    os.makedirs(cache_dir, exist_ok=True)
    vocab_pos = {lab: i for i, lab in enumerate(m.vocabulary)}
    summary = MaterializeSummary()

    def job(row):
        try:
            return row, _materialize_clip(m, row, cache_dir, kind), None
        except Exception as exc:  # noqa: BLE001 - recorded per file
            return row, None, f"{m.path_of(row)}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, m.rows))
    else:
        results = [job(r) for r in m.rows]

    entries = []
    for row, res, err in results:
        if err is not None:
            log.warning("feature extraction failed: %s", err)
            summary.failures.append(err)
            continue
        names, n_ext, n_cached = res
        summary.extracted += n_ext * len(names)
        summary.cached += n_cached * len(names)
        labels = [vocab_pos[lab] for lab in row.labels]
        entries += [IndexEntry(name, row.clip_id, split.assignment[row.clip_id], labels)
                    for name in names]

    with open(os.path.join(cache_dir, "index.jsonl"), "w") as fh:
        fh.writelines(e.to_json() + "\n" for e in entries)
    with open(os.path.join(cache_dir, "vocab.json"), "w") as fh:
        json.dump({"vocabulary": m.vocabulary, "kind": kind, "split_seed": split.seed}, fh)
    return FeatureIndex(entries, list(m.vocabulary), str(cache_dir), kind), summary


def read_index(cache_dir) -> FeatureIndex:
    with open(os.path.join(cache_dir, "vocab.json")) as fh:
        meta = json.load(fh)
    entries = []
    with open(os.path.join(cache_dir, "index.jsonl")) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                entries.append(IndexEntry(d["segment_path"], d["clip_id"], d["split"], d["labels"]))
    return FeatureIndex(entries, meta["vocabulary"], str(cache_dir), meta.get("kind", "stack"))


def targets_for(entries, num_classes, multilabel=False):
    if multilabel:
        y = np.zeros((len(entries), num_classes), dtype=np.float32)
        for i, e in enumerate(entries):
            y[i, e.labels] = 1.0
        return y
    return np.array([e.labels[0] for e in entries], dtype=np.int64)


def batches(index: FeatureIndex, split, batch=128, seed=0, epoch=0, multilabel=False,
            shuffle=True):
    """Yield (features[B, frames, dims], targets) for one epoch of ``split``.

    The order depends only on (seed, epoch). The last batch may be short.
    """
    entries = index.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    order = np.arange(len(entries))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(entries))
    n_cls = len(index.vocabulary)
    for i in range(0, len(entries), batch):
        chunk = [entries[j] for j in order[i:i + batch]]
        x = np.stack([dsp.read_pipf(index.path_of(e)) for e in chunk])
        yield x, targets_for(chunk, n_cls, multilabel)


def load_split(index: FeatureIndex, split, multilabel=False):
    """Whole split in memory: (features, targets)."""
    entries = index.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    x = np.stack([dsp.read_pipf(index.path_of(e)) for e in entries])
    return x, targets_for(entries, len(index.vocabulary), multilabel)
