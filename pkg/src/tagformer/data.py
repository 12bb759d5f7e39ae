"""Track manifests, the artist-level stratified split, chunk sampling and a
synthetic tagging corpus with acoustically defined tags."""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .dsp import (
    CHUNK_SECONDS, N_FFT, SAMPLE_RATE, Waveform, chunk_samples, chunk_waveform, default_filterbank, load_audio,
    log_mel, save_audio,
)
from .errors import DataError, IntegrityError, ParameterError, ParseError, SplitError, UsageError

SPLITS = ("train", "valid", "test")
POOLS = SPLITS + ("unlabeled",)
UNLABELED_MARK = "-"


@dataclass(frozen=True)
class TrackRecord:
    track_id: str
    artist_id: str
    audio_path: str
    tags: tuple | None = None  # sorted tag indices; None means unlabeled

    def __post_init__(self):
        if self.tags is not None:
            tags = tuple(sorted(set(int(t) for t in self.tags)))
            if not tags:
                raise DataError(f"track {self.track_id}: a labeled track needs at least one tag")
            if tags[0] < 0:
                raise DataError(f"track {self.track_id}: negative tag index")
            object.__setattr__(self, "tags", tags)

    @property
    def labeled(self) -> bool:
        return self.tags is not None

    def label_vector(self, n_tags: int) -> np.ndarray:
        y = np.zeros(n_tags, dtype=np.float32)
        if self.tags is not None:
            if self.tags[-1] >= n_tags:
                raise DataError(f"track {self.track_id}: tag {self.tags[-1]} outside vocabulary of {n_tags}")
            y[list(self.tags)] = 1.0
        return y


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    n_tags: int | None = None
    root: Path | None = None  # relative audio paths resolve against this

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.track_id in seen:
                raise IntegrityError(f"duplicate track_id {r.track_id!r}")
            seen.add(r.track_id)
        if self.n_tags is None:
            self.n_tags = max((r.tags[-1] + 1 for r in self.records if r.tags), default=0)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return isinstance(other, Manifest) and self.records == other.records and self.n_tags == other.n_tags

    def counts(self) -> tuple:
        """(labeled, unlabeled)"""
        n = sum(r.labeled for r in self.records)
        return n, len(self.records) - n

    def resolve(self, record: TrackRecord) -> Path:
        p = Path(record.audio_path)
        return p if p.is_absolute() or self.root is None else self.root / p


# -- manifest I/O --------------------------------------------------------


def _format_tags(tags) -> str:
    return UNLABELED_MARK if tags is None else ",".join(str(t) for t in tags)


def _parse_tags(field_: str, lineno: int):
    if field_ == UNLABELED_MARK:
        return None
    try:
        return tuple(int(t) for t in field_.split(","))
    except ValueError:
        raise ParseError(f"line {lineno}: bad tag list {field_!r}") from None


def _read_rows(path, n_fields: int):
    """Yield (lineno, fields) from a tab-separated file; '#' lines are headers."""
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise ParseError(f"{path}: line {lineno}: expected {n_fields} tab-separated fields, got {len(parts)}")
            rows.append((lineno, parts))
    return header, rows


def load_manifest(path) -> Manifest:
    path = Path(path)
    header, rows = _read_rows(path, 4)
    records = []
    for lineno, (tid, aid, audio, tags) in rows:
        if not tid or not aid:
            raise ParseError(f"{path}: line {lineno}: empty track or artist id")
        try:
            records.append(TrackRecord(tid, aid, audio, _parse_tags(tags, lineno)))
        except DataError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
    n_tags = int(header["n_tags"]) if "n_tags" in header else None
    return Manifest(records, n_tags=n_tags, root=path.parent)


def _atomic_write(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _relocated(manifest: Manifest, record: TrackRecord, path) -> str:
    """Audio path as seen from the directory of the file being written."""
    if manifest.root is None or Path(record.audio_path).is_absolute():
        return record.audio_path
    return Path(os.path.relpath(manifest.resolve(record), Path(path).parent)).as_posix()


def save_manifest(manifest: Manifest, path):
    lines = [f"# n_tags={manifest.n_tags}"]
    for r in manifest.records:
        lines.append("\t".join([r.track_id, r.artist_id, _relocated(manifest, r, path), _format_tags(r.tags)]))
    _atomic_write(path, "\n".join(lines) + "\n")


# -- artist-level stratified split --------------------------------------


@dataclass
class SplitAssignment:
    split: dict  # track_id -> one of POOLS
    seed: int
    ratios: tuple

    def tracks(self, pool: str) -> list:
        return [t for t, s in self.split.items() if s == pool]


def _check_ratios(ratios) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise ParameterError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    return ratios


def cals_split(manifest: Manifest, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitAssignment:
    """Greedy artist-level split stratified on per-tag positive counts.

    Artists are visited largest first. Each goes to the partition whose
    remaining per-tag quota (summed over the artist's tag counts, each
    tag normalised by its total) is largest, ties broken by the labeled
    track quota and then at random.
    """
    ratios = np.array(_check_ratios(ratios))
    rng = np.random.default_rng(seed)
    by_artist = defaultdict(list)
    for r in manifest.records:
        by_artist[r.artist_id].append(r)

    labeled_artists = [a for a, rs in by_artist.items() if any(r.labeled for r in rs)]
    if len(labeled_artists) < len(SPLITS):
        raise SplitError(f"need at least {len(SPLITS)} artists with labeled tracks, got {len(labeled_artists)}")

    n_tags = manifest.n_tags
    artist_tags = {}
    artist_labeled = {}
    for a in labeled_artists:
        c = np.zeros(n_tags)
        for r in by_artist[a]:
            if r.labeled:
                c[list(r.tags)] += 1
        artist_tags[a] = c
        artist_labeled[a] = sum(r.labeled for r in by_artist[a])
    tag_totals = np.maximum(sum(artist_tags.values()), 1)
    total_labeled = sum(artist_labeled.values())

    # random tiebreak keys fix the visiting order of equal-sized artists too
    tiebreak = dict(zip(sorted(labeled_artists), rng.random(len(labeled_artists))))
    order = sorted(labeled_artists, key=lambda a: (-artist_labeled[a], tiebreak[a], a))

    tag_counts = np.zeros((len(SPLITS), n_tags))
    labeled_counts = np.zeros(len(SPLITS))
    artist_split = {}
    for a in order:
        c = artist_tags[a]
        tag_deficit = ((ratios[:, None] * tag_totals - tag_counts) / tag_totals) @ c / max(c.sum(), 1)
        track_deficit = (ratios * total_labeled - labeled_counts) / total_labeled
        noise = rng.random(len(SPLITS))
        p = max(range(len(SPLITS)), key=lambda i: (round(tag_deficit[i], 12), round(track_deficit[i], 12), noise[i]))
        artist_split[a] = SPLITS[p]
        tag_counts[p] += c
        labeled_counts[p] += artist_labeled[a]

    split = {}
    for r in manifest.records:
        part = artist_split.get(r.artist_id)
        if part is None or (part == "train" and not r.labeled):
            split[r.track_id] = "unlabeled"
        else:
            # unlabeled tracks of held-out artists stay with their artist and are never trained on
            split[r.track_id] = part
    return SplitAssignment(split, seed, tuple(ratios.tolist()))


def artist_overlap(manifest: Manifest, assignment: SplitAssignment) -> int:
    """Number of artists appearing in more than one of train/valid/test/unlabeled-pool."""
    seen = defaultdict(set)
    for r in manifest.records:
        part = assignment.split[r.track_id]
        if part == "unlabeled":
            continue
        seen[r.artist_id].add(part)
    pool_artists = {r.artist_id for r in manifest.records if assignment.split[r.track_id] == "unlabeled"}
    overlap = sum(len(s) > 1 for s in seen.values())
    overlap += sum(1 for a in pool_artists if seen.get(a, set()) - {"train"})
    return overlap


def save_split(manifest: Manifest, assignment: SplitAssignment, path):
    lines = [
        f"# n_tags={manifest.n_tags}",
        f"# seed={assignment.seed}",
        "# ratios=" + ",".join(repr(r) for r in assignment.ratios),
    ]
    for r in manifest.records:
        fields = [r.track_id, r.artist_id, _relocated(manifest, r, path), _format_tags(r.tags), assignment.split[r.track_id]]
        lines.append("\t".join(fields))
    _atomic_write(path, "\n".join(lines) + "\n")


def load_split(path) -> tuple:
    """Returns (manifest, assignment)."""
    path = Path(path)
    header, rows = _read_rows(path, 5)
    records, split = [], {}
    for lineno, (tid, aid, audio, tags, part) in rows:
        if part not in POOLS:
            raise ParseError(f"{path}: line {lineno}: unknown split {part!r}")
        records.append(TrackRecord(tid, aid, audio, _parse_tags(tags, lineno)))
        split[tid] = part
    n_tags = int(header["n_tags"]) if "n_tags" in header else None
    ratios = tuple(float(x) for x in header.get("ratios", "0.7,0.1,0.2").split(","))
    return Manifest(records, n_tags=n_tags, root=path.parent), SplitAssignment(split, int(header.get("seed", 0)), ratios)


# -- audio access and sampling -------------------------------------------


class TrackStore:
    """Manifest plus split, with decoded audio cached in memory."""

    def __init__(self, manifest: Manifest, assignment: SplitAssignment | None = None, sr: int = SAMPLE_RATE):
        self.manifest = manifest
        self.assignment = assignment
        self.sr = sr
        self._audio = {}
        self._features = {}
        self._by_id = {r.track_id: r for r in manifest.records}

    @classmethod
    def from_split_file(cls, path, sr: int = SAMPLE_RATE):
        return cls(*load_split(path), sr=sr)

    @property
    def n_tags(self) -> int:
        return self.manifest.n_tags

    def record(self, track_id: str) -> TrackRecord:
        return self._by_id[track_id]

    def audio(self, track_id: str) -> np.ndarray:
        if track_id not in self._audio:
            path = self.manifest.resolve(self._by_id[track_id])
            self._audio[track_id] = load_audio(path, self.sr).samples.astype(np.float32)
        return self._audio[track_id]

    def pool(self, split: str, kind: str = "labeled") -> list:
        """Track ids usable as ``kind`` examples from ``split``."""
        if split not in POOLS:
            raise UsageError(f"unknown split {split!r}")
        if kind == "labeled" and split == "unlabeled":
            raise UsageError("cannot draw labeled examples from the unlabeled pool")
        if kind not in ("labeled", "unlabeled"):
            raise UsageError(f"kind must be 'labeled' or 'unlabeled', got {kind!r}")
        ids = self.assignment.tracks(split) if self.assignment else [r.track_id for r in self.manifest.records]
        if split != "unlabeled":
            ids = [t for t in ids if self._by_id[t].labeled]
        if not ids:
            raise DataError(f"split {split!r} has no {kind} tracks")
        return ids

    def labels(self, track_ids) -> np.ndarray:
        return np.stack([self._by_id[t].label_vector(self.n_tags) for t in track_ids])

    def track_chunks(self, track_id: str, chunk_seconds: float = CHUNK_SECONDS) -> list:
        """Non-overlapping chunks; a track shorter than one chunk is used whole."""
        w = Waveform(self.audio(track_id), self.sr)
        if len(w) < chunk_samples(chunk_seconds, self.sr):
            return [w]
        return chunk_waveform(w, chunk_seconds)

    def features(self, track_id: str, chunk_seconds: float = CHUNK_SECONDS) -> np.ndarray:
        """Clean log-mel chunks [n_chunks, 1, n_mels, T], cached."""
        key = (track_id, chunk_seconds)
        if key not in self._features:
            chunks = [c.samples for c in self.track_chunks(track_id, chunk_seconds)]
            self._features[key] = logmel_batch(np.stack(chunks), self.sr)
        return self._features[key]


def logmel_batch(chunks: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    """[B, n_samples] waveforms -> [B, 1, n_mels, T] float32 log-mel input."""
    if chunks.shape[-1] < N_FFT:
        raise ParameterError(f"chunks of {chunks.shape[-1]} samples are shorter than one STFT window ({N_FFT})")
    fb = default_filterbank(sr)
    out = [log_mel(Waveform(np.asarray(c, np.float64), sr), fb).values for c in chunks]
    return np.stack(out)[:, None].astype(np.float32)


def random_crop(samples: np.ndarray, n: int, rng: np.random.Generator) -> tuple:
    """Uniform crop of ``n`` samples; short tracks are zero-padded at the end.

    Returns (chunk, offset).
    """
    if len(samples) <= n:
        out = np.zeros(n, dtype=samples.dtype)
        out[: len(samples)] = samples
        return out, 0
    offset = int(rng.integers(0, len(samples) - n + 1))
    return samples[offset : offset + n], offset


def sample_batch(store: TrackStore, split: str, kind: str, batch: int,
                 chunk_seconds: float = CHUNK_SECONDS, rng: np.random.Generator | None = None) -> tuple:
    """Random tracks (with replacement) and random crops.

    Returns (chunks [B, n], labels [B, n_tags] or None, track_ids).
    """
    if batch < 1:
        raise ParameterError("batch must be >= 1")
    rng = rng or np.random.default_rng()
    ids = store.pool(split, kind)
    n = chunk_samples(chunk_seconds, store.sr)
    picks = [ids[i] for i in rng.integers(0, len(ids), size=batch)]
    chunks = np.stack([random_crop(store.audio(t), n, rng)[0] for t in picks])
    labels = store.labels(picks) if kind == "labeled" else None
    return chunks, labels, picks


# -- synthetic corpus ----------------------------------------------------

MAX_SYNTH_TAGS = 4
TAG_BANDS = {
    0: (200.0, 400.0),    # steady sine
    1: (1000.0, 2000.0),  # steady sine
    2: (3000.0, 6000.0),  # band-limited noise bursts
    3: (600.0, 900.0),    # amplitude-modulated carrier
}


@dataclass(frozen=True)
class ArtistStyle:
    detune: float  # frequency multiplier
    gain: float
    drone_hz: float
    tag_probs: tuple


def _artist_style(seed: int, artist: int, n_tags: int) -> ArtistStyle:
    rng = np.random.default_rng([seed, artist, 0])
    return ArtistStyle(
        detune=float(2 ** (rng.uniform(-0.5, 0.5) / 12)),
        gain=float(10 ** (rng.uniform(-6.0, 0.0) / 20)),
        drone_hz=float(rng.uniform(90.0, 170.0)),
        tag_probs=tuple(rng.uniform(0.15, 0.65, n_tags).tolist()),
    )


def _draw_tags(style: ArtistStyle, rng) -> tuple:
    probs = np.array(style.tag_probs)
    on = np.flatnonzero(rng.random(len(probs)) < probs)
    if on.size == 0:
        on = np.array([rng.choice(len(probs), p=probs / probs.sum())])
    return tuple(int(t) for t in on)


def render_track(tags, style: ArtistStyle, seconds: float, sr: int, rng) -> np.ndarray:
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    x = 0.01 * rng.standard_normal(n)
    x += 0.05 * np.sin(2 * np.pi * style.drone_hz * t + rng.uniform(0, 2 * np.pi))
    for k in tags:
        lo, hi = TAG_BANDS[k]
        f = rng.uniform(lo, hi) * style.detune
        phase = rng.uniform(0, 2 * np.pi)
        if k in (0, 1):
            x += (0.3 if k == 0 else 0.2) * np.sin(2 * np.pi * f * t + phase)
        elif k == 2:
            sos = butter(4, [lo * style.detune, hi * style.detune], btype="bandpass", fs=sr, output="sos")
            band = sosfilt(sos, rng.standard_normal(n))
            band *= 0.25 / (np.sqrt(np.mean(band**2)) + 1e-12)
            rate = rng.uniform(2.0, 4.0)
            gate = ((t * rate + rng.uniform()) % 1.0) < 0.4
            x += band * gate
        else:
            am_rate = rng.uniform(2.0, 4.0)
            env = 0.5 * (1 + np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi)))
            x += 0.3 * env * np.sin(2 * np.pi * f * t + phase)
    x *= style.gain
    peak = np.abs(x).max()
    if peak > 0.99:
        x *= 0.99 / peak
    return x


def synth_dataset(n_artists: int, tracks_per_artist: int, out_dir, n_tags: int = 4,
                  clip_seconds: float = 5.0, sr: int = SAMPLE_RATE, seed: int = 0,
                  unlabeled_fraction: float = 0.0, unlabeled_artists: int = 0) -> Manifest:
    """Write WAVs plus ``manifest.tsv`` under ``out_dir``.

    Tracks of the extra ``unlabeled_artists`` are all written without
    tags; ``unlabeled_fraction`` drops tags from that share of the
    remaining tracks.
    """
    if not 1 <= n_tags <= MAX_SYNTH_TAGS:
        raise ParameterError(f"synthetic corpus supports 1..{MAX_SYNTH_TAGS} tags, got {n_tags}")
    if n_artists < 0 or tracks_per_artist < 1 or unlabeled_artists < 0:
        raise ParameterError("artist and track counts must be non-negative (tracks_per_artist >= 1)")
    if not 0.0 <= unlabeled_fraction <= 1.0:
        raise ParameterError("unlabeled_fraction must lie in [0, 1]")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for a in range(n_artists + unlabeled_artists):
        style = _artist_style(seed, a, n_tags)
        for i in range(tracks_per_artist):
            rng = np.random.default_rng([seed, a, i + 1])
            tags = _draw_tags(style, rng)
            keep_label = a < n_artists and rng.random() >= unlabeled_fraction
            x = render_track(tags, style, clip_seconds, sr, rng)
            tid = f"a{a:04d}_t{i:03d}"
            rel = f"audio/{tid}.wav"
            save_audio(out_dir / rel, Waveform(x, sr))
            records.append(TrackRecord(tid, f"artist{a:04d}", rel, tags if keep_label else None))
    manifest = Manifest(records, n_tags=n_tags, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def split_summary(manifest: Manifest, assignment: SplitAssignment) -> dict:
    """Labeled-track and per-tag positive fractions for each partition."""
    tracks = Counter()
    tags = np.zeros((len(SPLITS), manifest.n_tags))
    for r in manifest.records:
        part = assignment.split[r.track_id]
        if r.labeled and part in SPLITS:
            p = SPLITS.index(part)
            tracks[part] += 1
            tags[p, list(r.tags)] += 1
    n = max(sum(tracks.values()), 1)
    totals = np.maximum(tags.sum(axis=0), 1)
    return {
        "track_fraction": {s: tracks[s] / n for s in SPLITS},
        "tag_fraction": {s: (tags[i] / totals).tolist() for i, s in enumerate(SPLITS)},
        "pool_sizes": dict(Counter(assignment.split.values())),
    }
