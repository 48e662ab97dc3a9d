"""Recordings, note annotations, piano rolls and training segments."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import mido
import numpy as np

from .dsp import HOP, SAMPLE_RATE, AudioClip
from .formats import read_wav

log = logging.getLogger(__name__)

MIN_PITCH = 21
MAX_PITCH = 108
N_PITCHES = MAX_PITCH - MIN_PITCH + 1
FPS = SAMPLE_RATE / HOP  # 31.25 frames per second
SEGMENT_SAMPLES = 327_680
SEGMENT_FRAMES = SEGMENT_SAMPLES // HOP  # 640
CSV_HEADER = ("onset", "offset", "pitch")

RESAMPLE_ZERO_CROSSINGS = 16
RESAMPLE_KAISER_BETA = 8.6


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float

    def __post_init__(self):
        if not MIN_PITCH <= self.pitch <= MAX_PITCH:
            raise ValueError(f"pitch {self.pitch} outside {MIN_PITCH}..{MAX_PITCH}")
        if not self.onset < self.offset:
            raise ValueError(f"onset {self.onset} must precede offset {self.offset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def sort_notes(notes):
    return sorted(notes, key=lambda n: (n.onset, n.pitch, n.offset))


@dataclass
class PianoRoll:
    values: np.ndarray  # (88, T) of 0/1
    fps: float = FPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2 or self.values.shape[0] != N_PITCHES:
            raise ValueError(f"piano roll must be {N_PITCHES} x T, got {self.values.shape}")
        if self.values.max(initial=0) > 1:
            raise ValueError("piano roll entries must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class Recording:
    id: str
    audio: AudioClip
    notes: list

    def __post_init__(self):
        limit = self.audio.duration + 1.0 / FPS
        kept, changed = [], 0
        for n in self.notes:
            if n.offset <= limit:
                kept.append(n)
                continue
            changed += 1
            if n.onset < limit:
                kept.append(NoteEvent(n.pitch, n.onset, limit))
        if changed:
            log.warning("%s: %d note(s) truncated to the audio length", self.id, changed)
        self.notes = sort_notes(kept)


@dataclass
class Segment:
    audio: AudioClip
    roll: PianoRoll
    source_id: str
    start_sample: int


# --------------------------------------------------------------------------- audio


def _kaiser(u: np.ndarray, beta: float) -> np.ndarray:
    inside = np.abs(u) <= 1.0
    out = np.zeros_like(u)
    out[inside] = np.i0(beta * np.sqrt(1.0 - u[inside] ** 2)) / np.i0(beta)
    return out


def resample(clip: AudioClip, target_sr: int = SAMPLE_RATE) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc kernel.

    The kernel spans 16 zero crossings on each side of the output instant and
    its cutoff is the lower of the two Nyquist frequencies.
    """
    source_sr = clip.sample_rate
    if source_sr <= 0 or target_sr <= 0:
        raise ValueError(f"sample rates must be positive, got {source_sr} -> {target_sr}")
    x = clip.samples
    if source_sr == target_sr:
        return AudioClip(x.copy(), target_sr)

    ratio = target_sr / source_sr
    n_out = int(round(x.size * ratio))
    cutoff = min(1.0, ratio)
    half_width = RESAMPLE_ZERO_CROSSINGS / cutoff
    taps = 2 * int(math.ceil(half_width)) + 2
    out = np.empty(n_out)
    chunk = max(1, 2**21 // taps)
    for lo in range(0, n_out, chunk):
        m = np.arange(lo, min(n_out, lo + chunk))
        pos = m * (source_sr / target_sr)
        first = np.floor(pos - half_width).astype(np.int64)
        k = first[:, None] + np.arange(taps)[None, :]
        d = pos[:, None] - k
        h = cutoff * np.sinc(cutoff * d) * _kaiser(d / half_width, RESAMPLE_KAISER_BETA)
        valid = (k >= 0) & (k < x.size)
        out[m] = np.sum(np.where(valid, h * x[np.clip(k, 0, max(x.size - 1, 0))], 0.0), axis=1)
    return AudioClip(out, target_sr)


# --------------------------------------------------------------------------- notes


def parse_note_csv(path) -> list[NoteEvent]:
    """Read a ``onset,offset,pitch`` CSV (seconds, seconds, MIDI number).

    Extra columns are ignored. Rows with out-of-range pitches or a
    non-positive duration are dropped and counted in a warning; rows that do
    not parse raise ``ValueError`` naming the line.
    """
    notes, out_of_range, bad_interval = [], 0, 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: header must contain {','.join(CSV_HEADER)} (missing {missing})")
        for row in reader:
            line = reader.line_num
            try:
                onset = float(row["onset"])
                offset = float(row["offset"])
                pitch = int(row["pitch"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: malformed row {row!r}") from exc
            if not (math.isfinite(onset) and math.isfinite(offset)):
                raise ValueError(f"{path}:{line}: non-finite time")
            if not MIN_PITCH <= pitch <= MAX_PITCH:
                out_of_range += 1
                continue
            if onset >= offset:
                bad_interval += 1
                continue
            notes.append(NoteEvent(pitch, onset, offset))
    if out_of_range:
        log.warning("%s: dropped %d note(s) outside MIDI %d..%d", path, out_of_range, MIN_PITCH, MAX_PITCH)
    if bad_interval:
        log.warning("%s: rejected %d row(s) with onset >= offset", path, bad_interval)
    return sort_notes(notes)


def write_note_csv(path, notes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for n in sort_notes(notes):
            fh.write(f"{n.onset!r},{n.offset!r},{n.pitch}\n")


def parse_midi(path) -> list[NoteEvent]:
    """Extract notes from a Standard MIDI File (format 0 or 1).

    Note-on/off events are paired per (channel, pitch) with the tempo map
    applied; a velocity-0 note-on closes the note, a re-strike of a sounding
    pitch closes the earlier note at the re-strike time, and notes still open
    at the end of the file are closed there. Sustain pedal is ignored.
    """
    try:
        midi = mido.MidiFile(str(path))
        messages = list(midi)
    except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
        raise ValueError(f"{path}: corrupt MIDI file ({exc})") from exc

    now = 0.0
    sounding: dict[tuple[int, int], float] = {}
    notes, dropped = [], 0

    def close(key, end):
        nonlocal dropped
        onset = sounding.pop(key)
        if end <= onset:
            return
        if MIN_PITCH <= key[1] <= MAX_PITCH:
            notes.append(NoteEvent(key[1], onset, end))
        else:
            dropped += 1

    for msg in messages:
        now += msg.time
        if msg.type not in ("note_on", "note_off"):
            continue
        key = (msg.channel, msg.note)
        if msg.type == "note_on" and msg.velocity > 0:
            if key in sounding:
                close(key, now)
            sounding[key] = now
        elif key in sounding:
            close(key, now)

    if sounding:
        log.warning("%s: %d unterminated note(s) closed at end of track", path, len(sounding))
        for key in list(sounding):
            close(key, now)
    if dropped:
        log.warning("%s: dropped %d note(s) outside MIDI %d..%d", path, dropped, MIN_PITCH, MAX_PITCH)
    return sort_notes(notes)


def load_notes(path) -> list[NoteEvent]:
    suffix = Path(path).suffix.lower()
    if suffix in (".mid", ".midi"):
        return parse_midi(path)
    return parse_note_csv(path)


# --------------------------------------------------------------------------- rolls


def notes_to_pianoroll(notes, n_frames: int, fps: float = FPS) -> PianoRoll:
    """Frame ``t`` of pitch ``p`` is on iff some note satisfies ``onset <= t/fps < offset``."""
    if n_frames < 0:
        raise ValueError("n_frames must be >= 0")
    roll = np.zeros((N_PITCHES, n_frames), dtype=np.uint8)
    for n in notes:
        lo = max(0, int(math.floor(n.onset * fps)) - 1)
        hi = min(n_frames, int(math.ceil(n.offset * fps)) + 1)
        if lo >= hi:
            continue
        t = np.arange(lo, hi)
        centres = t / fps
        on = t[(n.onset <= centres) & (centres < n.offset)]
        roll[n.pitch - MIN_PITCH, on] = 1
    return PianoRoll(roll, fps)


# --------------------------------------------------------------------------- segments


def extract_segment(rec: Recording, start: int, length: int = SEGMENT_SAMPLES) -> Segment:
    samples = rec.audio.samples[start : start + length]
    if samples.size < length:
        samples = np.concatenate([samples, np.zeros(length - samples.size)])
    shift = start / rec.audio.sample_rate
    local = []
    for n in rec.notes:
        onset, offset = n.onset - shift, n.offset - shift
        if offset > 0 and onset < length / rec.audio.sample_rate:
            local.append(NoteEvent(n.pitch, max(onset, 0.0), offset))
    roll = notes_to_pianoroll(local, length // HOP, rec.audio.sample_rate / HOP)
    return Segment(AudioClip(samples, rec.audio.sample_rate), roll, rec.id, start)


def sample_segment(rec: Recording, rng_seed, length: int = SEGMENT_SAMPLES) -> Segment:
    """Draw a segment with a start sample uniform over ``[0, N - length]``.

    ``rng_seed`` is anything ``numpy.random.default_rng`` accepts, e.g. the
    tuple ``(seed, epoch, recording_index)``. Recordings shorter than
    ``length`` start at 0 and are zero-padded at the end.
    """
    if rec.audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"{rec.id}: expected {SAMPLE_RATE} Hz audio, got {rec.audio.sample_rate}")
    rng = np.random.default_rng(rng_seed)
    span = len(rec.audio) - length
    start = int(rng.integers(0, span + 1)) if span > 0 else 0
    return extract_segment(rec, start, length)


# --------------------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    wav_path: Path
    notes_path: Path
    split: str


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    raw = json.loads(path.read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON list")
    entries = []
    for i, item in enumerate(raw):
        try:
            split = item["split"]
            if split not in ("train", "test"):
                raise ValueError(f"split must be 'train' or 'test', got {split!r}")
            entries.append(
                ManifestEntry(
                    str(item["id"]),
                    (path.parent / item["wav_path"]).resolve(),
                    (path.parent / item["notes_path"]).resolve(),
                    split,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: entry {i} invalid: {exc}") from exc
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    rows = []
    for e in entries:
        rows.append(
            {
                "id": e.id,
                "wav_path": _relative(e.wav_path, path.parent),
                "notes_path": _relative(e.notes_path, path.parent),
                "split": e.split,
            }
        )
    path.write_text(json.dumps(rows, indent=2))


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def load_recording(entry: ManifestEntry) -> Recording:
    clip = resample(read_wav(entry.wav_path), SAMPLE_RATE)
    return Recording(entry.id, clip, load_notes(entry.notes_path))


def load_split(manifest_path, split: str) -> list[Recording]:
    return [load_recording(e) for e in load_manifest(manifest_path) if e.split == split]
