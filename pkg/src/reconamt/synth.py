"""Additive-sine rendering of note lists, for corpora that need no downloads."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import SEGMENT_SAMPLES, ManifestEntry, NoteEvent, sort_notes, write_manifest, write_note_csv
from .dsp import SAMPLE_RATE, AudioClip
from .formats import write_wav

N_HARMONICS = 4
ATTACK = 0.005
RELEASE = 0.010
DECAY_SECONDS = 2.0


def midi_to_hz(pitch) -> float:
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=np.float64) - 69.0) / 12.0)


def render_notes(notes, n_samples: int, sr: int = SAMPLE_RATE, n_harmonics: int = N_HARMONICS) -> AudioClip:
    out = np.zeros(n_samples)
    for n in notes:
        start = int(round(n.onset * sr))
        stop = min(n_samples, int(round(n.offset * sr)))
        if stop <= start:
            continue
        t = np.arange(stop - start) / sr
        env = np.exp(-t / DECAY_SECONDS)
        env *= np.clip(t / ATTACK, 0.0, 1.0)
        env *= np.clip((t[-1] - t) / RELEASE, 0.0, 1.0)
        f0 = float(midi_to_hz(n.pitch))
        tone = np.zeros_like(t)
        for h in range(1, n_harmonics + 1):
            if h * f0 < sr / 2:
                tone += np.sin(2 * np.pi * h * f0 * t) / h
        out[start:stop] += env * tone
    peak = np.abs(out).max(initial=0.0)
    if peak > 0:
        out *= 0.9 / peak
    return AudioClip(out, sr)


def random_notes(
    rng: np.random.Generator,
    duration: float,
    pitch_range=(40, 88),
    max_polyphony: int = 3,
    note_len=(0.2, 1.0),
    gap=(0.0, 0.3),
) -> list[NoteEvent]:
    """Chord-by-chord random notes; no pitch ever overlaps itself."""
    notes = []
    t = float(rng.uniform(*gap))
    while t < duration - note_len[0]:
        k = int(rng.integers(1, max_polyphony + 1))
        pitches = rng.choice(np.arange(pitch_range[0], pitch_range[1] + 1), size=k, replace=False)
        longest = 0.0
        for p in pitches:
            length = float(rng.uniform(*note_len))
            end = min(duration, t + length)
            if end - t > 0.05:
                notes.append(NoteEvent(int(p), round(t, 3), round(end, 3)))
                longest = max(longest, end - t)
        t += longest + float(rng.uniform(*gap))
    return sort_notes(notes)


def write_corpus(out_dir, count: int, seed: int = 0, n_samples: int = SEGMENT_SAMPLES, n_test: int = 0, **note_kw):
    """Render ``count`` random clips (WAV + note CSV) and a manifest.

    The last ``n_test`` clips are marked as the test split. Returns the
    manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        notes = random_notes(rng, n_samples / SAMPLE_RATE, **note_kw)
        clip = render_notes(notes, n_samples)
        wav, csv_path = out_dir / f"clip{i:03d}.wav", out_dir / f"clip{i:03d}.csv"
        write_wav(wav, clip)
        write_note_csv(csv_path, notes)
        split = "test" if i >= count - n_test else "train"
        entries.append(ManifestEntry(f"clip{i:03d}", wav, csv_path, split))
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest
