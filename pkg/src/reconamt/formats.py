"""On-disk formats: WAV audio and raw float32 matrices with a JSON sidecar."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioClip, Spectrogram


def read_wav(path) -> AudioClip:
    """Read a WAV file as float samples in [-1, 1]; multichannel input keeps channel 0."""
    sr, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype} in {path}")
    return AudioClip(samples, int(sr))


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    if pcm16:
        data = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    wavfile.write(str(path), int(clip.sample_rate), data)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_matrix(path, values, **meta) -> None:
    """Write ``values`` as little-endian float32 (row-major) plus ``<path>.json``."""
    values = np.ascontiguousarray(values, dtype="<f4")
    path = Path(path)
    path.write_bytes(values.tobytes())
    header = {"shape": list(values.shape), "dtype": "f32"}
    header.update(meta)
    sidecar_path(path).write_text(json.dumps(header, indent=2))


def read_matrix(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    shape = tuple(meta["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {data.size} values, sidecar shape {shape}")
    return data.reshape(shape).copy(), meta


def save_spectrogram(path, spec: Spectrogram) -> None:
    write_matrix(
        path,
        spec.values,
        kind=spec.kind,
        hop_seconds=spec.hop_seconds,
        bin_frequencies=[float(f) for f in spec.bin_frequencies],
    )


def load_spectrogram(path) -> Spectrogram:
    values, meta = read_matrix(path)
    return Spectrogram(values, np.asarray(meta["bin_frequencies"]), meta["hop_seconds"], meta["kind"])


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
