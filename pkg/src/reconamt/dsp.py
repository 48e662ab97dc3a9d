"""Spectrogram frontends: STFT magnitude, Mel spectrogram and constant-Q transform.

All transforms frame the signal the same way: frame ``t`` is centred on sample
``t * hop`` (reflect padding at both edges), so a clip of ``N`` samples always
gives ``N // hop`` frames. Conditioned outputs are log-compressed and min-max
normalised to [0, 1] over the whole excerpt.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

SAMPLE_RATE = 16000
HOP = 512
WINDOW_LEN = 2048
N_MELS = 229
MEL_FMIN = 30.0
MEL_FMAX = 8000.0
CQT_FMIN = 27.5
CQT_BINS = 176
CQT_BINS_PER_OCTAVE = 24
LOG_EPS = 1e-8

SPEC_KINDS = ("mel", "cqt", "stft-magnitude")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """An F x T time-frequency matrix plus the metadata needed to interpret it."""

    values: np.ndarray
    bin_frequencies: np.ndarray
    hop_seconds: float
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.bin_frequencies = np.asarray(self.bin_frequencies, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {self.values.shape}")
        if self.bin_frequencies.shape != (self.values.shape[0],):
            raise ValueError("bin_frequencies must have one entry per row")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class FilterBank:
    weights: np.ndarray  # (F, K)
    center_frequencies: np.ndarray
    supports: list = field(default_factory=list)  # per row (first, stop) bin range

    @property
    def shape(self):
        return self.weights.shape


def _samples(clip) -> np.ndarray:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty audio")
    return x


def _frames(x: np.ndarray, frame_len: int, hop: int, n_frames: int, half: int) -> np.ndarray:
    """Strided view of ``n_frames`` windows of ``frame_len`` samples.

    Window ``t`` starts ``half`` samples before ``t * hop`` in the unpadded
    signal. ``x`` must already carry reflect padding of at least ``half``.
    """
    return sliding_window_view(x, frame_len)[::hop][:n_frames]


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if x.size == 1:
        return np.pad(x, pad, mode="edge")
    return np.pad(x, pad, mode="reflect")


def stft_magnitude(clip, window_len: int = WINDOW_LEN, hop: int = HOP) -> Spectrogram:
    x = _samples(clip)
    sr = clip.sample_rate if isinstance(clip, AudioClip) else SAMPLE_RATE
    n_frames = x.size // hop
    half = window_len // 2
    padded = _reflect_pad(x, half)
    frames = _frames(padded, window_len, hop, n_frames, half)
    window = get_window("hann", window_len)
    mag = np.abs(np.fft.rfft(frames * window, axis=1)).T
    mag = mag.reshape(window_len // 2 + 1, n_frames)
    freqs = np.arange(window_len // 2 + 1) * sr / window_len
    return Spectrogram(mag, freqs, hop / sr, "stft-magnitude")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels, fmin, fmax, window_len, sr):
    if fmax > sr / 2:
        raise ValueError(f"fmax {fmax} Hz is above Nyquist ({sr / 2} Hz)")
    if not 0 <= fmin < fmax:
        raise ValueError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    edges[0], edges[-1] = fmin, fmax  # the mel round trip can overshoot by an ulp
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    freqs = np.arange(window_len // 2 + 1) * sr / window_len
    rising = (freqs - lo) / (center - lo)
    falling = (hi - freqs) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    supports = []
    for i, row in enumerate(weights):
        nz = np.flatnonzero(row)
        if nz.size == 0:
            raise ValueError(
                f"mel filter {i} ({edges[i]:.1f}-{edges[i + 2]:.1f} Hz) covers no FFT bin; "
                "use fewer filters or a longer window"
            )
        supports.append((int(nz[0]), int(nz[-1]) + 1))
    weights.setflags(write=False)
    return FilterBank(weights, edges[1:-1].copy(), supports)


def mel_filterbank(
    n_mels: int = N_MELS,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
    window_len: int = WINDOW_LEN,
    sr: int = SAMPLE_RATE,
) -> FilterBank:
    """Triangular HTK-mel filters over the ``window_len // 2 + 1`` FFT bins.

    Filter ``i`` rises from edge ``i`` to a peak of 1 at edge ``i + 1`` and
    falls back to zero at edge ``i + 2``; the ``n_mels + 2`` edges are equally
    spaced in mel between ``fmin`` and ``fmax``. No area normalisation.
    """
    return _mel_filterbank(int(n_mels), float(fmin), float(fmax), int(window_len), int(sr))


def log_normalize(spec: Spectrogram) -> Spectrogram:
    values = np.asarray(spec.values, dtype=np.float64)
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("invalid magnitude: values must be finite and non-negative")
    logs = np.log(values + LOG_EPS)
    if logs.size == 0:
        out = logs
    else:
        lo, hi = logs.min(), logs.max()
        out = np.zeros_like(logs) if hi == lo else (logs - lo) / (hi - lo)
    return Spectrogram(out, spec.bin_frequencies, spec.hop_seconds, spec.kind)


def mel_spectrogram(clip: AudioClip, condition: bool = True) -> Spectrogram:
    stft = stft_magnitude(clip, WINDOW_LEN, HOP)
    sr = clip.sample_rate if isinstance(clip, AudioClip) else SAMPLE_RATE
    bank = mel_filterbank(N_MELS, MEL_FMIN, MEL_FMAX, WINDOW_LEN, sr)
    raw = Spectrogram(bank.weights @ stft.values**2, bank.center_frequencies, stft.hop_seconds, "mel")
    return log_normalize(raw) if condition else raw


def cqt_frequencies(fmin=CQT_FMIN, n_bins=CQT_BINS, bins_per_octave=CQT_BINS_PER_OCTAVE):
    return fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def cqt(
    clip: AudioClip,
    fmin: float = CQT_FMIN,
    n_bins: int = CQT_BINS,
    bins_per_octave: int = CQT_BINS_PER_OCTAVE,
    hop: int = HOP,
    condition: bool = True,
) -> Spectrogram:
    """Constant-Q magnitudes by direct inner products with Hann-windowed atoms.

    Bin ``k`` has centre ``fmin * 2**(k / bins_per_octave)`` and a window of
    ``ceil(Q * sr / f_k)`` samples with ``Q = 1 / (2**(1/bins_per_octave) - 1)``.
    Atoms are L1-normalised, so a unit-amplitude sinusoid at ``f_k`` gives a
    magnitude of about 0.5 in bin ``k``.
    """
    x = _samples(clip)
    sr = clip.sample_rate if isinstance(clip, AudioClip) else SAMPLE_RATE
    freqs = cqt_frequencies(fmin, n_bins, bins_per_octave)
    if freqs[-1] >= sr / 2:
        raise ValueError(f"top CQT bin {freqs[-1]:.1f} Hz is at or above Nyquist ({sr / 2} Hz)")
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    lengths = [int(math.ceil(q * sr / f)) for f in freqs]
    n_frames = x.size // hop
    pad = max(lengths) // 2 + 1
    padded = _reflect_pad(x, pad)

    out = np.empty((n_bins, n_frames))
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        window = get_window("hann", n)
        phase = 2.0 * np.pi * f * (np.arange(n) - n // 2) / sr
        scale = window / window.sum()
        # frame t covers padded[t*hop + pad - n//2 : ... + n]
        frames = _frames(padded[pad - n // 2 :], n, hop, n_frames, n // 2)
        re = frames @ (scale * np.cos(phase))
        im = frames @ (scale * np.sin(phase))
        out[k] = np.hypot(re, im)
    raw = Spectrogram(out, freqs, hop / sr, "cqt")
    return log_normalize(raw) if condition else raw


def compute_frontend(clip: AudioClip, frontend: str) -> Spectrogram:
    if frontend == "mel":
        return mel_spectrogram(clip)
    if frontend == "cqt":
        return cqt(clip)
    raise ValueError(f"unknown frontend {frontend!r}; expected 'mel' or 'cqt'")


def frontend_bins(frontend: str) -> int:
    return {"mel": N_MELS, "cqt": CQT_BINS}[frontend]
