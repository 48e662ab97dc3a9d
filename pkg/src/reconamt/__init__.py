"""Polyphonic music transcription trained with a spectrogram-reconstruction loss."""

__version__ = "0.1.0"
